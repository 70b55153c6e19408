//! The stages of one learner: embedding lookup, k-gram convolution,
//! bidirectional GRU, additive attention pooling and the softmax head.
//!
//! Parameter structs are generic over their leaf type so the same layout
//! serves both stored weights (`Tensor`) and weights bound to a tape (`Var`).
//!
//! GRU step, per direction, from a zero initial state:
//!
//! ```text
//! z  = σ(x·W_z + h·U_z + b_z)
//! r  = σ(x·W_r + h·U_r + b_r)
//! h~ = tanh(x·W_h + (r ⊙ h)·U_h + b_h)
//! h' = (1 - z) ⊙ h + z ⊙ h~
//! ```
//!
//! Attention scores each state `s_j` as `v · tanh(s_j·W_a + b_a)` and pools
//! with the softmax of those scores. Padding positions are not masked.

use alloc::vec::Vec;

use rand::Rng;

use crate::ensemble::LearnerSpec;
use crate::error::{config_err, contract_err, dim_err, Result};
use crate::tape::{Mode, Tape, Var};
use crate::tensor::Tensor;
use crate::text::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ConvActivation {
    #[default]
    Relu,
    None,
}

impl ConvActivation {
    pub fn name(self) -> &'static str {
        match self {
            ConvActivation::Relu => "relu",
            ConvActivation::None => "none",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "relu" => Ok(ConvActivation::Relu),
            "none" => Ok(ConvActivation::None),
            other => Err(config_err!("unknown conv activation {other:?} (relu|none)")),
        }
    }
}

/// Settings shared by the stages of a forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerConfig {
    pub dropout: f64,
    pub conv_activation: ConvActivation,
}

impl Default for LayerConfig {
    fn default() -> Self {
        Self {
            dropout: 0.0,
            conv_activation: ConvActivation::Relu,
        }
    }
}

/// `filters` is `[k×m×f]`, `bias` is `[f]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T = Tensor> {
    pub filters: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruDirection<T = Tensor> {
    pub w_z: T,
    pub w_r: T,
    pub w_h: T,
    pub u_z: T,
    pub u_r: T,
    pub u_h: T,
    pub b_z: T,
    pub b_r: T,
    pub b_h: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GruParams<T = Tensor> {
    pub forward: GruDirection<T>,
    pub backward: GruDirection<T>,
}

/// `w` is `[2u×d_a]`, `b` and `v` are `[d_a]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams<T = Tensor> {
    pub w: T,
    pub b: T,
    pub v: T,
}

/// `w` is `[2u×c]`, `b` is `[c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams<T = Tensor> {
    pub w: T,
    pub b: T,
}

/// Every trainable tensor of one learner.
#[derive(Debug, Clone, PartialEq)]
pub struct LearnerParams<T = Tensor> {
    pub conv: ConvParams<T>,
    pub gru: GruParams<T>,
    pub attention: AttentionParams<T>,
    pub head: HeadParams<T>,
}

impl<T> GruDirection<T> {
    fn fields(&self) -> [(&'static str, &T); 9] {
        [
            ("w_z", &self.w_z),
            ("w_r", &self.w_r),
            ("w_h", &self.w_h),
            ("u_z", &self.u_z),
            ("u_r", &self.u_r),
            ("u_h", &self.u_h),
            ("b_z", &self.b_z),
            ("b_r", &self.b_r),
            ("b_h", &self.b_h),
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 9] {
        [
            &mut self.w_z,
            &mut self.w_r,
            &mut self.w_h,
            &mut self.u_z,
            &mut self.u_r,
            &mut self.u_h,
            &mut self.b_z,
            &mut self.b_r,
            &mut self.b_h,
        ]
    }

    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> GruDirection<U> {
        GruDirection {
            w_z: f(&self.w_z),
            w_r: f(&self.w_r),
            w_h: f(&self.w_h),
            u_z: f(&self.u_z),
            u_r: f(&self.u_r),
            u_h: f(&self.u_h),
            b_z: f(&self.b_z),
            b_r: f(&self.b_r),
            b_h: f(&self.b_h),
        }
    }
}

/// Number of tensors in one learner.
pub const TENSORS_PER_LEARNER: usize = 25;

impl<T> LearnerParams<T> {
    /// `(name, tensor)` pairs in the canonical order used for binding,
    /// optimizer state and checkpoints.
    pub fn named(&self) -> Vec<(alloc::string::String, &T)> {
        use alloc::format;
        let mut out = Vec::with_capacity(TENSORS_PER_LEARNER);
        out.push(("conv.filters".into(), &self.conv.filters));
        out.push(("conv.bias".into(), &self.conv.bias));
        for (dir, d) in [("fwd", &self.gru.forward), ("bwd", &self.gru.backward)] {
            for (name, t) in d.fields() {
                out.push((format!("gru.{dir}.{name}"), t));
            }
        }
        out.push(("attention.w".into(), &self.attention.w));
        out.push(("attention.b".into(), &self.attention.b));
        out.push(("attention.v".into(), &self.attention.v));
        out.push(("head.w".into(), &self.head.w));
        out.push(("head.b".into(), &self.head.b));
        out
    }

    /// Mutable references in the same order as [`LearnerParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::with_capacity(TENSORS_PER_LEARNER);
        out.push(&mut self.conv.filters);
        out.push(&mut self.conv.bias);
        out.extend(self.gru.forward.fields_mut());
        out.extend(self.gru.backward.fields_mut());
        out.push(&mut self.attention.w);
        out.push(&mut self.attention.b);
        out.push(&mut self.attention.v);
        out.push(&mut self.head.w);
        out.push(&mut self.head.b);
        out
    }

    /// Applies `f` to every tensor in canonical order.
    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> LearnerParams<U> {
        let conv = ConvParams {
            filters: f(&self.conv.filters),
            bias: f(&self.conv.bias),
        };
        let forward = self.gru.forward.map(&mut f);
        let backward = self.gru.backward.map(&mut f);
        let attention = AttentionParams {
            w: f(&self.attention.w),
            b: f(&self.attention.b),
            v: f(&self.attention.v),
        };
        let head = HeadParams {
            w: f(&self.head.w),
            b: f(&self.head.b),
        };
        LearnerParams {
            conv,
            gru: GruParams { forward, backward },
            attention,
            head,
        }
    }
}

impl LearnerParams<Tensor> {
    /// Glorot-uniform weights and zero biases.
    pub fn glorot(
        spec: &LearnerSpec,
        embed_dim: usize,
        classes: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        spec.validate()?;
        if embed_dim == 0 {
            return Err(config_err!("embedding dimension must be positive"));
        }
        if classes < 2 {
            return Err(config_err!("need at least 2 classes, got {classes}"));
        }
        let (k, m, f, u, da) = (
            spec.kernel_size,
            embed_dim,
            spec.filters,
            spec.units,
            spec.attention_dim,
        );
        let conv = ConvParams {
            filters: glorot(rng, &[k, m, f], k * m, k * f),
            bias: Tensor::zeros(&[f]),
        };
        let forward = glorot_direction(rng, f, u);
        let backward = glorot_direction(rng, f, u);
        let attention = AttentionParams {
            w: glorot(rng, &[2 * u, da], 2 * u, da),
            b: Tensor::zeros(&[da]),
            v: glorot(rng, &[da], da, 1),
        };
        let head = HeadParams {
            w: glorot(rng, &[2 * u, classes], 2 * u, classes),
            b: Tensor::zeros(&[classes]),
        };
        Ok(LearnerParams {
            conv,
            gru: GruParams { forward, backward },
            attention,
            head,
        })
    }

    /// Registers every tensor as a parameter leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> LearnerParams<Var> {
        self.map(|t| tape.param(t.clone()))
    }

    /// Registers every tensor as a constant (inference only).
    pub fn bind_frozen(&self, tape: &mut Tape) -> LearnerParams<Var> {
        self.map(|t| tape.constant(t.clone()))
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }
}

fn glorot_direction(rng: &mut impl Rng, f: usize, u: usize) -> GruDirection {
    GruDirection {
        w_z: glorot(rng, &[f, u], f, u),
        w_r: glorot(rng, &[f, u], f, u),
        w_h: glorot(rng, &[f, u], f, u),
        u_z: glorot(rng, &[u, u], u, u),
        u_r: glorot(rng, &[u, u], u, u),
        u_h: glorot(rng, &[u, u], u, u),
        b_z: Tensor::zeros(&[u]),
        b_r: Tensor::zeros(&[u]),
        b_h: Tensor::zeros(&[u]),
    }
}

fn glorot(rng: &mut impl Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape, data).expect("glorot shape")
}

/// `[n×m]` matrix whose row `j` is the embedding of `ids[j]`.
pub fn embed_lookup(ids: &[usize], table: &EmbeddingTable) -> Result<Tensor> {
    if ids.is_empty() {
        return Err(dim_err!("empty token sequence"));
    }
    let m = table.dim();
    let mut data = Vec::with_capacity(ids.len() * m);
    for &id in ids {
        if id >= table.vocab_size() {
            return Err(contract_err!(
                "token id {id} outside vocabulary of {}",
                table.vocab_size()
            ));
        }
        data.extend_from_slice(table.row(id));
    }
    Tensor::new(&[ids.len(), m], data)
}

/// Valid stride-1 convolution over k-grams, no pooling: `[n×m]` to
/// `[(n-k+1)×f]`, where row `j` scores the k-gram starting at token `j`.
pub fn conv_kgram(
    tape: &mut Tape,
    input: Var,
    p: &ConvParams<Var>,
    activation: ConvActivation,
) -> Result<Var> {
    let (n, m) = tape.value(input).dims2()?;
    let &[k, fm, f] = tape.value(p.filters).shape() else {
        return Err(dim_err!(
            "conv filters must be [k×m×f], got {:?}",
            tape.value(p.filters).shape()
        ));
    };
    if fm != m {
        return Err(dim_err!("conv filters expect m={fm}, input has m={m}"));
    }
    if n < k {
        return Err(dim_err!("sequence length n={n} is shorter than kernel size k={k}"));
    }
    let len = n - k + 1;
    let mut acc: Option<Var> = None;
    for i in 0..k {
        let window = tape.rows(input, i, len)?;
        let slab = tape.window(p.filters, i * m * f, &[m, f])?;
        let part = tape.matmul(window, slab)?;
        acc = Some(match acc {
            None => part,
            Some(sum) => tape.add(sum, part)?,
        });
    }
    let out = tape.add_bias(acc.expect("k >= 1"), p.bias)?;
    match activation {
        ConvActivation::Relu => tape.relu(out),
        ConvActivation::None => Ok(out),
    }
}

fn gru_direction(
    tape: &mut Tape,
    seq: Var,
    d: &GruDirection<Var>,
    reverse: bool,
) -> Result<Var> {
    let (steps, _) = tape.value(seq).dims2()?;
    let (units, units2) = tape.value(d.u_z).dims2()?;
    if units != units2 {
        return Err(dim_err!("recurrent weights must be square, got [{units}×{units2}]"));
    }
    let project = |tape: &mut Tape, w: Var, b: Var| -> Result<Var> {
        let xw = tape.matmul(seq, w)?;
        tape.add_bias(xw, b)
    };
    let xz = project(tape, d.w_z, d.b_z)?;
    let xr = project(tape, d.w_r, d.b_r)?;
    let xh = project(tape, d.w_h, d.b_h)?;

    let mut h = tape.constant(Tensor::zeros(&[1, units]));
    let mut outputs = alloc::vec![h; steps];
    for step in 0..steps {
        let t = if reverse { steps - 1 - step } else { step };
        let xz_t = tape.rows(xz, t, 1)?;
        let xr_t = tape.rows(xr, t, 1)?;
        let xh_t = tape.rows(xh, t, 1)?;

        let hz = tape.matmul(h, d.u_z)?;
        let z = tape.add(xz_t, hz)?;
        let z = tape.sigmoid(z)?;
        let hr = tape.matmul(h, d.u_r)?;
        let r = tape.add(xr_t, hr)?;
        let r = tape.sigmoid(r)?;
        let rh = tape.mul(r, h)?;
        let rhu = tape.matmul(rh, d.u_h)?;
        let cand = tape.add(xh_t, rhu)?;
        let cand = tape.tanh(cand)?;
        // (1 - z)⊙h + z⊙h~ written as h + z⊙(h~ - h)
        let delta = tape.sub(cand, h)?;
        let delta = tape.mul(z, delta)?;
        h = tape.add(h, delta)?;
        outputs[t] = h;
    }
    tape.concat_rows(&outputs)
}

/// Bidirectional GRU: `[T×f]` to `[T×2u]`, row `t` = `[forward h_t ; backward h_t]`.
pub fn bigru_forward(tape: &mut Tape, seq: Var, p: &GruParams<Var>) -> Result<Var> {
    let (steps, _) = tape.value(seq).dims2()?;
    if steps == 0 {
        return Err(dim_err!("empty sequence"));
    }
    let fwd = gru_direction(tape, seq, &p.forward, false)?;
    let bwd = gru_direction(tape, seq, &p.backward, true)?;
    tape.concat_cols(fwd, bwd)
}

/// Softmax-weighted sum of the states; returns `(alpha [2u], weights [T])`.
pub fn attention_pool(tape: &mut Tape, states: Var, p: &AttentionParams<Var>) -> Result<(Var, Var)> {
    let (steps, width) = tape.value(states).dims2()?;
    let da = tape.value(p.v).numel();
    let proj = tape.matmul(states, p.w)?;
    let proj = tape.add_bias(proj, p.b)?;
    let proj = tape.tanh(proj)?;
    let v = tape.reshape(p.v, &[da, 1])?;
    let scores = tape.matmul(proj, v)?;
    let scores = tape.reshape(scores, &[steps])?;
    let weights = tape.softmax(scores)?;
    let row = tape.reshape(weights, &[1, steps])?;
    let alpha = tape.matmul(row, states)?;
    let alpha = tape.reshape(alpha, &[width])?;
    Ok((alpha, weights))
}

/// `softmax(alpha·W_o + b_o)` as a `[c]` probability vector.
pub fn classify(tape: &mut Tape, alpha: Var, p: &HeadParams<Var>) -> Result<Var> {
    let width = tape.value(alpha).numel();
    let row = tape.reshape(alpha, &[1, width])?;
    let logits = tape.matmul(row, p.w)?;
    let logits = tape.add_bias(logits, p.b)?;
    let classes = tape.value(logits).numel();
    let logits = tape.reshape(logits, &[classes])?;
    tape.softmax(logits)
}

/// Intermediate values of one learner forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LearnerActivations {
    pub embedded: Var,
    pub conv: Var,
    pub states: Var,
    pub alpha: Var,
    pub attention_weights: Var,
    pub probs: Var,
}

/// embed, dropout, conv, dropout, BiGRU, dropout, attention, dropout, head.
pub fn learner_forward(
    tape: &mut Tape,
    ids: &[usize],
    table: &EmbeddingTable,
    params: &LearnerParams<Var>,
    config: &LayerConfig,
    mode: &mut Mode<'_>,
) -> Result<LearnerActivations> {
    let embedded = tape.constant(embed_lookup(ids, table)?);
    let x = tape.dropout(embedded, config.dropout, mode)?;
    let conv = conv_kgram(tape, x, &params.conv, config.conv_activation)?;
    let x = tape.dropout(conv, config.dropout, mode)?;
    let states = bigru_forward(tape, x, &params.gru)?;
    let x = tape.dropout(states, config.dropout, mode)?;
    let (alpha, attention_weights) = attention_pool(tape, x, &params.attention)?;
    let x = tape.dropout(alpha, config.dropout, mode)?;
    let probs = classify(tape, x, &params.head)?;
    Ok(LearnerActivations {
        embedded,
        conv,
        states,
        alpha,
        attention_weights,
        probs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::Vocabulary;
    use alloc::vec;
    use alloc::vec::Vec;
    use proptest::prelude::*;

    fn random(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
    }

    fn spec(k: usize, f: usize, u: usize) -> LearnerSpec {
        LearnerSpec::new(k, f, u)
    }

    fn table(rng: &mut impl Rng, vocab: usize, m: usize) -> EmbeddingTable {
        EmbeddingTable::random(vocab, m, rng).unwrap()
    }

    fn sig(x: f64) -> f64 {
        1.0 / (1.0 + libm::exp(-x))
    }

    #[test]
    fn embedding_padding_and_repeats() {
        let mut rng = crate::seeded_rng(1);
        let t = table(&mut rng, 10, 4);
        let pad = embed_lookup(&[0, 0, 0], &t).unwrap();
        assert!(pad.data().iter().all(|&x| x == 0.0));
        let rep = embed_lookup(&[5, 5], &t).unwrap();
        assert_eq!(rep.row(0), rep.row(1));
        assert!(matches!(embed_lookup(&[10], &t), Err(crate::Error::Contract(_))));

        let vocab = Vocabulary::from_tokens((0..50).map(|i| alloc::format!("w{i}")));
        let big = table(&mut rng, vocab.len(), 300);
        let ids: Vec<usize> = (0..60).map(|i| i % vocab.len()).collect();
        assert_eq!(embed_lookup(&ids, &big).unwrap().shape(), &[60, 300]);
    }

    #[test]
    fn conv_matches_window_loop() {
        let mut rng = crate::seeded_rng(2);
        let (n, m, k, f) = (6, 3, 2, 4);
        let input = random(&mut rng, &[n, m], 1.0);
        let filters = random(&mut rng, &[k, m, f], 1.0);
        let bias = random(&mut rng, &[f], 1.0);
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let p = ConvParams {
            filters: tape.constant(filters.clone()),
            bias: tape.constant(bias.clone()),
        };
        let out = conv_kgram(&mut tape, x, &p, ConvActivation::None).unwrap();
        let out = tape.value(out);
        assert_eq!(out.shape(), &[n - k + 1, f]);
        for j in 0..n - k + 1 {
            for c in 0..f {
                let mut s = bias.data()[c];
                for i in 0..k {
                    for d in 0..m {
                        s += input.get2(j + i, d) * filters.data()[(i * m + d) * f + c];
                    }
                }
                assert!((out.get2(j, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_summing_filter_and_short_input() {
        let mut tape = Tape::new();
        let input = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, -4.0]]).unwrap();
        let x = tape.constant(input);
        let p = ConvParams {
            filters: tape.constant(Tensor::ones(&[1, 2, 1])),
            bias: tape.constant(Tensor::zeros(&[1])),
        };
        let out = conv_kgram(&mut tape, x, &p, ConvActivation::None).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, -1.0]);

        let p3 = ConvParams {
            filters: tape.constant(Tensor::ones(&[3, 2, 1])),
            bias: tape.constant(Tensor::zeros(&[1])),
        };
        let err = conv_kgram(&mut tape, x, &p3, ConvActivation::None).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("n=2") && msg.contains("k=3"), "{msg}");
    }

    #[test]
    fn dbpedia_conv_shape() {
        let mut rng = crate::seeded_rng(3);
        let mut tape = Tape::new();
        let x = tape.constant(random(&mut rng, &[60, 300], 1.0));
        let p = ConvParams {
            filters: tape.constant(random(&mut rng, &[2, 300, 256], 0.1)),
            bias: tape.constant(Tensor::zeros(&[256])),
        };
        let out = conv_kgram(&mut tape, x, &p, ConvActivation::Relu).unwrap();
        assert_eq!(tape.value(out).shape(), &[59, 256]);
    }

    /// Unvectorized GRU recurrence over plain vectors.
    fn gru_oracle(seq: &Tensor, d: &GruDirection, reverse: bool) -> Vec<Vec<f64>> {
        let (steps, f) = seq.dims2().unwrap();
        let u = d.u_z.shape()[0];
        let mut h = vec![0.0; u];
        let mut out = vec![Vec::new(); steps];
        for step in 0..steps {
            let t = if reverse { steps - 1 - step } else { step };
            let x = seq.row(t);
            let lin = |w: &Tensor, uu: &Tensor, b: &Tensor, hv: &[f64], j: usize| {
                let mut s = b.data()[j];
                for i in 0..f {
                    s += x[i] * w.get2(i, j);
                }
                for i in 0..u {
                    s += hv[i] * uu.get2(i, j);
                }
                s
            };
            let z: Vec<f64> = (0..u).map(|j| sig(lin(&d.w_z, &d.u_z, &d.b_z, &h, j))).collect();
            let r: Vec<f64> = (0..u).map(|j| sig(lin(&d.w_r, &d.u_r, &d.b_r, &h, j))).collect();
            let rh: Vec<f64> = (0..u).map(|j| r[j] * h[j]).collect();
            let cand: Vec<f64> = (0..u)
                .map(|j| libm::tanh(lin(&d.w_h, &d.u_h, &d.b_h, &rh, j)))
                .collect();
            h = (0..u).map(|j| (1.0 - z[j]) * h[j] + z[j] * cand[j]).collect();
            out[t] = h.clone();
        }
        out
    }

    fn random_direction(rng: &mut impl Rng, f: usize, u: usize, scale: f64) -> GruDirection {
        GruDirection {
            w_z: random(rng, &[f, u], scale),
            w_r: random(rng, &[f, u], scale),
            w_h: random(rng, &[f, u], scale),
            u_z: random(rng, &[u, u], scale),
            u_r: random(rng, &[u, u], scale),
            u_h: random(rng, &[u, u], scale),
            b_z: random(rng, &[u], scale),
            b_r: random(rng, &[u], scale),
            b_h: random(rng, &[u], scale),
        }
    }

    fn run_bigru(seq: &Tensor, p: &GruParams) -> Tensor {
        let mut tape = Tape::new();
        let x = tape.constant(seq.clone());
        let bound = GruParams {
            forward: p.forward.map(&mut |t: &Tensor| tape.constant(t.clone())),
            backward: p.backward.map(&mut |t: &Tensor| tape.constant(t.clone())),
        };
        let out = bigru_forward(&mut tape, x, &bound).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn bigru_matches_scalar_recurrence() {
        let mut rng = crate::seeded_rng(4);
        let (steps, f, u) = (4, 3, 2);
        let seq = random(&mut rng, &[steps, f], 1.0);
        let p = GruParams {
            forward: random_direction(&mut rng, f, u, 1.0),
            backward: random_direction(&mut rng, f, u, 1.0),
        };
        let out = run_bigru(&seq, &p);
        assert_eq!(out.shape(), &[steps, 2 * u]);
        let fwd = gru_oracle(&seq, &p.forward, false);
        let bwd = gru_oracle(&seq, &p.backward, true);
        for t in 0..steps {
            for j in 0..u {
                assert!((out.get2(t, j) - fwd[t][j]).abs() < 1e-10);
                assert!((out.get2(t, u + j) - bwd[t][j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn bigru_single_step_and_zero_weights() {
        let mut rng = crate::seeded_rng(5);
        let d = random_direction(&mut rng, 3, 2, 1.0);
        let seq = random(&mut rng, &[1, 3], 1.0);
        let out = run_bigru(
            &seq,
            &GruParams {
                forward: d.clone(),
                backward: d,
            },
        );
        assert_eq!(out.data()[..2], out.data()[2..]);

        let zero = random_direction(&mut rng, 3, 2, 1.0).map(&mut |t: &Tensor| Tensor::zeros(t.shape()));
        let seq = random(&mut rng, &[5, 3], 1.0);
        let out = run_bigru(
            &seq,
            &GruParams {
                forward: zero.clone(),
                backward: zero,
            },
        );
        assert!(out.data().iter().all(|&x| x == 0.0));
    }

    fn run_attention(states: &Tensor, w: &Tensor, b: &Tensor, v: &Tensor) -> (Tensor, Tensor) {
        let mut tape = Tape::new();
        let s = tape.constant(states.clone());
        let p = AttentionParams {
            w: tape.constant(w.clone()),
            b: tape.constant(b.clone()),
            v: tape.constant(v.clone()),
        };
        let (alpha, weights) = attention_pool(&mut tape, s, &p).unwrap();
        (tape.value(alpha).clone(), tape.value(weights).clone())
    }

    #[test]
    fn attention_matches_direct_formula() {
        let mut rng = crate::seeded_rng(6);
        let (steps, width, da) = (5, 4, 3);
        let states = random(&mut rng, &[steps, width], 1.0);
        let w = random(&mut rng, &[width, da], 1.0);
        let b = random(&mut rng, &[da], 1.0);
        let v = random(&mut rng, &[da], 1.0);
        let (alpha, weights) = run_attention(&states, &w, &b, &v);

        let scores: Vec<f64> = (0..steps)
            .map(|t| {
                (0..da)
                    .map(|a| {
                        let mut s = b.data()[a];
                        for i in 0..width {
                            s += states.get2(t, i) * w.get2(i, a);
                        }
                        v.data()[a] * libm::tanh(s)
                    })
                    .sum()
            })
            .collect();
        let denom: f64 = scores.iter().map(|s| libm::exp(*s)).sum();
        let expected_w: Vec<f64> = scores.iter().map(|s| libm::exp(*s) / denom).collect();
        for t in 0..steps {
            assert!((weights.data()[t] - expected_w[t]).abs() < 1e-12);
        }
        for i in 0..width {
            let e: f64 = (0..steps).map(|t| expected_w[t] * states.get2(t, i)).sum();
            assert!((alpha.data()[i] - e).abs() < 1e-12);
        }
        assert!((weights.sum() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn attention_degenerate_cases() {
        let mut rng = crate::seeded_rng(7);
        let w = random(&mut rng, &[4, 4], 1.0);
        let b = random(&mut rng, &[4], 1.0);
        let v = random(&mut rng, &[4], 1.0);
        let single = random(&mut rng, &[1, 4], 1.0);
        let (alpha, weights) = run_attention(&single, &w, &b, &v);
        assert_eq!(weights.data(), &[1.0]);
        assert_eq!(alpha.data(), single.data());

        let row = [0.3, -0.2, 0.9, 0.1];
        let same = Tensor::from_rows(&[&row, &row, &row]).unwrap();
        let (alpha, weights) = run_attention(&same, &w, &b, &v);
        for &x in weights.data() {
            assert!((x - 1.0 / 3.0).abs() < 1e-15);
        }
        for (a, r) in alpha.data().iter().zip(row) {
            assert!((a - r).abs() < 1e-15);
        }
    }

    #[test]
    fn classify_uniform_and_argmax() {
        let mut tape = Tape::new();
        let alpha = tape.constant(Tensor::zeros(&[6]));
        let head = HeadParams {
            w: tape.constant(Tensor::zeros(&[6, 14])),
            b: tape.constant(Tensor::zeros(&[14])),
        };
        let probs = classify(&mut tape, alpha, &head).unwrap();
        assert_eq!(tape.value(probs).numel(), 14);
        for &p in tape.value(probs).data() {
            assert!((p - 1.0 / 14.0).abs() < 1e-15);
        }

        let mut rng = crate::seeded_rng(8);
        let a = random(&mut rng, &[6], 1.0);
        let w = random(&mut rng, &[6, 5], 1.0);
        let bias = random(&mut rng, &[5], 1.0);
        let logits = a.reshape(&[1, 6]).unwrap().matmul(&w).unwrap();
        let logits: Vec<f64> = logits.data().iter().zip(bias.data()).map(|(x, y)| x + y).collect();
        let alpha = tape.constant(a);
        let head = HeadParams {
            w: tape.constant(w),
            b: tape.constant(bias),
        };
        let probs = classify(&mut tape, alpha, &head).unwrap();
        assert_eq!(tape.value(probs).argmax(), Tensor::vector(logits).argmax());
    }

    fn tiny_learner(rng: &mut impl Rng, k: usize) -> (EmbeddingTable, LearnerParams) {
        let t = table(rng, 12, 3);
        let mut s = spec(k, 4, 2);
        s.attention_dim = 4;
        let mut p = LearnerParams::glorot(&s, 3, 3, rng).unwrap();
        // Non-zero biases so their gradients are exercised too.
        for t in p.tensors_mut() {
            if t.shape().len() == 1 {
                for x in t.data_mut() {
                    *x = rng.random_range(-0.3..0.3);
                }
            }
        }
        (t, p)
    }

    fn forward_probs(ids: &[usize], t: &EmbeddingTable, p: &LearnerParams, cfg: &LayerConfig) -> Tensor {
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let act = learner_forward(&mut tape, ids, t, &bound, cfg, &mut Mode::Eval).unwrap();
        tape.value(act.probs).clone()
    }

    #[test]
    fn learner_gradients_match_finite_differences() {
        let mut rng = crate::seeded_rng(9);
        let ids = [2, 7, 3, 11, 5, 0];
        let label = 1;
        for k in [1, 2] {
            let (t, params) = tiny_learner(&mut rng, k);
            let cfg = LayerConfig::default();
            let loss_of = |p: &LearnerParams| -libm::log(forward_probs(&ids, &t, p, &cfg).data()[label]);

            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let act = learner_forward(&mut tape, &ids, &t, &bound, &cfg, &mut Mode::Eval).unwrap();
            let picked = tape.pick(act.probs, label).unwrap();
            let loss = tape.neg_log(picked, 1e-12).unwrap();
            let grads = tape.backward(loss).unwrap().into_tensors();

            let h = 1e-4;
            let names = params.named();
            for (ti, (name, tensor)) in names.iter().enumerate() {
                for j in 0..tensor.numel() {
                    let mut plus = params.clone();
                    plus.tensors_mut()[ti].data_mut()[j] += h;
                    let mut minus = params.clone();
                    minus.tensors_mut()[ti].data_mut()[j] -= h;
                    let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
                    let a = grads[ti].data()[j];
                    let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-3, "k={k} {name}[{j}] analytic {a} numeric {numeric}");
                }
            }
        }
    }

    #[test]
    fn learner_inference_is_deterministic() {
        let mut rng = crate::seeded_rng(10);
        let (t, p) = tiny_learner(&mut rng, 2);
        let cfg = LayerConfig {
            dropout: 0.5,
            ..LayerConfig::default()
        };
        let ids = [3, 4, 5, 0, 0, 0];
        assert_eq!(forward_probs(&ids, &t, &p, &cfg), forward_probs(&ids, &t, &p, &cfg));
    }

    #[test]
    fn dbpedia_shapes() {
        let mut rng = crate::seeded_rng(11);
        let t = table(&mut rng, 40, 300);
        let p = LearnerParams::glorot(&spec(2, 256, 128), 300, 14, &mut rng).unwrap();
        let ids: Vec<usize> = (0..60).map(|i| (i * 7) % 40).collect();
        let mut tape = Tape::new();
        let bound = p.bind_frozen(&mut tape);
        let act = learner_forward(&mut tape, &ids, &t, &bound, &LayerConfig::default(), &mut Mode::Eval)
            .unwrap();
        assert_eq!(tape.value(act.embedded).shape(), &[60, 300]);
        assert_eq!(tape.value(act.conv).shape(), &[59, 256]);
        assert_eq!(tape.value(act.states).shape(), &[59, 256]);
        assert_eq!(tape.value(act.alpha).shape(), &[256]);
        assert_eq!(tape.value(act.probs).shape(), &[14]);
    }

    #[test]
    fn conv_is_location_covariant() {
        let mut rng = crate::seeded_rng(12);
        let (n, m, k, f) = (7, 3, 3, 2);
        let base = random(&mut rng, &[n, m], 1.0);
        let mut shifted = vec![0.0; n * m];
        shifted[m..].copy_from_slice(&base.data()[..(n - 1) * m]);
        let shifted = Tensor::new(&[n, m], shifted).unwrap();
        let filters = random(&mut rng, &[k, m, f], 1.0);
        let bias = random(&mut rng, &[f], 1.0);
        let run = |x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let p = ConvParams {
                filters: tape.constant(filters.clone()),
                bias: tape.constant(bias.clone()),
            };
            let out = conv_kgram(&mut tape, xv, &p, ConvActivation::Relu).unwrap();
            tape.value(out).clone()
        };
        let a = run(&base);
        let b = run(&shifted);
        for j in 0..n - k {
            assert_eq!(a.row(j), b.row(j + 1));
        }
    }

    proptest! {
        #[test]
        fn gru_states_are_bounded(seed in 0u64..1000, steps in 1usize..8) {
            let mut rng = crate::seeded_rng(seed);
            let seq = random(&mut rng, &[steps, 3], 2.0);
            let p = GruParams {
                forward: random_direction(&mut rng, 3, 2, 2.0),
                backward: random_direction(&mut rng, 3, 2, 2.0),
            };
            let out = run_bigru(&seq, &p);
            prop_assert!(out.data().iter().all(|x| x.abs() < 1.0));
        }

        #[test]
        fn attention_weights_are_a_distribution(seed in 0u64..1000, steps in 1usize..10) {
            let mut rng = crate::seeded_rng(seed);
            let states = random(&mut rng, &[steps, 4], 3.0);
            let w = random(&mut rng, &[4, 3], 3.0);
            let b = random(&mut rng, &[3], 3.0);
            let v = random(&mut rng, &[3], 30.0);
            let (_, weights) = run_attention(&states, &w, &b, &v);
            prop_assert!(weights.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
            prop_assert!((weights.sum() - 1.0).abs() < 1e-9);
        }
    }
}
