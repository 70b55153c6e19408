use std::fmt::Write as _;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use ecga_core::cv::{holdout_split, kfold_split, stratified_kfold_split};
use ecga_core::ensemble::{build_ensemble, EnsembleModel};
use ecga_core::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use ecga_core::metrics::{evaluate, predict_classes, MetricsReport};
use ecga_core::text::{EmbeddingTable, EncodedBatch};
use ecga_core::train::{train, TrainReport};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::dataset::{read_dataset, LabelSet, RawDataset};
use crate::error::CliError;
use crate::pipeline::{build_inputs, document_tokens, encode_docs, rng_stream};
use crate::report::{metrics_kv, trace_rows, TRACE_HEADER};

pub const CHECKPOINT_FILE: &str = "checkpoint.ckpt";
pub const METRICS_FILE: &str = "metrics.txt";
pub const TRACE_FILE: &str = "trace.tsv";
pub const CONFIG_FILE: &str = "config.toml";
pub const EVAL_METRICS_FILE: &str = "eval_metrics.txt";

/// What a training run reported and where it wrote it.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub metrics: MetricsReport,
    pub labels: Vec<String>,
    pub output_dir: PathBuf,
    pub embedding_coverage: Option<f64>,
    /// Pooled over folds in cross-validation, else on the evaluation split.
    pub evaluation: &'static str,
}

fn load_dataset(path: &str, config: &RunConfig, role: &str) -> Result<RawDataset, CliError> {
    if path.is_empty() {
        return Err(CliError::Usage(format!("{role} is not set")));
    }
    let raw = read_dataset(Path::new(path), &config.schema())?;
    if raw.is_empty() {
        return Err(CliError::Usage(format!("{path}: dataset is empty")));
    }
    Ok(raw)
}

struct Fitter<'a> {
    config: &'a RunConfig,
    table: &'a EmbeddingTable,
    labels: &'a [String],
}

impl Fitter<'_> {
    /// Trains a fresh model on `data`, selecting the epoch on `validation`.
    /// `tag` keeps the random streams of different fits apart.
    fn fit(
        &self,
        data: &EncodedBatch,
        validation: Option<&EncodedBatch>,
        tag: u64,
    ) -> Result<(EnsembleModel, TrainReport), CliError> {
        let c = self.config;
        let mut init = rng_stream(c.seed, 16 + 2 * tag);
        let mut model = build_ensemble(
            &c.learner_specs(),
            self.labels.len(),
            self.table.clone(),
            c.conv_activation(),
            &mut init,
        )?;
        model.set_labels(self.labels.to_vec())?;
        let mut rng = rng_stream(c.seed, 17 + 2 * tag);
        let report = train(&mut model, data, validation, &c.train_config(), &mut rng)?;
        Ok((model, report))
    }

    /// Holds out `validation_fraction` of `data` for epoch selection.
    fn fit_with_holdout(&self, data: &EncodedBatch, tag: u64) -> Result<(EnsembleModel, TrainReport), CliError> {
        if self.config.validation_fraction == 0.0 {
            return self.fit(data, None, tag);
        }
        let (train_idx, held) =
            holdout_split(data.labels(), self.config.validation_fraction, self.config.seed.wrapping_add(tag))?;
        if train_idx.is_empty() {
            return Err(CliError::Usage("validation_fraction leaves no training examples".into()));
        }
        let validation = data.subset(&held);
        self.fit(&data.subset(&train_idx), Some(&validation), tag)
    }
}

/// Runs `train` for a resolved config and writes all artifacts into its
/// output directory.
pub fn run_train(config: &RunConfig) -> Result<TrainOutcome, CliError> {
    let raw = load_dataset(&config.train_path, config, "train_path")?;
    let label_set = LabelSet::new(&config.label_names, &raw.labels)?;
    let y = label_set.index_all(&raw.labels)?;
    let docs: Vec<Vec<String>> = raw.texts.iter().map(|t| document_tokens(config, t)).collect();
    let inputs = build_inputs(config, &docs)?;
    let data = encode_docs(config, &docs, &inputs.vocab, y)?;
    let fitter = Fitter {
        config,
        table: &inputs.table,
        labels: label_set.names(),
    };

    let mut trace = String::from(TRACE_HEADER);
    let mut extra = String::new();
    let (model, metrics, evaluation) = if config.kfold >= 2 {
        let folds = if config.stratified {
            stratified_kfold_split(data.labels(), config.kfold, config.seed)?
        } else {
            kfold_split(data.len(), config.kfold, config.seed)?
        };
        let c = label_set.len();
        let mut pooled = vec![vec![0u64; c]; c];
        let mut fold_f1 = Vec::with_capacity(folds.len());
        for (i, fold) in folds.iter().enumerate() {
            let tag = i as u64 + 1;
            let (model, report) = fitter.fit_with_holdout(&data.subset(&fold.train), tag)?;
            trace_rows(&mut trace, &format!("fold{tag}"), &report.epochs);
            let held = data.subset(&fold.validation);
            let predicted = predict_classes(&model, &held)?;
            let m = MetricsReport::from_predictions(&predicted, held.labels(), c)?;
            for (t, p) in held.labels().iter().zip(&predicted) {
                pooled[*t][*p] += 1;
            }
            writeln!(extra, "fold.{tag}.accuracy={:?}", m.accuracy).unwrap();
            writeln!(extra, "fold.{tag}.macro_f1={:?}", m.macro_f1).unwrap();
            if let Some(best) = report.best_epoch {
                writeln!(extra, "fold.{tag}.best_epoch={best}").unwrap();
            }
            fold_f1.push(m.macro_f1);
        }
        let mean = fold_f1.iter().sum::<f64>() / fold_f1.len() as f64;
        let var = fold_f1.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / fold_f1.len() as f64;
        writeln!(extra, "folds={}", folds.len()).unwrap();
        writeln!(extra, "fold_mean.macro_f1={mean:?}").unwrap();
        writeln!(extra, "fold_std.macro_f1={:?}", var.sqrt()).unwrap();
        let (model, report) = fitter.fit_with_holdout(&data, 0)?;
        trace_rows(&mut trace, "final", &report.epochs);
        if let Some(best) = report.best_epoch {
            writeln!(extra, "final.best_epoch={best}").unwrap();
        }
        (model, MetricsReport::from_confusion(pooled)?, "kfold")
    } else if !config.test_path.is_empty() {
        let test_raw = load_dataset(&config.test_path, config, "test_path")?;
        let test_y = label_set.index_all(&test_raw.labels)?;
        let test_docs: Vec<Vec<String>> =
            test_raw.texts.iter().map(|t| document_tokens(config, t)).collect();
        let test = encode_docs(config, &test_docs, &inputs.vocab, test_y)?;
        let (model, report) = fitter.fit_with_holdout(&data, 0)?;
        trace_rows(&mut trace, "final", &report.epochs);
        if let Some(best) = report.best_epoch {
            writeln!(extra, "best_epoch={best}").unwrap();
        }
        let metrics = evaluate(&model, &test)?;
        (model, metrics, "test")
    } else {
        if config.validation_fraction == 0.0 {
            return Err(CliError::Usage(
                "validation_fraction must be positive when there is no test_path and kfold is 0"
                    .into(),
            ));
        }
        let (train_idx, held) = holdout_split(data.labels(), config.validation_fraction, config.seed)?;
        let validation = data.subset(&held);
        let (model, report) = fitter.fit(&data.subset(&train_idx), Some(&validation), 0)?;
        trace_rows(&mut trace, "final", &report.epochs);
        if let Some(best) = report.best_epoch {
            writeln!(extra, "best_epoch={best}").unwrap();
        }
        let metrics = evaluate(&model, &validation)?;
        (model, metrics, "holdout")
    };
    if let Some(cov) = inputs.coverage {
        writeln!(extra, "embedding_coverage={cov:?}").unwrap();
    }
    writeln!(extra, "vocab_size={}", inputs.vocab.len()).unwrap();
    writeln!(extra, "evaluation={evaluation}").unwrap();

    let out = PathBuf::from(&config.output_dir);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    // Where artifacts landed is not part of the model.
    let mut stored = config.clone();
    stored.output_dir.clear();
    let checkpoint = Checkpoint {
        config: stored,
        vocab: inputs.vocab,
        model,
    };
    checkpoint.save(&out.join(CHECKPOINT_FILE))?;
    let kv = metrics_kv(&metrics, label_set.names()) + &extra;
    write_file(&out.join(METRICS_FILE), &kv)?;
    write_file(&out.join(TRACE_FILE), &trace)?;
    write_file(&out.join(CONFIG_FILE), &config.to_toml())?;

    Ok(TrainOutcome {
        metrics,
        labels: label_set.names().to_vec(),
        output_dir: out,
        embedding_coverage: inputs.coverage,
        evaluation,
    })
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

/// Scores a checkpoint on a labelled file and writes the metrics into
/// the configured output directory.
pub fn run_eval(checkpoint: &Checkpoint, data_path: &str, output_dir: &str) -> Result<MetricsReport, CliError> {
    let config = &checkpoint.config;
    let raw = load_dataset(data_path, config, "evaluation data")?;
    let labels = LabelSet::from_names(checkpoint.model.labels().to_vec());
    let y = labels.index_all(&raw.labels).map_err(|e| {
        CliError::Usage(format!("{data_path} does not match the checkpoint: {e}"))
    })?;
    let docs: Vec<Vec<String>> = raw.texts.iter().map(|t| document_tokens(config, t)).collect();
    let data = encode_docs(config, &docs, &checkpoint.vocab, y)?;
    let metrics = evaluate(&checkpoint.model, &data)?;
    let out = PathBuf::from(output_dir);
    std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
    write_file(&out.join(EVAL_METRICS_FILE), &metrics_kv(&metrics, labels.names()))?;
    Ok(metrics)
}

/// One `label<TAB>p0 p1 ...` line per input line, flushed as it goes.
/// Stops quietly when the reader of `output` goes away.
pub fn run_predict(checkpoint: &Checkpoint, input: impl BufRead, mut output: impl Write) -> Result<usize, CliError> {
    let config = &checkpoint.config;
    let stdout_err = |e| CliError::io("<stdout>", e);
    let mut lines = 0;
    for line in input.lines() {
        let line = line.map_err(|e| CliError::io("<stdin>", e))?;
        let tokens = document_tokens(config, &line);
        let ids = ecga_core::text::encode(&tokens, &checkpoint.vocab, config.pad_length);
        let probs = checkpoint.model.predict(&ids)?;
        let label = &checkpoint.model.labels()[probs.argmax()];
        let values: Vec<String> = probs.data().iter().map(|p| format!("{p:?}")).collect();
        let written = writeln!(output, "{label}\t{}", values.join(" ")).and_then(|()| output.flush());
        match written {
            Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => break,
            other => other.map_err(stdout_err)?,
        }
        lines += 1;
    }
    Ok(lines)
}

/// Runs the finite-difference check and renders one line per tensor.
pub fn run_gradcheck_report(config: &GradcheckConfig) -> Result<(GradcheckReport, String), CliError> {
    let report = run_gradcheck(config)?;
    let width = report.tensors.iter().map(|t| t.name.len()).max().unwrap_or(0);
    let mut text = String::new();
    for t in &report.tensors {
        let verdict = if t.max_rel_error < report.tolerance { "ok" } else { "FAIL" };
        writeln!(
            text,
            "{:<width$}  {:>6}  {:.3e}  {verdict}",
            t.name, t.entries, t.max_rel_error
        )
        .unwrap();
    }
    writeln!(
        text,
        "{} tensors, worst relative error {:.3e}, tolerance {:e}",
        report.tensors.len(),
        report.worst(),
        report.tolerance
    )
    .unwrap();
    Ok((report, text))
}
