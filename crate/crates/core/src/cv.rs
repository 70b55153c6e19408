//! k-fold and holdout splits over example indices.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use crate::error::{config_err, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Fold {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Shuffled, unstratified k-fold split of `0..n`.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<Fold>> {
    check(n, k)?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut crate::seeded_rng(seed));
    Ok(deal(&order, k))
}

/// k-fold split that keeps each fold's class counts within one of the
/// global proportion. Indices are shuffled within each class, then classes
/// are laid end to end and dealt round-robin, so fold sizes differ by at
/// most one as well.
pub fn stratified_kfold_split(labels: &[usize], k: usize, seed: u64) -> Result<Vec<Fold>> {
    check(labels.len(), k)?;
    let mut rng = crate::seeded_rng(seed);
    let mut order = Vec::with_capacity(labels.len());
    for (_, mut members) in by_class(labels) {
        members.shuffle(&mut rng);
        order.extend(members);
    }
    Ok(deal(&order, k))
}

/// Stratified split holding out `fraction` of every class (at least one
/// example per class with two or more members). Returns `(train, held_out)`.
pub fn holdout_split(labels: &[usize], fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(config_err!("holdout fraction must be in [0, 1), got {fraction}"));
    }
    let mut rng = crate::seeded_rng(seed);
    let mut train = Vec::new();
    let mut held = Vec::new();
    for (_, mut members) in by_class(labels) {
        members.shuffle(&mut rng);
        let mut take = libm::round(members.len() as f64 * fraction) as usize;
        if fraction > 0.0 && take == 0 && members.len() >= 2 {
            take = 1;
        }
        held.extend_from_slice(&members[..take]);
        train.extend_from_slice(&members[take..]);
    }
    train.sort_unstable();
    held.sort_unstable();
    Ok((train, held))
}

fn check(n: usize, k: usize) -> Result<()> {
    if k < 2 {
        return Err(config_err!("k-fold needs k >= 2, got {k}"));
    }
    if n < k {
        return Err(config_err!("cannot split {n} examples into {k} folds"));
    }
    Ok(())
}

fn by_class(labels: &[usize]) -> BTreeMap<usize, Vec<usize>> {
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in labels.iter().enumerate() {
        groups.entry(l).or_default().push(i);
    }
    groups
}

fn deal(order: &[usize], k: usize) -> Vec<Fold> {
    let mut assignment = alloc::vec![0usize; order.len()];
    for (pos, &idx) in order.iter().enumerate() {
        assignment[idx] = pos % k;
    }
    (0..k)
        .map(|f| {
            let (validation, train) = (0..order.len()).partition(|&i| assignment[i] == f);
            Fold { train, validation }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn singleton_folds() {
        let folds = kfold_split(10, 10, 1).unwrap();
        assert_eq!(folds.len(), 10);
        let mut seen: Vec<usize> = folds.iter().flat_map(|f| f.validation.clone()).collect();
        seen.sort_unstable();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        assert!(folds.iter().all(|f| f.validation.len() == 1 && f.train.len() == 9));
    }

    #[test]
    fn errors() {
        assert!(kfold_split(3, 4, 0).is_err());
        assert!(kfold_split(3, 1, 0).is_err());
        assert!(holdout_split(&[0, 1], 1.0, 0).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let labels: Vec<usize> = (0..50).map(|i| i % 3).collect();
        assert_eq!(
            stratified_kfold_split(&labels, 5, 7).unwrap(),
            stratified_kfold_split(&labels, 5, 7).unwrap()
        );
        assert_ne!(kfold_split(50, 5, 7).unwrap(), kfold_split(50, 5, 8).unwrap());
    }

    #[test]
    fn holdout_keeps_every_class() {
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i % 10 == 0)).collect();
        let (train, held) = holdout_split(&labels, 0.2, 3).unwrap();
        assert_eq!(train.len() + held.len(), 100);
        assert_eq!(held.iter().filter(|&&i| labels[i] == 1).count(), 2);
        assert_eq!(held.len(), 20);
    }
}
