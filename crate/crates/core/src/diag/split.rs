use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::LabeledDataset;
use crate::error::{Error, Result};

pub const DEFAULT_SPLIT: (f64, f64, f64) = (0.75, 0.10, 0.15);

/// Sample indices of each part of a split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
    /// False when a class was too small to stratify.
    pub stratified: bool,
}

/// Part sizes: train and validation rounded, test takes the remainder.
pub fn split_sizes(n: usize, ratios: (f64, f64, f64)) -> Result<(usize, usize, usize)> {
    let (a, b, c) = ratios;
    if [a, b, c].iter().any(|r| !(0.0..=1.0).contains(r)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let train = ((n as f64) * a).round() as usize;
    let val = (((n as f64) * b).round() as usize).min(n - train);
    Ok((train, val, n - train - val))
}

/// Shuffled, disjoint, exhaustive split stratified on the first task's
/// labels. Samples are ordered by their relative rank inside their class so
/// each cut takes every class in proportion.
pub fn split_indices(data: &LabeledDataset, ratios: (f64, f64, f64), seed: u64) -> Result<SplitIndices> {
    let n = data.len();
    let (n_train, n_val, _) = split_sizes(n, ratios)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let classes = data.label_maps.first().map_or(0, |m| m.len());
    let mut by_class = vec![Vec::new(); classes.max(1)];
    for (i, s) in data.samples.iter().enumerate() {
        by_class[s.labels.first().copied().unwrap_or(0)].push(i);
    }
    let stratified = by_class.iter().all(|c| c.is_empty() || c.len() >= 3);
    let order: Vec<usize> = if stratified {
        let mut keyed = Vec::with_capacity(n);
        for (c, members) in by_class.iter_mut().enumerate() {
            members.shuffle(&mut rng);
            let m = members.len() as f64;
            for (r, &i) in members.iter().enumerate() {
                keyed.push(((r as f64 + 0.5) / m, c, i));
            }
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        keyed.into_iter().map(|k| k.2).collect()
    } else {
        log::warn!("a class has fewer than 3 samples; falling back to an unstratified split");
        let mut all: Vec<usize> = (0..n).collect();
        all.shuffle(&mut rng);
        all
    };
    let mut train = order[..n_train].to_vec();
    let mut validation = order[n_train..n_train + n_val].to_vec();
    let mut test = order[n_train + n_val..].to_vec();
    // Shuffle inside each part so no part is ordered by class rank.
    train.shuffle(&mut rng);
    validation.shuffle(&mut rng);
    test.shuffle(&mut rng);
    Ok(SplitIndices {
        train,
        validation,
        test,
        stratified,
    })
}

pub fn split_dataset(
    data: &LabeledDataset,
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    let s = split_indices(data, ratios, seed)?;
    Ok((data.subset(&s.train), data.subset(&s.validation), data.subset(&s.test)))
}
