//! Leakage-safe data handling.
//!
//! Everything that influences the training distribution — normalizer
//! statistics, SMOTE neighborhoods, noise sigmas, augmentation factors — is
//! fitted on the training partition only. The fold builder reads samples
//! exclusively through [`SampleSource`], so a counting wrapper can prove
//! that validation rows are never touched (see
//! [`CountingSource`]).
//!
//! Per-fold order of operations: fit the normalizer on the raw training
//! fold, run SMOTE and the statistical augmentations in raw amplitude
//! space (noise sigmas are physical, m/s²), then normalize everything with
//! the training statistics.

use std::sync::atomic::{AtomicU32, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::{Error, Result, CLASS_COUNT};

/// Variance floor for degenerate features.
pub const EPS_STD: f64 = 1e-8;

// ---------------------------------------------------------------------------
// Sample access and instrumentation
// ---------------------------------------------------------------------------

/// Read-only access to a labelled feature matrix. The pipeline reads
/// training data only through this trait, which makes leakage measurable.
pub trait SampleSource<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn feature_dim(&self) -> usize;
    fn features(&self, idx: usize) -> &[T];
    fn label(&self, idx: usize) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource<f32> for crate::dataset::Dataset {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn feature_dim(&self) -> usize {
        crate::dataset::FEATURE_DIM
    }

    fn features(&self, idx: usize) -> &[f32] {
        self.features_of(idx)
    }

    fn label(&self, idx: usize) -> usize {
        self.labels[idx] as usize
    }
}

/// Plain in-memory source, used by tests and subset evaluation.
pub struct SliceSource<'a, T> {
    pub features: &'a [T],
    pub labels: &'a [usize],
    pub dim: usize,
}

impl<T: Scalar> SampleSource<T> for SliceSource<'_, T> {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn features(&self, idx: usize) -> &[T] {
        &self.features[idx * self.dim..(idx + 1) * self.dim]
    }

    fn label(&self, idx: usize) -> usize {
        self.labels[idx]
    }
}

/// Wrapper that counts feature reads per sample index.
pub struct CountingSource<'a, T: Scalar> {
    inner: &'a dyn SampleSource<T>,
    reads: Vec<AtomicU32>,
}

impl<'a, T: Scalar> CountingSource<'a, T> {
    pub fn new(inner: &'a dyn SampleSource<T>) -> Self {
        let reads = (0..inner.len()).map(|_| AtomicU32::new(0)).collect();
        CountingSource { inner, reads }
    }

    pub fn read_count(&self, idx: usize) -> u32 {
        self.reads[idx].load(Ordering::Relaxed)
    }
}

impl<T: Scalar> SampleSource<T> for CountingSource<'_, T> {
    fn len(&self) -> usize {
        self.inner.len()
    }

    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }

    fn features(&self, idx: usize) -> &[T] {
        self.reads[idx].fetch_add(1, Ordering::Relaxed);
        self.inner.features(idx)
    }

    fn label(&self, idx: usize) -> usize {
        self.inner.label(idx)
    }
}

// ---------------------------------------------------------------------------
// Fold planning
// ---------------------------------------------------------------------------

/// Repeated stratified K-fold assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub repetitions: usize,
    pub k: usize,
    /// `[repetition][sample]` -> fold index.
    pub assignments: Vec<Vec<u16>>,
    pub shuffle_seeds: Vec<u64>,
}

impl FoldPlan {
    pub fn validation_indices(&self, rep: usize, fold: usize) -> Vec<usize> {
        self.assignments[rep]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f as usize == fold)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn training_indices(&self, rep: usize, fold: usize) -> Vec<usize> {
        self.assignments[rep]
            .iter()
            .enumerate()
            .filter(|(_, &f)| f as usize != fold)
            .map(|(i, _)| i)
            .collect()
    }

    /// CSV export: repetition, fold, sample_index, role.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("repetition,fold,sample_index,role\n");
        for rep in 0..self.repetitions {
            for fold in 0..self.k {
                for (i, &f) in self.assignments[rep].iter().enumerate() {
                    let role = if f as usize == fold { "valid" } else { "train" };
                    out.push_str(&format!("{rep},{fold},{i},{role}\n"));
                }
            }
        }
        out
    }
}

/// Stratified fold assignment, repeated with per-repetition shuffles.
///
/// Within a repetition every class is split as evenly as possible across the
/// k folds; the folds that receive a class's remainder are staggered from
/// class to class, so fold totals also differ by at most one (and are exact
/// when k divides the sample count).
pub fn plan_folds(labels: &[usize], k: usize, repetitions: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if repetitions < 1 {
        return Err(Error::Config("repetitions must be >= 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, &l) in labels.iter().enumerate() {
        if l >= by_class.len() {
            by_class.resize(l + 1, Vec::new());
        }
        by_class[l].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if !members.is_empty() && members.len() < k {
            return Err(Error::Config(format!(
                "class {c} has {} samples, fewer than k = {k}",
                members.len()
            )));
        }
    }

    let root = RngStream::new(seed);
    let shuffle_seeds: Vec<u64> =
        (0..repetitions).map(|r| root.derive_named("fold-shuffle", r as u64).seed()).collect();

    let mut assignments = Vec::with_capacity(repetitions);
    for &rep_seed in &shuffle_seeds {
        let mut rng = RngStream::new(rep_seed);
        let mut fold_of = vec![0u16; labels.len()];
        let mut extra_cursor = 0usize;
        for members in &by_class {
            if members.is_empty() {
                continue;
            }
            let mut shuffled = members.clone();
            rng.shuffle(&mut shuffled);
            let base = shuffled.len() / k;
            let extras = shuffled.len() % k;
            let mut start = 0;
            for f in 0..k {
                let gets_extra =
                    (0..extras).any(|e| (extra_cursor + e) % k == f);
                let size = base + usize::from(gets_extra);
                for &idx in &shuffled[start..start + size] {
                    fold_of[idx] = f as u16;
                }
                start += size;
            }
            extra_cursor = (extra_cursor + extras) % k;
        }
        assignments.push(fold_of);
    }

    Ok(FoldPlan { repetitions, k, assignments, shuffle_seeds })
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

/// Per-feature standardization statistics, fitted on training data only.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer<T> {
    pub mean: Vec<T>,
    pub std: Vec<T>,
    pub fitted_on: usize,
}

/// Fits per-feature mean and (floored) standard deviation over the given
/// rows. Accumulates in f64 regardless of the storage type.
pub fn fit_normalizer<T: Scalar>(rows: &[T], dim: usize) -> Result<Normalizer<T>> {
    if rows.is_empty() || dim == 0 {
        return Err(Error::Data("cannot fit a normalizer on empty input".into()));
    }
    let n = rows.len() / dim;
    let mut sum = vec![0.0f64; dim];
    let mut sumsq = vec![0.0f64; dim];
    for row in rows.chunks_exact(dim) {
        for (i, &v) in row.iter().enumerate() {
            let vf = v.as_f64();
            sum[i] += vf;
            sumsq[i] += vf * vf;
        }
    }
    let mut mean = Vec::with_capacity(dim);
    let mut std = Vec::with_capacity(dim);
    for i in 0..dim {
        let m = sum[i] / n as f64;
        let var = (sumsq[i] / n as f64 - m * m).max(0.0);
        mean.push(T::from_f64(m));
        std.push(T::from_f64(var.sqrt().max(EPS_STD)));
    }
    Ok(Normalizer { mean, std, fitted_on: n })
}

/// Standardizes rows in place with the stored statistics.
pub fn apply_normalizer<T: Scalar>(normalizer: &Normalizer<T>, rows: &mut [T]) {
    let dim = normalizer.mean.len();
    rows.par_chunks_mut(dim).for_each(|row| {
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - normalizer.mean[i]) / normalizer.std[i];
        }
    });
}

// ---------------------------------------------------------------------------
// SMOTE
// ---------------------------------------------------------------------------

/// Raises every minority class to the majority count by interpolating
/// between same-class nearest neighbors (Euclidean on the flattened
/// features). Originals are preserved; synthetics are appended.
pub fn smote_oversample<T: Scalar>(
    features: &[T],
    labels: &[usize],
    dim: usize,
    k_neighbors: usize,
    rng: &mut RngStream,
) -> Result<(Vec<T>, Vec<usize>)> {
    if k_neighbors < 1 {
        return Err(Error::Config("k_neighbors must be >= 1".into()));
    }
    let n = labels.len();
    assert_eq!(features.len(), n * dim);
    let class_count = labels.iter().max().map_or(0, |&m| m + 1);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let majority = by_class.iter().map(Vec::len).max().unwrap_or(0);

    let mut out_features = features.to_vec();
    let mut out_labels = labels.to_vec();

    for (cls, members) in by_class.iter().enumerate() {
        if members.is_empty() || members.len() == majority {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::Data(format!(
                "SMOTE needs at least 2 samples per class; class {cls} has {}",
                members.len()
            )));
        }
        let k = k_neighbors.min(members.len() - 1);

        // Pairwise nearest neighbors within the class.
        let neighbor_table: Vec<Vec<usize>> = members
            .par_iter()
            .map(|&i| {
                let xi = &features[i * dim..(i + 1) * dim];
                let mut dists: Vec<(f64, usize)> = members
                    .iter()
                    .filter(|&&j| j != i)
                    .map(|&j| {
                        let xj = &features[j * dim..(j + 1) * dim];
                        let d: f64 = xi
                            .iter()
                            .zip(xj)
                            .map(|(&a, &b)| {
                                let d = a.as_f64() - b.as_f64();
                                d * d
                            })
                            .sum();
                        (d, j)
                    })
                    .collect();
                dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                dists.truncate(k);
                dists.into_iter().map(|(_, j)| j).collect()
            })
            .collect();

        let needed = majority - members.len();
        for s in 0..needed {
            let base_pos = s % members.len();
            let base = members[base_pos];
            let neighbors = &neighbor_table[base_pos];
            let nn = neighbors[rng.below(neighbors.len() as u64) as usize];
            let u = T::from_f64(rng.uniform());
            let xi = &features[base * dim..(base + 1) * dim];
            let xn = &features[nn * dim..(nn + 1) * dim];
            out_features.extend(xi.iter().zip(xn).map(|(&a, &b)| a + u * (b - a)));
            out_labels.push(cls);
        }
    }
    Ok((out_features, out_labels))
}

// ---------------------------------------------------------------------------
// Statistical augmentations
// ---------------------------------------------------------------------------

/// Elementwise Gaussian perturbation with the given standard deviation.
pub fn augment_noise<T: Scalar>(row: &[T], sigma: f64, rng: &mut RngStream) -> Result<Vec<T>> {
    if sigma < 0.0 {
        return Err(Error::Config(format!("noise sigma must be >= 0, got {sigma}")));
    }
    Ok(row.iter().map(|&v| v + T::from_f64(sigma * rng.normal())).collect())
}

/// Circular roll along the frequency axis by one common integer shift drawn
/// uniformly from [-max_shift, +max_shift], identical for all sensor rows so
/// inter-sensor coherence is preserved.
pub fn augment_jitter<T: Scalar>(
    row: &[T],
    sensors: usize,
    max_shift: usize,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    let seq = row.len() / sensors;
    if max_shift >= seq {
        return Err(Error::Config(format!(
            "jitter max_shift {max_shift} must be below the sequence length {seq}"
        )));
    }
    let shift = rng.int_in(-(max_shift as i64), max_shift as i64);
    let mut out = row.to_vec();
    if shift != 0 {
        for s in 0..sensors {
            let seg = &mut out[s * seq..(s + 1) * seq];
            if shift > 0 {
                seg.rotate_right(shift as usize);
            } else {
                seg.rotate_left((-shift) as usize);
            }
        }
    }
    Ok(out)
}

/// Multiplies every entry by one factor drawn uniformly from [low, high].
pub fn augment_scale<T: Scalar>(
    row: &[T],
    low: f64,
    high: f64,
    rng: &mut RngStream,
) -> Result<Vec<T>> {
    if !(0.0 < low && low <= high && high < 2.0) {
        return Err(Error::Config(format!("scale range [{low}, {high}] must sit inside (0, 2)")));
    }
    let f = T::from_f64(rng.uniform_in(low, high));
    Ok(row.iter().map(|&v| v * f).collect())
}

// ---------------------------------------------------------------------------
// Class weights
// ---------------------------------------------------------------------------

/// Inverse-frequency class weights: w_c = N / (C · n_c).
pub fn compute_class_weights<T: Scalar>(labels: &[usize], class_count: usize) -> Result<Vec<T>> {
    let mut counts = vec![0usize; class_count];
    for &l in labels {
        if l >= class_count {
            return Err(Error::Data(format!("label {l} out of range for {class_count} classes")));
        }
        counts[l] += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::Data(format!("class {c} absent from the training labels")));
    }
    let n = labels.len() as f64;
    Ok(counts
        .iter()
        .map(|&nc| T::from_f64(n / (class_count as f64 * nc as f64)))
        .collect())
}

// ---------------------------------------------------------------------------
// Fold assembly
// ---------------------------------------------------------------------------

/// Pipeline knobs. Noise sigma is `noise_fraction` of the per-class
/// amplitude standard deviation measured on the raw training fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub k_neighbors: usize,
    pub noise_fraction: f64,
    pub jitter_max_shift: usize,
    pub scale_low: f64,
    pub scale_high: f64,
    /// Final per-class count target as a multiple of the post-SMOTE majority
    /// count; 1.0 disables augmented copies, larger values diversify.
    pub target_multiplier: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            k_neighbors: 5,
            noise_fraction: 0.10,
            jitter_max_shift: 3,
            scale_low: 0.9,
            scale_high: 1.1,
            target_multiplier: 1.5,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self, seq_len: usize) -> Result<()> {
        if self.jitter_max_shift >= seq_len {
            return Err(Error::Config(format!(
                "jitter_max_shift {} must be below the sequence length {seq_len}",
                self.jitter_max_shift
            )));
        }
        if !(0.0 < self.scale_low && self.scale_low <= self.scale_high && self.scale_high < 2.0) {
            return Err(Error::Config("scale range must sit inside (0, 2)".into()));
        }
        let mid = 0.5 * (self.scale_low + self.scale_high);
        if (mid - 1.0).abs() > 1e-9 {
            return Err(Error::Config("scale range must be symmetric about 1.0".into()));
        }
        if self.target_multiplier < 1.0 {
            return Err(Error::Config("target_multiplier must be >= 1.0".into()));
        }
        if self.k_neighbors < 1 {
            return Err(Error::Config("k_neighbors must be >= 1".into()));
        }
        if self.noise_fraction < 0.0 {
            return Err(Error::Config("noise_fraction must be >= 0".into()));
        }
        Ok(())
    }
}

/// Fully prepared training partition for one fold: raw-space SMOTE +
/// augmentation, then normalization. Built exclusively from training reads.
#[derive(Debug, Clone)]
pub struct TrainPartition<T> {
    /// Normalized rows, n × dim.
    pub features: Vec<T>,
    pub labels: Vec<usize>,
    pub normalizer: Normalizer<T>,
    pub class_weights: Vec<T>,
    /// Per-class noise sigmas (raw amplitude scale) used for augmentation.
    pub noise_sigmas: Vec<f64>,
    /// Per-class augmented-copy counts.
    pub augment_factors: Vec<usize>,
}

/// Builds the training partition for one fold. Touches only `train_idx`
/// rows of `source`; validation data is prepared separately with
/// [`prepare_validation`].
pub fn build_training_partition<T: Scalar>(
    source: &dyn SampleSource<T>,
    train_idx: &[usize],
    sensors: usize,
    config: &PipelineConfig,
    seed: u64,
) -> Result<TrainPartition<T>> {
    if train_idx.is_empty() {
        return Err(Error::Data("training partition is empty".into()));
    }
    let dim = source.feature_dim();
    config.validate(dim / sensors)?;
    let root = RngStream::new(seed);

    // Raw training rows and labels.
    let mut features: Vec<T> = Vec::with_capacity(train_idx.len() * dim);
    let mut labels: Vec<usize> = Vec::with_capacity(train_idx.len());
    for &i in train_idx {
        features.extend_from_slice(source.features(i));
        labels.push(source.label(i));
    }
    let class_count = labels.iter().max().map_or(0, |&m| m + 1).max(CLASS_COUNT);

    // Fit statistics on the raw fold before any resampling.
    let normalizer = fit_normalizer(&features, dim)?;
    let noise_sigmas = per_class_amplitude_sigma(&features, &labels, dim, class_count, config.noise_fraction);

    // SMOTE in raw amplitude space.
    let mut rng_smote = root.derive_named("smote", 0);
    let (mut features, mut labels) =
        smote_oversample(&features, &labels, dim, config.k_neighbors, &mut rng_smote)?;

    // Augmented copies toward ceil(multiplier × majority).
    let mut counts = vec![0usize; class_count];
    for &l in &labels {
        counts[l] += 1;
    }
    let majority = counts.iter().copied().max().unwrap_or(0);
    let target = (config.target_multiplier * majority as f64).ceil() as usize;
    let augment_factors: Vec<usize> =
        counts.iter().map(|&n| if n == 0 { 0 } else { target.saturating_sub(n) }).collect();

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng_aug = root.derive_named("augment", 0);
    for (cls, &copies) in augment_factors.iter().enumerate() {
        let members = &by_class[cls];
        let sigma = noise_sigmas[cls];
        for i in 0..copies {
            let src = members[i % members.len()];
            let row = features[src * dim..(src + 1) * dim].to_vec();
            let row = augment_noise(&row, sigma, &mut rng_aug)?;
            let row = augment_jitter(&row, sensors, config.jitter_max_shift, &mut rng_aug)?;
            let row = augment_scale(&row, config.scale_low, config.scale_high, &mut rng_aug)?;
            features.extend_from_slice(&row);
            labels.push(cls);
        }
    }

    apply_normalizer(&normalizer, &mut features);
    let class_weights = compute_class_weights(&labels, class_count)?;

    Ok(TrainPartition { features, labels, normalizer, class_weights, noise_sigmas, augment_factors })
}

/// Gathers and normalizes the validation rows with the training statistics.
pub fn prepare_validation<T: Scalar>(
    source: &dyn SampleSource<T>,
    valid_idx: &[usize],
    normalizer: &Normalizer<T>,
) -> (Vec<T>, Vec<usize>) {
    let dim = source.feature_dim();
    let mut features = Vec::with_capacity(valid_idx.len() * dim);
    let mut labels = Vec::with_capacity(valid_idx.len());
    for &i in valid_idx {
        features.extend_from_slice(source.features(i));
        labels.push(source.label(i));
    }
    apply_normalizer(normalizer, &mut features);
    (features, labels)
}

/// 10%-of-std style noise levels, per class, over all amplitude entries of
/// the class's raw training rows.
fn per_class_amplitude_sigma<T: Scalar>(
    features: &[T],
    labels: &[usize],
    dim: usize,
    class_count: usize,
    fraction: f64,
) -> Vec<f64> {
    let mut sum = vec![0.0f64; class_count];
    let mut sumsq = vec![0.0f64; class_count];
    let mut n = vec![0usize; class_count];
    for (row, &l) in features.chunks_exact(dim).zip(labels) {
        for &v in row {
            let vf = v.as_f64();
            sum[l] += vf;
            sumsq[l] += vf * vf;
        }
        n[l] += dim;
    }
    (0..class_count)
        .map(|c| {
            if n[c] == 0 {
                0.0
            } else {
                let mean = sum[c] / n[c] as f64;
                let var = (sumsq[c] / n[c] as f64 - mean * mean).max(0.0);
                fraction * var.sqrt()
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels_125_2625_1000() -> Vec<usize> {
        let mut l = vec![0usize; 125];
        l.extend(std::iter::repeat_n(1, 2625));
        l.extend(std::iter::repeat_n(2, 1000));
        l
    }

    #[test]
    fn folds_are_exhaustive_disjoint_and_sized() {
        let labels = labels_125_2625_1000();
        let plan = plan_folds(&labels, 10, 3, 42).unwrap();
        for rep in 0..3 {
            let mut seen = vec![false; labels.len()];
            for fold in 0..10 {
                let valid = plan.validation_indices(rep, fold);
                assert_eq!(valid.len(), 375, "rep {rep} fold {fold} holds {}", valid.len());
                for i in valid {
                    assert!(!seen[i], "sample {i} in two validation folds");
                    seen[i] = true;
                }
            }
            assert!(seen.iter().all(|&s| s), "repetition {rep} does not cover all samples");
        }
    }

    #[test]
    fn folds_are_stratified_within_one_sample() {
        let labels = labels_125_2625_1000();
        let plan = plan_folds(&labels, 10, 3, 7).unwrap();
        for rep in 0..3 {
            for fold in 0..10 {
                let valid = plan.validation_indices(rep, fold);
                let baseline = valid.iter().filter(|&&i| labels[i] == 0).count();
                let screw = valid.iter().filter(|&&i| labels[i] == 1).count();
                let crack = valid.iter().filter(|&&i| labels[i] == 2).count();
                assert!(baseline == 12 || baseline == 13, "baseline count {baseline}");
                assert!(screw == 262 || screw == 263, "screw count {screw}");
                assert_eq!(crack, 100);
            }
        }
    }

    #[test]
    fn fold_plan_is_deterministic_with_distinct_repetition_shuffles() {
        let labels = labels_125_2625_1000();
        let a = plan_folds(&labels, 10, 3, 11).unwrap();
        let b = plan_folds(&labels, 10, 3, 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.assignments[0], a.assignments[1]);
        assert_ne!(a.assignments[1], a.assignments[2]);
    }

    #[test]
    fn small_class_rejected() {
        let mut labels = vec![0usize; 100];
        labels.extend(std::iter::repeat_n(1, 9));
        assert!(plan_folds(&labels, 10, 1, 1).is_err());
        assert!(plan_folds(&labels, 1, 1, 1).is_err());
    }

    #[test]
    fn normalizer_degenerate_variance_floors() {
        // Two identical samples: every feature is constant.
        let rows = vec![2.5f64, -1.0, 2.5, -1.0];
        let norm = fit_normalizer(&rows, 2).unwrap();
        assert!(norm.std.iter().all(|&s| s == EPS_STD));
        let mut out = rows.clone();
        apply_normalizer(&norm, &mut out);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalizer_standardizes_training_rows() {
        let mut rng = RngStream::new(5);
        let dim = 7;
        let n = 400;
        let rows: Vec<f64> = (0..n * dim).map(|_| rng.uniform_in(-3.0, 9.0)).collect();
        let norm = fit_normalizer(&rows, dim).unwrap();
        let mut out = rows.clone();
        apply_normalizer(&norm, &mut out);
        for f in 0..dim {
            let mean: f64 = (0..n).map(|i| out[i * dim + f]).sum::<f64>() / n as f64;
            assert!(mean.abs() < 1e-6, "feature {f} mean {mean}");
        }
    }

    #[test]
    fn normalizer_apply_is_stateless() {
        let norm = Normalizer { mean: vec![1.0f64, 2.0], std: vec![2.0, 4.0], fitted_on: 10 };
        let mut rows = vec![3.0f64, 10.0];
        apply_normalizer(&norm, &mut rows);
        assert_eq!(rows, vec![1.0, 2.0]);
    }

    #[test]
    fn normalizer_rejects_empty() {
        assert!(fit_normalizer::<f64>(&[], 4).is_err());
    }

    #[test]
    fn smote_balances_to_majority() {
        let mut rng_data = RngStream::new(3);
        let dim = 6;
        let counts = [100usize, 500, 200];
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (cls, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                features.extend((0..dim).map(|_| rng_data.uniform_in(-1.0, 1.0) + cls as f64));
                labels.push(cls);
            }
        }
        let mut rng = RngStream::new(9);
        let (out_f, out_l) = smote_oversample(&features, &labels, dim, 5, &mut rng).unwrap();
        let mut new_counts = [0usize; 3];
        for &l in &out_l {
            new_counts[l] += 1;
        }
        assert_eq!(new_counts, [500, 500, 500]);
        assert_eq!(out_f.len(), out_l.len() * dim);
        // Originals preserved verbatim at the front.
        assert_eq!(&out_f[..features.len()], &features[..]);
    }

    #[test]
    fn smote_identical_pair_synthesizes_the_same_point() {
        let features = vec![
            1.0f64, 2.0, // class 0, sample A
            1.0, 2.0, // class 0, sample B (identical)
            0.0, 0.0,
            0.1, 0.1,
            0.2, 0.2,
            0.3, 0.3, // class 1 ×4 (majority)
        ];
        let labels = vec![0, 0, 1, 1, 1, 1];
        let mut rng = RngStream::new(4);
        let (out_f, out_l) = smote_oversample(&features, &labels, 2, 5, &mut rng).unwrap();
        let synth: Vec<&[f64]> = out_l
            .iter()
            .enumerate()
            .skip(6)
            .filter(|(_, &l)| l == 0)
            .map(|(i, _)| &out_f[i * 2..(i + 1) * 2])
            .collect();
        assert_eq!(synth.len(), 2);
        for s in synth {
            assert_eq!(s, &[1.0, 2.0]);
        }
    }

    #[test]
    fn smote_rejects_singleton_class() {
        let features = vec![0.0f64, 1.0, 1.0, 0.0, 2.0, 2.0];
        let labels = vec![0, 1, 1];
        let mut rng = RngStream::new(1);
        let err = smote_oversample(&features, &labels, 2, 5, &mut rng).unwrap_err();
        assert!(err.to_string().contains("at least 2"), "{err}");
    }

    #[test]
    fn smote_synthetics_lie_on_neighbor_segments() {
        let mut rng_data = RngStream::new(8);
        let dim = 4;
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..10 {
            features.extend((0..dim).map(|_| rng_data.uniform_in(-2.0, 2.0)));
            labels.push(0);
        }
        for _ in 0..25 {
            features.extend((0..dim).map(|_| rng_data.uniform_in(5.0, 6.0)));
            labels.push(1);
        }
        let mut rng = RngStream::new(2);
        let (out_f, out_l) = smote_oversample(&features, &labels, dim, 3, &mut rng).unwrap();
        // Every synthetic must be a convex combination of two originals of
        // its class: check coordinates are affine with a single u in [0,1].
        for (i, &l) in out_l.iter().enumerate().skip(35) {
            assert_eq!(l, 0);
            let s = &out_f[i * dim..(i + 1) * dim];
            let mut found = false;
            'outer: for a in 0..10 {
                let xa = &features[a * dim..(a + 1) * dim];
                for b in 0..10 {
                    if a == b {
                        continue;
                    }
                    let xb = &features[b * dim..(b + 1) * dim];
                    let mut u: Option<f64> = None;
                    let mut ok = true;
                    for d in 0..dim {
                        let denom = xb[d] - xa[d];
                        if denom.abs() < 1e-12 {
                            if (s[d] - xa[d]).abs() > 1e-9 {
                                ok = false;
                                break;
                            }
                            continue;
                        }
                        let cand = (s[d] - xa[d]) / denom;
                        match u {
                            None => u = Some(cand),
                            Some(prev) if (prev - cand).abs() > 1e-6 => {
                                ok = false;
                                break;
                            }
                            _ => {}
                        }
                    }
                    if ok {
                        if let Some(u) = u {
                            if (-1e-9..=1.0 + 1e-9).contains(&u) {
                                found = true;
                                break 'outer;
                            }
                        } else {
                            found = true;
                            break 'outer;
                        }
                    }
                }
            }
            assert!(found, "synthetic {i} is not on any same-class segment");
        }
    }

    #[test]
    fn noise_zero_sigma_is_identity_and_negative_rejected() {
        let row = vec![1.0f64, -2.0, 3.0];
        let mut rng = RngStream::new(1);
        assert_eq!(augment_noise(&row, 0.0, &mut rng).unwrap(), row);
        assert!(augment_noise(&row, -1.0, &mut rng).is_err());
    }

    #[test]
    fn noise_empirical_std_matches_sigma() {
        let n = 100_000;
        let row = vec![0.0f64; n];
        let mut rng = RngStream::new(6);
        let sigma = 3.7;
        let out = augment_noise(&row, sigma, &mut rng).unwrap();
        let mean: f64 = out.iter().sum::<f64>() / n as f64;
        let var: f64 = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let std = var.sqrt();
        assert!((std - sigma).abs() / sigma < 0.02, "std {std} vs sigma {sigma}");
    }

    #[test]
    fn jitter_rolls_all_rows_by_a_common_shift() {
        // Force shift = +1 by using max_shift 1 and scanning seeds for one
        // that draws +1; the roll itself is what's under test.
        let sensors = 2;
        let row: Vec<f64> = (0..12).map(|i| i as f64).collect();
        let mut seed = 0;
        loop {
            let mut rng = RngStream::new(seed);
            if rng.int_in(-1, 1) == 1 {
                break;
            }
            seed += 1;
        }
        let mut rng = RngStream::new(seed);
        let out = augment_jitter(&row, sensors, 1, &mut rng).unwrap();
        assert_eq!(out[..6], [5.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        assert_eq!(out[6..], [11.0, 6.0, 7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn jitter_zero_shift_and_full_period_are_identity() {
        let row: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let mut rng = RngStream::new(1);
        let out = augment_jitter(&row, 1, 0, &mut rng).unwrap();
        assert_eq!(out, row);
        // Full-period circular roll equals identity.
        let mut rolled = row.clone();
        rolled.rotate_right(10 % 10);
        assert_eq!(rolled, row);
    }

    #[test]
    fn jitter_rejects_shift_at_or_beyond_length() {
        let row = vec![0.0f64; 10];
        let mut rng = RngStream::new(1);
        assert!(augment_jitter(&row, 1, 10, &mut rng).is_err());
    }

    #[test]
    fn scale_preserves_ratios_and_bounds() {
        let row = vec![2.0f64, -4.0, 8.0];
        let mut rng = RngStream::new(3);
        let out = augment_scale(&row, 0.9, 1.1, &mut rng).unwrap();
        let r = out[0] / row[0];
        for (o, i) in out.iter().zip(&row) {
            assert!((o / i - r).abs() < 1e-12);
        }
        assert!((0.9..=1.1).contains(&r));

        // Degenerate range [1, 1] is the identity.
        let id = augment_scale(&row, 1.0, 1.0, &mut rng).unwrap();
        assert_eq!(id, row);
    }

    #[test]
    fn class_weights_formula_and_identity() {
        let labels = labels_125_2625_1000();
        let w: Vec<f64> = compute_class_weights(&labels, 3).unwrap();
        assert!((w[0] - 10.0).abs() < 1e-12);
        assert!((w[1] - 0.47619047619).abs() < 1e-9);
        assert!((w[2] - 1.25).abs() < 1e-12);
        // Σ w_c n_c = N
        let total: f64 = w[0] * 125.0 + w[1] * 2625.0 + w[2] * 1000.0;
        assert!((total - 3750.0).abs() < 1e-9);

        let balanced = vec![0usize, 1, 2, 0, 1, 2];
        let w: Vec<f64> = compute_class_weights(&balanced, 3).unwrap();
        assert!(w.iter().all(|&v| (v - 1.0).abs() < 1e-12));

        assert!(compute_class_weights::<f64>(&[0, 0, 1], 3).is_err());
    }

    fn toy_source(n_per_class: &[usize], dim: usize, seed: u64) -> (Vec<f64>, Vec<usize>) {
        let mut rng = RngStream::new(seed);
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (cls, &n) in n_per_class.iter().enumerate() {
            for _ in 0..n {
                features.extend((0..dim).map(|_| rng.uniform_in(0.0, 10.0) + 3.0 * cls as f64));
                labels.push(cls);
            }
        }
        (features, labels)
    }

    #[test]
    fn build_partition_with_multiplier_one_equals_smote_counts() {
        let (features, labels) = toy_source(&[20, 50, 30], 8, 10);
        let source = SliceSource { features: &features, labels: &labels, dim: 8 };
        let idx: Vec<usize> = (0..labels.len()).collect();
        let config = PipelineConfig { target_multiplier: 1.0, jitter_max_shift: 2, ..Default::default() };
        let part = build_training_partition(&source, &idx, 2, &config, 5).unwrap();
        let mut counts = [0usize; 3];
        for &l in &part.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [50, 50, 50]);
        assert!(part.augment_factors.iter().all(|&f| f == 0));
    }

    #[test]
    fn build_partition_multiplier_two_doubles_balanced_classes() {
        let (features, labels) = toy_source(&[40, 40, 40], 8, 11);
        let source = SliceSource { features: &features, labels: &labels, dim: 8 };
        let idx: Vec<usize> = (0..labels.len()).collect();
        let config = PipelineConfig { target_multiplier: 2.0, jitter_max_shift: 2, ..Default::default() };
        let part = build_training_partition(&source, &idx, 2, &config, 5).unwrap();
        let mut counts = [0usize; 3];
        for &l in &part.labels {
            counts[l] += 1;
        }
        assert_eq!(counts, [80, 80, 80]);
    }

    #[test]
    fn validation_rows_never_read_during_training_prep() {
        let (features, labels) = toy_source(&[30, 60, 40], 12, 12);
        let source = SliceSource { features: &features, labels: &labels, dim: 12 };
        let counting = CountingSource::new(&source);
        let n = labels.len();
        let valid_idx: Vec<usize> = (0..n).step_by(5).collect();
        let train_idx: Vec<usize> = (0..n).filter(|i| i % 5 != 0).collect();

        let config = PipelineConfig { jitter_max_shift: 2, ..Default::default() };
        let part = build_training_partition(&counting, &train_idx, 3, &config, 99).unwrap();
        for &i in &valid_idx {
            assert_eq!(counting.read_count(i), 0, "validation sample {i} was read");
        }
        // Validation transform afterwards uses only stored statistics.
        let before: Vec<f64> = valid_idx.iter().flat_map(|&i| source.features(i).to_vec()).collect();
        let (valid_features, valid_labels) = prepare_validation(&counting, &valid_idx, &part.normalizer);
        assert_eq!(valid_labels.len(), valid_idx.len());
        // Raw source rows are untouched by the pipeline.
        let after: Vec<f64> = valid_idx.iter().flat_map(|&i| source.features(i).to_vec()).collect();
        assert_eq!(before, after);
        assert_eq!(valid_features.len(), valid_idx.len() * 12);
    }

    #[test]
    fn partition_is_deterministic_in_seed() {
        let (features, labels) = toy_source(&[25, 45, 35], 10, 13);
        let source = SliceSource { features: &features, labels: &labels, dim: 10 };
        let idx: Vec<usize> = (0..labels.len()).collect();
        let config = PipelineConfig { jitter_max_shift: 2, ..Default::default() };
        let a = build_training_partition(&source, &idx, 2, &config, 7).unwrap();
        let b = build_training_partition(&source, &idx, 2, &config, 7).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        let c = build_training_partition(&source, &idx, 2, &config, 8).unwrap();
        assert_ne!(a.features, c.features);
    }
}
