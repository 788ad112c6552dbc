//! Sensor importance from classification-head attention.
//!
//! Per sample, the head's four attention distributions over the 28 sensors
//! are averaged into one importance profile (still a probability vector);
//! profiles are aggregated across validation samples and ensemble members
//! into per-sensor mean/std scores, ranked, and used to drive sensor-subset
//! (placement) evaluations by masking non-selected channels.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::MetricsReport;
use crate::model::ModelConfig;
use crate::pipeline::{PipelineConfig, SampleSource};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::train::{run_cross_validation, CampaignOptions, TrainConfig};
use crate::{Error, Result};

/// Aggregated per-sensor importance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceProfile {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// Number of (sample, model) profiles aggregated.
    pub sample_count: usize,
    pub model_count: usize,
    #[serde(default)]
    pub provenance: String,
}

impl ImportanceProfile {
    pub fn validate(&self) -> Result<()> {
        if self.mean.iter().any(|&m| m < 0.0) {
            return Err(Error::Data("importance means must be non-negative".into()));
        }
        let total: f64 = self.mean.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!("importance means sum to {total}, expected 1")));
        }
        Ok(())
    }
}

/// Head-averaged per-sample importance: `[B, heads, sensors]` attention to
/// `[B, sensors]` probability rows. Rejects de-normalized attention rows.
pub fn per_sample_importance<T: Scalar>(attention: &Tensor<T>) -> Result<Vec<f64>> {
    let shape = attention.shape();
    if shape.len() != 3 {
        return Err(Error::Data(format!("expected [B, heads, sensors] attention, got {shape:?}")));
    }
    let (b, heads, sensors) = (shape[0], shape[1], shape[2]);
    for (i, row) in attention.data().chunks_exact(sensors).enumerate() {
        let sum: f64 = row.iter().map(|v| v.as_f64()).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Data(format!(
                "attention head row {i} sums to {sum}, expected 1 within 1e-6"
            )));
        }
    }
    let mut out = vec![0.0f64; b * sensors];
    for bi in 0..b {
        for h in 0..heads {
            let row = &attention.data()[(bi * heads + h) * sensors..(bi * heads + h + 1) * sensors];
            for (j, v) in row.iter().enumerate() {
                out[bi * sensors + j] += v.as_f64();
            }
        }
        for v in &mut out[bi * sensors..(bi + 1) * sensors] {
            *v /= heads as f64;
        }
    }
    Ok(out)
}

/// Streaming accumulator over (sample, model) importance profiles.
#[derive(Debug, Clone)]
pub struct ImportanceAccumulator {
    sum: Vec<f64>,
    sumsq: Vec<f64>,
    profiles: usize,
    models: usize,
    pub provenance: String,
}

impl ImportanceAccumulator {
    pub fn new(sensors: usize) -> Self {
        ImportanceAccumulator {
            sum: vec![0.0; sensors],
            sumsq: vec![0.0; sensors],
            profiles: 0,
            models: 0,
            provenance: String::new(),
        }
    }

    /// Adds one model's worth of per-sample profiles (`[n, sensors]`).
    pub fn add_model_profiles(&mut self, profiles: &[f64], sensors: usize) {
        assert_eq!(profiles.len() % sensors, 0);
        for row in profiles.chunks_exact(sensors) {
            for (j, &v) in row.iter().enumerate() {
                self.sum[j] += v;
                self.sumsq[j] += v * v;
            }
            self.profiles += 1;
        }
        self.models += 1;
    }

    pub fn finish(&self) -> ImportanceProfile {
        let n = self.profiles.max(1) as f64;
        let mean: Vec<f64> = self.sum.iter().map(|s| s / n).collect();
        let std: Vec<f64> = self
            .sumsq
            .iter()
            .zip(&mean)
            .map(|(sq, m)| ((sq / n - m * m).max(0.0)).sqrt())
            .collect();
        ImportanceProfile {
            mean,
            std,
            sample_count: self.profiles,
            model_count: self.models,
            provenance: self.provenance.clone(),
        }
    }
}

/// Aggregates an explicit set of per-sample profiles (`[n, sensors]` rows)
/// from `models` models into mean/std per sensor.
pub fn aggregate_importance(profiles: &[f64], sensors: usize, models: usize) -> Result<ImportanceProfile> {
    if profiles.is_empty() {
        return Err(Error::Data("no importance profiles to aggregate".into()));
    }
    let mut acc = ImportanceAccumulator::new(sensors);
    acc.add_model_profiles(profiles, sensors);
    acc.models = models;
    Ok(acc.finish())
}

/// Sensor ordering by descending mean importance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SensorRanking {
    /// Permutation of 0..sensors, most important first.
    pub order: Vec<usize>,
}

/// Mean differences below this count as ties (broken by lower index).
pub const RANK_TIE_TOLERANCE: f64 = 1e-9;

/// Ranks sensors by mean importance, descending; means within
/// [`RANK_TIE_TOLERANCE`] are tied and ordered by sensor index.
pub fn rank_sensors(profile: &ImportanceProfile) -> SensorRanking {
    let mut order: Vec<usize> = (0..profile.mean.len()).collect();
    let quantize = |v: f64| (v / RANK_TIE_TOLERANCE).round() as i64;
    order.sort_by_key(|&j| (std::cmp::Reverse(quantize(profile.mean[j])), j));
    SensorRanking { order }
}

/// Zeroes all non-selected sensor rows of a feature matrix (rows are
/// `[sensors × seq]` flattened samples). Intended for normalized features;
/// idempotent.
pub fn subset_mask<T: Scalar>(
    features: &mut [T],
    sensors: usize,
    seq: usize,
    subset: &[usize],
) -> Result<()> {
    if subset.is_empty() {
        return Err(Error::Config("sensor subset must be non-empty".into()));
    }
    if subset.iter().any(|&j| j >= sensors) {
        return Err(Error::Config(format!("sensor subset index out of range 0..{sensors}")));
    }
    let keep: Vec<bool> = (0..sensors).map(|j| subset.contains(&j)).collect();
    let dim = sensors * seq;
    for row in features.chunks_exact_mut(dim) {
        for (j, &k) in keep.iter().enumerate() {
            if !k {
                for v in &mut row[j * seq..(j + 1) * seq] {
                    *v = T::zero();
                }
            }
        }
    }
    Ok(())
}

/// Retrains under the given (reduced) protocol with all channels outside
/// `subset` masked to zero after normalization, and reports the aggregate
/// metrics.
pub fn evaluate_subset<T: Scalar>(
    source: &dyn SampleSource<T>,
    subset: &[usize],
    train_config: &TrainConfig,
    pipeline_config: &PipelineConfig,
    model_config: &ModelConfig,
    campaign_seed: u64,
) -> Result<MetricsReport> {
    if subset.is_empty() {
        return Err(Error::Config("sensor subset must be non-empty".into()));
    }
    let options = CampaignOptions { output_dir: None, sensor_mask: Some(subset.to_vec()) };
    let result = run_cross_validation(
        source,
        train_config,
        pipeline_config,
        model_config,
        campaign_seed,
        &options,
    )?;
    Ok(result.aggregate_metrics)
}

/// One point of the importance-vs-accuracy curve.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubsetPoint {
    pub m: usize,
    pub subset: Vec<usize>,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    pub f1_macro: f64,
}

/// Evaluates the top-m sensor subsets of a ranking for every requested m.
pub fn subset_curve<T: Scalar>(
    source: &dyn SampleSource<T>,
    ranking: &SensorRanking,
    m_list: &[usize],
    train_config: &TrainConfig,
    pipeline_config: &PipelineConfig,
    model_config: &ModelConfig,
    campaign_seed: u64,
) -> Result<Vec<SubsetPoint>> {
    let mut points = Vec::with_capacity(m_list.len());
    for &m in m_list {
        if m == 0 || m > ranking.order.len() {
            return Err(Error::Config(format!("subset size {m} out of range")));
        }
        let subset: Vec<usize> = ranking.order[..m].to_vec();
        let metrics = evaluate_subset(
            source,
            &subset,
            train_config,
            pipeline_config,
            model_config,
            campaign_seed,
        )?;
        let f1_macro = metrics.f1.iter().sum::<f64>() / metrics.f1.len() as f64;
        points.push(SubsetPoint {
            m,
            subset,
            accuracy: metrics.accuracy,
            balanced_accuracy: metrics.balanced_accuracy,
            f1_macro,
        });
    }
    Ok(points)
}

// ---------------------------------------------------------------------------
// Artifact writers
// ---------------------------------------------------------------------------

pub fn write_importance_csv(profile: &ImportanceProfile, path: &Path) -> Result<()> {
    let mut out = String::from("sensor,mean,std,n_samples,n_models\n");
    for (j, (m, s)) in profile.mean.iter().zip(&profile.std).enumerate() {
        out.push_str(&format!(
            "{j},{m:.9},{s:.9},{},{}\n",
            profile.sample_count, profile.model_count
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_ranking_json(profile: &ImportanceProfile, path: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct RankingDoc<'a> {
        order: &'a [usize],
        mean: &'a [f64],
        std: &'a [f64],
        provenance: &'a str,
    }
    let ranking = rank_sensors(profile);
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(path)?),
        &RankingDoc {
            order: &ranking.order,
            mean: &profile.mean,
            std: &profile.std,
            provenance: &profile.provenance,
        },
    )?;
    Ok(())
}

pub fn write_subset_curve_csv(points: &[SubsetPoint], path: &Path) -> Result<()> {
    let mut out = String::from("m,subset,accuracy,balanced_accuracy,f1_macro\n");
    for p in points {
        let subset = p
            .subset
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&format!(
            "{},{subset},{:.6},{:.6},{:.6}\n",
            p.m, p.accuracy, p.balanced_accuracy, p.f1_macro
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
