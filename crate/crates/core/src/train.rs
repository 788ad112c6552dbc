//! Training orchestration: Adam, early stopping with best-epoch restore,
//! learning-rate reduction on plateau, per-fold model ensembles, and the
//! repeated stratified cross-validation campaign.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::eval::{confusion, metrics_from_confusion, roc_auc_ovr_macro, ConfusionMatrix, MetricsReport};
use crate::importance::{per_sample_importance, ImportanceAccumulator, ImportanceProfile};
use crate::model::{
    init_params, model_forward, probabilities, save_checkpoint, ModelConfig, ModelParams,
};
use crate::pipeline::{
    build_training_partition, plan_folds, prepare_validation, PipelineConfig, SampleSource,
};
use crate::rng::RngStream;
use crate::scalar::Scalar;
use crate::tensor::tape::{Mode, Tape};
use crate::tensor::Tensor;
use crate::{Error, Result, CLASS_COUNT};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub lambda_l1: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub min_lr: f64,
    pub batch_size: usize,
    pub ensemble_size: usize,
    pub repetitions: usize,
    pub folds: usize,
    /// Validation-loss deltas below this do not count as improvement.
    pub improvement_threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            lambda_l1: 1e-4,
            max_epochs: 200,
            early_stop_patience: 30,
            plateau_factor: 0.5,
            plateau_patience: 10,
            min_lr: 1e-6,
            batch_size: 32,
            ensemble_size: 10,
            repetitions: 3,
            folds: 10,
            improvement_threshold: 1e-6,
        }
    }
}

impl TrainConfig {
    /// Full protocol: 3 × 10-fold with a 10-model ensemble per fold.
    pub fn paper_scale() -> Self {
        TrainConfig::default()
    }

    /// Desk-scale default: single repetition, two-model ensembles.
    pub fn desk_scale() -> Self {
        TrainConfig { ensemble_size: 2, repetitions: 1, ..TrainConfig::default() }
    }

    /// Reduced evaluation protocol: 1 repetition, 5 folds, single models,
    /// at most 60 epochs. Batch 64 keeps the GEMMs efficient.
    pub fn reduced_protocol() -> Self {
        TrainConfig {
            ensemble_size: 1,
            repetitions: 1,
            folds: 5,
            max_epochs: 60,
            batch_size: 64,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.early_stop_patience < 1 || self.plateau_patience < 1 {
            return Err(Error::Config("patience values must be >= 1".into()));
        }
        if !(0.0 < self.plateau_factor && self.plateau_factor < 1.0) {
            return Err(Error::Config("plateau_factor must be in (0, 1)".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be >= 2".into()));
        }
        if self.ensemble_size < 1 {
            return Err(Error::Config("ensemble_size must be >= 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("folds must be >= 2".into()));
        }
        if self.repetitions < 1 {
            return Err(Error::Config("repetitions must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 || self.min_lr <= 0.0 {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.lambda_l1 < 0.0 {
            return Err(Error::Config("lambda_l1 must be >= 0".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

/// First/second moment buffers plus the step counter.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(param_count: usize) -> Self {
        AdamState { m: vec![T::zero(); param_count], v: vec![T::zero(); param_count], step: 0 }
    }
}

/// Standard bias-corrected Adam update over a flat parameter view.
/// Rejects non-finite gradients with a diagnostic.
pub fn adam_step<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    state: &mut AdamState<T>,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Numeric("adam buffers disagree in length".into()));
    }
    if let Some(pos) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!(
            "non-finite gradient at flat parameter index {pos}"
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let b1 = T::from_f64(beta1);
    let b2 = T::from_f64(beta2);
    let one = T::one();
    let bc1 = T::from_f64(1.0 - beta1.powi(t));
    let bc2 = T::from_f64(1.0 - beta2.powi(t));
    let lr_t = T::from_f64(lr);
    let eps_t = T::from_f64(eps);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = b1 * state.m[i] + (one - b1) * g;
        state.v[i] = b2 * state.v[i] + (one - b2) * g * g;
        let m_hat = state.m[i] / bc1;
        let v_hat = state.v[i] / bc2;
        params[i] = params[i] - lr_t * m_hat / (v_hat.sqrt() + eps_t);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Early stopping and plateau scheduling
// ---------------------------------------------------------------------------

/// Early-stopping monitor on validation loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    pub threshold: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    counter: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopSignal {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize, threshold: f64) -> Self {
        EarlyStopping { patience, threshold, best_loss: f64::INFINITY, best_epoch: 0, counter: 0 }
    }

    /// Feed the validation loss of `epoch` (1-based).
    pub fn observe(&mut self, epoch: usize, valid_loss: f64) -> StopSignal {
        if valid_loss < self.best_loss - self.threshold {
            self.best_loss = valid_loss;
            self.best_epoch = epoch;
            self.counter = 0;
            StopSignal::Improved
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                StopSignal::Stop
            } else {
                StopSignal::Continue
            }
        }
    }
}

/// Learning-rate reduction on plateau. The improvement counter resets both
/// on improvement and after a reduction.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub threshold: f64,
    best: f64,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, threshold: f64) -> Self {
        PlateauScheduler { lr, factor, patience, min_lr, threshold, best: f64::INFINITY, counter: 0 }
    }

    /// Feed a validation loss; returns the learning rate to use next.
    pub fn observe(&mut self, valid_loss: f64) -> f64 {
        if valid_loss < self.best - self.threshold {
            self.best = valid_loss;
            self.counter = 0;
        } else {
            self.counter += 1;
            if self.counter >= self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.counter = 0;
            }
        }
        self.lr
    }
}

// ---------------------------------------------------------------------------
// Single-model training
// ---------------------------------------------------------------------------

/// Loss/accuracy trace of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub valid_loss: f64,
    pub valid_accuracy: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_epoch: usize,
    pub best_valid_loss: f64,
    pub model_seed: u64,
}

/// Borrowed feature matrix with labels, shaped `[n, sensors × seq]`.
#[derive(Clone, Copy)]
pub struct DataSplit<'a, T> {
    pub features: &'a [T],
    pub labels: &'a [usize],
    pub sensors: usize,
    pub seq: usize,
}

impl<'a, T: Scalar> DataSplit<'a, T> {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn dim(&self) -> usize {
        self.sensors * self.seq
    }

    fn gather(&self, idx: &[usize]) -> (Tensor<T>, Vec<usize>) {
        let dim = self.dim();
        let mut data = Vec::with_capacity(idx.len() * dim);
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            data.extend_from_slice(&self.features[i * dim..(i + 1) * dim]);
            labels.push(self.labels[i]);
        }
        (Tensor::new(&[idx.len(), self.sensors, self.seq], data), labels)
    }
}

/// Weighted-CE validation loss and accuracy, evaluated in eval mode.
pub fn evaluate_split<T: Scalar>(
    params: &ModelParams<T>,
    split: DataSplit<T>,
    class_weights: &[T],
) -> Result<(f64, f64)> {
    let mut total_loss = 0.0f64;
    let mut correct = 0usize;
    let n = split.len();
    let chunk = 256;
    let mut i = 0;
    while i < n {
        let idx: Vec<usize> = (i..(i + chunk).min(n)).collect();
        let (x, labels) = split.gather(&idx);
        let out = crate::model::forward_eval(&x, params)?;
        let (loss, _) = crate::tensor::ops::cross_entropy_forward(&out.logits, &labels, class_weights);
        total_loss += loss.as_f64() * idx.len() as f64;
        let c = params.config.classes;
        for (row, &t) in out.logits.data().chunks_exact(c).zip(&labels) {
            if crate::model::argmax_row(row) == t {
                correct += 1;
            }
        }
        i += chunk;
    }
    Ok((total_loss / n as f64, correct as f64 / n as f64))
}

/// Trains one model: weighted cross entropy plus the L1 penalty on the
/// classification head's attention projections, Adam updates, per-epoch
/// validation, plateau LR reduction, early stopping, and best-epoch restore.
pub fn train_model<T: Scalar>(
    train: DataSplit<T>,
    valid: DataSplit<T>,
    class_weights: &[T],
    model_seed: u64,
    config: &TrainConfig,
    model_config: &ModelConfig,
) -> Result<(ModelParams<T>, TrainRecord)> {
    config.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }

    let mut params = init_params::<T>(model_config, model_seed)?;
    let total_params = params.param_count();
    let mut adam = AdamState::<T>::new(total_params);
    let mut stopper = EarlyStopping::new(config.early_stop_patience, config.improvement_threshold);
    let mut scheduler = PlateauScheduler::new(
        config.learning_rate,
        config.plateau_factor,
        config.plateau_patience,
        config.min_lr,
        config.improvement_threshold,
    );
    let root = RngStream::new(model_seed);
    let lambda = T::from_f64(config.lambda_l1);

    let mut best_params = params.clone();
    let mut record = TrainRecord {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_epoch: 0,
        best_valid_loss: f64::INFINITY,
        model_seed,
    };
    let mut lr = config.learning_rate;

    for epoch in 1..=config.max_epochs {
        let mut shuffle_rng = root.derive_named("shuffle", epoch as u64);
        let mut dropout_rng = root.derive_named("dropout", epoch as u64);
        let order = shuffle_rng.permutation(train.len());

        let mut epoch_loss = 0.0f64;
        let mut epoch_correct = 0usize;
        for (batch_no, batch_idx) in order.chunks(config.batch_size).enumerate() {
            let (x, labels) = train.gather(batch_idx);
            let mut tape = Tape::new(Mode::Train);
            let pass = model_forward(&mut tape, &x, &mut params, &mut dropout_rng)?;
            let ce = tape.cross_entropy(pass.logits, &labels, class_weights);
            let l1 = tape.l1_penalty(&pass.classifier_attention_weights, lambda);
            let loss = tape.add(ce, l1);
            let loss_value = tape.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {epoch}, batch {batch_no}"
                )));
            }
            epoch_loss += loss_value * batch_idx.len() as f64;
            let c = model_config.classes;
            for (row, &t) in tape.value(pass.logits).data().chunks_exact(c).zip(&labels) {
                if crate::model::argmax_row(row) == t {
                    epoch_correct += 1;
                }
            }

            let grads = tape.backward(loss);
            // Flatten gradients in parameter order and step.
            let mut flat_grads: Vec<T> = Vec::with_capacity(total_params);
            for (&var, slot) in pass.param_vars.iter().zip(params.learnable_mut()) {
                match grads.get(var) {
                    Some(g) => flat_grads.extend_from_slice(g.data()),
                    None => flat_grads.extend(std::iter::repeat_n(T::zero(), slot.numel())),
                }
            }
            let mut flat_params: Vec<T> = Vec::with_capacity(total_params);
            for slot in params.learnable_mut() {
                flat_params.extend_from_slice(slot.data());
            }
            adam_step(&mut flat_params, &flat_grads, &mut adam, lr, 0.9, 0.999, 1e-8)
                .map_err(|e| Error::Numeric(format!("epoch {epoch}, batch {batch_no}: {e}")))?;
            let mut offset = 0;
            for slot in params.learnable_mut() {
                let n = slot.numel();
                slot.data_mut().copy_from_slice(&flat_params[offset..offset + n]);
                offset += n;
            }
        }

        let (valid_loss, valid_accuracy) = evaluate_split(&params, valid, class_weights)?;
        lr = scheduler.observe(valid_loss);
        record.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            train_accuracy: epoch_correct as f64 / train.len() as f64,
            valid_loss,
            valid_accuracy,
            lr,
        });

        match stopper.observe(epoch, valid_loss) {
            StopSignal::Improved => {
                best_params = params.clone();
                record.best_epoch = epoch;
                record.best_valid_loss = valid_loss;
            }
            StopSignal::Continue => {}
            StopSignal::Stop => {
                record.stopped_epoch = epoch;
                break;
            }
        }
    }
    if record.stopped_epoch == 0 {
        record.stopped_epoch = record.epochs.len();
    }
    if record.best_epoch == 0 {
        // No epoch improved on infinity only if all losses were NaN-free
        // equal to it; keep the final state in that degenerate case.
        record.best_epoch = record.stopped_epoch;
        best_params = params;
    }
    Ok((best_params, record))
}

// ---------------------------------------------------------------------------
// Ensembles
// ---------------------------------------------------------------------------

/// Trains `ensemble_size` models on identical fold data with seeds
/// `base_seed + i`.
pub fn train_fold_ensemble<T: Scalar>(
    train: DataSplit<T>,
    valid: DataSplit<T>,
    class_weights: &[T],
    config: &TrainConfig,
    model_config: &ModelConfig,
    base_seed: u64,
) -> Result<Vec<(ModelParams<T>, TrainRecord)>> {
    let mut members = Vec::with_capacity(config.ensemble_size);
    for i in 0..config.ensemble_size {
        let seed = base_seed + i as u64;
        let member = train_model(train, valid, class_weights, seed, config, model_config)
            .map_err(|e| Error::Numeric(format!("ensemble member {i} (seed {seed}): {e}")))?;
        members.push(member);
    }
    Ok(members)
}

/// Ensemble prediction by probability averaging.
pub struct EnsemblePrediction {
    pub classes: Vec<usize>,
    /// `[n, classes]` mean probabilities.
    pub mean_probabilities: Vec<f64>,
    /// `[n, classes]` across-member standard deviation (uncertainty signal).
    pub probability_std: Vec<f64>,
}

pub fn ensemble_predict<T: Scalar>(
    members: &[ModelParams<T>],
    x: &Tensor<T>,
) -> Result<EnsemblePrediction> {
    if members.is_empty() {
        return Err(Error::Data("ensemble_predict needs at least one member".into()));
    }
    let c = members[0].config.classes;
    let n = x.shape()[0];
    let mut sum = vec![0.0f64; n * c];
    let mut sumsq = vec![0.0f64; n * c];
    for member in members {
        let out = crate::model::forward_eval(x, member)?;
        let probs = probabilities(&out.logits);
        for (i, &p) in probs.data().iter().enumerate() {
            let pf = p.as_f64();
            sum[i] += pf;
            sumsq[i] += pf * pf;
        }
    }
    let k = members.len() as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / k).collect();
    let std: Vec<f64> = sumsq
        .iter()
        .zip(&mean)
        .map(|(sq, m)| ((sq / k - m * m).max(0.0)).sqrt())
        .collect();
    let classes = mean
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    Ok(EnsemblePrediction { classes, mean_probabilities: mean, probability_std: std })
}

// ---------------------------------------------------------------------------
// Cross-validation campaign
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldOutcome {
    pub repetition: usize,
    pub fold: usize,
    pub metrics: MetricsReport,
    pub confusion: ConfusionMatrix,
    pub member_records: Vec<TrainRecord>,
    /// Best-epoch validation accuracy per ensemble member.
    pub member_accuracies: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldFailure {
    pub repetition: usize,
    pub fold: usize,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CampaignStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CampaignResult {
    pub status: CampaignStatus,
    pub campaign_seed: u64,
    pub folds: Vec<FoldOutcome>,
    pub failures: Vec<FoldFailure>,
    pub aggregate_confusion: ConfusionMatrix,
    pub aggregate_metrics: MetricsReport,
    pub importance: ImportanceProfile,
}

/// Artifact sink and overrides for a campaign run. When `output_dir` is
/// set, member checkpoints and raw attention dumps are written as they are
/// produced. `sensor_mask`, when present, zeroes all other sensor channels
/// after normalization (subset-placement evaluation).
#[derive(Default)]
pub struct CampaignOptions<'a> {
    pub output_dir: Option<&'a Path>,
    pub sensor_mask: Option<Vec<usize>>,
}

/// Runs the full repeated stratified cross-validation campaign.
///
/// Per (repetition, fold): builds the leakage-safe training partition,
/// trains the ensemble, evaluates the untouched validation fold with
/// probability averaging, and collects classification-head attention for
/// the sensor-importance analysis. Fold failures are recorded and the
/// campaign continues; the final status is `Partial` if anything failed.
pub fn run_cross_validation<T: Scalar>(
    source: &dyn SampleSource<T>,
    train_config: &TrainConfig,
    pipeline_config: &PipelineConfig,
    model_config: &ModelConfig,
    campaign_seed: u64,
    options: &CampaignOptions,
) -> Result<CampaignResult> {
    train_config.validate()?;
    model_config.validate()?;
    let labels: Vec<usize> = (0..source.len()).map(|i| source.label(i)).collect();
    let root = RngStream::new(campaign_seed);
    let plan = plan_folds(&labels, train_config.folds, train_config.repetitions, root.derive_named("folds", 0).seed())?;

    let sensors = model_config.sensors;
    let seq = model_config.sequence_length;
    if sensors * seq != source.feature_dim() {
        return Err(Error::Data(format!(
            "model geometry {sensors}×{seq} does not match feature dim {}",
            source.feature_dim()
        )));
    }

    let mut folds = Vec::new();
    let mut failures = Vec::new();
    let mut aggregate = ConfusionMatrix::new(model_config.classes);
    let mut importance_acc = ImportanceAccumulator::new(sensors);
    let mut curves: Vec<String> = Vec::new();

    for rep in 0..train_config.repetitions {
        for fold in 0..train_config.folds {
            let outcome = run_single_fold(
                source,
                &plan,
                rep,
                fold,
                train_config,
                pipeline_config,
                model_config,
                &root,
                options,
                &mut importance_acc,
                &mut curves,
            );
            match outcome {
                Ok(o) => {
                    aggregate.merge(&o.confusion);
                    folds.push(o);
                }
                Err(e) => {
                    log::error!("repetition {rep} fold {fold} failed: {e}");
                    failures.push(FoldFailure { repetition: rep, fold, message: e.to_string() });
                }
            }
        }
    }

    if folds.is_empty() {
        return Err(Error::Numeric("every fold failed; no campaign result".into()));
    }
    let mut aggregate_metrics = metrics_from_confusion(&aggregate)?;
    // Macro AUC averaged over fold-level values.
    let fold_aucs: Vec<f64> =
        folds.iter().filter_map(|f| f.metrics.roc_auc_ovr_macro).collect();
    if !fold_aucs.is_empty() {
        aggregate_metrics.roc_auc_ovr_macro =
            Some(fold_aucs.iter().sum::<f64>() / fold_aucs.len() as f64);
    }

    let result = CampaignResult {
        status: if failures.is_empty() { CampaignStatus::Complete } else { CampaignStatus::Partial },
        campaign_seed,
        folds,
        failures,
        aggregate_confusion: aggregate,
        aggregate_metrics,
        importance: importance_acc.finish(),
    };

    if let Some(dir) = options.output_dir {
        write_campaign_artifacts(&result, &curves, dir)?;
    }
    Ok(result)
}

#[allow(clippy::too_many_arguments)]
fn run_single_fold<T: Scalar>(
    source: &dyn SampleSource<T>,
    plan: &crate::pipeline::FoldPlan,
    rep: usize,
    fold: usize,
    train_config: &TrainConfig,
    pipeline_config: &PipelineConfig,
    model_config: &ModelConfig,
    root: &RngStream,
    options: &CampaignOptions,
    importance_acc: &mut ImportanceAccumulator,
    curves: &mut Vec<String>,
) -> Result<FoldOutcome> {
    let sensors = model_config.sensors;
    let seq = model_config.sequence_length;
    let train_idx = plan.training_indices(rep, fold);
    let valid_idx = plan.validation_indices(rep, fold);

    let fold_tag = (rep * plan.k + fold) as u64;
    let pipeline_seed = root.derive_named("pipeline", fold_tag).seed();
    let mut partition = build_training_partition(source, &train_idx, sensors, pipeline_config, pipeline_seed)?;
    let (mut valid_features, valid_labels) = prepare_validation(source, &valid_idx, &partition.normalizer);
    if let Some(mask) = &options.sensor_mask {
        crate::importance::subset_mask(&mut partition.features, sensors, seq, mask)?;
        crate::importance::subset_mask(&mut valid_features, sensors, seq, mask)?;
    }

    let train_split = DataSplit {
        features: &partition.features,
        labels: &partition.labels,
        sensors,
        seq,
    };
    let valid_split =
        DataSplit { features: &valid_features, labels: &valid_labels, sensors, seq };

    let base_seed = root.derive_named("member", fold_tag).seed();
    let members = train_fold_ensemble(
        train_split,
        valid_split,
        &partition.class_weights,
        train_config,
        model_config,
        base_seed,
    )?;

    // Ensemble evaluation on the untouched validation fold.
    let (xv, _) = valid_split.gather(&(0..valid_split.len()).collect::<Vec<_>>());
    let member_params: Vec<ModelParams<T>> = members.iter().map(|(p, _)| p.clone()).collect();
    let prediction = ensemble_predict(&member_params, &xv)?;
    let cm = confusion(&valid_labels, &prediction.classes, model_config.classes)?;
    let mut metrics = metrics_from_confusion(&cm)?;
    metrics.roc_auc_ovr_macro =
        roc_auc_ovr_macro(&valid_labels, &prediction.mean_probabilities, model_config.classes).ok();

    // Attention collection for the sensor-importance analysis, per member.
    for (m, params) in member_params.iter().enumerate() {
        let out = crate::model::forward_eval(&xv, params)?;
        let profiles = per_sample_importance(&out.sensor_attention)?;
        importance_acc.add_model_profiles(&profiles, sensors);
        if let Some(dir) = options.output_dir {
            write_attention_dump(dir, rep, fold, m, &out.sensor_attention, &valid_idx)?;
        }
    }

    let member_accuracies: Vec<f64> = members
        .iter()
        .map(|(_, r)| r.epochs[r.best_epoch - 1].valid_accuracy)
        .collect();

    // Learning-curve rows and checkpoints.
    for (m, (params, record)) in members.iter().enumerate() {
        for e in &record.epochs {
            curves.push(format!(
                "{rep},{fold},{m},{},train,{:.8},{:.6}\n{rep},{fold},{m},{},valid,{:.8},{:.6}",
                e.epoch, e.train_loss, e.train_accuracy, e.epoch, e.valid_loss, e.valid_accuracy
            ));
        }
        if let Some(dir) = options.output_dir {
            let ckpt = dir.join("checkpoints").join(format!("rep{rep}_fold{fold}_member{m}"));
            save_checkpoint(params, &ckpt)?;
        }
    }

    Ok(FoldOutcome {
        repetition: rep,
        fold,
        metrics,
        confusion: cm,
        member_records: members.into_iter().map(|(_, r)| r).collect(),
        member_accuracies,
    })
}

fn write_attention_dump(
    dir: &Path,
    rep: usize,
    fold: usize,
    member: usize,
    attention: &Tensor<impl Scalar>,
    valid_idx: &[usize],
) -> Result<()> {
    use std::io::Write;
    let att_dir = dir.join("attention");
    std::fs::create_dir_all(&att_dir)?;
    let shape = attention.shape();
    let (n, heads, sensors) = (shape[0], shape[1], shape[2]);
    let mut blob = Vec::with_capacity(attention.numel() * 4);
    for &v in attention.data() {
        blob.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    std::fs::write(att_dir.join(format!("rep{rep}_fold{fold}_member{member}.bin")), blob)?;

    let index_path = att_dir.join("index.csv");
    let mut index = if index_path.exists() {
        std::fs::OpenOptions::new().append(true).open(&index_path)?
    } else {
        let mut f = std::fs::File::create(&index_path)?;
        writeln!(f, "file,repetition,fold,member,samples,heads,sensors")?;
        f
    };
    writeln!(
        index,
        "rep{rep}_fold{fold}_member{member}.bin,{rep},{fold},{member},{n},{heads},{sensors}"
    )?;

    // Per-fold validation sample map, written once per (rep, fold).
    let samples_path = att_dir.join(format!("rep{rep}_fold{fold}_samples.csv"));
    if !samples_path.exists() {
        let mut f = std::fs::File::create(&samples_path)?;
        writeln!(f, "row,dataset_index")?;
        for (row, &idx) in valid_idx.iter().enumerate() {
            writeln!(f, "{row},{idx}")?;
        }
    }
    Ok(())
}

/// Writes campaign.json, confusion.csv, learning_curves.csv, metrics.json
/// and importance artifacts into the output directory.
fn write_campaign_artifacts(result: &CampaignResult, curves: &[String], dir: &Path) -> Result<()> {
    use std::io::Write;
    std::fs::create_dir_all(dir)?;

    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("campaign.json"))?),
        result,
    )?;

    let class_names = class_names(result.aggregate_confusion.classes);
    let names: Vec<&str> = class_names.iter().map(String::as_str).collect();
    std::fs::write(dir.join("confusion.csv"), result.aggregate_confusion.to_csv(&names))?;

    let mut curve_file = std::io::BufWriter::new(std::fs::File::create(dir.join("learning_curves.csv"))?);
    writeln!(curve_file, "repetition,fold,member,epoch,split,loss,accuracy")?;
    for row in curves {
        writeln!(curve_file, "{row}")?;
    }

    #[derive(Serialize)]
    struct MetricsDoc<'a> {
        aggregate: &'a MetricsReport,
        folds: Vec<FoldMetricsDoc<'a>>,
    }
    #[derive(Serialize)]
    struct FoldMetricsDoc<'a> {
        repetition: usize,
        fold: usize,
        metrics: &'a MetricsReport,
    }
    let doc = MetricsDoc {
        aggregate: &result.aggregate_metrics,
        folds: result
            .folds
            .iter()
            .map(|f| FoldMetricsDoc { repetition: f.repetition, fold: f.fold, metrics: &f.metrics })
            .collect(),
    };
    serde_json::to_writer_pretty(
        std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.json"))?),
        &doc,
    )?;

    let mut metrics_csv = String::from(
        "repetition,fold,accuracy,balanced_accuracy,roc_auc,precision_baseline,recall_baseline,f1_baseline,precision_loose_screw,recall_loose_screw,f1_loose_screw,precision_crack,recall_crack,f1_crack\n",
    );
    let mut push_row = |rep: String, fold: String, m: &MetricsReport| {
        metrics_csv.push_str(&format!(
            "{rep},{fold},{:.6},{:.6},{}",
            m.accuracy,
            m.balanced_accuracy,
            m.roc_auc_ovr_macro.map_or("".to_string(), |v| format!("{v:.6}")),
        ));
        for c in 0..m.precision.len() {
            metrics_csv.push_str(&format!(",{:.6},{:.6},{:.6}", m.precision[c], m.recall[c], m.f1[c]));
        }
        metrics_csv.push('\n');
    };
    for f in &result.folds {
        push_row(f.repetition.to_string(), f.fold.to_string(), &f.metrics);
    }
    push_row("aggregate".into(), "".into(), &result.aggregate_metrics);
    std::fs::write(dir.join("metrics.csv"), metrics_csv)?;

    crate::importance::write_importance_csv(&result.importance, &dir.join("importance.csv"))?;
    Ok(())
}

pub fn class_names(classes: usize) -> Vec<String> {
    if classes == CLASS_COUNT {
        vec!["baseline".into(), "loose_screw".into(), "crack".into()]
    } else {
        (0..classes).map(|c| format!("class{c}")).collect()
    }
}
