//! Training loop, metrics, and the seeded experiment harness.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::components::{match_hidden, stack_batch, Architecture, ComponentConfig, FusionModel, ModelSpec, Task};
use crate::data::{
    experiment1_schedule, gen_multirate_schedule, gen_nonpow2_schedule, gen_square_dataset, ingest_csv, multirate_base,
    Dataset, IngestSpec, SquareSignal, SyntheticConfig,
};
use crate::error::{Error, Result};
use crate::grouping::{feasible_l_max, plan_grouping, SignalSpec};
use crate::masking::{l1_penalty_node, mask_report, MaskReport};
use crate::tensor::{Adam, AdamConfig, Graph, ParamId, ParamStore, Tensor, Var};

// ------------------------------------------------------------------ metrics

pub fn metric_mse(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.is_empty() || pred.len() != target.len() {
        return Err(Error::invalid(format!("mse: {} predictions for {} targets", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / pred.len() as f64)
}

pub fn metric_accuracy(pred: &[usize], labels: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != labels.len() {
        return Err(Error::invalid("accuracy: empty or misaligned inputs"));
    }
    Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / pred.len() as f64)
}

/// Binary AUC from average ranks, which counts tied pairs as one half.
pub fn metric_auc(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.is_empty() || scores.len() != positive.len() {
        return Err(Error::invalid("auc: empty or misaligned inputs"));
    }
    let n_pos = positive.iter().filter(|p| **p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::invalid("auc needs both positive and negative labels"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|a, b| scores[*a].total_cmp(&scores[*b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1 share their mean
        let mean_rank = (i + j + 2) as f64 / 2.0;
        rank_sum += mean_rank * order[i..=j].iter().filter(|k| positive[**k]).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// Macro one-vs-rest AUC over the classes that appear in `labels`.
pub fn metric_auc_multiclass(probs: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::invalid("auc: empty or misaligned inputs"));
    }
    let k = probs[0].len();
    let present: Vec<usize> = (0..k).filter(|c| labels.contains(c)).collect();
    if present.len() < 2 {
        return Err(Error::invalid("auc needs at least two classes"));
    }
    let mut total = 0.0;
    for &c in &present {
        let scores: Vec<f64> = probs.iter().map(|p| p[c]).collect();
        let pos: Vec<bool> = labels.iter().map(|l| *l == c).collect();
        total += metric_auc(&scores, &pos)?;
    }
    Ok(total / present.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Mse,
    Auc,
    Accuracy,
}

impl Metric {
    pub fn default_for(task: Task) -> Metric {
        match task {
            Task::Regression => Metric::Mse,
            Task::Classification { .. } => Metric::Auc,
        }
    }

    pub fn higher_is_better(self) -> bool {
        self != Metric::Mse
    }

    fn improves(self, new: f64, best: f64) -> bool {
        if self.higher_is_better() {
            new > best
        } else {
            new < best
        }
    }
}

// ------------------------------------------------------------ normalization

/// Per-slot, per-channel standardization plus target scaling, fit on training data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub channel_mean: Vec<Vec<f64>>,
    pub channel_std: Vec<Vec<f64>>,
    pub target_mean: f64,
    pub target_std: f64,
}

impl Normalizer {
    pub fn fit(features: &[Vec<Tensor>], targets: &[f64], task: Task) -> Result<Self> {
        let first = features.first().ok_or_else(|| Error::invalid("cannot fit a normalizer on no samples"))?;
        let mut channel_mean = Vec::new();
        let mut channel_std = Vec::new();
        for s in 0..first.len() {
            let c = first[s].last_dim();
            let (mut sum, mut sq, mut n) = (vec![0.0; c], vec![0.0; c], 0usize);
            for f in features {
                for row in f[s].data().chunks(c) {
                    for (k, v) in row.iter().enumerate() {
                        sum[k] += v;
                        sq[k] += v * v;
                    }
                    n += 1;
                }
            }
            let mean: Vec<f64> = sum.iter().map(|v| v / n as f64).collect();
            let std = sq
                .iter()
                .zip(&mean)
                .map(|(q, m)| {
                    let var = (q / n as f64 - m * m).max(0.0);
                    if var.sqrt() > 1e-12 {
                        var.sqrt()
                    } else {
                        1.0
                    }
                })
                .collect();
            channel_mean.push(mean);
            channel_std.push(std);
        }
        let (target_mean, target_std) = match task {
            Task::Regression => {
                let n = targets.len().max(1) as f64;
                let m = targets.iter().sum::<f64>() / n;
                let v = targets.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n;
                (m, if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 })
            }
            Task::Classification { .. } => (0.0, 1.0),
        };
        Ok(Normalizer { channel_mean, channel_std, target_mean, target_std })
    }

    pub fn apply(&self, features: &mut [Tensor]) {
        for (s, t) in features.iter_mut().enumerate() {
            let c = t.last_dim();
            for row in t.data_mut().chunks_mut(c) {
                for (k, v) in row.iter_mut().enumerate() {
                    *v = (*v - self.channel_mean[s][k]) / self.channel_std[s][k];
                }
            }
        }
    }
}

// ------------------------------------------------------------------ config

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub patience: usize,
    /// Mask norm weight.
    pub alpha: f64,
    pub init_mask: f64,
    pub seeds: Vec<u64>,
    pub add_baseline: bool,
    pub masks_enabled: bool,
    pub max_epochs: usize,
    /// Decomposition level of the fastest signal; `None` picks 5 clamped to the feasible range.
    pub levels: Option<usize>,
    pub wavelet: String,
    pub metric: Option<Metric>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.001,
            batch_size: 16,
            patience: 15,
            alpha: 0.05,
            init_mask: 0.5,
            seeds: (123..=127).collect(),
            add_baseline: true,
            masks_enabled: true,
            max_epochs: 200,
            levels: None,
            wavelet: "haar".into(),
            metric: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return bad("batch size and max epochs must be at least 1");
        }
        if self.patience == 0 {
            return bad("patience must be at least 1");
        }
        if !(self.alpha >= 0.0) {
            return bad("mask norm weight must be >= 0");
        }
        if self.seeds.is_empty() {
            return bad("at least one seed is required");
        }
        crate::wavelet::WaveletFilters::by_name(&self.wavelet)?;
        Ok(())
    }

    pub fn resolve_levels(&self, signals: &[SignalSpec]) -> Result<usize> {
        let (lo, hi) = feasible_l_max(signals)?;
        match self.levels {
            Some(l) => Ok(l),
            None if lo <= hi => Ok(5usize.clamp(lo, hi)),
            None => Err(Error::Grouping {
                reason: "no decomposition level is feasible for every signal".into(),
                max_feasible: hi,
            }),
        }
    }
}

/// Which model a run trains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Arm {
    Baseline,
    #[serde(rename = "multiwave-nomask")]
    MultiwaveNoMask,
    Multiwave,
    Fft,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::Baseline => "baseline",
            Arm::MultiwaveNoMask => "multiwave-nomask",
            Arm::Multiwave => "multiwave",
            Arm::Fft => "fft",
        }
    }
}

impl std::str::FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Arm::Baseline, Arm::MultiwaveNoMask, Arm::Multiwave, Arm::Fft]
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown arm `{s}` (baseline, multiwave-nomask, multiwave, fft)")))
    }
}

/// Model spec for `arm` on `signals`.
pub fn arm_spec(arm: Arm, component: &ComponentConfig, signals: &[SignalSpec], task: Task, cfg: &TrainConfig, seed: u64) -> Result<ModelSpec> {
    let architecture = match arm {
        Arm::Baseline => Architecture::Plain,
        Arm::Fft => Architecture::Fft,
        Arm::Multiwave | Arm::MultiwaveNoMask => Architecture::MultiWave {
            plan: plan_grouping(signals, cfg.resolve_levels(signals)?)?,
            wavelet: cfg.wavelet.clone(),
            masks: arm == Arm::Multiwave && cfg.masks_enabled,
            add_baseline: cfg.add_baseline,
            init_mask: cfg.init_mask,
        },
    };
    Ok(ModelSpec { architecture, component: component.clone(), signals: signals.to_vec(), task, seed })
}

// ---------------------------------------------------------------- training

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub config_hash: String,
    pub normalizer: Normalizer,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn model(&self) -> Result<FusionModel> {
        if self.spec.config_hash() != self.config_hash {
            return Err(Error::invalid("checkpoint config hash does not match its model spec"));
        }
        let mut m = FusionModel::build(&self.spec)?;
        m.store.load_from(&self.params)?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainOutcome {
    pub seed: u64,
    pub val_metric: f64,
    pub test_metric: Option<f64>,
    pub epochs: usize,
    pub best_epoch: usize,
    /// Validation metric after every epoch.
    pub val_history: Vec<f64>,
    pub train_loss: Vec<f64>,
    pub mask_trail: Vec<MaskReport>,
    pub checkpoint: Checkpoint,
}

struct Prepared {
    features: Vec<Vec<Tensor>>,
    labels: Vec<f64>,
}

fn prepare(model: &FusionModel, samples: &[crate::data::Sample], norm: Option<&Normalizer>) -> Result<Prepared> {
    let mut features = Vec::with_capacity(samples.len());
    for s in samples {
        let mut f = model.featurize(&s.series)?;
        if let Some(n) = norm {
            n.apply(&mut f);
        }
        features.push(f);
    }
    Ok(Prepared { features, labels: samples.iter().map(|s| s.label).collect() })
}

fn batch_slots(g: &mut Graph, p: &Prepared, idx: &[usize]) -> Result<Vec<Var>> {
    let refs: Vec<&[Tensor]> = idx.iter().map(|i| p.features[*i].as_slice()).collect();
    Ok(stack_batch(&refs)?.into_iter().map(|t| g.constant(t)).collect())
}

/// Raw head outputs for every sample, `[n][out]`.
fn raw_outputs(model: &FusionModel, p: &Prepared) -> Result<Vec<Vec<f64>>> {
    let width = model.spec.task.output_width();
    let mut out = Vec::with_capacity(p.features.len());
    let all: Vec<usize> = (0..p.features.len()).collect();
    for chunk in all.chunks(128) {
        let mut g = Graph::new();
        let params = model.store.bind(&mut g);
        let slots = batch_slots(&mut g, p, chunk)?;
        let y = model.forward(&mut g, &params, &slots)?;
        out.extend(g.value(y).data().chunks(width).map(|r| r.to_vec()));
    }
    Ok(out)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Predictions in label units: regression values, or class probabilities.
#[derive(Clone, Debug, PartialEq)]
pub enum Predictions {
    Values(Vec<f64>),
    Probabilities(Vec<Vec<f64>>),
}

fn predictions(model: &FusionModel, norm: &Normalizer, p: &Prepared) -> Result<Predictions> {
    let raw = raw_outputs(model, p)?;
    Ok(match model.spec.task {
        Task::Regression => Predictions::Values(raw.iter().map(|r| r[0] * norm.target_std + norm.target_mean).collect()),
        Task::Classification { .. } if raw.first().map_or(0, Vec::len) == 1 => {
            Predictions::Probabilities(raw.iter().map(|r| vec![1.0 - sigmoid(r[0]), sigmoid(r[0])]).collect())
        }
        Task::Classification { .. } => Predictions::Probabilities(raw.iter().map(|r| softmax(r)).collect()),
    })
}

pub fn score(metric: Metric, preds: &Predictions, labels: &[f64]) -> Result<f64> {
    match (metric, preds) {
        (Metric::Mse, Predictions::Values(v)) => metric_mse(v, labels),
        (Metric::Accuracy, Predictions::Probabilities(p)) => {
            let argmax: Vec<usize> = p
                .iter()
                .map(|r| r.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(i, _)| i))
                .collect();
            let labels: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
            metric_accuracy(&argmax, &labels)
        }
        (Metric::Auc, Predictions::Probabilities(p)) => {
            let labels: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
            if p.first().map_or(0, Vec::len) == 2 {
                let scores: Vec<f64> = p.iter().map(|r| r[1]).collect();
                metric_auc(&scores, &labels.iter().map(|l| *l == 1).collect::<Vec<_>>())
            } else {
                metric_auc_multiclass(p, &labels)
            }
        }
        (m, _) => Err(Error::invalid(format!("metric {m:?} does not fit this task"))),
    }
}

/// Scores a checkpoint on `samples`.
pub fn evaluate(checkpoint: &Checkpoint, samples: &[crate::data::Sample], metric: Option<Metric>) -> Result<f64> {
    let model = checkpoint.model()?;
    let p = prepare(&model, samples, Some(&checkpoint.normalizer))?;
    let metric = metric.unwrap_or_else(|| Metric::default_for(model.spec.task));
    score(metric, &predictions(&model, &checkpoint.normalizer, &p)?, &p.labels)
}

fn task_loss(g: &mut Graph, task: Task, y: Var, labels: &[f64], norm: &Normalizer) -> Result<Var> {
    match task {
        Task::Regression => {
            let t: Vec<f64> = labels.iter().map(|l| (l - norm.target_mean) / norm.target_std).collect();
            let t = g.constant(Tensor::new(vec![t.len(), 1], t)?);
            // back in label units so the mask penalty weight keeps its scale
            let m = g.mse(y, t)?;
            g.scale(m, norm.target_std * norm.target_std)
        }
        Task::Classification { classes } if classes <= 2 => g.bce_with_logits(y, labels),
        Task::Classification { .. } => {
            let c: Vec<usize> = labels.iter().map(|l| *l as usize).collect();
            g.cross_entropy(y, &c)
        }
    }
}

fn train_step(
    model: &mut FusionModel,
    adam: &mut Adam,
    set: &Prepared,
    idx: &[usize],
    norm: &Normalizer,
    mask_ids: &[ParamId],
    alpha: f64,
) -> Result<f64> {
    let mut g = Graph::new();
    let params = model.store.bind(&mut g);
    let slots = batch_slots(&mut g, set, idx)?;
    let y = model.forward(&mut g, &params, &slots)?;
    let labels: Vec<f64> = idx.iter().map(|i| set.labels[*i]).collect();
    let mut loss = task_loss(&mut g, model.spec.task, y, &labels, norm)?;
    if alpha > 0.0 {
        let masks: Vec<Var> = mask_ids.iter().map(|m| params[*m]).collect();
        if let Some(pen) = l1_penalty_node(&mut g, &masks, alpha)? {
            loss = g.add(loss, pen)?;
        }
    }
    let value = g.value(loss).item().unwrap_or(f64::NAN);
    if value.is_finite() {
        let mut grads = g.backward(loss)?;
        let grads = params.gradients(&mut grads);
        adam.step(&mut model.store, &grads)?;
    }
    Ok(value)
}

/// Trains `spec` on `data` with early stopping on the validation metric and
/// returns the best-validation checkpoint. An empty validation split falls
/// back to the training split.
pub fn train(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    data.validate()?;
    if spec.signals != data.signals {
        return Err(Error::invalid("model signals do not match the dataset"));
    }
    let mut model = FusionModel::build(spec)?;
    let raw_train = prepare(&model, &data.train, None)?;
    let norm = Normalizer::fit(&raw_train.features, &raw_train.labels, spec.task)?;
    let mut train_set = raw_train;
    for f in &mut train_set.features {
        norm.apply(f);
    }
    let val_samples = if data.val.is_empty() { &data.train } else { &data.val };
    let val_set = prepare(&model, val_samples, Some(&norm))?;
    let metric = cfg.metric.unwrap_or_else(|| Metric::default_for(spec.task));

    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5eed_0f_ba7c);
    let mut order: Vec<usize> = (0..train_set.features.len()).collect();
    let mask_ids = model.mask_params();
    let alpha = if mask_ids.is_empty() { 0.0 } else { cfg.alpha };

    let mut best = (f64::NAN, 0usize, model.store.clone());
    let mut val_history = Vec::new();
    let mut train_loss = Vec::new();
    let mut mask_trail = Vec::new();
    let mut epochs = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs = epoch;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let value = match train_step(&mut model, &mut adam, &train_set, idx, &norm, &mask_ids, alpha) {
                Err(Error::NonFinite { op }) => {
                    return Err(Error::Diverged { epoch, detail: format!("non-finite value in {op}") })
                }
                other => other?,
            };
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, detail: format!("loss became {value}") });
            }
            epoch_loss += value * idx.len() as f64;
        }
        if !model.store.iter().all(|(_, t)| t.is_finite()) {
            return Err(Error::Diverged { epoch, detail: "non-finite parameters".into() });
        }
        train_loss.push(epoch_loss / order.len() as f64);
        let val = score(metric, &predictions(&model, &norm, &val_set)?, &val_set.labels)?;
        if !val.is_finite() {
            return Err(Error::Diverged { epoch, detail: format!("validation metric became {val}") });
        }
        val_history.push(val);
        if !mask_ids.is_empty() {
            mask_trail.push(mask_report(&model.mask_bank(), epoch));
        }
        if best.0.is_nan() || metric.improves(val, best.0) {
            best = (val, epoch, model.store.clone());
        } else if epoch - best.1 >= cfg.patience {
            break;
        }
    }
    model.store = best.2;
    let test_metric = if data.test.is_empty() {
        None
    } else {
        let test_set = prepare(&model, &data.test, Some(&norm))?;
        Some(score(metric, &predictions(&model, &norm, &test_set)?, &test_set.labels)?)
    };
    Ok(TrainOutcome {
        seed: spec.seed,
        val_metric: best.0,
        test_metric,
        epochs,
        best_epoch: best.1,
        val_history,
        train_loss,
        mask_trail,
        checkpoint: Checkpoint { spec: spec.clone(), config_hash: spec.config_hash(), normalizer: norm, params: model.store },
    })
}

// -------------------------------------------------------------- experiments

pub const EXPERIMENTS: [&str; 4] = ["synthetic-1", "synthetic-2", "nonpow2", "ingest-train"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    pub component: ComponentConfig,
    pub arms: Vec<Arm>,
    pub train: TrainConfig,
    /// Sizes, noise and duration for synthetic experiments; signals come from the schedule.
    pub data: SyntheticConfig,
    /// Shrinks MultiWave component width until its parameter count is
    /// closest to the baseline model's.
    pub match_parameters: bool,
    /// Recipe for `ingest-train`, with file paths relative to `data_dir`.
    pub ingest: Option<IngestSpec>,
    pub data_dir: Option<std::path::PathBuf>,
    pub jobs: usize,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        ExperimentSpec {
            name: "synthetic-1".into(),
            component: ComponentConfig::default(),
            arms: vec![Arm::Baseline, Arm::Multiwave],
            train: TrainConfig::default(),
            data: SyntheticConfig::default(),
            match_parameters: true,
            ingest: None,
            data_dir: None,
            jobs: 1,
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if !EXPERIMENTS.contains(&self.name.as_str()) {
            return Err(Error::UnknownExperiment { name: self.name.clone(), available: EXPERIMENTS.join(", ") });
        }
        self.component.validate()?;
        self.train.validate()?;
        if self.arms.is_empty() {
            return Err(Error::invalid("experiment has no arms"));
        }
        if self.name == "ingest-train" && self.ingest.is_none() {
            return Err(Error::invalid("ingest-train needs an [ingest] section"));
        }
        if self.name != "ingest-train" {
            self.data.validate()?;
        }
        Ok(())
    }
}

/// Named settings of a synthetic schedule.
pub fn schedule(name: &str) -> Result<Vec<(String, Vec<SquareSignal>)>> {
    let label_freqs = |s: &Vec<SquareSignal>| format!("{} signals", s.len());
    let out: Vec<Vec<SquareSignal>> = match name {
        "synthetic-1" => experiment1_schedule(),
        "synthetic-2" => gen_multirate_schedule(&multirate_base()),
        "nonpow2" => gen_nonpow2_schedule(),
        other => {
            return Err(Error::UnknownExperiment { name: other.into(), available: EXPERIMENTS.join(", ") });
        }
    };
    Ok(out
        .into_iter()
        .map(|s| {
            let label = if name == "synthetic-2" { format!("{} Hz", s[0].rate_hz) } else { label_freqs(&s) };
            (label, s)
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub metric: f64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub parameters: usize,
    pub mask_trail: Vec<MaskReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub setting: String,
    pub arm: Arm,
    pub per_seed: Vec<SeedResult>,
    pub mean: f64,
    pub std: f64,
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResult {
    pub name: String,
    pub metric: Metric,
    pub settings: Vec<String>,
    pub runs: Vec<RunResult>,
}

impl ExperimentResult {
    pub fn cell(&self, setting: &str, arm: Arm) -> Option<&RunResult> {
        self.runs.iter().find(|r| r.setting == setting && r.arm == arm)
    }

    /// `setting,arm,seed,metric` rows.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["setting", "arm", "seed", "metric"])?;
        for r in &self.runs {
            for s in &r.per_seed {
                w.write_record([r.setting.clone(), r.arm.name().to_string(), s.seed.to_string(), s.metric.to_string()])?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Mean and standard deviation per (setting, arm).
    pub fn summary_json(&self) -> serde_json::Value {
        let cells: Vec<serde_json::Value> = self
            .runs
            .iter()
            .map(|r| {
                serde_json::json!({
                    "setting": r.setting,
                    "arm": r.arm.name(),
                    "mean": r.mean,
                    "std": r.std,
                    "seeds": r.per_seed.len(),
                })
            })
            .collect();
        serde_json::json!({ "experiment": self.name, "metric": self.metric, "cells": cells })
    }
}

/// Model of one arm for `ds`, with the component width shrunk to match the
/// baseline's parameter count when `spec.match_parameters` is set.
pub fn experiment_model(spec: &ExperimentSpec, ds: &Dataset, arm: Arm, seed: u64) -> Result<ModelSpec> {
    let mut component = spec.component.clone();
    if spec.match_parameters && arm != Arm::Baseline {
        let target = arm_spec(Arm::Baseline, &spec.component, &ds.signals, ds.task, &spec.train, seed)?.parameter_count()?;
        component.hidden = match_hidden(target, spec.component.hidden, |h| {
            arm_spec(arm, &ComponentConfig { hidden: h, ..spec.component.clone() }, &ds.signals, ds.task, &spec.train, seed)
        })?;
    }
    arm_spec(arm, &component, &ds.signals, ds.task, &spec.train, seed)
}

/// Dataset of a non-synthetic experiment, read from `spec.ingest`.
pub fn ingested_dataset(spec: &ExperimentSpec) -> Result<Dataset> {
    let ing = spec.ingest.as_ref().ok_or_else(|| Error::invalid("experiment has no [ingest] section"))?;
    ingest_csv(ing, spec.data_dir.as_deref().unwrap_or(std::path::Path::new(".")))
}

struct Job {
    setting: usize,
    arm: Arm,
    seed: u64,
}

/// Runs every (setting, arm, seed) of `spec`, `spec.jobs` at a time.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<ExperimentResult> {
    spec.validate()?;
    let settings: Vec<(String, Option<Vec<SquareSignal>>)> = if spec.name == "ingest-train" {
        vec![("ingested".into(), None)]
    } else {
        schedule(&spec.name)?.into_iter().map(|(l, s)| (l, Some(s))).collect()
    };
    let ingested = match (&spec.ingest, spec.name.as_str()) {
        (Some(_), "ingest-train") => Some(ingested_dataset(spec)?),
        _ => None,
    };
    let dataset_for = |setting: usize, seed: u64| -> Result<Dataset> {
        match (&settings[setting].1, &ingested) {
            (Some(signals), _) => gen_square_dataset(&SyntheticConfig { signals: signals.clone(), seed, ..spec.data.clone() }),
            (None, Some(ds)) => Ok(ds.clone()),
            (None, None) => Err(Error::invalid("no data source")),
        }
    };

    // schema and plan problems surface before any training starts
    for (i, _) in settings.iter().enumerate() {
        let ds = dataset_for(i, spec.train.seeds[0])?;
        for arm in &spec.arms {
            arm_spec(*arm, &spec.component, &ds.signals, ds.task, &spec.train, 0)?;
        }
    }

    let jobs: Vec<Job> = (0..settings.len())
        .flat_map(|s| spec.arms.iter().flat_map(move |a| spec.train.seeds.iter().map(move |seed| Job { setting: s, arm: *a, seed: *seed })))
        .collect();
    let results: Mutex<Vec<Option<Result<(SeedResult, Metric)>>>> = Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let run_job = |job: &Job| -> Result<(SeedResult, Metric)> {
        let ds = dataset_for(job.setting, job.seed)?;
        let model = experiment_model(spec, &ds, job.arm, job.seed)?;
        let parameters = model.parameter_count()?;
        let out = train(&model, &ds, &spec.train)?;
        let metric = spec.train.metric.unwrap_or_else(|| Metric::default_for(ds.task));
        let value = out.test_metric.unwrap_or(out.val_metric);
        Ok((
            SeedResult { seed: job.seed, metric: value, epochs: out.epochs, best_epoch: out.best_epoch, parameters, mask_trail: out.mask_trail },
            metric,
        ))
    };
    std::thread::scope(|scope| {
        for _ in 0..spec.jobs.max(1).min(jobs.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= jobs.len() {
                    break;
                }
                let r = run_job(&jobs[i]);
                results.lock().expect("result lock")[i] = Some(r);
            });
        }
    });

    let mut runs: Vec<RunResult> = Vec::new();
    let mut metric = Metric::Mse;
    for (job, r) in jobs.iter().zip(results.into_inner().expect("result lock")) {
        let (seed_result, m) = r.expect("every job ran")?;
        metric = m;
        let setting = &settings[job.setting].0;
        match runs.iter_mut().find(|r| &r.setting == setting && r.arm == job.arm) {
            Some(run) => run.per_seed.push(seed_result),
            None => runs.push(RunResult { setting: setting.clone(), arm: job.arm, per_seed: vec![seed_result], mean: 0.0, std: 0.0 }),
        }
    }
    for r in &mut runs {
        let v: Vec<f64> = r.per_seed.iter().map(|s| s.metric).collect();
        (r.mean, r.std) = mean_std(&v);
    }
    Ok(ExperimentResult { name: spec.name.clone(), metric, settings: settings.into_iter().map(|s| s.0).collect(), runs })
}
