use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW, AdamWConfig};
use super::pretrain::named_grads;
use crate::data::{center_crop, Labels, StayRecord, NUM_PHENOTYPES};
use crate::encoders::{
    measurement_forward, truncated_normal, DualEncoder, MeasVars, MeasurementWindow, Mode, ParamStore, INIT_STD,
};
use crate::error::{Error, Result};
use crate::eval::{auc_pr, auc_roc, macro_micro_auc};
use crate::seed;
use crate::substrate::{sigmoid, Tape, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// In-hospital mortality from the first 48 hours.
    Ihm,
    /// 25 independent phenotype labels over the whole stay.
    Phenotyping,
}

impl Task {
    pub fn num_labels(&self) -> usize {
        match self {
            Task::Ihm => 1,
            Task::Phenotyping => NUM_PHENOTYPES,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Ihm => "ihm",
            Task::Phenotyping => "phenotyping",
        }
    }

    pub fn targets(&self, labels: &Labels) -> Option<Vec<f64>> {
        let b = |x: bool| if x { 1.0 } else { 0.0 };
        match self {
            Task::Ihm => labels.ihm.map(|y| vec![b(y)]),
            Task::Phenotyping => labels.phenotypes.as_ref().map(|p| p.iter().map(|&y| b(y)).collect()),
        }
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ihm" => Ok(Task::Ihm),
            "phenotyping" | "pheno" => Ok(Task::Phenotyping),
            other => Err(Error::Config(format!("unknown task {other:?} (expected ihm or phenotyping)"))),
        }
    }
}

/// Labeled windows for one task.
#[derive(Debug, Clone)]
pub struct TaskExamples {
    pub windows: Vec<MeasurementWindow>,
    pub targets: Vec<Vec<f64>>,
}

impl TaskExamples {
    /// IHM windows are the first `ihm_hours` rows; all windows are center
    /// cropped to `max_rows`. Records without labels for `task` are skipped.
    pub fn from_records(records: &[StayRecord], task: Task, max_rows: usize, ihm_hours: usize) -> Result<Self> {
        let mut windows = Vec::new();
        let mut targets = Vec::new();
        for r in records {
            let Some(y) = task.targets(&r.labels) else { continue };
            let w = match task {
                Task::Ihm => r.head_window(ihm_hours)?,
                Task::Phenotyping => r.window()?,
            };
            windows.push(center_crop(&w, max_rows));
            targets.push(y);
        }
        Ok(Self { windows, targets })
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            windows: idx.iter().map(|&i| self.windows[i].clone()).collect(),
            targets: idx.iter().map(|&i| self.targets[i].clone()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone learning rate.
    pub lr: f64,
    /// Head learning rate is `lr * head_lr_multiplier`.
    pub head_lr_multiplier: f64,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    /// Train only the head on fixed backbone features.
    pub frozen: bool,
    /// Measurement-encoder dropout while fine-tuning.
    pub dropout: f64,
    pub ihm_hours: usize,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            lr: 1e-4,
            head_lr_multiplier: 10.0,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            frozen: false,
            dropout: 0.0,
            ihm_hours: 48,
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("fine-tuning needs epochs >= 1 and batch_size >= 1".into()));
        }
        if !(self.head_lr_multiplier > 0.0) || !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config("head_lr_multiplier must be > 0 and dropout in [0, 1)".into()));
        }
        self.optimizer().validate()
    }

    fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, weight_decay: self.weight_decay, clip_norm: self.clip_norm, ..Default::default() }
    }
}

/// Backbone plus a linear head on the measurement class state.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskModel {
    pub task: Task,
    pub backbone: DualEncoder,
    pub head: ParamStore,
}

fn init_head(dim: usize, labels: usize, rng: &mut seed::Rng) -> ParamStore {
    let mut head = ParamStore::new();
    head.insert(HEAD_WEIGHT, truncated_normal(&[dim, labels], INIT_STD, rng));
    head.insert(HEAD_BIAS, Tensor::zeros(&[labels]));
    head
}

fn head_logits(features: &[Vec<f64>], head: &ParamStore) -> Result<Vec<Vec<f64>>> {
    let w = head.get(HEAD_WEIGHT).ok_or_else(|| Error::Contract("head has no weight".into()))?;
    let b = head.get(HEAD_BIAS).ok_or_else(|| Error::Contract("head has no bias".into()))?;
    let x = Tensor::from_rows(features)?;
    let mut z = x.matmul(w)?;
    let k = b.len();
    for row in z.data_mut().chunks_mut(k) {
        for (v, bias) in row.iter_mut().zip(b.data()) {
            *v += bias;
        }
    }
    Ok(z.data().chunks(k).map(<[f64]>::to_vec).collect())
}

/// Mean binary cross-entropy of `[B × K]` logits on the tape.
fn bce_mean(tape: &mut Tape, x: Var, w: Var, b: Var, targets: &[&Vec<f64>]) -> Result<Var> {
    let z = tape.matmul(x, w)?;
    let z = tape.add_row(z, b)?;
    let flat: Vec<f64> = targets.iter().flat_map(|t| t.iter().copied()).collect();
    let n = flat.len() as f64;
    let s = tape.bce_with_logits(z, &flat)?;
    tape.scale(s, 1.0 / n)
}

fn warn_if_single_class(task: Task, targets: &[Vec<f64>]) {
    for k in 0..task.num_labels() {
        let pos = targets.iter().filter(|t| t[k] > 0.5).count();
        if pos == 0 || pos == targets.len() {
            log::warn!("{} label {k} has a single class in the training set", task.name());
            if task == Task::Ihm {
                break;
            }
        }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains a fresh linear head on fixed features.
pub fn fit_linear_head(features: &[Vec<f64>], targets: &[Vec<f64>], task: Task, cfg: &FinetuneConfig) -> Result<ParamStore> {
    cfg.validate()?;
    if features.is_empty() {
        return Err(Error::Data("no labeled examples to fit".into()));
    }
    warn_if_single_class(task, targets);
    let dim = features[0].len();
    let mut head = init_head(dim, task.num_labels(), &mut seed::stream(cfg.seed, "head", 0));
    let head_lr = cfg.lr * cfg.head_lr_multiplier;
    let mut opt = AdamW::new(AdamWConfig { lr: head_lr, ..cfg.optimizer() })?;
    let per_epoch = features.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    for e in 0..cfg.epochs {
        for idx in batches(features.len(), cfg.batch_size, &mut seed::stream(cfg.seed, "finetune-shuffle", e as u64)) {
            let rows: Vec<Vec<f64>> = idx.iter().map(|&i| features[i].clone()).collect();
            let ys: Vec<&Vec<f64>> = idx.iter().map(|&i| &targets[i]).collect();
            let mut tape = Tape::new();
            let bound = head.bind(&mut tape, |_| true);
            let x = tape.constant(Tensor::from_rows(&rows)?);
            let loss = bce_mean(&mut tape, x, bound.var(HEAD_WEIGHT)?, bound.var(HEAD_BIAS)?, &ys)?;
            let grads = named_grads(&tape, &bound, loss)?;
            let lr = cosine_lr(head_lr, opt.step_count(), total);
            opt.step(&mut head, &grads, lr)?;
        }
    }
    Ok(head)
}

/// Fine-tunes `backbone` with a fresh head. In frozen mode the backbone is
/// returned unchanged and only the head is trained.
pub fn finetune(backbone: &DualEncoder, task: Task, train: &TaskExamples, cfg: &FinetuneConfig) -> Result<TaskModel> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Data(format!("no labeled {} examples", task.name())));
    }
    if cfg.frozen {
        let features = backbone.measurement_features(&train.windows)?;
        let head = fit_linear_head(&features, &train.targets, task, cfg)?;
        return Ok(TaskModel { task, backbone: backbone.clone(), head });
    }
    warn_if_single_class(task, &train.targets);

    let mut meas_cfg = backbone.config.measurement.clone();
    meas_cfg.dropout_rate = cfg.dropout;
    let dim = meas_cfg.hidden_dim;
    let head = init_head(dim, task.num_labels(), &mut seed::stream(cfg.seed, "head", 0));
    // text parameters are not needed here
    let mut store = ParamStore::from_map(
        backbone
            .params
            .iter()
            .filter(|(k, _)| k.starts_with("meas."))
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect(),
    );
    for (k, v) in head.iter() {
        store.insert(k, v.clone());
    }
    let mut opt = AdamW::new(cfg.optimizer())?.with_group("head", "head.", cfg.head_lr_multiplier);
    let per_epoch = train.len().div_ceil(cfg.batch_size) as u64;
    let total = per_epoch * cfg.epochs as u64;
    for e in 0..cfg.epochs {
        let mut drop_rng = seed::stream(cfg.seed, "finetune-dropout", e as u64);
        for idx in batches(train.len(), cfg.batch_size, &mut seed::stream(cfg.seed, "finetune-shuffle", e as u64)) {
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, |_| true);
            let mv = MeasVars::from_bound(&bound, &meas_cfg)?;
            let mut mode = Mode::Train(&mut drop_rng);
            let mut cls = Vec::with_capacity(idx.len());
            for &i in &idx {
                cls.push(measurement_forward(&mut tape, &meas_cfg, &mv, &train.windows[i], &mut mode)?.cls_raw);
            }
            let x = tape.concat_rows(&cls)?;
            let ys: Vec<&Vec<f64>> = idx.iter().map(|&i| &train.targets[i]).collect();
            let loss = bce_mean(&mut tape, x, bound.var(HEAD_WEIGHT)?, bound.var(HEAD_BIAS)?, &ys)?;
            if !tape.value(loss).item().is_finite() {
                return Err(Error::NonFinite(format!("fine-tuning loss at epoch {}", e + 1)));
            }
            let grads = named_grads(&tape, &bound, loss)?;
            let lr = cosine_lr(cfg.lr, opt.step_count(), total);
            opt.step(&mut store, &grads, lr)?;
        }
    }
    let mut tuned = backbone.clone();
    let mut head = ParamStore::new();
    for (k, v) in store.iter() {
        if k.starts_with("head.") {
            head.insert(k, v.clone());
        } else if let Some(slot) = tuned.params.get_mut(k) {
            *slot = v.clone();
        }
    }
    Ok(TaskModel { task, backbone: tuned, head })
}

impl TaskModel {
    pub fn logits(&self, windows: &[MeasurementWindow]) -> Result<Vec<Vec<f64>>> {
        head_logits(&self.backbone.measurement_features(windows)?, &self.head)
    }

    pub fn probabilities(&self, windows: &[MeasurementWindow]) -> Result<Vec<Vec<f64>>> {
        Ok(self.logits(windows)?.into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect())
    }

    /// Task metrics: AUC-ROC/AUC-PR for IHM, macro/micro AUC-ROC for phenotyping.
    pub fn evaluate(&self, examples: &TaskExamples) -> Result<BTreeMap<String, f64>> {
        task_metrics(self.task, &self.probabilities(&examples.windows)?, &examples.targets)
    }
}

/// Mean binary cross-entropy of a head over fixed features.
pub fn head_loss(features: &[Vec<f64>], targets: &[Vec<f64>], head: &ParamStore) -> Result<f64> {
    let logits = head_logits(features, head)?;
    let mut total = 0.0;
    let mut n = 0usize;
    for (z, y) in logits.iter().zip(targets) {
        for (&zi, &yi) in z.iter().zip(y) {
            total += zi.max(0.0) - zi * yi + (-zi.abs()).exp().ln_1p();
            n += 1;
        }
    }
    Ok(total / n.max(1) as f64)
}

pub fn head_probabilities(features: &[Vec<f64>], head: &ParamStore) -> Result<Vec<Vec<f64>>> {
    Ok(head_logits(features, head)?.into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect())
}

pub fn task_metrics(task: Task, probs: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    match task {
        Task::Ihm => {
            let s: Vec<f64> = probs.iter().map(|p| p[0]).collect();
            let y: Vec<bool> = targets.iter().map(|t| t[0] > 0.5).collect();
            out.insert("auc_roc".to_string(), auc_roc(&s, &y)?);
            out.insert("auc_pr".to_string(), auc_pr(&s, &y)?);
        }
        Task::Phenotyping => {
            let y: Vec<Vec<bool>> = targets.iter().map(|t| t.iter().map(|&v| v > 0.5).collect()).collect();
            let (macro_auc, micro_auc) = macro_micro_auc(probs, &y)?;
            out.insert("macro_auc_roc".to_string(), macro_auc);
            out.insert("micro_auc_roc".to_string(), micro_auc);
        }
    }
    Ok(out)
}
