use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::data::{build_pair_batches, crop_window, sample_epoch_pairs, StayId, StayRecord, Tokenizer};
use crate::encoders::{
    measurement_forward, text_forward, Checkpoint, DualEncoder, MeasVars, MeasurementWindow, Mode, ModelConfig,
    TextVars, TokenSequence,
};
use crate::error::{Error, Result};
use crate::eval::{retrieval_scores, RetrievalScores};
use crate::masking::{mask_measurements, mask_notes, MaskedNote, MaskedWindow};
use crate::objective::{
    alignment_loss_on_tape, meas_recon_sum_on_tape, note_recon_sum_on_tape, LossWeights, ObjectiveBreakdown,
    DEFAULT_SMOOTH_L1_BETA,
};
use crate::seed;
use crate::substrate::{Tape, Tensor, Var};

/// Encoder sizes shared by both modalities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelShape {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    /// Includes the class token.
    pub max_seq_len: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self { num_layers: 8, hidden_dim: 128, num_heads: 8, max_seq_len: 256 }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab_size: usize, num_features: usize, text_dropout: f64, meas_dropout: f64) -> ModelConfig {
        ModelConfig::new(vocab_size, num_features)
            .sized(self.num_layers, self.hidden_dim, self.num_heads)
            .with_max_seq_len(self.max_seq_len)
            .with_dropout(text_dropout, meas_dropout)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub model: ModelShape,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub temperature: f64,
    pub include_positive_in_denominator: bool,
    pub weights: LossWeights,
    pub note_mask_rate: f64,
    pub meas_mask_rate: f64,
    pub text_dropout: f64,
    pub meas_dropout: f64,
    pub smooth_l1_beta: f64,
    pub seed: u64,
    /// Write `last.ckpt` every this many epochs (the final epoch is always written).
    pub checkpoint_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            model: ModelShape::default(),
            epochs: 5,
            batch_size: 32,
            optimizer: AdamWConfig::default(),
            temperature: 0.07,
            include_positive_in_denominator: true,
            weights: LossWeights::default(),
            note_mask_rate: 0.1,
            meas_mask_rate: 0.1,
            text_dropout: 0.0,
            meas_dropout: 0.0,
            smooth_l1_beta: DEFAULT_SMOOTH_L1_BETA,
            seed: 0,
            checkpoint_every: 1,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 2 {
            return bad(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if !(self.temperature > 0.0) {
            return bad(format!("temperature must be positive, got {}", self.temperature));
        }
        for (name, r) in [("note_mask_rate", self.note_mask_rate), ("meas_mask_rate", self.meas_mask_rate)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} must lie in [0, 1), got {r}"));
            }
        }
        if !(self.smooth_l1_beta > 0.0) {
            return bad("smooth_l1_beta must be positive".into());
        }
        self.weights.validate()?;
        self.optimizer.validate()
    }

    /// Mask rates in effect: a modality whose reconstruction weight is zero is not masked.
    pub fn effective_mask_rates(&self) -> (f64, f64) {
        let note = if self.weights.note > 0.0 { self.note_mask_rate } else { 0.0 };
        let meas = if self.weights.meas > 0.0 { self.meas_mask_rate } else { 0.0 };
        (note, meas)
    }
}

/// Loss settings for one batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub temperature: f64,
    pub include_positive: bool,
    pub weights: LossWeights,
    pub beta: f64,
}

/// A positive pair after masking.
#[derive(Debug, Clone)]
pub struct MaskedPair {
    pub window: MaskedWindow,
    /// Unmasked rows, the reconstruction targets.
    pub window_targets: Tensor,
    pub note: MaskedNote,
    /// Unmasked token ids.
    pub note_targets: Vec<u32>,
}

impl MaskedPair {
    pub fn new(window: &MeasurementWindow, note: &TokenSequence, rates: (f64, f64), mean_row: &[f64], rng: &mut seed::Rng) -> Result<Self> {
        let masked_note = mask_notes(note, rates.0, rng)?;
        let masked_window = mask_measurements(window, rates.1, rng, mean_row)?;
        Ok(Self {
            window: masked_window,
            window_targets: window.values.clone(),
            note: masked_note,
            note_targets: note.token_ids.clone(),
        })
    }
}

/// Records the weighted objective of a batch. Reconstruction terms are means
/// over all masked positions of the batch and are skipped when their weight is zero.
pub fn batch_objective(
    tape: &mut Tape,
    config: &ModelConfig,
    text: &TextVars,
    meas: &MeasVars,
    pairs: &[MaskedPair],
    stay_ids: &[StayId],
    settings: &ObjectiveSettings,
    mode: &mut Mode,
) -> Result<(Var, ObjectiveBreakdown)> {
    let mut m_rows = Vec::with_capacity(pairs.len());
    let mut t_rows = Vec::with_capacity(pairs.len());
    let mut note_terms = Vec::new();
    let mut meas_terms = Vec::new();
    let (mut note_count, mut meas_count) = (0usize, 0usize);
    for p in pairs {
        let mo = measurement_forward(tape, &config.measurement, meas, &p.window.masked_input, mode)?;
        let to = text_forward(tape, &config.text, text, &p.note.masked_input, mode)?;
        m_rows.push(mo.cls_aligned);
        t_rows.push(to.cls_aligned);
        if settings.weights.note > 0.0 {
            if let Some(v) = note_recon_sum_on_tape(tape, to.recon, &p.note_targets, &p.note.mask_positions)? {
                note_terms.push(v);
                note_count += p.note.mask_positions.len();
            }
        }
        if settings.weights.meas > 0.0 {
            if let Some(v) = meas_recon_sum_on_tape(tape, mo.recon, &p.window_targets, &p.window.mask_positions, settings.beta)? {
                meas_terms.push(v);
                meas_count += p.window.mask_positions.len() * p.window_targets.cols();
            }
        }
    }
    let m = tape.concat_rows(&m_rows)?;
    let t = tape.concat_rows(&t_rows)?;
    let align = alignment_loss_on_tape(tape, m, t, stay_ids, settings.temperature, settings.include_positive)?.total;

    let mut total = tape.scale(align, settings.weights.align)?;
    let mean_of = |tape: &mut Tape, terms: &[Var], count: usize, w: f64, total: &mut Var| -> Result<f64> {
        if terms.is_empty() {
            return Ok(0.0);
        }
        let mut s = terms[0];
        for &v in &terms[1..] {
            s = tape.add(s, v)?;
        }
        let mean = tape.scale(s, 1.0 / count as f64)?;
        let weighted = tape.scale(mean, w)?;
        *total = tape.add(*total, weighted)?;
        Ok(tape.value(mean).item())
    };
    let note_recon = mean_of(tape, &note_terms, note_count, settings.weights.note, &mut total)?;
    let meas_recon = mean_of(tape, &meas_terms, meas_count, settings.weights.meas, &mut total)?;
    let breakdown = ObjectiveBreakdown {
        total: tape.value(total).item(),
        align: tape.value(align).item(),
        note_recon,
        meas_recon,
        weights: settings.weights,
    };
    Ok((total, breakdown))
}

/// Gradients by parameter name for every trainable bound parameter.
pub(crate) fn named_grads(tape: &Tape, bound: &crate::encoders::BoundParams, loss: Var) -> Result<BTreeMap<String, Tensor>> {
    let mut grads = tape.backward(loss)?;
    Ok(bound
        .iter()
        .filter(|(_, v)| tape.requires_grad(*v))
        .map(|(name, v)| (name.to_string(), grads.take(v)))
        .collect())
}

/// Measurement windows and tokenized notes of a record set.
#[derive(Debug, Clone)]
pub struct PreparedStays {
    pub stay_ids: Vec<StayId>,
    pub windows: Vec<MeasurementWindow>,
    pub notes: Vec<Vec<TokenSequence>>,
}

impl PreparedStays {
    pub fn new(records: &[StayRecord], tokenizer: &dyn Tokenizer, max_seq_len: usize) -> Result<Self> {
        Ok(Self {
            stay_ids: records.iter().map(|r| r.stay_id).collect(),
            windows: records.iter().map(StayRecord::window).collect::<Result<_>>()?,
            notes: records
                .iter()
                .map(|r| r.notes.iter().map(|n| tokenizer.encode(&n.text, max_seq_len)).collect())
                .collect(),
        })
    }
}

/// Per-feature mean over every timestep of `records`.
pub fn feature_mean_row(records: &[StayRecord]) -> Result<Vec<f64>> {
    let f = records.first().map(|r| r.values.cols()).ok_or_else(|| Error::Data("no records".into()))?;
    let mut sum = vec![0.0; f];
    let mut n = 0usize;
    for r in records {
        for t in 0..r.timesteps() {
            for (s, v) in sum.iter_mut().zip(r.values.row(t)) {
                *s += v;
            }
            n += 1;
        }
    }
    Ok(sum.into_iter().map(|s| s / n.max(1) as f64).collect())
}

/// Mean of the batch breakdowns of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: ObjectiveBreakdown,
    pub grad_norm: f64,
    pub validation: Option<RetrievalScores>,
    pub wall_time_s: f64,
}

/// Model, optimizer and progress; enough to resume exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub model: DualEncoder,
    pub optimizer: AdamW,
    pub epochs_done: usize,
    pub best_validation: Option<f64>,
}

impl TrainState {
    pub fn to_checkpoint(&self, cfg: &PretrainConfig) -> Checkpoint {
        let mut ckpt = Checkpoint::from_model(&self.model);
        ckpt.tensors.extend(self.optimizer.state_tensors());
        ckpt.meta = serde_json::json!({
            "kind": "pretrain",
            "epochs_done": self.epochs_done,
            "best_validation": self.best_validation,
            "optimizer": self.optimizer.state_meta(),
            "config": cfg,
        });
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let meta = &ckpt.meta;
        let epochs_done = meta
            .get("epochs_done")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("not a resumable pretraining checkpoint".into()))? as usize;
        let optimizer = AdamW::from_state(meta.get("optimizer").unwrap_or(&serde_json::Value::Null), &ckpt.tensors)?;
        Ok(Self {
            model: ckpt.to_model(None)?,
            optimizer,
            epochs_done,
            best_validation: meta.get("best_validation").and_then(|v| v.as_f64()),
        })
    }
}

pub struct PretrainData<'a> {
    pub train: &'a [StayRecord],
    /// Used for per-epoch retrieval recall; may be empty.
    pub validation: &'a [StayRecord],
    pub tokenizer: &'a dyn Tokenizer,
}

#[derive(Default)]
pub struct PretrainOptions {
    /// Receives `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
    pub out_dir: Option<PathBuf>,
    pub resume: Option<TrainState>,
    /// Stop once this many epochs are done (the schedule still spans `epochs`).
    pub stop_after: Option<usize>,
}

pub struct PretrainOutcome {
    pub state: TrainState,
    pub log: Vec<EpochLog>,
    /// Model with the best validation mean R@1, when validation data was given.
    pub best: Option<DualEncoder>,
}

fn batches_per_epoch(pairs: usize, batch_size: usize) -> u64 {
    let full = pairs.div_ceil(batch_size);
    if full > 1 && pairs % batch_size == 1 {
        (full - 1) as u64
    } else {
        full as u64
    }
}

fn write_checkpoint(dir: &Path, name: &str, ckpt: &Checkpoint) -> Result<()> {
    ckpt.save(&dir.join(name))
}

/// Contrastive plus masked-reconstruction pretraining on `data.train`.
///
/// Every epoch reseeds its sampling, cropping, masking and dropout streams
/// from `(cfg.seed, epoch)`, so a resumed run continues bit-for-bit.
pub fn pretrain(data: &PretrainData, cfg: &PretrainConfig, opts: PretrainOptions) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let train = data.train;
    if train.len() < 2 {
        return Err(Error::Data(format!("pretraining needs at least 2 stays, got {}", train.len())));
    }
    let num_features = train[0].values.cols();
    let model_cfg = cfg.model.model_config(data.tokenizer.vocab_size(), num_features, cfg.text_dropout, cfg.meas_dropout);
    model_cfg.validate()?;
    let max_rows = cfg.model.max_seq_len - 1;
    let prepared = PreparedStays::new(train, data.tokenizer, cfg.model.max_seq_len)?;
    let mean_row = feature_mean_row(train)?;
    let rates = cfg.effective_mask_rates();
    let settings = ObjectiveSettings {
        temperature: cfg.temperature,
        include_positive: cfg.include_positive_in_denominator,
        weights: cfg.weights,
        beta: cfg.smooth_l1_beta,
    };

    let mut state = match opts.resume {
        Some(s) => {
            if s.model.config != model_cfg {
                return Err(Error::Checkpoint("resume checkpoint was trained with a different model config".into()));
            }
            s
        }
        None => TrainState {
            model: DualEncoder::init(model_cfg.clone(), &mut seed::stream(cfg.seed, "init", 0))?,
            optimizer: AdamW::new(cfg.optimizer)?,
            epochs_done: 0,
            best_validation: None,
        },
    };
    let n_pairs = prepared.notes.iter().filter(|n| !n.is_empty()).count();
    if n_pairs < 2 {
        return Err(Error::Data("fewer than 2 training stays have notes".into()));
    }
    let total_steps = batches_per_epoch(n_pairs, cfg.batch_size) * cfg.epochs as u64;
    let val_prepared = if data.validation.is_empty() {
        None
    } else {
        Some(PreparedStays::new(data.validation, data.tokenizer, cfg.model.max_seq_len)?)
    };
    if let Some(dir) = &opts.out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let stop = opts.stop_after.unwrap_or(cfg.epochs).min(cfg.epochs);
    let mut log = Vec::new();
    let mut best = None;
    while state.epochs_done < stop {
        let epoch = state.epochs_done;
        let started = Instant::now();
        let e = epoch as u64;
        let pairs = sample_epoch_pairs(train, &mut seed::stream(cfg.seed, "sampling", e));
        let mut crop_rng = seed::stream(cfg.seed, "crop", e);
        let batches = build_pair_batches(&pairs, cfg.batch_size, &mut seed::stream(cfg.seed, "shuffle", e), |p| {
            let w = crop_window(&prepared.windows[p.record], max_rows, &mut crop_rng);
            (w, prepared.notes[p.record][p.note_index].clone())
        });
        let mut mask_rng = seed::stream(cfg.seed, "masking", e);
        let mut drop_rng = seed::stream(cfg.seed, "dropout", e);

        let mut sums = [0.0f64; 4];
        let mut grad_norm = 0.0;
        let mut lr = cfg.optimizer.lr;
        for batch in &batches {
            let masked: Vec<MaskedPair> = batch
                .windows
                .iter()
                .zip(&batch.notes)
                .map(|(w, n)| MaskedPair::new(w, n, rates, &mean_row, &mut mask_rng))
                .collect::<Result<_>>()?;
            let mut tape = Tape::new();
            let bound = state.model.params.bind(&mut tape, |_| true);
            let tv = TextVars::from_bound(&bound, &model_cfg.text)?;
            let mv = MeasVars::from_bound(&bound, &model_cfg.measurement)?;
            let (loss, parts) = batch_objective(
                &mut tape,
                &model_cfg,
                &tv,
                &mv,
                &masked,
                &batch.stay_ids,
                &settings,
                &mut Mode::Train(&mut drop_rng),
            )?;
            if !parts.total.is_finite() {
                return Err(Error::NonFinite(format!("training loss at epoch {} step {}", epoch + 1, state.optimizer.step_count())));
            }
            let grads = named_grads(&tape, &bound, loss)?;
            lr = cosine_lr(cfg.optimizer.lr, state.optimizer.step_count(), total_steps);
            let report = state.optimizer.step(&mut state.model.params, &grads, lr)?;
            grad_norm += report.grad_norm;
            for (s, v) in sums.iter_mut().zip([parts.total, parts.align, parts.note_recon, parts.meas_recon]) {
                *s += v;
            }
        }
        let nb = batches.len().max(1) as f64;
        let loss = ObjectiveBreakdown {
            total: sums[0] / nb,
            align: sums[1] / nb,
            note_recon: sums[2] / nb,
            meas_recon: sums[3] / nb,
            weights: cfg.weights,
        };
        let validation = match &val_prepared {
            Some(v) => Some(retrieval_scores(&state.model, v, false)?),
            None => None,
        };
        state.epochs_done += 1;
        let improved = match (&validation, state.best_validation) {
            (Some(v), Some(b)) => v.mean_r1() > b,
            (Some(_), None) => true,
            _ => false,
        };
        if improved {
            state.best_validation = validation.as_ref().map(RetrievalScores::mean_r1);
            best = Some(state.model.clone());
        }
        let entry = EpochLog {
            epoch: state.epochs_done,
            step: state.optimizer.step_count(),
            lr,
            loss,
            grad_norm: grad_norm / nb,
            validation,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {} loss {:.4} (align {:.4}, note {:.4}, meas {:.4})",
            entry.epoch,
            loss.total,
            loss.align,
            loss.note_recon,
            loss.meas_recon
        );
        if let Some(dir) = &opts.out_dir {
            let path = dir.join("metrics.jsonl");
            let mut f = std::fs::OpenOptions::new().create(true).append(true).open(&path).map_err(|e| Error::io(&path, e))?;
            writeln!(f, "{}", serde_json::to_string(&entry)?).map_err(|e| Error::io(&path, e))?;
            let due = cfg.checkpoint_every > 0 && state.epochs_done % cfg.checkpoint_every == 0;
            if due || state.epochs_done == stop {
                write_checkpoint(dir, "last.ckpt", &state.to_checkpoint(cfg))?;
            }
            if improved {
                write_checkpoint(dir, "best.ckpt", &state.to_checkpoint(cfg))?;
            }
        }
        log.push(entry);
    }
    Ok(PretrainOutcome { state, log, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, NormStats, SyntheticConfig, WordTokenizer};

    pub(crate) fn tiny_data(n: usize, s: u64) -> (Vec<StayRecord>, WordTokenizer) {
        let cfg = SyntheticConfig { min_hours: 6, max_hours: 10, ..Default::default() };
        let mut rs = generate_synthetic(n, &mut seed::stream(s, "data", 0), &cfg).unwrap();
        crate::data::pair_notes(&mut rs, &crate::data::NoteType::RETAINED, Default::default()).unwrap();
        let stats = NormStats::fit(&rs, 17).unwrap();
        for r in &mut rs {
            stats.apply(&mut r.values);
        }
        let tok = WordTokenizer::build(rs.iter().flat_map(|r| r.notes.iter().map(|n| n.text.as_str())), 1);
        (rs, tok)
    }

    fn tiny_cfg() -> PretrainConfig {
        PretrainConfig {
            model: ModelShape { num_layers: 1, hidden_dim: 8, num_heads: 2, max_seq_len: 32 },
            epochs: 2,
            batch_size: 4,
            optimizer: AdamWConfig { lr: 1e-3, ..Default::default() },
            ..Default::default()
        }
    }

    #[test]
    fn smoke_two_epochs_two_log_rows() {
        let (rs, tok) = tiny_data(8, 1);
        let data = PretrainData { train: &rs, validation: &rs[..4], tokenizer: &tok };
        let dir = tempfile::tempdir().unwrap();
        let out = pretrain(&data, &tiny_cfg(), PretrainOptions { out_dir: Some(dir.path().into()), ..Default::default() })
            .unwrap();
        assert_eq!(out.log.len(), 2);
        assert!(out.log.iter().all(|e| e.loss.total.is_finite() && e.validation.is_some()));
        let lines = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        assert_eq!(lines.lines().count(), 2);
        assert!(dir.path().join("last.ckpt").exists() && dir.path().join("best.ckpt").exists());
    }

    #[test]
    fn align_only_logs_zero_reconstruction() {
        let (rs, tok) = tiny_data(8, 2);
        let data = PretrainData { train: &rs, validation: &[], tokenizer: &tok };
        let cfg = PretrainConfig { weights: LossWeights::align_only(), note_mask_rate: 0.2, meas_mask_rate: 0.2, ..tiny_cfg() };
        let out = pretrain(&data, &cfg, PretrainOptions::default()).unwrap();
        for e in &out.log {
            assert_eq!(e.loss.note_recon, 0.0);
            assert_eq!(e.loss.meas_recon, 0.0);
            assert_eq!(e.loss.total, e.loss.align);
        }
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (rs, tok) = tiny_data(10, 3);
        let data = PretrainData { train: &rs, validation: &[], tokenizer: &tok };
        let cfg = PretrainConfig { epochs: 3, text_dropout: 0.1, meas_dropout: 0.1, ..tiny_cfg() };
        let full = pretrain(&data, &cfg, PretrainOptions::default()).unwrap();
        let first = pretrain(&data, &cfg, PretrainOptions { stop_after: Some(1), ..Default::default() }).unwrap();
        let bytes = first.state.to_checkpoint(&cfg).to_bytes().unwrap();
        let restored = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let rest = pretrain(&data, &cfg, PretrainOptions { resume: Some(restored), ..Default::default() }).unwrap();
        assert_eq!(rest.state, full.state);
        assert_eq!(rest.log.iter().map(|e| e.loss).collect::<Vec<_>>(), full.log[1..].iter().map(|e| e.loss).collect::<Vec<_>>());
    }

    #[test]
    fn batch_count_matches_builder() {
        assert_eq!(batches_per_epoch(9, 4), 2);
        assert_eq!(batches_per_epoch(8, 4), 2);
        assert_eq!(batches_per_epoch(10, 4), 3);
        assert_eq!(batches_per_epoch(3, 4), 1);
    }
}
