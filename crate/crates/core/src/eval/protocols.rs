use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::metrics::{auc_pr, auc_roc, recall_at_ks, RetrievalIndex};
use crate::data::{center_crop, Tokenizer};
use crate::encoders::{special, DualEncoder, MeasurementWindow, ModelConfig, TokenSequence};
use crate::error::{Error, Result};
use crate::seed;
use crate::train::{
    finetune, fit_linear_head, head_loss, head_probabilities, task_metrics, FinetuneConfig, PreparedStays, Task,
    TaskExamples,
};

/// Recall cutoffs reported for retrieval.
pub const RECALL_KS: [usize; 3] = [1, 5, 10];

/// Anchor phrases for the positive (death) and negative class.
pub const DEFAULT_ANCHORS: (&str, &str) = ("patient deceased", "discharged today");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub n_samples: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

/// Short SHA-256 digest of a config's JSON form.
pub fn fingerprint<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&bytes);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Recall at 1/5/10 (percent) in both directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrievalScores {
    /// Measurement queries against note candidates.
    pub m_to_t: [f64; 3],
    /// Note queries against measurement candidates.
    pub t_to_m: [f64; 3],
    pub n_stays: usize,
    pub n_notes: usize,
}

impl RetrievalScores {
    pub fn mean_r1(&self) -> f64 {
        0.5 * (self.m_to_t[0] + self.t_to_m[0])
    }

    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut out = BTreeMap::new();
        for (i, k) in RECALL_KS.iter().enumerate() {
            out.insert(format!("m_to_t_r{k}"), self.m_to_t[i]);
            out.insert(format!("t_to_m_r{k}"), self.t_to_m[i]);
        }
        out
    }
}

/// Builds both retrieval directions. `note_embeds[s]` holds the embeddings of
/// stay `s`'s notes; every note of a stay counts as correct for its window.
pub fn retrieval_indices(window_embeds: &[Vec<f64>], note_embeds: &[Vec<Vec<f64>>]) -> Result<(RetrievalIndex, RetrievalIndex)> {
    let mut notes = Vec::new();
    let mut owner = Vec::new();
    let mut m_correct = Vec::new();
    for (s, embeds) in note_embeds.iter().enumerate() {
        let start = notes.len();
        for e in embeds {
            notes.push(e.clone());
            owner.push(s);
        }
        m_correct.push((start..notes.len()).collect::<Vec<_>>());
    }
    let m_to_t = RetrievalIndex::new(window_embeds.to_vec(), notes.clone(), m_correct)?;
    let t_to_m = RetrievalIndex::new(notes, window_embeds.to_vec(), owner.into_iter().map(|s| vec![s]).collect())?;
    Ok((m_to_t, t_to_m))
}

/// Retrieval between each stay's window (center cropped) and its notes.
/// With `single_positive` only the first note of each stay is used.
pub fn retrieval_scores(model: &DualEncoder, stays: &PreparedStays, single_positive: bool) -> Result<RetrievalScores> {
    let max_rows = model.config.measurement.max_seq_len - 1;
    let keep: Vec<usize> = (0..stays.windows.len()).filter(|&i| !stays.notes[i].is_empty()).collect();
    if keep.len() < 2 {
        return Err(Error::Data("retrieval needs at least 2 stays with notes".into()));
    }
    let windows: Vec<MeasurementWindow> = keep.iter().map(|&i| center_crop(&stays.windows[i], max_rows)).collect();
    let w_emb = model.measurement_embeddings(&windows)?;
    let mut counts = Vec::with_capacity(keep.len());
    let mut seqs: Vec<TokenSequence> = Vec::new();
    for &i in &keep {
        let notes = if single_positive { &stays.notes[i][..1] } else { &stays.notes[i][..] };
        counts.push(notes.len());
        seqs.extend(notes.iter().cloned());
    }
    let flat = model.text_embeddings(&seqs)?;
    let mut it = flat.into_iter();
    let n_emb: Vec<Vec<Vec<f64>>> = counts.iter().map(|&c| it.by_ref().take(c).collect()).collect();
    let (m2t, t2m) = retrieval_indices(&w_emb, &n_emb)?;
    let r = |idx: &RetrievalIndex| -> Result<[f64; 3]> {
        let v = recall_at_ks(idx, &RECALL_KS)?;
        Ok([v[0], v[1], v[2]])
    };
    Ok(RetrievalScores { m_to_t: r(&m2t)?, t_to_m: r(&t2m)?, n_stays: keep.len(), n_notes: seqs.len() })
}

/// Two-way softmax at temperature 1 over `(a, b)`, returned as `(p_a, p_b)`.
/// Computed so that swapping the inputs swaps the outputs exactly.
pub fn pair_softmax(a: f64, b: f64) -> (f64, f64) {
    fn upper(d: f64) -> f64 {
        // d >= 0, so the result lies in [1/2, 1] and 1 - result is exact
        1.0 / (1.0 + (-d).exp())
    }
    let d = a - b;
    if d >= 0.0 {
        let p = upper(d);
        (p, 1.0 - p)
    } else {
        let q = upper(-d);
        (1.0 - q, q)
    }
}

fn encode_anchor(tokenizer: &dyn Tokenizer, text: &str, max_len: usize) -> Result<TokenSequence> {
    let unknown = tokenizer.unknown_words(text);
    if !unknown.is_empty() {
        log::warn!("anchor {text:?} has out-of-vocabulary words {unknown:?}; they map to the unknown token");
    }
    let seq = tokenizer.encode(text, max_len);
    if seq.token_ids.iter().skip(1).all(|&t| t == special::PAD) {
        return Err(Error::Config(format!("anchor {text:?} has no tokens")));
    }
    Ok(seq)
}

/// Probability of the first anchor for each window: cosine similarity to both
/// anchor embeddings followed by a two-way softmax.
pub fn zero_shot_probabilities(
    model: &DualEncoder,
    tokenizer: &dyn Tokenizer,
    anchors: (&str, &str),
    windows: &[MeasurementWindow],
) -> Result<Vec<(f64, f64)>> {
    let max_len = model.config.text.max_seq_len;
    let seqs = [encode_anchor(tokenizer, anchors.0, max_len)?, encode_anchor(tokenizer, anchors.1, max_len)?];
    let a = model.text_embeddings(&seqs)?;
    let max_rows = model.config.measurement.max_seq_len - 1;
    let crops: Vec<MeasurementWindow> = windows.iter().map(|w| center_crop(w, max_rows)).collect();
    let w = model.measurement_embeddings(&crops)?;
    let dot = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(p, q)| p * q).sum::<f64>();
    Ok(w.iter().map(|e| pair_softmax(dot(e, &a[0]), dot(e, &a[1]))).collect())
}

/// Zero-shot mortality scoring; the first anchor names the positive class.
pub fn zero_shot_ihm(
    model: &DualEncoder,
    tokenizer: &dyn Tokenizer,
    anchors: (&str, &str),
    windows: &[MeasurementWindow],
    labels: &[bool],
) -> Result<(EvalReport, Vec<f64>)> {
    let probs: Vec<f64> = zero_shot_probabilities(model, tokenizer, anchors, windows)?.into_iter().map(|p| p.0).collect();
    let mut metrics = BTreeMap::new();
    metrics.insert("auc_roc".to_string(), auc_roc(&probs, labels)?);
    metrics.insert("auc_pr".to_string(), auc_pr(&probs, labels)?);
    let report = EvalReport {
        task: "zeroshot_ihm".into(),
        metrics,
        n_samples: labels.len(),
        config_fingerprint: fingerprint(&(anchors.0, anchors.1, &model.config))?,
    };
    Ok((report, probs))
}

/// Search grid for linear evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearEvalGrid {
    pub batch_sizes: Vec<usize>,
    pub epochs: Vec<usize>,
    pub lrs: Vec<f64>,
}

impl Default for LinearEvalGrid {
    fn default() -> Self {
        Self { batch_sizes: vec![8, 16, 32, 64], epochs: (1..=5).collect(), lrs: vec![1e-3, 1e-4, 1e-5] }
    }
}

/// Frozen-backbone linear probe. The head configuration with the lowest
/// validation loss is refit and scored on `test`.
pub fn linear_eval(
    model: &DualEncoder,
    task: Task,
    train: &TaskExamples,
    validation: &TaskExamples,
    test: &TaskExamples,
    grid: &LinearEvalGrid,
    base: &FinetuneConfig,
) -> Result<(EvalReport, FinetuneConfig)> {
    let f_train = model.measurement_features(&train.windows)?;
    let f_val = model.measurement_features(&validation.windows)?;
    let f_test = model.measurement_features(&test.windows)?;
    let mut best: Option<(f64, FinetuneConfig)> = None;
    for &batch_size in &grid.batch_sizes {
        for &epochs in &grid.epochs {
            for &lr in &grid.lrs {
                // the head is the only parameter group here, so it trains at `lr`
                let cfg = FinetuneConfig { batch_size, epochs, lr, head_lr_multiplier: 1.0, frozen: true, ..base.clone() };
                let head = fit_linear_head(&f_train, &train.targets, task, &cfg)?;
                let loss = head_loss(&f_val, &validation.targets, &head)?;
                if best.as_ref().map_or(true, |(b, _)| loss < *b) {
                    best = Some((loss, cfg));
                }
            }
        }
    }
    let (val_loss, cfg) = best.ok_or_else(|| Error::Config("linear evaluation grid is empty".into()))?;
    let head = fit_linear_head(&f_train, &train.targets, task, &cfg)?;
    let mut metrics = task_metrics(task, &head_probabilities(&f_test, &head)?, &test.targets)?;
    metrics.insert("validation_loss".into(), val_loss);
    let report = EvalReport {
        task: format!("linear_{}", task.name()),
        metrics,
        n_samples: test.len(),
        config_fingerprint: fingerprint(&cfg)?,
    };
    Ok((report, cfg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSupRow {
    /// "pretrained" or "random".
    pub init: String,
    pub fraction: u32,
    pub repeat: usize,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemiSupSummary {
    pub init: String,
    pub fraction: u32,
    pub metric: String,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single repeat.
    pub std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SemiSupTable {
    pub rows: Vec<SemiSupRow>,
    pub summary: Vec<SemiSupSummary>,
}

impl SemiSupTable {
    pub fn mean(&self, init: &str, fraction: u32, metric: &str) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.init == init && s.fraction == fraction && s.metric == metric)
            .map(|s| s.mean)
    }

    pub fn write_csv(&self, rows_path: &Path, summary_path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(rows_path).map_err(|e| Error::Data(format!("{}: {e}", rows_path.display())))?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(rows_path, e))?;
        let mut w =
            csv::Writer::from_path(summary_path).map_err(|e| Error::Data(format!("{}: {e}", summary_path.display())))?;
        for s in &self.summary {
            w.serialize(s)?;
        }
        w.flush().map_err(|e| Error::io(summary_path, e))
    }
}

/// Fine-tunes on each label fraction from the pretrained model (when given)
/// and from random initialization, `repeats` times each, scoring on `test`.
pub fn semi_supervised_eval(
    pretrained: Option<&DualEncoder>,
    random_config: &ModelConfig,
    task: Task,
    fractions: &[(u32, TaskExamples)],
    test: &TaskExamples,
    repeats: usize,
    cfg: &FinetuneConfig,
) -> Result<SemiSupTable> {
    if repeats == 0 {
        return Err(Error::Config("repeats must be at least 1".into()));
    }
    let mut rows = Vec::new();
    for (fraction, train) in fractions {
        for repeat in 0..repeats {
            let run_cfg = FinetuneConfig { seed: cfg.seed.wrapping_add(repeat as u64), ..cfg.clone() };
            let random = DualEncoder::init(random_config.clone(), &mut seed::stream(run_cfg.seed, "random-init", 0))?;
            let mut inits: Vec<(&str, &DualEncoder)> = Vec::new();
            if let Some(p) = pretrained {
                inits.push(("pretrained", p));
            }
            inits.push(("random", &random));
            for (name, backbone) in inits {
                let model = finetune(backbone, task, train, &run_cfg)?;
                for (metric, value) in model.evaluate(test)? {
                    rows.push(SemiSupRow { init: name.into(), fraction: *fraction, repeat, metric, value });
                }
            }
        }
    }
    let mut groups: BTreeMap<(String, u32, String), Vec<f64>> = BTreeMap::new();
    for r in &rows {
        groups.entry((r.init.clone(), r.fraction, r.metric.clone())).or_default().push(r.value);
    }
    let summary = groups
        .into_iter()
        .map(|((init, fraction, metric), v)| {
            let n = v.len() as f64;
            let mean = v.iter().sum::<f64>() / n;
            let std = if v.len() > 1 { (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
            SemiSupSummary { init, fraction, metric, mean, std, repeats: v.len() }
        })
        .collect();
    Ok(SemiSupTable { rows, summary })
}
