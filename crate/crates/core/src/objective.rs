//! Pretraining losses: bidirectional contrastive alignment with same-stay
//! exclusion, masked note-token cross-entropy, masked measurement smooth-L1.

use serde::{Deserialize, Serialize};

use crate::data::StayId;
use crate::error::{Error, Result};
use crate::substrate::{smooth_l1_scalar, Tape, Tensor, Var};

pub const DEFAULT_SMOOTH_L1_BETA: f64 = 1.0;
const UNIT_NORM_TOL: f64 = 1e-6;

/// Paired class embeddings for one contrastive step.
#[derive(Debug, Clone)]
pub struct AlignmentBatch {
    pub m_embeds: Vec<Vec<f64>>,
    pub t_embeds: Vec<Vec<f64>>,
    pub stay_ids: Vec<StayId>,
    pub temperature: f64,
    /// Keep the positive pair in each softmax denominator (standard InfoNCE).
    pub include_positive_in_denominator: bool,
}

impl AlignmentBatch {
    pub fn new(m_embeds: Vec<Vec<f64>>, t_embeds: Vec<Vec<f64>>, stay_ids: Vec<StayId>, temperature: f64) -> Self {
        Self {
            m_embeds,
            t_embeds,
            stay_ids,
            temperature,
            include_positive_in_denominator: true,
        }
    }
}

/// Which entries may appear in anchor `j`'s denominator: the positive itself
/// (optionally) and every entry from a different stay.
pub fn candidate_mask(stay_ids: &[StayId], include_positive: bool) -> Vec<bool> {
    let n = stay_ids.len();
    let mut mask = vec![false; n * n];
    for j in 0..n {
        for c in 0..n {
            mask[j * n + c] = if c == j {
                include_positive
            } else {
                stay_ids[c] != stay_ids[j]
            };
        }
    }
    mask
}

fn check_alignment_inputs(n: usize, stay_ids: &[StayId], temperature: f64, include_positive: bool) -> Result<()> {
    if !(temperature > 0.0) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    if n < 2 {
        return Err(Error::Batch(format!("alignment needs at least 2 pairs, got {n}")));
    }
    if stay_ids.len() != n {
        return Err(Error::Batch(format!("{} stay ids for {n} pairs", stay_ids.len())));
    }
    if !include_positive {
        for j in 0..n {
            if stay_ids.iter().all(|s| *s == stay_ids[j]) {
                return Err(Error::Batch(format!("anchor {j} has no negatives from other stays")));
            }
        }
    }
    Ok(())
}

/// Tape handles of the two directional terms and their sum.
#[derive(Debug, Clone, Copy)]
pub struct AlignmentTerms {
    pub m_to_t: Var,
    pub t_to_m: Var,
    pub total: Var,
}

/// Records `L_MT + L_TM` for `[N × p]` unit-norm measurement and note embeddings.
pub fn alignment_loss_on_tape(
    tape: &mut Tape,
    m_embeds: Var,
    t_embeds: Var,
    stay_ids: &[StayId],
    temperature: f64,
    include_positive: bool,
) -> Result<AlignmentTerms> {
    let n = tape.value(m_embeds).rows();
    check_alignment_inputs(n, stay_ids, temperature, include_positive)?;
    if tape.value(t_embeds).shape() != tape.value(m_embeds).shape() {
        return Err(Error::Dimension {
            op: "alignment_loss",
            lhs: tape.value(m_embeds).shape().to_vec(),
            rhs: tape.value(t_embeds).shape().to_vec(),
        });
    }
    let tt = tape.transpose(t_embeds)?;
    let sims = tape.matmul(m_embeds, tt)?;
    let logits = tape.scale(sims, 1.0 / temperature)?;
    let mask = candidate_mask(stay_ids, include_positive);
    let picks: Vec<(usize, usize)> = (0..n).map(|j| (j, j)).collect();

    let mt = tape.pick_log_softmax(logits, &picks, Some(mask.clone()))?;
    let logits_t = tape.transpose(logits)?;
    // the mask is symmetric, so it also describes note anchors over measurements
    let tm = tape.pick_log_softmax(logits_t, &picks, Some(mask))?;

    let prefactor = 1.0 / (2.0 * n as f64);
    let m_to_t = tape.scale(mt, prefactor)?;
    let t_to_m = tape.scale(tm, prefactor)?;
    let total = tape.add(m_to_t, t_to_m)?;
    Ok(AlignmentTerms { m_to_t, t_to_m, total })
}

fn embeds_tensor(rows: &[Vec<f64>], what: &str) -> Result<Tensor> {
    for (i, r) in rows.iter().enumerate() {
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::Data(format!("{what}[{i}] has norm {norm}, expected 1")));
        }
    }
    Tensor::from_rows(rows)
}

/// `L_Alignment = L_MT + L_TM` for a batch of unit-norm embeddings.
pub fn alignment_loss(batch: &AlignmentBatch) -> Result<f64> {
    let n = batch.m_embeds.len();
    check_alignment_inputs(n, &batch.stay_ids, batch.temperature, batch.include_positive_in_denominator)?;
    if batch.t_embeds.len() != n {
        return Err(Error::Batch(format!("{n} measurement vs {} note embeddings", batch.t_embeds.len())));
    }
    let mut tape = Tape::new();
    let m = tape.constant(embeds_tensor(&batch.m_embeds, "m_embeds")?);
    let t = tape.constant(embeds_tensor(&batch.t_embeds, "t_embeds")?);
    let terms = alignment_loss_on_tape(
        &mut tape,
        m,
        t,
        &batch.stay_ids,
        batch.temperature,
        batch.include_positive_in_denominator,
    )?;
    Ok(tape.value(terms.total).item())
}

/// Whether a reconstruction loss had anything to reconstruct.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskStatus {
    Masked,
    NoMask,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReconLoss {
    pub value: f64,
    pub status: MaskStatus,
}

fn check_note_positions(len: usize, targets: usize, positions: &[usize]) -> Result<()> {
    if targets != len {
        return Err(Error::Dimension {
            op: "note_recon_loss",
            lhs: vec![len],
            rhs: vec![targets],
        });
    }
    if let Some(p) = positions.iter().find(|&&p| p == 0 || p >= len) {
        return Err(Error::Contract(format!("mask position {p} outside content range [1, {len})")));
    }
    Ok(())
}

/// Records the summed cross-entropy at masked note positions; `None` when nothing is masked.
pub fn note_recon_sum_on_tape(tape: &mut Tape, recon: Var, targets: &[u32], positions: &[usize]) -> Result<Option<Var>> {
    check_note_positions(tape.value(recon).rows(), targets.len(), positions)?;
    if positions.is_empty() {
        return Ok(None);
    }
    let picks: Vec<(usize, usize)> = positions.iter().map(|&p| (p, targets[p] as usize)).collect();
    tape.pick_log_softmax(recon, &picks, None).map(Some)
}

/// Mean cross-entropy over masked positions of `[L × vocab]` logits.
///
/// `targets` holds the original token id at every position.
pub fn note_recon_loss(recon: &Tensor, targets: &[u32], mask_positions: &[usize]) -> Result<ReconLoss> {
    let mut tape = Tape::new();
    let r = tape.constant(recon.clone());
    match note_recon_sum_on_tape(&mut tape, r, targets, mask_positions)? {
        None => Ok(ReconLoss {
            value: 0.0,
            status: MaskStatus::NoMask,
        }),
        Some(v) => Ok(ReconLoss {
            value: tape.value(v).item() / mask_positions.len() as f64,
            status: MaskStatus::Masked,
        }),
    }
}

fn check_meas_positions(recon_rows: usize, targets: &Tensor, timesteps: &[usize]) -> Result<()> {
    let t = targets.rows();
    if recon_rows != t + 1 {
        return Err(Error::Dimension {
            op: "meas_recon_loss",
            lhs: vec![recon_rows],
            rhs: vec![t + 1],
        });
    }
    if let Some(p) = timesteps.iter().find(|&&p| p >= t) {
        return Err(Error::Contract(format!("masked timestep {p} outside [0, {t})")));
    }
    Ok(())
}

/// Records the summed smooth-L1 over masked timesteps; recon row `t + 1` predicts target row `t`.
pub fn meas_recon_sum_on_tape(
    tape: &mut Tape,
    recon: Var,
    targets: &Tensor,
    timesteps: &[usize],
    beta: f64,
) -> Result<Option<Var>> {
    check_meas_positions(tape.value(recon).rows(), targets, timesteps)?;
    if timesteps.is_empty() {
        return Ok(None);
    }
    let pairs: Vec<(usize, usize)> = timesteps.iter().map(|&t| (t + 1, t)).collect();
    tape.smooth_l1(recon, targets, &pairs, beta).map(Some)
}

/// Mean smooth-L1 over masked timesteps and all features.
pub fn meas_recon_loss(recon: &Tensor, targets: &Tensor, mask_timesteps: &[usize], beta: f64) -> Result<ReconLoss> {
    if !(beta > 0.0) {
        return Err(Error::Config(format!("smooth-L1 beta must be positive, got {beta}")));
    }
    check_meas_positions(recon.rows(), targets, mask_timesteps)?;
    if mask_timesteps.is_empty() {
        return Ok(ReconLoss {
            value: 0.0,
            status: MaskStatus::NoMask,
        });
    }
    let f = targets.cols();
    let mut total = 0.0;
    for &t in mask_timesteps {
        for (p, y) in recon.row(t + 1).iter().zip(targets.row(t)) {
            total += smooth_l1_scalar(p - y, beta);
        }
    }
    Ok(ReconLoss {
        value: total / (mask_timesteps.len() * f) as f64,
        status: MaskStatus::Masked,
    })
}

/// Mixing weights for the three objective terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub align: f64,
    pub note: f64,
    pub meas: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            align: 1.0,
            note: 1.0,
            meas: 1.0,
        }
    }
}

impl LossWeights {
    pub fn new(align: f64, note: f64, meas: f64) -> Self {
        Self { align, note, meas }
    }

    /// Contrastive term only.
    pub fn align_only() -> Self {
        Self::new(1.0, 0.0, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("align", self.align), ("note", self.note), ("meas", self.meas)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} must be finite and >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

/// Scalar objective with its parts kept for logging.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    pub total: f64,
    pub align: f64,
    pub note_recon: f64,
    pub meas_recon: f64,
    pub weights: LossWeights,
}

pub fn combine(align: f64, note_recon: f64, meas_recon: f64, weights: LossWeights) -> ObjectiveBreakdown {
    ObjectiveBreakdown {
        total: weights.align * align + weights.note * note_recon + weights.meas * meas_recon,
        align,
        note_recon,
        meas_recon,
        weights,
    }
}
