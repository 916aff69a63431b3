//! Masking of note tokens and measurement rows before encoding.

use rand::Rng as _;

use crate::encoders::{special, MeasurementWindow, TokenSequence};
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::substrate::Tensor;

/// A masked input together with what was hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample<I, O> {
    pub masked_input: I,
    /// Token positions (notes) or timesteps (measurements), ascending.
    pub mask_positions: Vec<usize>,
    /// Original value at each masked position.
    pub original_targets: Vec<O>,
    pub mask_rate_used: f64,
}

pub type MaskedNote = MaskedSample<TokenSequence, u32>;
pub type MaskedWindow = MaskedSample<MeasurementWindow, Vec<f64>>;

fn check_rate(rate: f64) -> Result<()> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Config(format!("mask rate must lie in [0, 1), got {rate}")));
    }
    Ok(())
}

/// Replaces each content token with the mask id with probability `rate`.
/// Position 0 (class token) and padding are never masked.
pub fn mask_notes(seq: &TokenSequence, rate: f64, rng: &mut Rng) -> Result<MaskedNote> {
    check_rate(rate)?;
    let mut ids = seq.token_ids.clone();
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    for (i, id) in ids.iter_mut().enumerate().skip(1) {
        // draw for every content position so the pattern depends only on length
        let hit = rng.gen::<f64>() < rate;
        if hit && *id != special::PAD && *id != special::CLS {
            positions.push(i);
            originals.push(*id);
            *id = special::MASK;
        }
    }
    Ok(MaskedSample {
        masked_input: TokenSequence::new(ids),
        mask_positions: positions,
        original_targets: originals,
        mask_rate_used: rate,
    })
}

/// Replaces each whole timestep row with `mean_row` with probability `rate`.
pub fn mask_measurements(win: &MeasurementWindow, rate: f64, rng: &mut Rng, mean_row: &[f64]) -> Result<MaskedWindow> {
    check_rate(rate)?;
    let f = win.num_features();
    if mean_row.len() != f {
        return Err(Error::Dimension { op: "mask_measurements", lhs: vec![f], rhs: vec![mean_row.len()] });
    }
    let mut data = win.values.data().to_vec();
    let mut positions = Vec::new();
    let mut originals = Vec::new();
    for t in 0..win.timesteps() {
        if rng.gen::<f64>() < rate {
            let row = &mut data[t * f..(t + 1) * f];
            positions.push(t);
            originals.push(row.to_vec());
            row.copy_from_slice(mean_row);
        }
    }
    Ok(MaskedSample {
        masked_input: MeasurementWindow::new(Tensor::new(vec![win.timesteps(), f], data)?)?,
        mask_positions: positions,
        original_targets: originals,
        mask_rate_used: rate,
    })
}

impl MaskedNote {
    pub fn restore(&self) -> TokenSequence {
        let mut ids = self.masked_input.token_ids.clone();
        for (&p, &o) in self.mask_positions.iter().zip(&self.original_targets) {
            ids[p] = o;
        }
        TokenSequence::new(ids)
    }
}

impl MaskedWindow {
    pub fn restore(&self) -> MeasurementWindow {
        let mut w = self.masked_input.clone();
        let f = w.num_features();
        for (&t, row) in self.mask_positions.iter().zip(&self.original_targets) {
            w.values.data_mut()[t * f..(t + 1) * f].copy_from_slice(row);
        }
        w
    }
}
