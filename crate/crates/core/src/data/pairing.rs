use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{NoteType, StayId, StayRecord};
use crate::encoders::MeasurementWindow;
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::substrate::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownNotePolicy {
    /// Drop the note and count it in the report.
    #[default]
    Drop,
    Error,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairingReport {
    /// Retained notes summed over stays; one positive pair each.
    pub pair_count: usize,
    pub dropped_type: usize,
    pub dropped_window: usize,
    pub dropped_unknown: usize,
}

/// Filters each record's notes in place: keeps only `retained` types whose
/// timestamp falls inside the inclusive measurement span. Discharge summaries
/// of a retained type are kept regardless of time.
pub fn pair_notes(records: &mut [StayRecord], retained: &[NoteType], policy: UnknownNotePolicy) -> Result<PairingReport> {
    let mut report = PairingReport::default();
    for r in records.iter_mut() {
        let (start, end) = r.time_span();
        let mut kept = Vec::with_capacity(r.notes.len());
        for note in r.notes.drain(..) {
            if let NoteType::Unknown(name) = &note.note_type {
                if policy == UnknownNotePolicy::Error {
                    return Err(Error::Data(format!("stay {}: unknown note type {name:?}", r.stay_id)));
                }
                report.dropped_unknown += 1;
                continue;
            }
            if !retained.contains(&note.note_type) {
                report.dropped_type += 1;
                continue;
            }
            let in_window = note.timestamp >= start && note.timestamp <= end;
            if !in_window && note.note_type != NoteType::DischargeSummary {
                report.dropped_window += 1;
                continue;
            }
            kept.push(note);
        }
        report.pair_count += kept.len();
        r.notes = kept;
    }
    if report.dropped_unknown > 0 {
        log::warn!("dropped {} notes of unknown type", report.dropped_unknown);
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpochPair {
    /// Index into the record slice.
    pub record: usize,
    pub stay_id: StayId,
    pub note_index: usize,
}

/// One uniformly chosen note per stay. Stays without notes are skipped.
pub fn sample_epoch_pairs(records: &[StayRecord], rng: &mut Rng) -> Vec<EpochPair> {
    let mut out = Vec::with_capacity(records.len());
    let mut skipped = 0;
    for (i, r) in records.iter().enumerate() {
        if r.notes.is_empty() {
            skipped += 1;
            continue;
        }
        out.push(EpochPair { record: i, stay_id: r.stay_id, note_index: rng.gen_range(0..r.notes.len()) });
    }
    if skipped > 0 {
        log::warn!("{skipped} stays have no notes and were left out of this epoch");
    }
    out
}

fn slice_rows(win: &MeasurementWindow, start: usize, len: usize) -> MeasurementWindow {
    let f = win.num_features();
    let data = win.values.data()[start * f..(start + len) * f].to_vec();
    MeasurementWindow::new(Tensor::new(vec![len, f], data).expect("slice of a valid window"))
        .expect("slice of a valid window")
}

/// Uniformly placed contiguous slice of `max_len` rows; unchanged when short enough.
pub fn crop_window(win: &MeasurementWindow, max_len: usize, rng: &mut Rng) -> MeasurementWindow {
    let t = win.timesteps();
    let max_len = max_len.max(1);
    if t <= max_len {
        return win.clone();
    }
    slice_rows(win, rng.gen_range(0..=t - max_len), max_len)
}

/// Deterministic middle slice used at evaluation time.
pub fn center_crop(win: &MeasurementWindow, max_len: usize) -> MeasurementWindow {
    let t = win.timesteps();
    let max_len = max_len.max(1);
    if t <= max_len {
        return win.clone();
    }
    slice_rows(win, (t - max_len) / 2, max_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Labels, Note};
    use crate::seed;

    fn record(id: u64, hours: usize, notes: Vec<(NoteType, f64)>) -> StayRecord {
        StayRecord {
            stay_id: StayId(id),
            admission_id: id,
            timestamps: (0..hours).map(|h| h as f64).collect(),
            values: Tensor::new(vec![hours, 2], (0..hours * 2).map(|v| v as f64).collect()).unwrap(),
            notes: notes
                .into_iter()
                .map(|(note_type, timestamp)| Note { note_type, timestamp, text: "x".into() })
                .collect(),
            labels: Labels::default(),
        }
    }

    #[test]
    fn type_and_window_rules() {
        let mut rs = vec![record(
            1,
            10,
            vec![
                (NoteType::parse("Social Work"), 2.0),
                (NoteType::Nursing, 3.0),
                (NoteType::Nursing, 9.0),
                (NoteType::Nursing, 9.5),
                (NoteType::DischargeSummary, 40.0),
                (NoteType::parse("Chaplain"), 1.0),
            ],
        )];
        let rep = pair_notes(&mut rs, &NoteType::RETAINED, UnknownNotePolicy::Drop).unwrap();
        assert_eq!(rep, PairingReport { pair_count: 3, dropped_type: 1, dropped_window: 1, dropped_unknown: 1 });
        let kept: Vec<f64> = rs[0].notes.iter().map(|n| n.timestamp).collect();
        assert_eq!(kept, vec![3.0, 9.0, 40.0]);

        let mut rs = vec![record(1, 2, vec![(NoteType::parse("Chaplain"), 1.0)])];
        assert!(pair_notes(&mut rs, &NoteType::RETAINED, UnknownNotePolicy::Error).is_err());
    }

    #[test]
    fn epoch_sampling_is_uniform() {
        let notes = (0..4).map(|i| (NoteType::Nursing, i as f64)).collect();
        let rs = vec![record(1, 5, notes), record(2, 5, vec![])];
        let mut rng = seed::stream(3, "test", 0);
        let mut counts = [0usize; 4];
        for _ in 0..10_000 {
            let pairs = sample_epoch_pairs(&rs, &mut rng);
            assert_eq!(pairs.len(), 1);
            counts[pairs[0].note_index] += 1;
        }
        // multinomial: sd = sqrt(1e4 * 0.25 * 0.75) ≈ 43.3
        for c in counts {
            assert!((c as f64 - 2500.0).abs() <= 3.0 * 43.302, "{counts:?}");
        }
    }

    #[test]
    fn cropping() {
        let win = record(1, 300, vec![]).window().unwrap();
        let mut rng = seed::stream(0, "crop", 0);
        for _ in 0..50 {
            let c = crop_window(&win, 256, &mut rng);
            assert_eq!(c.timesteps(), 256);
            let start = c.row(0)[0] as usize / 2;
            assert!(start <= 44);
            assert_eq!(c.row(255), win.row(start + 255));
        }
        let short = record(1, 100, vec![]).window().unwrap();
        assert_eq!(crop_window(&short, 256, &mut rng), short);
        assert_eq!(center_crop(&win, 256).row(0), win.row(22));
    }
}
