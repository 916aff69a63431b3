//! Stay records, note pairing rules, synthetic generation, splits and batching.

mod batch;
mod ingest;
mod pairing;
mod schema;
mod splits;
mod synthetic;
mod tokenizer;

use std::fmt;

use serde::{Deserialize, Serialize};

pub use batch::{build_pair_batches, PairBatch};
pub use ingest::{ingest, write_dataset, IngestOptions, Ingested, NormStats, Normalization};
pub use pairing::{
    center_crop, crop_window, pair_notes, sample_epoch_pairs, EpochPair, PairingReport, UnknownNotePolicy,
};
pub use schema::{FeatureKind, FeatureSpec, IngestSchema, BENCHMARK_FEATURES};
pub use splits::{make_splits, SplitManifest, SplitRatios, LABEL_FRACTIONS};
pub use synthetic::{generate_synthetic, severity_band, SyntheticConfig, PHENOTYPE_NAMES, SEVERITY_BANDS};
pub use tokenizer::{Tokenizer, WordTokenizer};

use crate::encoders::MeasurementWindow;
use crate::error::Result;
use crate::substrate::Tensor;

pub const NUM_PHENOTYPES: usize = 25;

/// ICU stay identifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct StayId(pub u64);

impl fmt::Display for StayId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Note category, parsed case-insensitively from the notes table.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum NoteType {
    Echo,
    Ecg,
    Nursing,
    Physician,
    Respiratory,
    Radiology,
    DischargeSummary,
    /// A recognized category that is not retained for pairing.
    Excluded(String),
    /// A category this crate does not know.
    Unknown(String),
}

const EXCLUDED_CATEGORIES: &[&str] = &[
    "Case Management",
    "Consult",
    "General",
    "Nursing/other",
    "Nutrition",
    "Pharmacy",
    "Rehab Services",
    "Social Work",
];

impl NoteType {
    /// The seven categories kept for pairing.
    pub const RETAINED: [NoteType; 7] = [
        NoteType::Echo,
        NoteType::Ecg,
        NoteType::Nursing,
        NoteType::Physician,
        NoteType::Respiratory,
        NoteType::Radiology,
        NoteType::DischargeSummary,
    ];

    pub fn parse(s: &str) -> NoteType {
        let t = s.trim();
        match t.to_ascii_lowercase().as_str() {
            "echo" => NoteType::Echo,
            "ecg" => NoteType::Ecg,
            "nursing" => NoteType::Nursing,
            "physician" => NoteType::Physician,
            "respiratory" => NoteType::Respiratory,
            "radiology" => NoteType::Radiology,
            "discharge summary" => NoteType::DischargeSummary,
            lower => match EXCLUDED_CATEGORIES.iter().find(|c| c.to_ascii_lowercase() == lower) {
                Some(c) => NoteType::Excluded((*c).to_string()),
                None => NoteType::Unknown(t.to_string()),
            },
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            NoteType::Echo => "Echo",
            NoteType::Ecg => "ECG",
            NoteType::Nursing => "Nursing",
            NoteType::Physician => "Physician",
            NoteType::Respiratory => "Respiratory",
            NoteType::Radiology => "Radiology",
            NoteType::DischargeSummary => "Discharge summary",
            NoteType::Excluded(s) | NoteType::Unknown(s) => s,
        }
    }
}

impl fmt::Display for NoteType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Note {
    pub note_type: NoteType,
    /// Hours on the same clock as the measurement timestamps.
    pub timestamp: f64,
    pub text: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Labels {
    pub ihm: Option<bool>,
    pub phenotypes: Option<Vec<bool>>,
}

/// One ICU stay: measurements on a uniform grid, its notes and task labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StayRecord {
    pub stay_id: StayId,
    pub admission_id: u64,
    /// Grid times in hours, one per measurement row.
    pub timestamps: Vec<f64>,
    /// `[T × F]`
    pub values: Tensor,
    pub notes: Vec<Note>,
    pub labels: Labels,
}

impl StayRecord {
    pub fn timesteps(&self) -> usize {
        self.values.rows()
    }

    pub fn window(&self) -> Result<MeasurementWindow> {
        MeasurementWindow::new(self.values.clone())
    }

    /// First `rows` timesteps (all when shorter).
    pub fn head_window(&self, rows: usize) -> Result<MeasurementWindow> {
        let t = self.timesteps().min(rows.max(1));
        let f = self.values.cols();
        MeasurementWindow::new(Tensor::new(vec![t, f], self.values.data()[..t * f].to_vec())?)
    }

    /// Inclusive `[first, last]` measurement time span.
    pub fn time_span(&self) -> (f64, f64) {
        let start = self.timestamps.first().copied().unwrap_or(0.0);
        let end = self.timestamps.last().copied().unwrap_or(start);
        (start, end)
    }
}
