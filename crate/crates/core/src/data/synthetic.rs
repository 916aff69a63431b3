//! Synthetic paired stays. Each stay draws a latent severity and a phenotype
//! subset; both the measurement trajectories and the note text are functions
//! of that latent state, so the two modalities can be aligned.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::index::sample;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::schema::{FeatureKind, IngestSchema};
use super::{Labels, Note, NoteType, StayId, StayRecord, NUM_PHENOTYPES};
use crate::error::{Error, Result};
use crate::seed::{self, Rng};
use crate::substrate::Tensor;

/// Label column names, also used as note vocabulary.
pub const PHENOTYPE_NAMES: [&str; NUM_PHENOTYPES] = [
    "cerebrovascular",
    "infarction",
    "dysrhythmia",
    "ckd",
    "copd",
    "surgical",
    "conduction",
    "chf",
    "atherosclerosis",
    "diabetescomplicated",
    "diabetes",
    "lipid",
    "hypertension",
    "electrolyte",
    "gibleed",
    "hypertensivecomplicated",
    "liver",
    "lowerrespiratory",
    "upperrespiratory",
    "pneumothorax",
    "pneumonia",
    "respfailure",
    "sepsis",
    "shock",
    "renalfailure",
];

/// Band word and exclusive upper severity bound.
pub const SEVERITY_BANDS: [(&str, f64); 3] = [("stable", 0.4), ("guarded", 0.8), ("critical", f64::INFINITY)];

pub fn severity_band(severity: f64) -> &'static str {
    SEVERITY_BANDS.iter().find(|(_, hi)| severity < *hi).map(|(w, _)| *w).unwrap_or("critical")
}

/// Words for a feature whose latent level sits below or above the normal
/// band: feature index, low word, high word.
pub const VITAL_WORDS: [(usize, &str, &str); 9] = [
    (8, "bradycardic", "tachycardic"),
    (10, "hypotensive", "hypertensive"),
    (11, "hypoxic", "wellsaturated"),
    (12, "bradypneic", "tachypneic"),
    (14, "hypothermic", "febrile"),
    (7, "hypoglycemic", "hyperglycemic"),
    (16, "acidotic", "alkalotic"),
    (9, "short", "tall"),
    (15, "thin", "obese"),
];

/// Spread in raw units and severity loading per benchmark feature.
const FEATURE_PROFILE: [(f64, f64); 17] = [
    (0.0, 0.0),   // capillary refill (categorical)
    (10.0, -1.0), // diastolic bp
    (0.1, 1.0),   // fio2
    (0.0, 0.0),   // gcs eye
    (0.0, 0.0),   // gcs motor
    (0.0, 0.0),   // gcs total
    (0.0, 0.0),   // gcs verbal
    (30.0, 0.5),  // glucose
    (15.0, 1.0),  // heart rate
    (10.0, 0.0),  // height
    (10.0, -1.0), // mean bp
    (2.0, -1.0),  // spo2
    (4.0, 1.0),   // respiratory rate
    (15.0, -1.0), // systolic bp
    (0.6, 0.5),   // temperature
    (15.0, 0.0),  // weight
    (0.05, -0.5), // ph
];
const HEIGHT: usize = 9;
const WEIGHT: usize = 15;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub min_hours: usize,
    pub max_hours: usize,
    /// Upper bound on retained in-window notes per stay (at least one).
    pub max_notes: usize,
    /// In-hospital mortality iff severity >= this.
    pub ihm_threshold: f64,
    pub min_phenotypes: usize,
    pub max_phenotypes: usize,
    /// Per-step noise, in feature-spread units.
    pub noise_std: f64,
    /// AR(1) coefficient of the noise process.
    pub noise_autocorrelation: f64,
    pub severity_effect: f64,
    pub phenotype_effect: f64,
    /// Fraction of the GCS range lost at severity 1.
    pub gcs_drop: f64,
    /// A vital is verbalized when its noise-free level, in spread units,
    /// exceeds this in magnitude.
    pub vital_threshold: f64,
    pub filler_vocab_size: usize,
    pub filler_words_per_note: usize,
    /// Chance of an extra note of an excluded category.
    pub excluded_note_rate: f64,
    /// Chance of an extra retained-type note placed after the window.
    pub out_of_window_rate: f64,
    /// Chance that one of the retained notes is a discharge summary.
    pub discharge_rate: f64,
    /// Seed of the phenotype signatures, shared by every stay.
    pub signature_seed: u64,
    /// Note templates keyed by note category. Placeholders: `{band}`,
    /// `{phenotypes}`, `{vitals}`, `{outcome}`, `{filler}`.
    pub templates: BTreeMap<String, String>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        let templates = [
            ("Nursing", "nursing note patient {band} today {vitals} with {phenotypes} {filler}"),
            ("Physician", "physician note assessment {band} {vitals} course history of {phenotypes} {filler}"),
            ("Respiratory", "respiratory note patient {band} {vitals} on support {phenotypes} {filler}"),
            ("Radiology", "radiology report findings consistent with {phenotypes} patient {band} {vitals} {filler}"),
            ("Echo", "echo report {band} function {vitals} in setting of {phenotypes} {filler}"),
            ("ECG", "ecg report rhythm {band} {vitals} known {phenotypes} {filler}"),
            (
                "Discharge summary",
                "discharge summary patient {outcome} after {band} course {vitals} with {phenotypes} {filler}",
            ),
            ("Social Work", "social work note family meeting held {filler}"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        Self {
            min_hours: 12,
            max_hours: 48,
            max_notes: 4,
            ihm_threshold: 0.8,
            min_phenotypes: 2,
            max_phenotypes: 3,
            noise_std: 0.3,
            noise_autocorrelation: 0.7,
            severity_effect: 1.0,
            phenotype_effect: 1.0,
            gcs_drop: 0.6,
            vital_threshold: 0.7,
            filler_vocab_size: 40,
            filler_words_per_note: 3,
            excluded_note_rate: 0.2,
            out_of_window_rate: 0.1,
            discharge_rate: 0.3,
            signature_seed: 7,
            templates,
        }
    }
}

impl SyntheticConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SyntheticConfig = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.min_hours == 0 || self.min_hours > self.max_hours {
            return bad(format!("hours range [{}, {}] is empty", self.min_hours, self.max_hours));
        }
        if self.max_notes == 0 {
            return bad("max_notes must be at least 1".into());
        }
        if self.min_phenotypes > self.max_phenotypes || self.max_phenotypes > NUM_PHENOTYPES {
            return bad(format!("phenotype count range [{}, {}] invalid", self.min_phenotypes, self.max_phenotypes));
        }
        for (name, p) in [
            ("excluded_note_rate", self.excluded_note_rate),
            ("out_of_window_rate", self.out_of_window_rate),
            ("discharge_rate", self.discharge_rate),
            ("gcs_drop", self.gcs_drop),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        if !(self.vital_threshold >= 0.0) {
            return bad(format!("vital_threshold must be >= 0, got {}", self.vital_threshold));
        }
        if !(self.noise_std >= 0.0) || !(self.noise_autocorrelation.abs() < 1.0) {
            return bad("noise_std must be >= 0 and |noise_autocorrelation| < 1".into());
        }
        for t in NoteType::RETAINED {
            if !self.templates.contains_key(t.as_str()) {
                return bad(format!("no template for note type {t}"));
            }
        }
        Ok(())
    }

    fn template(&self, t: &NoteType) -> &str {
        self.templates.get(t.as_str()).map(String::as_str).unwrap_or("{band} {phenotypes} {filler}")
    }
}

struct Latent {
    severity: f64,
    phenotypes: Vec<usize>,
    /// Per-stay offset of the static features (height, weight), in spread units.
    static_offset: Vec<f64>,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn signatures(cfg: &SyntheticConfig, f: usize) -> Vec<Vec<f64>> {
    (0..NUM_PHENOTYPES)
        .map(|p| {
            let mut rng = seed::stream(cfg.signature_seed, "phenotype-signature", p as u64);
            (0..f).map(|_| normal(&mut rng)).collect()
        })
        .collect()
}

/// Noise-free level of continuous feature `j` in spread units.
fn latent_level(cfg: &SyntheticConfig, sigs: &[Vec<f64>], z: &Latent, j: usize) -> f64 {
    if j == HEIGHT || j == WEIGHT {
        return z.static_offset[j];
    }
    let load = FEATURE_PROFILE.get(j).map_or(0.0, |p| p.1);
    let pheno: f64 = z.phenotypes.iter().map(|&p| sigs[p][j]).sum();
    cfg.severity_effect * load * (2.0 * z.severity - 1.0) + cfg.phenotype_effect * pheno
}

fn vital_words(cfg: &SyntheticConfig, sigs: &[Vec<f64>], z: &Latent) -> Vec<&'static str> {
    VITAL_WORDS
        .iter()
        .filter_map(|&(j, low, high)| {
            let level = latent_level(cfg, sigs, z, j);
            if level > cfg.vital_threshold {
                Some(high)
            } else if level < -cfg.vital_threshold {
                Some(low)
            } else {
                None
            }
        })
        .collect()
}

fn measurements(cfg: &SyntheticConfig, schema: &IngestSchema, sigs: &[Vec<f64>], z: &Latent, hours: usize, rng: &mut Rng) -> Tensor {
    let f = schema.num_features();
    let mut values = Tensor::zeros(&[hours, f]);
    let rho = cfg.noise_autocorrelation;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut noise: Vec<f64> = (0..f).map(|_| normal(rng)).collect();
    for t in 0..hours {
        if t > 0 {
            for e in noise.iter_mut() {
                *e = rho * *e + innovation * normal(rng);
            }
        }
        for (j, spec) in schema.features.iter().enumerate() {
            let base = spec.encode(&spec.normal_value).unwrap_or(0.0);
            let v = match &spec.kind {
                FeatureKind::Categorical { categories } => {
                    let top = (categories.len() - 1) as f64;
                    if categories.len() == 2 {
                        // refill delayed with probability growing in severity
                        f64::from(rng.gen_bool((0.8 * z.severity).clamp(0.0, 1.0)))
                    } else {
                        let level = top * (1.0 - cfg.gcs_drop * z.severity) + 0.5 * noise[j];
                        level.round().clamp(0.0, top)
                    }
                }
                FeatureKind::Continuous => {
                    let spread = FEATURE_PROFILE.get(j).map_or(1.0, |p| p.0);
                    let spread = if spread == 0.0 { 1.0 } else { spread };
                    if j == HEIGHT || j == WEIGHT {
                        base + spread * latent_level(cfg, sigs, z, j)
                    } else {
                        base + spread * (latent_level(cfg, sigs, z, j) + cfg.noise_std * noise[j])
                    }
                }
            };
            values.data_mut()[t * f + j] = v;
        }
    }
    values
}

fn render(cfg: &SyntheticConfig, t: &NoteType, z: &Latent, vitals: &[&str], ihm: bool, rng: &mut Rng) -> String {
    let phenos: Vec<&str> = z.phenotypes.iter().map(|&p| PHENOTYPE_NAMES[p]).collect();
    let filler: Vec<String> = (0..cfg.filler_words_per_note)
        .filter(|_| cfg.filler_vocab_size > 0)
        .map(|_| format!("term{}", rng.gen_range(0..cfg.filler_vocab_size)))
        .collect();
    cfg.template(t)
        .replace("{band}", severity_band(z.severity))
        .replace("{phenotypes}", &phenos.join(" and "))
        .replace("{vitals}", &vitals.join(" "))
        .replace("{outcome}", if ihm { "deceased" } else { "discharged today" })
        .replace("{filler}", &filler.join(" "))
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn notes(cfg: &SyntheticConfig, z: &Latent, vitals: &[&str], ihm: bool, last_hour: f64, rng: &mut Rng) -> Vec<Note> {
    const ROUTINE: [NoteType; 6] =
        [NoteType::Nursing, NoteType::Physician, NoteType::Respiratory, NoteType::Radiology, NoteType::Echo, NoteType::Ecg];
    let count = rng.gen_range(1..=cfg.max_notes);
    let with_discharge = count > 1 && rng.gen_bool(cfg.discharge_rate);
    let mut out = Vec::with_capacity(count + 2);
    for k in 0..count {
        let (note_type, timestamp) = if k == 0 {
            (NoteType::Nursing, rng.gen_range(0.0..=last_hour))
        } else if with_discharge && k == count - 1 {
            (NoteType::DischargeSummary, last_hour + rng.gen_range(1.0..24.0))
        } else {
            (ROUTINE[rng.gen_range(0..ROUTINE.len())].clone(), rng.gen_range(0.0..=last_hour))
        };
        let text = render(cfg, &note_type, z, vitals, ihm, rng);
        out.push(Note { note_type, timestamp, text });
    }
    if rng.gen_bool(cfg.out_of_window_rate) {
        let note_type = ROUTINE[rng.gen_range(0..ROUTINE.len())].clone();
        let text = render(cfg, &note_type, z, vitals, ihm, rng);
        out.push(Note { note_type, timestamp: last_hour + rng.gen_range(1.0..12.0), text });
    }
    if rng.gen_bool(cfg.excluded_note_rate) {
        let note_type = NoteType::parse("Social Work");
        let text = render(cfg, &note_type, z, vitals, ihm, rng);
        out.push(Note { note_type, timestamp: rng.gen_range(0.0..=last_hour), text });
    }
    out.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    out
}

/// Generates `n_stays` records in raw (encoded, unnormalized) units on the
/// benchmark schema. Stays are generated independently from sub-streams of a
/// single draw from `rng`, so the output does not depend on thread count.
pub fn generate_synthetic(n_stays: usize, rng: &mut Rng, cfg: &SyntheticConfig) -> Result<Vec<StayRecord>> {
    if n_stays < 2 {
        return Err(Error::Config(format!("need at least 2 stays, got {n_stays}")));
    }
    cfg.validate()?;
    let schema = IngestSchema::benchmark();
    let sigs = signatures(cfg, schema.num_features());
    let root: u64 = rng.gen();
    Ok((0..n_stays)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::stream(root, "synthetic-stay", i as u64);
            let severity: f64 = rng.gen();
            let k = rng.gen_range(cfg.min_phenotypes..=cfg.max_phenotypes);
            let mut phenotypes = sample(&mut rng, NUM_PHENOTYPES, k).into_vec();
            phenotypes.sort_unstable();
            let static_offset = (0..schema.num_features()).map(|_| normal(&mut rng)).collect();
            let z = Latent { severity, phenotypes, static_offset };
            let ihm = severity >= cfg.ihm_threshold;
            let hours = rng.gen_range(cfg.min_hours..=cfg.max_hours);
            let values = measurements(cfg, &schema, &sigs, &z, hours, &mut rng);
            let vitals = vital_words(cfg, &sigs, &z);
            let notes = notes(cfg, &z, &vitals, ihm, (hours - 1) as f64, &mut rng);
            let mut pheno_labels = vec![false; NUM_PHENOTYPES];
            for &p in &z.phenotypes {
                pheno_labels[p] = true;
            }
            StayRecord {
                stay_id: StayId(200_000 + i as u64),
                admission_id: 100_000 + i as u64,
                timestamps: (0..hours).map(|h| h as f64 * schema.interval_hours).collect(),
                values,
                notes,
                labels: Labels { ihm: Some(ihm), phenotypes: Some(pheno_labels) },
            }
        })
        .collect())
}
