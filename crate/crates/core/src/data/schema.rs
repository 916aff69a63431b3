use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const BENCHMARK_SCHEMA_TOML: &str = include_str!("../../config/benchmark_schema.toml");

/// Feature names of the benchmark layout, in column order.
pub const BENCHMARK_FEATURES: [&str; 17] = [
    "Capillary refill rate",
    "Diastolic blood pressure",
    "Fraction inspired oxygen",
    "Glascow coma scale eye opening",
    "Glascow coma scale motor response",
    "Glascow coma scale total",
    "Glascow coma scale verbal response",
    "Glucose",
    "Heart Rate",
    "Height",
    "Mean blood pressure",
    "Oxygen saturation",
    "Respiratory rate",
    "Systolic blood pressure",
    "Temperature",
    "Weight",
    "pH",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum FeatureKind {
    Continuous,
    /// Values are encoded as their index in `categories`.
    Categorical { categories: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: FeatureKind,
    /// Raw cell value used before the first observation.
    pub normal_value: String,
}

impl FeatureSpec {
    /// Encodes a raw cell. Categorical cells accept either a category label or
    /// a numeric value (already encoded).
    pub fn encode(&self, cell: &str) -> Option<f64> {
        let cell = cell.trim();
        if cell.is_empty() {
            return None;
        }
        match &self.kind {
            FeatureKind::Continuous => cell.parse::<f64>().ok().filter(|v| v.is_finite()),
            FeatureKind::Categorical { categories } => categories
                .iter()
                .position(|c| c == cell)
                .map(|i| i as f64)
                .or_else(|| cell.parse::<f64>().ok().filter(|v| v.is_finite())),
        }
    }

    /// Inverse of [`encode`](Self::encode) for writing tables.
    pub fn decode(&self, value: f64) -> String {
        match &self.kind {
            FeatureKind::Categorical { categories }
                if value.fract() == 0.0 && value >= 0.0 && (value as usize) < categories.len() =>
            {
                categories[value as usize].clone()
            }
            _ => format!("{value}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSchema {
    /// Resampling grid width.
    pub interval_hours: f64,
    pub features: Vec<FeatureSpec>,
}

impl IngestSchema {
    /// The 17-feature benchmark schema with its shipped normal values.
    pub fn benchmark() -> Self {
        toml::from_str(BENCHMARK_SCHEMA_TOML).expect("bundled schema parses")
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let schema: IngestSchema = toml::from_str(s)?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&s)
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn feature_names(&self) -> Vec<&str> {
        self.features.iter().map(|f| f.name.as_str()).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.interval_hours > 0.0) {
            return Err(Error::Config(format!(
                "interval_hours must be positive, got {}",
                self.interval_hours
            )));
        }
        if self.features.is_empty() {
            return Err(Error::Config("schema has no features".into()));
        }
        for f in &self.features {
            if f.encode(&f.normal_value).is_none() {
                return Err(Error::Config(format!(
                    "normal value {:?} of {} does not encode",
                    f.normal_value, f.name
                )));
            }
        }
        Ok(())
    }
}
