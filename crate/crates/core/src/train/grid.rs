use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

/// Cross product of named value lists. Keys are dotted paths into the
/// serialized base config, e.g. `optimizer.lr`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GridSpace {
    pub axes: BTreeMap<String, Vec<Value>>,
}

impl GridSpace {
    pub fn axis(mut self, key: &str, values: impl IntoIterator<Item = impl Into<Value>>) -> Self {
        self.axes.insert(key.to_string(), values.into_iter().map(Into::into).collect());
        self
    }

    pub fn len(&self) -> usize {
        if self.axes.is_empty() {
            0
        } else {
            self.axes.values().map(Vec::len).product()
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Point `i` in row-major order over the sorted axis names.
    pub fn point(&self, mut i: usize) -> BTreeMap<String, Value> {
        let mut out = BTreeMap::new();
        for (k, vals) in self.axes.iter().rev() {
            out.insert(k.clone(), vals[i % vals.len()].clone());
            i /= vals.len();
        }
        out
    }
}

/// The pretraining grid: learning rate, weight decay, dropout per modality,
/// temperature, batch size and mask rate per modality (3888 points).
pub fn default_pretrain_space() -> GridSpace {
    GridSpace::default()
        .axis("optimizer.lr", [1e-4, 1e-5, 1e-6])
        .axis("optimizer.weight_decay", [0.2, 0.1, 0.01])
        .axis("text_dropout", [0.0, 0.1])
        .axis("meas_dropout", [0.0, 0.1])
        .axis("temperature", [0.1, 0.07, 0.05])
        .axis("batch_size", [16, 32, 64, 128])
        .axis("note_mask_rate", [0.0, 0.1, 0.2])
        .axis("meas_mask_rate", [0.0, 0.1, 0.2])
}

/// Sets `value` at the dotted `key` path of a JSON object, creating
/// intermediate objects as needed.
pub fn set_dotted(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("cannot set {key}: {} is not a table", parts[..i].join("."))))?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config("empty override key".into()))
}

/// Applies overrides to a serializable config and parses it back.
pub fn with_overrides<C: Serialize + DeserializeOwned>(base: &C, overrides: &BTreeMap<String, Value>) -> Result<C> {
    let mut v = serde_json::to_value(base)?;
    for (k, val) in overrides {
        set_dotted(&mut v, k, val.clone())?;
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("bad override: {e}")))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub overrides: BTreeMap<String, Value>,
    pub objective: f64,
}

#[derive(Debug, Clone)]
pub struct GridResult<C> {
    pub best: C,
    pub best_index: usize,
    /// Sorted by objective, descending; ties keep trial order.
    pub trials: Vec<Trial>,
}

/// Runs `trial` on every point of `space` (in parallel) and keeps the
/// highest objective. Ties go to the lowest trial index; NaN never wins.
pub fn grid_search<C, F>(base: &C, space: &GridSpace, trial: F) -> Result<GridResult<C>>
where
    C: Serialize + DeserializeOwned + Clone + Send + Sync,
    F: Fn(usize, &C) -> Result<f64> + Sync,
{
    if space.is_empty() {
        return Err(Error::Config("grid search space is empty".into()));
    }
    let configs: Vec<(BTreeMap<String, Value>, C)> = (0..space.len())
        .map(|i| {
            let o = space.point(i);
            let c = with_overrides(base, &o)?;
            Ok((o, c))
        })
        .collect::<Result<_>>()?;
    let scores: Vec<f64> = configs
        .par_iter()
        .enumerate()
        .map(|(i, (_, c))| trial(i, c))
        .collect::<Result<_>>()?;

    let mut best_index = 0;
    for (i, s) in scores.iter().enumerate() {
        let cur = scores[best_index];
        if s > &cur || (cur.is_nan() && !s.is_nan()) {
            best_index = i;
        }
    }
    let mut trials: Vec<Trial> = configs
        .iter()
        .zip(&scores)
        .enumerate()
        .map(|(index, ((o, _), &objective))| Trial { index, overrides: o.clone(), objective })
        .collect();
    let key = |t: &Trial| if t.objective.is_nan() { f64::NEG_INFINITY } else { t.objective };
    trials.sort_by(|a, b| key(b).total_cmp(&key(a)).then(a.index.cmp(&b.index)));
    Ok(GridResult { best: configs[best_index].1.clone(), best_index, trials })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::PretrainConfig;

    #[test]
    fn default_space_has_3888_points() {
        let s = default_pretrain_space();
        assert_eq!(s.len(), 3888);
        let p = s.point(0);
        let c: PretrainConfig = with_overrides(&PretrainConfig::default(), &p).unwrap();
        assert_eq!(c.optimizer.lr, 1e-4);
        assert_eq!(c.batch_size, 16);
    }

    #[test]
    fn selection_rules() {
        let base = PretrainConfig::default();
        let one = GridSpace::default().axis("temperature", [0.5]);
        let r = grid_search(&base, &one, |_, _| Ok(1.0)).unwrap();
        assert_eq!(r.best.temperature, 0.5);

        let space = GridSpace::default().axis("temperature", [0.1, 0.2]).axis("batch_size", [8, 16]);
        let r = grid_search(&base, &space, |i, _| Ok(if i == 0 { f64::NAN } else if i == 2 { 0.5 } else { 0.9 })).unwrap();
        // indices 1 and 3 tie at 0.9
        assert_eq!(r.best_index, 1);
        assert_eq!(r.trials.iter().map(|t| t.index).collect::<Vec<_>>(), vec![1, 3, 2, 0]);
        assert_eq!(r.trials.len(), 4);

        assert!(grid_search(&base, &GridSpace::default(), |_, _| Ok(0.0)).is_err());
    }

    #[test]
    fn bad_override_is_a_config_error() {
        let mut o = BTreeMap::new();
        o.insert("batch_size".to_string(), Value::String("big".into()));
        assert!(matches!(with_overrides(&PretrainConfig::default(), &o), Err(Error::Config(_))));
    }
}
