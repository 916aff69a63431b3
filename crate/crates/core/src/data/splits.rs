use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{StayId, StayRecord};
use crate::error::{Error, Result};
use crate::seed::Rng;

/// Label-fraction percentages with a nested sub-manifest each.
pub const LABEL_FRACTIONS: [u32; 4] = [1, 10, 50, 100];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.70, validation: 0.15, test: 0.15 }
    }
}

impl SplitRatios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.validation, self.test];
        if parts.iter().any(|p| !(*p >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must be non-negative and sum to 1")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub train: Vec<StayId>,
    pub validation: Vec<StayId>,
    pub test: Vec<StayId>,
    /// Keyed by percentage ("1", "10", "50", "100"); each a subset of train.
    pub fractions: BTreeMap<String, Vec<StayId>>,
}

impl SplitManifest {
    pub fn fraction(&self, percent: u32) -> Option<&[StayId]> {
        self.fractions.get(&percent.to_string()).map(Vec::as_slice)
    }

    pub fn validate(&self) -> Result<()> {
        let train: BTreeSet<_> = self.train.iter().collect();
        let val: BTreeSet<_> = self.validation.iter().collect();
        let test: BTreeSet<_> = self.test.iter().collect();
        if train.len() != self.train.len() || val.len() != self.validation.len() || test.len() != self.test.len() {
            return Err(Error::Data("split contains duplicate stay ids".into()));
        }
        if !train.is_disjoint(&val) || !train.is_disjoint(&test) || !val.is_disjoint(&test) {
            return Err(Error::Data("splits overlap".into()));
        }
        let mut prev: Option<BTreeSet<&StayId>> = None;
        for pct in LABEL_FRACTIONS {
            let Some(ids) = self.fraction(pct) else { continue };
            let set: BTreeSet<_> = ids.iter().collect();
            if !set.is_subset(&train) {
                return Err(Error::Data(format!("{pct}% manifest is not a subset of train")));
            }
            if let Some(p) = &prev {
                if !p.is_subset(&set) {
                    return Err(Error::Data(format!("{pct}% manifest does not contain the smaller fractions")));
                }
            }
            prev = Some(set);
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string_pretty(self)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: SplitManifest = serde_json::from_str(&s)?;
        m.validate()?;
        Ok(m)
    }
}

/// Splits `n` into parts proportional to `weights` by largest remainder.
fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let raw: Vec<f64> = weights.iter().map(|w| w * n as f64).collect();
    let mut sizes: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
    let short = n.saturating_sub(sizes.iter().sum());
    for &i in order.iter().cycle().take(short) {
        sizes[i] += 1;
    }
    sizes
}

/// Shuffles each label class, then interleaves them so that every prefix of
/// the result has close to the overall class proportions.
fn stratified_order(items: &[(StayId, Option<bool>)], rng: &mut Rng) -> Vec<(StayId, Option<bool>)> {
    let mut classes: BTreeMap<Option<bool>, Vec<StayId>> = BTreeMap::new();
    for (id, y) in items {
        classes.entry(*y).or_default().push(*id);
    }
    let mut keyed = Vec::with_capacity(items.len());
    for (y, mut ids) in classes {
        ids.sort();
        ids.shuffle(rng);
        let n = ids.len() as f64;
        for (r, id) in ids.into_iter().enumerate() {
            keyed.push(((r as f64 + 0.5) / n, y, id));
        }
    }
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, y, id)| (id, y)).collect()
}

/// Disjoint train/validation/test splits stratified on the IHM label, plus
/// nested label-fraction subsets of train.
pub fn make_splits(records: &[StayRecord], ratios: SplitRatios, rng: &mut Rng) -> Result<SplitManifest> {
    ratios.validate()?;
    let items: Vec<(StayId, Option<bool>)> = records.iter().map(|r| (r.stay_id, r.labels.ihm)).collect();
    let order = stratified_order(&items, rng);
    let sizes = apportion(order.len(), &[ratios.train, ratios.validation, ratios.test]);
    let (train, rest) = order.split_at(sizes[0]);
    let (validation, test) = rest.split_at(sizes[1]);

    let train_order = stratified_order(train, rng);
    let train_classes: BTreeSet<Option<bool>> = train.iter().map(|(_, y)| *y).collect();
    let mut fractions = BTreeMap::new();
    let mut previous: Vec<StayId> = Vec::new();
    for pct in LABEL_FRACTIONS {
        let n = ((pct as f64 / 100.0) * train_order.len() as f64).round().max(1.0) as usize;
        let mut chosen: Vec<(StayId, Option<bool>)> = train_order[..n.min(train_order.len())].to_vec();
        for id in &previous {
            if !chosen.iter().any(|(c, _)| c == id) {
                let y = train_order.iter().find(|(c, _)| c == id).map(|(_, y)| *y).unwrap_or(None);
                chosen.push((*id, y));
            }
        }
        for class in &train_classes {
            if !chosen.iter().any(|(_, y)| y == class) {
                log::warn!("{pct}% fraction lacks label class {class:?}; adding one stay of that class");
                let extra = train_order.iter().find(|(_, y)| y == class).copied().expect("class present in train");
                chosen.push(extra);
            }
        }
        previous = chosen.iter().map(|(id, _)| *id).collect();
        fractions.insert(pct.to_string(), previous.clone());
    }

    let ids = |s: &[(StayId, Option<bool>)]| s.iter().map(|(id, _)| *id).collect::<Vec<_>>();
    let manifest = SplitManifest { train: ids(train), validation: ids(validation), test: ids(test), fractions };
    manifest.validate()?;
    Ok(manifest)
}
