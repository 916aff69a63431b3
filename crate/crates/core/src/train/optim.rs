use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoders::ParamStore;
use crate::error::{Error, Result};
use crate::substrate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: Some(1.0) }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config(format!(
                "need lr > 0 and betas in [0, 1), got lr={} betas=({}, {})",
                self.lr, self.beta1, self.beta2
            )));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("eps must be > 0 and weight_decay >= 0".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return Err(Error::Config(format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Parameters whose name starts with `prefix` train at `lr * lr_multiplier`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub prefix: String,
    pub lr_multiplier: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepReport {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub clipped: bool,
}

/// AdamW with decoupled weight decay and per-group learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub groups: Vec<ParamGroup>,
    step: u64,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, groups: Vec::new(), step: 0, m: BTreeMap::new(), v: BTreeMap::new() })
    }

    pub fn with_group(mut self, name: &str, prefix: &str, lr_multiplier: f64) -> Self {
        self.groups.push(ParamGroup { name: name.into(), prefix: prefix.into(), lr_multiplier });
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn multiplier(&self, name: &str) -> f64 {
        self.groups.iter().find(|g| name.starts_with(&g.prefix)).map_or(1.0, |g| g.lr_multiplier)
    }

    /// Applies one update at learning rate `lr` to every parameter in `grads`.
    /// Non-finite gradients abort before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &BTreeMap<String, Tensor>, lr: f64) -> Result<StepReport> {
        let mut sq = 0.0;
        for (name, g) in grads {
            if !g.all_finite() {
                return Err(Error::NonFinite(format!("gradient of {name}")));
            }
            let p = params.get(name).ok_or_else(|| Error::Contract(format!("gradient for unknown parameter {name}")))?;
            if p.shape() != g.shape() {
                return Err(Error::Dimension { op: "optimizer_step", lhs: p.shape().to_vec(), rhs: g.shape().to_vec() });
            }
            sq += g.data().iter().map(|x| x * x).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.config.clip_norm {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.config.beta1, self.config.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        for (name, g) in grads {
            let group_lr = lr * self.multiplier(name);
            let decay = 1.0 - group_lr * self.config.weight_decay;
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let p = params.get_mut(name).expect("checked above");
            for (((pi, &gi), mi), vi) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                let gi = gi * clip_scale;
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *pi *= decay;
                *pi -= group_lr * m_hat / (v_hat.sqrt() + self.config.eps);
            }
        }
        Ok(StepReport { grad_norm, clipped: clip_scale < 1.0 })
    }

    /// Moment tensors as `adam.m.<name>` / `adam.v.<name>` entries.
    pub fn state_tensors(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("adam.m.{k}"), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("adam.v.{k}"), t.clone());
        }
        out
    }

    pub fn state_meta(&self) -> serde_json::Value {
        serde_json::json!({ "step": self.step, "config": self.config, "groups": self.groups })
    }

    pub fn from_state(meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<Self> {
        let bad = |what: &str| Error::Checkpoint(format!("optimizer state lacks {what}"));
        let step = meta.get("step").and_then(|v| v.as_u64()).ok_or_else(|| bad("step"))?;
        let config: AdamWConfig = serde_json::from_value(meta.get("config").cloned().ok_or_else(|| bad("config"))?)?;
        let groups: Vec<ParamGroup> =
            serde_json::from_value(meta.get("groups").cloned().unwrap_or(serde_json::Value::Array(vec![])))?;
        let pick = |prefix: &str| -> BTreeMap<String, Tensor> {
            tensors
                .iter()
                .filter_map(|(k, t)| k.strip_prefix(prefix).map(|n| (n.to_string(), t.clone())))
                .collect()
        };
        Ok(Self { config, groups, step, m: pick("adam.m."), v: pick("adam.v.") })
    }
}

/// Cosine annealing from `base_lr` at step 0 to 0 at `total_steps`.
pub fn cosine_lr(base_lr: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let s = step.min(total_steps) as f64 / total_steps as f64;
    (0.5 * base_lr * (1.0 + (std::f64::consts::PI * s).cos())).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub base_lr: f64,
    pub total_steps: u64,
    pub current_step: u64,
}

impl ScheduleState {
    pub fn lr(&self) -> f64 {
        cosine_lr(self.base_lr, self.current_step, self.total_steps)
    }
}
