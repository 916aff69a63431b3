//! Pre-norm transformer stack shared by both modalities.

use super::config::EncoderConfig;
use super::params::{dropout_mask, truncated_normal, BoundParams, ParamStore};
use crate::error::Result;
use crate::seed::Rng;
use crate::substrate::{Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

/// Forward-pass mode. Dropout is only active in `Train` with a positive rate.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut Rng),
}

impl Mode<'_> {
    pub(crate) fn dropout(&mut self, tape: &mut Tape, x: Var, rate: f64) -> Result<Var> {
        match self {
            Mode::Train(rng) if rate > 0.0 => {
                let mask = dropout_mask(tape.value(x).len(), rate, rng);
                tape.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }
}

/// Tape handles of one encoder's outputs.
#[derive(Debug, Clone, Copy)]
pub struct EncodedVars {
    /// `[L × hidden_dim]` final-layer states.
    pub hidden: Var,
    /// `[1 × hidden_dim]` class state.
    pub cls_raw: Var,
    /// `[1 × proj_dim]` unit-norm projection of the class state.
    pub cls_aligned: Var,
    /// `[L × out]` reconstruction logits or values.
    pub recon: Var,
}

pub(crate) struct BlockVars {
    ln1: (Var, Var),
    wq: (Var, Var),
    wk: (Var, Var),
    wv: (Var, Var),
    wo: (Var, Var),
    ln2: (Var, Var),
    ff1: (Var, Var),
    ff2: (Var, Var),
}

pub(crate) struct StackVars {
    blocks: Vec<BlockVars>,
    ln_f: (Var, Var),
    proj: (Var, Var),
    recon: (Var, Var),
}

/// Weights get std `1/sqrt(fan_in)`; at small widths a fixed 0.02 leaves the
/// attention and feed-forward paths nearly silent for many steps.
fn linear_params(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut Rng) {
    let std = 1.0 / (fan_in as f64).sqrt();
    store.insert(format!("{name}.weight"), truncated_normal(&[fan_in, fan_out], std, rng));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
}

fn norm_params(store: &mut ParamStore, name: &str, dim: usize) {
    store.insert(format!("{name}.gain"), Tensor::filled(&[dim], 1.0));
    store.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
}

/// Initializes blocks, final norm, alignment projection and reconstruction head.
pub(crate) fn init_stack(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, recon_dim: usize, rng: &mut Rng) {
    let d = cfg.hidden_dim;
    for i in 0..cfg.num_layers {
        let p = format!("{prefix}.block{i}");
        norm_params(store, &format!("{p}.ln1"), d);
        for w in ["q", "k", "v", "o"] {
            linear_params(store, &format!("{p}.attn.{w}"), d, d, rng);
        }
        norm_params(store, &format!("{p}.ln2"), d);
        linear_params(store, &format!("{p}.ff1"), d, 4 * d, rng);
        linear_params(store, &format!("{p}.ff2"), 4 * d, d, rng);
    }
    norm_params(store, &format!("{prefix}.ln_f"), d);
    linear_params(store, &format!("{prefix}.proj"), d, cfg.proj_dim, rng);
    linear_params(store, &format!("{prefix}.recon"), d, recon_dim, rng);
}

fn pair(bound: &BoundParams, name: &str, a: &str, b: &str) -> Result<(Var, Var)> {
    Ok((bound.var(&format!("{name}.{a}"))?, bound.var(&format!("{name}.{b}"))?))
}

impl StackVars {
    pub(crate) fn from_bound(bound: &BoundParams, prefix: &str, cfg: &EncoderConfig) -> Result<Self> {
        let lin = |n: &str| pair(bound, n, "weight", "bias");
        let ln = |n: &str| pair(bound, n, "gain", "bias");
        let blocks = (0..cfg.num_layers)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                Ok(BlockVars {
                    ln1: ln(&format!("{p}.ln1"))?,
                    wq: lin(&format!("{p}.attn.q"))?,
                    wk: lin(&format!("{p}.attn.k"))?,
                    wv: lin(&format!("{p}.attn.v"))?,
                    wo: lin(&format!("{p}.attn.o"))?,
                    ln2: ln(&format!("{p}.ln2"))?,
                    ff1: lin(&format!("{p}.ff1"))?,
                    ff2: lin(&format!("{p}.ff2"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            blocks,
            ln_f: ln(&format!("{prefix}.ln_f"))?,
            proj: lin(&format!("{prefix}.proj"))?,
            recon: lin(&format!("{prefix}.recon"))?,
        })
    }

    /// Runs the blocks over embedded input `x` and derives all heads.
    pub(crate) fn forward(&self, tape: &mut Tape, x: Var, cfg: &EncoderConfig, mode: &mut Mode) -> Result<EncodedVars> {
        let mut x = x;
        for b in &self.blocks {
            x = block_forward(tape, b, x, cfg, mode)?;
        }
        let hidden = tape.layer_norm(x, self.ln_f.0, self.ln_f.1, LN_EPS)?;
        let cls_raw = tape.slice_rows(hidden, 0, 1)?;
        let proj = linear(tape, cls_raw, self.proj)?;
        let cls_aligned = tape.normalize_rows(proj)?;
        let recon = linear(tape, hidden, self.recon)?;
        Ok(EncodedVars {
            hidden,
            cls_raw,
            cls_aligned,
            recon,
        })
    }
}

pub(crate) fn linear(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

fn block_forward(tape: &mut Tape, b: &BlockVars, x: Var, cfg: &EncoderConfig, mode: &mut Mode) -> Result<Var> {
    let h = tape.layer_norm(x, b.ln1.0, b.ln1.1, LN_EPS)?;
    let q = linear(tape, h, b.wq)?;
    let k = linear(tape, h, b.wk)?;
    let v = linear(tape, h, b.wv)?;
    let a = tape.attention(q, k, v, cfg.num_heads)?;
    let a = linear(tape, a, b.wo)?;
    let a = mode.dropout(tape, a, cfg.dropout_rate)?;
    let x = tape.add(x, a)?;

    let h = tape.layer_norm(x, b.ln2.0, b.ln2.1, LN_EPS)?;
    let f = linear(tape, h, b.ff1)?;
    let f = tape.gelu(f)?;
    let f = linear(tape, f, b.ff2)?;
    let f = mode.dropout(tape, f, cfg.dropout_rate)?;
    tape.add(x, f)
}
