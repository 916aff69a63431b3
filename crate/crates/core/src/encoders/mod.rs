//! Text and measurement transformer encoders with class-token alignment and
//! reconstruction heads.

mod checkpoint;
mod config;
mod params;
mod transformer;

use std::collections::BTreeMap;

pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};
pub use config::{special, EncoderConfig, EncoderOutput, MeasurementWindow, ModelConfig, TokenSequence};
pub use params::{dropout_mask, truncated_normal, BoundParams, ParamStore, INIT_STD};
pub use transformer::{EncodedVars, Mode, LN_EPS};

use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::substrate::{Tape, Tensor, Var};
use transformer::{linear, StackVars};

pub const TEXT_PREFIX: &str = "text";
pub const MEAS_PREFIX: &str = "meas";

/// Fixed sinusoidal position table, `[max_len × dim]`.
pub fn sinusoidal_positions(max_len: usize, dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::Config(format!("sinusoidal positions need an even dim, got {dim}")));
    }
    if max_len == 0 {
        return Err(Error::Config("sinusoidal positions need max_len >= 1".into()));
    }
    let mut data = vec![0.0; max_len * dim];
    for pos in 0..max_len {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10000f64.powf(2.0 * i as f64 / dim as f64);
            data[pos * dim + 2 * i] = angle.sin();
            data[pos * dim + 2 * i + 1] = angle.cos();
        }
    }
    Tensor::new(vec![max_len, dim], data)
}

/// Tape handles for the text encoder.
pub struct TextVars {
    tok_emb: Var,
    pos_emb: Var,
    stack: StackVars,
}

/// Tape handles for the measurement encoder.
pub struct MeasVars {
    input: (Var, Var),
    cls: Var,
    stack: StackVars,
}

impl TextVars {
    pub fn from_bound(bound: &BoundParams, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            tok_emb: bound.var("text.tok_emb")?,
            pos_emb: bound.var("text.pos_emb")?,
            stack: StackVars::from_bound(bound, TEXT_PREFIX, cfg)?,
        })
    }
}

impl MeasVars {
    pub fn from_bound(bound: &BoundParams, cfg: &EncoderConfig) -> Result<Self> {
        Ok(Self {
            input: (bound.var("meas.input.weight")?, bound.var("meas.input.bias")?),
            cls: bound.var("meas.cls")?,
            stack: StackVars::from_bound(bound, MEAS_PREFIX, cfg)?,
        })
    }
}

/// Records the text encoder's forward pass.
pub fn text_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &TextVars,
    seq: &TokenSequence,
    mode: &mut Mode,
) -> Result<EncodedVars> {
    seq.validate(cfg)?;
    let ids: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
    let positions: Vec<usize> = (0..ids.len()).collect();
    let tok = tape.gather(vars.tok_emb, &ids)?;
    let pos = tape.gather(vars.pos_emb, &positions)?;
    let x = tape.add(tok, pos)?;
    let x = mode.dropout(tape, x, cfg.dropout_rate)?;
    vars.stack.forward(tape, x, cfg, mode)
}

/// Records the measurement encoder's forward pass. Output row `t + 1`
/// corresponds to input timestep `t`; row 0 is the class token.
pub fn measurement_forward(
    tape: &mut Tape,
    cfg: &EncoderConfig,
    vars: &MeasVars,
    win: &MeasurementWindow,
    mode: &mut Mode,
) -> Result<EncodedVars> {
    win.validate(cfg)?;
    let t = win.timesteps();
    let x = tape.constant(win.values.clone());
    let e = linear(tape, x, vars.input)?;
    let x = tape.concat_rows(&[vars.cls, e])?;
    let pe = sinusoidal_positions(t + 1, cfg.hidden_dim)?;
    let pe = tape.constant(pe);
    let x = tape.add(x, pe)?;
    let x = mode.dropout(tape, x, cfg.dropout_rate)?;
    vars.stack.forward(tape, x, cfg, mode)
}

fn materialize(tape: &Tape, out: EncodedVars) -> Result<EncoderOutput> {
    let cls_raw = tape.value(out.cls_raw).clone();
    let cls_aligned = tape.value(out.cls_aligned).clone();
    Ok(EncoderOutput {
        hidden: tape.value(out.hidden).clone(),
        cls_raw: cls_raw.reshape(vec![tape.value(out.cls_raw).len()])?,
        cls_aligned: cls_aligned.reshape(vec![tape.value(out.cls_aligned).len()])?,
        recon: tape.value(out.recon).clone(),
    })
}

/// Encodes one note in evaluation mode.
pub fn encode_text(cfg: &EncoderConfig, params: &ParamStore, seq: &TokenSequence) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let vars = TextVars::from_bound(&bound, cfg)?;
    let out = text_forward(&mut tape, cfg, &vars, seq, &mut Mode::Eval)?;
    materialize(&tape, out)
}

/// Encodes one measurement window in evaluation mode.
pub fn encode_measurements(cfg: &EncoderConfig, params: &ParamStore, win: &MeasurementWindow) -> Result<EncoderOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, |_| false);
    let vars = MeasVars::from_bound(&bound, cfg)?;
    let out = measurement_forward(&mut tape, cfg, &vars, win, &mut Mode::Eval)?;
    materialize(&tape, out)
}

/// The paired text and measurement encoders with their parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl DualEncoder {
    /// Fresh parameters: truncated normal weights (fan-in scaled for the
/// measurement input map), zero biases, unit norm gains.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let t = &config.text;
        params.insert("text.tok_emb", truncated_normal(&[t.vocab_size, t.hidden_dim], INIT_STD, rng));
        params.insert("text.pos_emb", truncated_normal(&[t.max_seq_len, t.hidden_dim], INIT_STD, rng));
        transformer::init_stack(&mut params, TEXT_PREFIX, t, t.vocab_size, rng);

        let m = &config.measurement;
        // fan-in scaled so unit-variance inputs are not swamped by the unit-amplitude sinusoids
        let input_std = 1.0 / (m.num_features as f64).sqrt();
        params.insert("meas.input.weight", truncated_normal(&[m.num_features, m.hidden_dim], input_std, rng));
        params.insert("meas.input.bias", Tensor::zeros(&[m.hidden_dim]));
        params.insert("meas.cls", truncated_normal(&[1, m.hidden_dim], INIT_STD, rng));
        transformer::init_stack(&mut params, MEAS_PREFIX, m, m.num_features, rng);
        Ok(Self { config, params })
    }

    pub fn encode_text(&self, seq: &TokenSequence) -> Result<EncoderOutput> {
        encode_text(&self.config.text, &self.params, seq)
    }

    pub fn encode_measurements(&self, win: &MeasurementWindow) -> Result<EncoderOutput> {
        encode_measurements(&self.config.measurement, &self.params, win)
    }

    /// Unit-norm alignment embeddings for many notes.
    pub fn text_embeddings(&self, seqs: &[TokenSequence]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        seqs.par_iter()
            .map(|s| Ok(self.encode_text(s)?.cls_aligned.into_data()))
            .collect()
    }

    /// Unit-norm alignment embeddings for many windows.
    pub fn measurement_embeddings(&self, wins: &[MeasurementWindow]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        wins.par_iter()
            .map(|w| Ok(self.encode_measurements(w)?.cls_aligned.into_data()))
            .collect()
    }

    /// Raw class states of the measurement encoder, used by downstream heads.
    pub fn measurement_features(&self, wins: &[MeasurementWindow]) -> Result<Vec<Vec<f64>>> {
        use rayon::prelude::*;
        wins.par_iter()
            .map(|w| Ok(self.encode_measurements(w)?.cls_raw.into_data()))
            .collect()
    }

    /// Loads externally trained text-encoder weights (names under `text.`).
    pub fn import_text_weights(&mut self, tensors: &BTreeMap<String, Tensor>) -> Result<usize> {
        self.params.import_prefixed("text.", tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny() -> DualEncoder {
        let cfg = ModelConfig::new(11, 17).sized(2, 8, 2).with_max_seq_len(16);
        DualEncoder::init(cfg, &mut Rng::seed_from_u64(3)).unwrap()
    }

    #[test]
    fn sinusoid_fixtures() {
        let pe = sinusoidal_positions(4, 6).unwrap();
        for i in 0..3 {
            assert_eq!(pe.row(0)[2 * i], 0.0);
            assert_eq!(pe.row(0)[2 * i + 1], 1.0);
        }
        assert!((pe.row(1)[0] - 1f64.sin()).abs() < 1e-15);
        assert!((pe.row(1)[0] - 0.84147).abs() < 1e-5);
        assert!(pe.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(matches!(sinusoidal_positions(4, 5), Err(Error::Config(_))));
    }

    #[test]
    fn text_shapes_and_norm() {
        let m = tiny();
        let seq = TokenSequence::new(vec![special::CLS, 5, 6, 7, 10]);
        let out = m.encode_text(&seq).unwrap();
        assert_eq!(out.hidden.shape(), &[5, 8]);
        assert_eq!(out.cls_raw.shape(), &[8]);
        assert_eq!(out.cls_aligned.shape(), &[8]);
        assert_eq!(out.recon.shape(), &[5, 11]);
        assert!((out.cls_aligned.norm() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn text_length_and_id_errors() {
        let m = tiny();
        let long = TokenSequence::new([special::CLS].into_iter().chain(std::iter::repeat(5).take(16)).collect());
        assert!(matches!(m.encode_text(&long), Err(Error::Length { len: 17, max: 16 })));
        let bad = TokenSequence::new(vec![special::CLS, 11]);
        assert!(matches!(m.encode_text(&bad), Err(Error::Data(_))));
        let no_cls = TokenSequence::new(vec![5, 6]);
        assert!(matches!(m.encode_text(&no_cls), Err(Error::Data(_))));
    }

    #[test]
    fn measurement_shapes_and_errors() {
        let m = tiny();
        let win = MeasurementWindow::from_rows(&[vec![0.5; 17]]).unwrap();
        let out = m.encode_measurements(&win).unwrap();
        assert_eq!(out.hidden.shape(), &[2, 8]);
        assert_eq!(out.recon.shape(), &[2, 17]);
        assert!((out.cls_aligned.norm() - 1.0).abs() < 1e-9);

        let long = MeasurementWindow::from_rows(&vec![vec![0.0; 17]; 16]).unwrap();
        assert!(matches!(m.encode_measurements(&long), Err(Error::Length { len: 17, max: 16 })));
        let mut nan = vec![vec![0.0; 17]; 2];
        nan[1][3] = f64::NAN;
        let nan = MeasurementWindow::from_rows(&nan).unwrap();
        assert!(matches!(m.encode_measurements(&nan), Err(Error::Data(_))));
    }

    #[test]
    fn positional_encoding_breaks_permutation_symmetry() {
        let m = tiny();
        let a: Vec<Vec<f64>> = (0..3).map(|t| (0..17).map(|f| (t * 17 + f) as f64 * 0.05).collect()).collect();
        let mut b = a.clone();
        b.swap(0, 2);
        let oa = m.encode_measurements(&MeasurementWindow::from_rows(&a).unwrap()).unwrap();
        let ob = m.encode_measurements(&MeasurementWindow::from_rows(&b).unwrap()).unwrap();
        assert_ne!(oa.cls_aligned, ob.cls_aligned);
    }

    #[test]
    fn changed_token_changes_reconstruction() {
        let m = tiny();
        let a = m.encode_text(&TokenSequence::new(vec![special::CLS, 5, 6, 7])).unwrap();
        let b = m.encode_text(&TokenSequence::new(vec![special::CLS, 5, 9, 7])).unwrap();
        for r in 0..4 {
            assert_ne!(a.recon.row(r), b.recon.row(r), "row {r}");
        }
    }

    #[test]
    fn forward_is_deterministic_and_train_mode_without_dropout_matches_eval() {
        let m = tiny();
        let seq = TokenSequence::new(vec![special::CLS, 4, 8]);
        assert_eq!(m.encode_text(&seq).unwrap(), m.encode_text(&seq).unwrap());

        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape, |_| true);
        let vars = TextVars::from_bound(&bound, &m.config.text).unwrap();
        let mut rng = Rng::seed_from_u64(1);
        let out = text_forward(&mut tape, &m.config.text, &vars, &seq, &mut Mode::Train(&mut rng)).unwrap();
        assert_eq!(tape.value(out.hidden), &m.encode_text(&seq).unwrap().hidden);
    }

    #[test]
    fn import_hook_replaces_text_weights_only() {
        let mut m = tiny();
        let mut src = BTreeMap::new();
        src.insert("text.tok_emb".to_string(), Tensor::filled(&[11, 8], 0.5));
        src.insert("meas.cls".to_string(), Tensor::filled(&[1, 8], 0.5));
        assert_eq!(m.import_text_weights(&src).unwrap(), 1);
        assert_eq!(m.params.get("text.tok_emb").unwrap().data()[0], 0.5);
        assert_ne!(m.params.get("meas.cls").unwrap().data()[0], 0.5);
    }
}
