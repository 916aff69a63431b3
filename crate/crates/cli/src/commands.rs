use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use clinalign::data::{
    generate_synthetic, ingest, make_splits, pair_notes, write_dataset, IngestOptions, IngestSchema, Normalization,
    NoteType, SplitManifest, StayId, StayRecord, Tokenizer, UnknownNotePolicy, WordTokenizer,
};
use clinalign::encoders::{Checkpoint, DualEncoder};
use clinalign::error::{Error, Result};
use clinalign::eval::{
    fingerprint, linear_eval, retrieval_scores, semi_supervised_eval, zero_shot_ihm, EvalReport, RECALL_KS,
};
use clinalign::seed;
use clinalign::train::{
    default_pretrain_space, grid_search, pretrain, GridSpace, PreparedStays, PretrainData, PretrainOptions, Task,
    TaskExamples, TrainState,
};
use serde::Serialize;

use crate::config::ExperimentConfig;

const NORM_STATS_FILE: &str = "norm_stats.json";
const TOKENIZER_FILE: &str = "tokenizer.json";

#[derive(Debug, Serialize)]
pub struct ExperimentManifest<'a> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub seed: u64,
    pub version: String,
    pub config_fingerprint: String,
    pub out_dir: &'a Path,
    pub resolved: &'a ExperimentConfig,
}

pub struct Context<'a> {
    pub command: &'a str,
    pub config_path: Option<&'a Path>,
    pub overrides: &'a [String],
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

impl Context<'_> {
    /// Creates the output directory and writes `manifest.json` into it.
    fn start(&self) -> Result<()> {
        mkdir(&self.out)?;
        let manifest = ExperimentManifest {
            command: self.command,
            config_path: self.config_path,
            overrides: self.overrides,
            seed: self.cfg.seed,
            version: format!("clinalign {}", env!("CARGO_PKG_VERSION")),
            config_fingerprint: fingerprint(&self.cfg)?,
            out_dir: &self.out,
            resolved: &self.cfg,
        };
        write_text(&self.out.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
    }
}

pub fn generate(ctx: &Context) -> Result<()> {
    let cfg = &ctx.cfg;
    let records = generate_synthetic(cfg.data.n_stays, &mut seed::stream(cfg.seed, "data", 0), &cfg.data.synthetic)?;
    let splits = make_splits(&records, cfg.data.splits, &mut seed::stream(cfg.seed, "splits", 0))?;
    ctx.start()?;
    write_dataset(&ctx.out, &records, &IngestSchema::benchmark(), cfg.data.missing_rate, &mut seed::stream(cfg.seed, "missing", 0))?;
    splits.save(&ctx.out.join("splits.json"))?;
    println!(
        "wrote {} stays ({} train / {} validation / {} test) to {}",
        records.len(),
        splits.train.len(),
        splits.validation.len(),
        splits.test.len(),
        ctx.out.display()
    );
    Ok(())
}

/// Writes a normalized copy of `data` (statistics from its training split
/// when `splits.json` is present) plus the fitted statistics.
pub fn ingest_cmd(ctx: &Context, data: &Path) -> Result<()> {
    let splits = load_splits(data).ok();
    let normalization = match &splits {
        Some(s) => Normalization::FitOn(s.train.clone()),
        None => Normalization::FitAll,
    };
    let got = ingest(data, &IngestOptions { schema: IngestSchema::benchmark(), normalization })?;
    ctx.start()?;
    write_dataset(&ctx.out, &got.records, &IngestSchema::benchmark(), 0.0, &mut seed::stream(ctx.cfg.seed, "missing", 0))?;
    if let Some(s) = &splits {
        s.save(&ctx.out.join("splits.json"))?;
    }
    if let Some(stats) = &got.stats {
        write_text(&ctx.out.join(NORM_STATS_FILE), &serde_json::to_string_pretty(stats)?)?;
    }
    println!("ingested {} stays ({} empty skipped) into {}", got.records.len(), got.skipped_empty, ctx.out.display());
    Ok(())
}

fn load_splits(data: &Path) -> Result<SplitManifest> {
    let path = data.join("splits.json");
    if !path.exists() {
        return Err(Error::Config(format!("{} not found; run `clinalign generate` or provide splits", path.display())));
    }
    SplitManifest::load(&path)
}

pub struct Dataset {
    pub train: Vec<StayRecord>,
    pub validation: Vec<StayRecord>,
    pub test: Vec<StayRecord>,
}

impl Dataset {
    pub fn split(&self, name: &str) -> &[StayRecord] {
        match name {
            "train" => &self.train,
            "validation" => &self.validation,
            _ => &self.test,
        }
    }
}

fn subset(records: &[StayRecord], ids: &[StayId]) -> Vec<StayRecord> {
    let want: BTreeSet<StayId> = ids.iter().copied().collect();
    records.iter().filter(|r| want.contains(&r.stay_id)).cloned().collect()
}

/// Ingests, normalizes and pairs notes, then splits by `splits.json`.
fn load_dataset(data: &Path, cfg: &ExperimentConfig) -> Result<Dataset> {
    let splits = load_splits(data)?;
    let normalization = if data.join(NORM_STATS_FILE).exists() || !cfg.data.normalize {
        Normalization::None
    } else {
        Normalization::FitOn(splits.train.clone())
    };
    let mut records = ingest(data, &IngestOptions { schema: IngestSchema::benchmark(), normalization })?.records;
    let report = pair_notes(&mut records, &NoteType::RETAINED, UnknownNotePolicy::Drop)?;
    log::info!("pairing: {report:?}");
    Ok(Dataset {
        train: subset(&records, &splits.train),
        validation: subset(&records, &splits.validation),
        test: subset(&records, &splits.test),
    })
}

fn build_tokenizer(train: &[StayRecord], min_count: usize) -> WordTokenizer {
    WordTokenizer::build(train.iter().flat_map(|r| r.notes.iter().map(|n| n.text.as_str())), min_count)
}

pub fn pretrain_cmd(ctx: &Context, data: &Path, resume: Option<&Path>, stop_after: Option<usize>) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = load_dataset(data, cfg)?;
    let resume_state = match resume {
        Some(p) => Some(TrainState::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    ctx.start()?;
    let tokenizer = build_tokenizer(&ds.train, cfg.data.min_token_count);
    tokenizer.save(&ctx.out.join(TOKENIZER_FILE))?;
    let outcome = pretrain(
        &PretrainData { train: &ds.train, validation: &ds.validation, tokenizer: &tokenizer },
        &cfg.pretrain,
        PretrainOptions { out_dir: Some(ctx.out.clone()), resume: resume_state, stop_after },
    )?;
    println!("{:>5} {:>10} {:>10} {:>10} {:>10} {:>8}", "epoch", "loss", "align", "note", "meas", "val_r1");
    for e in &outcome.log {
        let val = e.validation.map_or("-".to_string(), |v| format!("{:.2}", v.mean_r1()));
        println!(
            "{:>5} {:>10.5} {:>10.5} {:>10.5} {:>10.5} {:>8}",
            e.epoch, e.loss.total, e.loss.align, e.loss.note_recon, e.loss.meas_recon, val
        );
    }
    println!("checkpoints in {}", ctx.out.display());
    Ok(())
}

fn grid_space(cfg: &ExperimentConfig) -> Result<GridSpace> {
    if cfg.grid.axes.is_empty() {
        return Ok(default_pretrain_space());
    }
    let mut space = GridSpace::default();
    for (k, vals) in &cfg.grid.axes {
        if vals.is_empty() {
            return Err(Error::Config(format!("grid axis {k} has no values")));
        }
        let json: Vec<serde_json::Value> =
            vals.iter().map(serde_json::to_value).collect::<std::result::Result<_, _>>()?;
        space = space.axis(k, json);
    }
    Ok(space)
}

pub fn gridsearch(ctx: &Context, data: &Path) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = load_dataset(data, cfg)?;
    if ds.validation.is_empty() {
        return Err(Error::Data("grid search scores on the validation split, which is empty".into()));
    }
    let space = grid_space(cfg)?;
    ctx.start()?;
    let tokenizer = build_tokenizer(&ds.train, cfg.data.min_token_count);
    let base = clinalign::train::PretrainConfig { epochs: cfg.grid.epochs, ..cfg.pretrain.clone() };
    log::info!("grid search over {} trials", space.len());
    let result = grid_search(&base, &space, |i, trial_cfg| {
        let out = pretrain(
            &PretrainData { train: &ds.train, validation: &[], tokenizer: &tokenizer },
            trial_cfg,
            PretrainOptions::default(),
        )?;
        let model = &out.state.model;
        let prepared = PreparedStays::new(&ds.validation, &tokenizer, trial_cfg.model.max_seq_len)?;
        let score = retrieval_scores(model, &prepared, cfg.eval.single_positive)?.mean_r1();
        log::info!("trial {i}: validation mean R@1 {score:.3}");
        Ok(score)
    })?;

    let keys: Vec<&String> = space.axes.keys().collect();
    let mut w = csv::Writer::from_path(ctx.out.join("trials.csv"))?;
    let mut header = vec!["rank".to_string(), "index".into(), "objective".into()];
    header.extend(keys.iter().map(|k| k.to_string()));
    w.write_record(&header)?;
    for (rank, t) in result.trials.iter().enumerate() {
        let mut row = vec![rank.to_string(), t.index.to_string(), t.objective.to_string()];
        row.extend(keys.iter().map(|k| t.overrides[*k].to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;

    let best = ExperimentConfig { pretrain: clinalign::train::PretrainConfig { epochs: cfg.pretrain.epochs, ..result.best }, ..cfg.clone() };
    write_text(&ctx.out.join("best_config.toml"), &best.to_toml()?)?;
    let top = &result.trials[0];
    println!("best trial {} (validation mean R@1 {:.2}): {}", top.index, top.objective, serde_json::to_string(&top.overrides)?);
    println!("wrote trials.csv and best_config.toml to {}", ctx.out.display());
    Ok(())
}

/// Loads the model and the tokenizer saved next to it.
fn load_model(checkpoint: &Path, tokenizer: Option<&Path>) -> Result<(DualEncoder, WordTokenizer)> {
    if !checkpoint.exists() {
        return Err(Error::Config(format!("checkpoint {} not found (--checkpoint)", checkpoint.display())));
    }
    let model = Checkpoint::load(checkpoint)?.to_model(None)?;
    let tok_path = match tokenizer {
        Some(p) => p.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(TOKENIZER_FILE),
    };
    if !tok_path.exists() {
        return Err(Error::Config(format!("tokenizer {} not found; pass --tokenizer", tok_path.display())));
    }
    let tok = WordTokenizer::load(&tok_path)?;
    if tok.vocab_size() != model.config.text.vocab_size {
        return Err(Error::Config(format!(
            "tokenizer has {} words but the checkpoint expects {}",
            tok.vocab_size(),
            model.config.text.vocab_size
        )));
    }
    Ok((model, tok))
}

fn require_checkpoint<'a>(checkpoint: Option<&'a Path>, sub: &str) -> Result<&'a Path> {
    checkpoint.ok_or_else(|| Error::Config(format!("`eval {sub}` needs a pretrained model; pass --checkpoint <path>")))
}

fn print_report(report: &EvalReport) {
    println!("{} (n = {})", report.task, report.n_samples);
    for (k, v) in &report.metrics {
        println!("  {k:<18} {v:.4}");
    }
}

fn task(cfg: &ExperimentConfig) -> Result<Task> {
    cfg.eval.task.parse()
}

fn max_rows(model: &DualEncoder) -> usize {
    model.config.measurement.max_seq_len - 1
}

pub fn eval_retrieval(ctx: &Context, data: &Path, checkpoint: Option<&Path>, tokenizer: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (model, tok) = load_model(require_checkpoint(checkpoint, "retrieval")?, tokenizer)?;
    let ds = load_dataset(data, cfg)?;
    ctx.start()?;
    let prepared = PreparedStays::new(ds.split(&cfg.eval.split), &tok, model.config.text.max_seq_len)?;
    let scores = retrieval_scores(&model, &prepared, cfg.eval.single_positive)?;
    let report = EvalReport {
        task: format!("retrieval_{}", cfg.eval.split),
        metrics: scores.metrics(),
        n_samples: scores.n_stays,
        config_fingerprint: fingerprint(cfg)?,
    };
    report.save(&ctx.out.join("retrieval.json"))?;
    println!("{:<8} {:>7} {:>7} {:>7}", "", "R@1", "R@5", "R@10");
    for (name, r) in [("M -> T", scores.m_to_t), ("T -> M", scores.t_to_m)] {
        println!("{name:<8} {:>7.2} {:>7.2} {:>7.2}", r[0], r[1], r[2]);
    }
    println!("{} stays, {} notes; recall in percent at k = {RECALL_KS:?}", scores.n_stays, scores.n_notes);
    Ok(())
}

pub fn eval_zeroshot(ctx: &Context, data: &Path, checkpoint: Option<&Path>, tokenizer: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (model, tok) = load_model(require_checkpoint(checkpoint, "zeroshot")?, tokenizer)?;
    let ds = load_dataset(data, cfg)?;
    ctx.start()?;
    let ex = TaskExamples::from_records(ds.split(&cfg.eval.split), Task::Ihm, max_rows(&model), cfg.finetune.ihm_hours)?;
    let labels: Vec<bool> = ex.targets.iter().map(|t| t[0] > 0.5).collect();
    let anchors = (cfg.eval.anchors[0].as_str(), cfg.eval.anchors[1].as_str());
    let (mut report, probs) = zero_shot_ihm(&model, &tok, anchors, &ex.windows, &labels)?;
    report.config_fingerprint = fingerprint(cfg)?;
    report.save(&ctx.out.join("zeroshot.json"))?;
    let mut w = csv::Writer::from_path(ctx.out.join("zeroshot_probabilities.csv"))?;
    w.write_record(["index", "label", "p_positive"])?;
    for (i, (p, y)) in probs.iter().zip(&labels).enumerate() {
        w.write_record([i.to_string(), (*y as u8).to_string(), p.to_string()])?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    print_report(&report);
    Ok(())
}

pub fn eval_linear(ctx: &Context, data: &Path, checkpoint: Option<&Path>, tokenizer: Option<&Path>) -> Result<()> {
    let cfg = &ctx.cfg;
    let (model, _) = load_model(require_checkpoint(checkpoint, "linear")?, tokenizer)?;
    let ds = load_dataset(data, cfg)?;
    ctx.start()?;
    let t = task(cfg)?;
    let rows = max_rows(&model);
    let h = cfg.finetune.ihm_hours;
    let train = TaskExamples::from_records(&ds.train, t, rows, h)?;
    let val = TaskExamples::from_records(&ds.validation, t, rows, h)?;
    let test = TaskExamples::from_records(&ds.test, t, rows, h)?;
    let (report, chosen) = linear_eval(&model, t, &train, &val, &test, &cfg.eval.linear, &cfg.finetune)?;
    report.save(&ctx.out.join(format!("linear_{}.json", t.name())))?;
    print_report(&report);
    println!("selected batch_size {} epochs {} lr {}", chosen.batch_size, chosen.epochs, chosen.lr);
    Ok(())
}

pub fn eval_semisup(
    ctx: &Context,
    data: &Path,
    checkpoint: Option<&Path>,
    tokenizer: Option<&Path>,
    fractions: Option<&[u32]>,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let ds = load_dataset(data, cfg)?;
    let splits = load_splits(data)?;
    let pretrained = match checkpoint {
        Some(c) => Some(load_model(c, tokenizer)?.0),
        None => {
            log::warn!("no --checkpoint given; running the random-initialization baseline only");
            None
        }
    };
    let model_cfg = match &pretrained {
        Some(m) => m.config.clone(),
        None => {
            let f = ds.train.first().map(|r| r.values.cols()).ok_or_else(|| Error::Data("empty training split".into()))?;
            let vocab = build_tokenizer(&ds.train, cfg.data.min_token_count).vocab_size();
            cfg.pretrain.model.model_config(vocab, f, cfg.pretrain.text_dropout, cfg.pretrain.meas_dropout)
        }
    };
    let t = task(cfg)?;
    let rows = model_cfg.measurement.max_seq_len - 1;
    let h = cfg.finetune.ihm_hours;
    let fractions = fractions.unwrap_or(&cfg.eval.fractions);
    let mut sets = Vec::new();
    for &pct in fractions {
        let ids = splits
            .fraction(pct)
            .ok_or_else(|| Error::Config(format!("splits.json has no {pct}% label fraction")))?;
        sets.push((pct, TaskExamples::from_records(&subset(&ds.train, ids), t, rows, h)?));
    }
    let test = TaskExamples::from_records(&ds.test, t, rows, h)?;
    ctx.start()?;
    let table = semi_supervised_eval(pretrained.as_ref(), &model_cfg, t, &sets, &test, cfg.eval.repeats, &cfg.finetune)?;
    table.write_csv(&ctx.out.join("semisup_runs.csv"), &ctx.out.join("semisup.csv"))?;

    let metrics: BTreeSet<&str> = table.summary.iter().map(|s| s.metric.as_str()).collect();
    let mut by_row: BTreeMap<(&str, u32), Vec<String>> = BTreeMap::new();
    for s in &table.summary {
        by_row.entry((s.init.as_str(), s.fraction)).or_default().push(format!("{:.3} ± {:.3}", s.mean, s.std));
    }
    print!("{:<11} {:>8}", "init", "fraction");
    for m in &metrics {
        print!(" {m:>16}");
    }
    println!();
    for ((init, pct), cells) in by_row {
        print!("{init:<11} {:>7}%", pct);
        for c in cells {
            print!(" {c:>16}");
        }
        println!();
    }
    Ok(())
}

#[derive(Serialize)]
struct CheckpointSummary<'a> {
    path: &'a Path,
    tensors: usize,
    model_parameters: usize,
    model: &'a clinalign::encoders::ModelConfig,
    meta: &'a serde_json::Value,
}

pub fn inspect_checkpoint(path: &Path) -> Result<()> {
    if !path.exists() {
        return Err(Error::Config(format!("checkpoint {} not found", path.display())));
    }
    let ckpt = Checkpoint::load(path)?;
    let model_parameters = ckpt
        .tensors
        .iter()
        .filter(|(k, _)| k.starts_with("text.") || k.starts_with("meas."))
        .map(|(_, t)| t.len())
        .sum();
    let summary = CheckpointSummary {
        path,
        tensors: ckpt.tensors.len(),
        model_parameters,
        model: &ckpt.model,
        meta: &ckpt.meta,
    };
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}
