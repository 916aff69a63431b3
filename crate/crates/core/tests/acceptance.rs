//! End-to-end acceptance checks. Each test writes one `criterion N PASS|FAIL`
//! line straight to stdout (bypassing libtest capture) and then asserts.

use std::io::Write as _;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use clinalign::data::*;
use clinalign::encoders::{BoundParams, Checkpoint, DualEncoder, MeasVars, MeasurementWindow, Mode, ModelConfig, TextVars};
use clinalign::eval::*;
use clinalign::masking::{mask_measurements, mask_notes};
use clinalign::objective::*;
use clinalign::seed;
use clinalign::substrate::{gradient_check, Tape, Tensor, Var};
use clinalign::train::*;
use rand::Rng as _;

const GRAD_TOL: f64 = 1e-3;
const FD_STEP: f64 = 1e-6;
const FIXTURE_TOL: f64 = 1e-6;
const ALIGN_ORACLE_TOL: f64 = 1e-10;
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 250;
const R1_TARGET: f64 = 90.0;
const CONVERGE_BUDGET: Duration = Duration::from_secs(300);
const ZERO_SHOT_MARGIN: f64 = 0.1;
const PROB_SUM_TOL: f64 = 1e-12;
const GAP_VANISH_TOL: f64 = 0.02;
const SIGMA_BOUND: f64 = 3.0;

fn report(n: u32, pass: bool, what: &str) {
    let line = format!("criterion {n} {} {what}\n", if pass { "PASS" } else { "FAIL" });
    let mut out = std::io::stdout().lock();
    out.write_all(line.as_bytes()).unwrap();
    out.flush().unwrap();
}

fn rand_tensor(shape: &[usize], rng: &mut seed::Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Reduces any output to a scalar through fixed random weights so every
/// output entry contributes to the checked gradient.
fn probe(tape: &mut Tape, out: Var, seed_idx: u64) -> clinalign::Result<Var> {
    let shape = tape.value(out).shape().to_vec();
    let w = rand_tensor(&shape, &mut seed::stream(99, "probe", seed_idx));
    let w = tape.constant(w);
    let m = tape.mul(out, w)?;
    tape.sum(m)
}

type OpCase = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> clinalign::Result<Var>>);

fn op_cases() -> Vec<OpCase> {
    let mut rng = seed::stream(1, "gradcheck-ops", 0);
    let mut r = |s: &[usize]| rand_tensor(s, &mut rng);
    let ln_pos = Tensor::vector(vec![0.3, 1.2, 0.8, 1.7]);
    let cases: Vec<OpCase> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| t.matmul(v[0], v[1]))),
        ("transpose", vec![r(&[3, 2])], Box::new(|t, v| t.transpose(v[0]))),
        ("add", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.add(v[0], v[1]))),
        ("sub", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.sub(v[0], v[1]))),
        ("mul", vec![r(&[2, 3]), r(&[2, 3])], Box::new(|t, v| t.mul(v[0], v[1]))),
        ("add_row", vec![r(&[3, 4]), r(&[4])], Box::new(|t, v| t.add_row(v[0], v[1]))),
        ("scale", vec![r(&[2, 3])], Box::new(|t, v| t.scale(v[0], -1.7))),
        ("mul_const", vec![r(&[2, 2])], Box::new(|t, v| t.mul_const(v[0], vec![0.0, 2.0, 1.25, -1.0]))),
        ("gelu", vec![r(&[3, 3])], Box::new(|t, v| t.gelu(v[0]))),
        ("softmax_rows", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 1))),
        ("softmax_cols", vec![r(&[3, 4])], Box::new(|t, v| t.softmax(v[0], 0))),
        ("layer_norm", vec![r(&[3, 4]), ln_pos, r(&[4])], Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
        ("attention", vec![r(&[5, 4]), r(&[5, 4]), r(&[5, 4])], Box::new(|t, v| t.attention(v[0], v[1], v[2], 2))),
        ("gather", vec![r(&[5, 3])], Box::new(|t, v| t.gather(v[0], &[4, 0, 4, 2]))),
        ("concat_rows", vec![r(&[1, 3]), r(&[2, 3])], Box::new(|t, v| t.concat_rows(&[v[0], v[1]]))),
        ("slice_rows", vec![r(&[5, 2])], Box::new(|t, v| t.slice_rows(v[0], 1, 3))),
        ("normalize_rows", vec![r(&[3, 4])], Box::new(|t, v| t.normalize_rows(v[0]))),
        (
            "pick_log_softmax",
            vec![r(&[3, 4])],
            Box::new(|t, v| {
                let mask = vec![true, false, true, true, true, true, false, true, false, true, true, true];
                t.pick_log_softmax(v[0], &[(0, 0), (1, 1), (2, 3), (0, 2)], Some(mask))
            }),
        ),
        (
            "smooth_l1",
            // residuals on both sides of beta, none at the kink
            vec![Tensor::from_rows(&[vec![0.2, 2.5, -0.4], vec![-3.0, 0.7, 1.9]]).unwrap()],
            Box::new(|t, v| {
                let target = Tensor::from_rows(&[vec![0.0, 0.1, 0.3], vec![0.5, -0.2, 0.0]]).unwrap();
                t.smooth_l1(v[0], &target, &[(0, 0), (1, 1), (1, 0)], 1.0)
            }),
        ),
        ("bce_with_logits", vec![r(&[2, 3])], Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0, 0.0]))),
        ("sum", vec![r(&[2, 3])], Box::new(|t, v| t.sum(v[0]))),
    ];
    cases
}

fn tiny_vocab_model() -> (DualEncoder, WordTokenizer) {
    let tok = WordTokenizer::build(["patient stable today", "patient critical on support", "febrile and hypoxic"], 1);
    let cfg = ModelConfig::new(tok.vocab_size(), 3).sized(1, 8, 2).with_max_seq_len(8);
    (DualEncoder::init(cfg, &mut seed::stream(3, "init", 0)).unwrap(), tok)
}

#[test]
fn c1_gradient_correctness() {
    let started = Instant::now();
    let mut worst = Vec::new();

    for (i, (name, inputs, f)) in op_cases().into_iter().enumerate() {
        let rep = gradient_check(
            |t, v| {
                let out = f(t, v)?;
                if t.value(out).is_scalar() {
                    Ok(out)
                } else {
                    probe(t, out, i as u64)
                }
            },
            &inputs,
            FD_STEP,
            GRAD_TOL,
        )
        .unwrap();
        worst.push((name.to_string(), rep.worst()));
    }

    // alignment loss on a 3-pair batch, from unnormalized embeddings
    let mut rng = seed::stream(2, "gradcheck-align", 0);
    let m = rand_tensor(&[3, 4], &mut rng);
    let t = rand_tensor(&[3, 4], &mut rng);
    for (label, ids) in [("alignment_3_pairs", [0u64, 1, 2]), ("alignment_shared_stay", [0, 1, 1])] {
        let ids: Vec<StayId> = ids.iter().map(|&i| StayId(i)).collect();
        let rep = gradient_check(
            |tape, v| {
                let a = tape.normalize_rows(v[0])?;
                let b = tape.normalize_rows(v[1])?;
                Ok(alignment_loss_on_tape(tape, a, b, &ids, 0.5, true)?.total)
            },
            &[m.clone(), t.clone()],
            FD_STEP,
            GRAD_TOL,
        )
        .unwrap();
        worst.push((label.into(), rep.worst()));
    }

    // combined objective on a masked 2-pair batch, every parameter checked
    let (model, tok) = tiny_vocab_model();
    let mut rng = seed::stream(4, "gradcheck-batch", 0);
    let windows = [rand_tensor(&[4, 3], &mut rng), rand_tensor(&[5, 3], &mut rng)];
    let notes = [tok.encode("patient critical on support", 8), tok.encode("febrile and hypoxic patient", 8)];
    let mean_row = vec![0.1, -0.2, 0.05];
    let pairs: Vec<MaskedPair> = (0..2u64)
        .map(|k| {
            // first seed whose draw masks something in both modalities
            (0..)
                .map(|s| {
                    let w = MeasurementWindow::new(windows[k as usize].clone()).unwrap();
                    MaskedPair::new(&w, &notes[k as usize], (0.4, 0.4), &mean_row, &mut seed::stream(s, "mask", k)).unwrap()
                })
                .find(|p| !p.note.mask_positions.is_empty() && !p.window.mask_positions.is_empty())
                .unwrap()
        })
        .collect();
    let settings = ObjectiveSettings {
        temperature: 0.5,
        include_positive: true,
        weights: LossWeights::default(),
        beta: DEFAULT_SMOOTH_L1_BETA,
    };
    let names: Vec<String> = model.params.names().map(String::from).collect();
    let inputs: Vec<Tensor> = names.iter().map(|n| model.params.get(n).unwrap().clone()).collect();
    let ids = [StayId(10), StayId(11)];
    let rep = gradient_check(
        |tape, v| {
            let mut bound: BoundParams = model.params.bind(tape, |_| false);
            for (n, &var) in names.iter().zip(v) {
                bound.replace(n, var)?;
            }
            let tv = TextVars::from_bound(&bound, &model.config.text)?;
            let mv = MeasVars::from_bound(&bound, &model.config.measurement)?;
            let (loss, parts) = batch_objective(tape, &model.config, &tv, &mv, &pairs, &ids, &settings, &mut Mode::Eval)?;
            assert!(parts.note_recon > 0.0 && parts.meas_recon > 0.0);
            Ok(loss)
        },
        &inputs,
        FD_STEP,
        GRAD_TOL,
    )
    .unwrap();
    worst.push(("combined_objective".into(), rep.worst()));

    let elapsed = started.elapsed();
    let (bad_name, max_err) = worst.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let pass = max_err <= GRAD_TOL && elapsed < Duration::from_secs(120);
    report(
        1,
        pass,
        &format!(
            "{} gradchecks, worst rel err {max_err:.2e} ({bad_name}) <= {GRAD_TOL:e}, {:.1}s",
            worst.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass, "{worst:?}");
}

/// Independent enumeration of every softmax term of both directions.
fn brute_alignment(m: &[Vec<f64>], t: &[Vec<f64>], ids: &[StayId], tau: f64) -> f64 {
    let n = m.len();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut total = 0.0;
    for (anchors, others) in [(m, t), (t, m)] {
        for j in 0..n {
            let mut denom = 0.0;
            for c in 0..n {
                if c == j || ids[c] != ids[j] {
                    denom += (dot(&anchors[j], &others[c]) / tau).exp();
                }
            }
            let num = (dot(&anchors[j], &others[j]) / tau).exp();
            total += -(num / denom).ln();
        }
    }
    total / (2.0 * n as f64)
}

fn unit(rng: &mut seed::Rng, d: usize) -> Vec<f64> {
    let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

#[test]
fn c2_alignment_oracle() {
    let e = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    let fixture = alignment_loss(&AlignmentBatch::new(e.clone(), e, vec![StayId(0), StayId(1)], 1.0)).unwrap();
    let hand = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
    let fixture_ok = (fixture - hand).abs() <= FIXTURE_TOL && (fixture - 0.31326).abs() <= 1e-5;

    let mut rng = seed::stream(5, "align-oracle", 0);
    let mut worst: f64 = 0.0;
    let mut with_dupes = 0;
    for case in 0..100 {
        let n = rng.gen_range(2..=6);
        let d = rng.gen_range(2..=5);
        let ids: Vec<StayId> = loop {
            // every third case forces a repeated stay
            let pool = if case % 3 == 0 { (n as u64 - 1).max(2) } else { 100 };
            let ids: Vec<StayId> = (0..n).map(|_| StayId(rng.gen_range(0..pool))).collect();
            if ids.iter().any(|s| *s != ids[0]) {
                break ids;
            }
        };
        if (1..n).any(|i| ids[..i].contains(&ids[i])) {
            with_dupes += 1;
        }
        let m: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let t: Vec<Vec<f64>> = (0..n).map(|_| unit(&mut rng, d)).collect();
        let tau = rng.gen_range(0.05..1.0);
        let got = alignment_loss(&AlignmentBatch::new(m.clone(), t.clone(), ids.clone(), tau)).unwrap();
        let want = brute_alignment(&m, &t, &ids, tau);
        worst = worst.max((got - want).abs() / want.abs().max(1.0));
    }
    let pass = fixture_ok && worst <= ALIGN_ORACLE_TOL && with_dupes >= 20;
    report(
        2,
        pass,
        &format!("fixture {fixture:.6} (hand {hand:.6}); 100 random batches ({with_dupes} with shared stays) worst err {worst:.1e} <= {ALIGN_ORACLE_TOL:e}"),
    );
    assert!(pass);
}

fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                pairs += 1.0;
                wins += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
            }
        }
    }
    wins / pairs
}

/// Precision at each positive, where an item's rank counts every item with a
/// higher score plus earlier items with an equal score.
fn brute_ap(s: &[f64], y: &[bool]) -> f64 {
    let ahead = |i: usize, j: usize| s[j] > s[i] || (s[j] == s[i] && j < i);
    let mut total = 0.0;
    let mut pos = 0.0;
    for i in 0..s.len() {
        if !y[i] {
            continue;
        }
        pos += 1.0;
        let rank = 1 + (0..s.len()).filter(|&j| ahead(i, j)).count();
        let hits = 1 + (0..s.len()).filter(|&j| y[j] && ahead(i, j)).count();
        total += hits as f64 / rank as f64;
    }
    total / pos
}

fn brute_recall(q: &[Vec<f64>], c: &[Vec<f64>], correct: &[Vec<usize>], k: usize) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut hits = 0;
    for (qi, ok) in q.iter().zip(correct) {
        let hit = ok.iter().any(|&j| {
            let sj = dot(qi, &c[j]);
            let better = (0..c.len()).filter(|&x| {
                let sx = dot(qi, &c[x]);
                sx > sj || (sx == sj && x < j)
            });
            better.count() < k
        });
        hits += hit as usize;
    }
    100.0 * hits as f64 / q.len() as f64
}

#[test]
fn c3_metric_oracles() {
    let fixture_auc = auc_roc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let fixture_ap = auc_pr(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap();
    let fixtures_ok = fixture_auc == 0.75 && (fixture_ap - 0.8333).abs() < 1e-4 && fixture_ap == (1.0 + 2.0 / 3.0) / 2.0;

    let mut rng = seed::stream(6, "metric-oracle", 0);
    let (mut auc_err, mut ap_err, mut rec_err): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..METRIC_INSTANCES {
        let n = rng.gen_range(2..40);
        // coarse scores so ties are common
        let s: Vec<f64> = (0..n).map(|_| (rng.gen_range(0..8) as f64) / 7.0).collect();
        let mut y: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        y[0] = true;
        y[1] = false;
        auc_err = auc_err.max((auc_roc(&s, &y).unwrap() - brute_auc(&s, &y)).abs());
        ap_err = ap_err.max((auc_pr(&s, &y).unwrap() - brute_ap(&s, &y)).abs());

        let (nq, nc, d) = (rng.gen_range(1..10), rng.gen_range(1..15), rng.gen_range(1..4));
        let q: Vec<Vec<f64>> = (0..nq).map(|_| (0..d).map(|_| rng.gen_range(-2..3) as f64).collect()).collect();
        let c: Vec<Vec<f64>> = (0..nc).map(|_| (0..d).map(|_| rng.gen_range(-2..3) as f64).collect()).collect();
        let correct: Vec<Vec<usize>> = (0..nq)
            .map(|_| {
                let mut v: Vec<usize> = (0..rng.gen_range(1..=nc.min(3))).map(|_| rng.gen_range(0..nc)).collect();
                v.dedup();
                v
            })
            .collect();
        let idx = RetrievalIndex::new(q.clone(), c.clone(), correct.clone()).unwrap();
        for k in [1, 2, 5, 10] {
            rec_err = rec_err.max((recall_at_k(&idx, k).unwrap() - brute_recall(&q, &c, &correct, k)).abs());
        }
    }
    let pass = fixtures_ok && auc_err <= METRIC_TOL && ap_err <= METRIC_TOL && rec_err <= METRIC_TOL;
    report(
        3,
        pass,
        &format!(
            "fixtures AUC {fixture_auc} AP {fixture_ap:.4}; {METRIC_INSTANCES} instances each, max err auc {auc_err:.1e} ap {ap_err:.1e} recall {rec_err:.1e} <= {METRIC_TOL:e}"
        ),
    );
    assert!(pass);
}

const CONVERGE_STAYS: usize = 64;
const CONVERGE_DATA_SEED: u64 = 11;
const MASK_RATE: f64 = 0.15;

fn synthetic(n: usize, data_seed: u64) -> Vec<StayRecord> {
    let mut rs = generate_synthetic(n, &mut seed::stream(data_seed, "data", 0), &SyntheticConfig::default()).unwrap();
    pair_notes(&mut rs, &NoteType::RETAINED, Default::default()).unwrap();
    rs
}

fn normalize(rs: &mut [StayRecord], fit_on: &[StayRecord]) {
    let stats = NormStats::fit(fit_on, rs[0].values.cols()).unwrap();
    for r in rs {
        stats.apply(&mut r.values);
    }
}

fn tokenizer_for(rs: &[StayRecord]) -> WordTokenizer {
    WordTokenizer::build(rs.iter().flat_map(|r| r.notes.iter().map(|n| n.text.as_str())), 1)
}

fn tiny_pretrain_config(weights: LossWeights, epochs: usize) -> PretrainConfig {
    PretrainConfig {
        model: ModelShape { num_layers: 2, hidden_dim: 32, num_heads: 4, max_seq_len: 64 },
        epochs,
        batch_size: 16,
        optimizer: AdamWConfig { lr: 2e-3, ..Default::default() },
        weights,
        note_mask_rate: MASK_RATE,
        meas_mask_rate: MASK_RATE,
        seed: 0,
        ..Default::default()
    }
}

struct Converged {
    records: Vec<StayRecord>,
    tokenizer: WordTokenizer,
    masked: DualEncoder,
    masked_scores: RetrievalScores,
    masked_time: Duration,
    align_scores: RetrievalScores,
}

fn converged() -> &'static Converged {
    static CELL: OnceLock<Converged> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut records = synthetic(CONVERGE_STAYS, CONVERGE_DATA_SEED);
        let fit = records.clone();
        normalize(&mut records, &fit);
        let tokenizer = tokenizer_for(&records);
        let data = PretrainData { train: &records, validation: &[], tokenizer: &tokenizer };
        let prepared = PreparedStays::new(&records, &tokenizer, 64).unwrap();
        let run = |w: LossWeights| {
            let t0 = Instant::now();
            let out = pretrain(&data, &tiny_pretrain_config(w, 30), PretrainOptions::default()).unwrap();
            let took = t0.elapsed();
            let scores = retrieval_scores(&out.state.model, &prepared, true).unwrap();
            (out.state.model, scores, took)
        };
        let (masked, masked_scores, masked_time) = run(LossWeights::default());
        let (_, align_scores, _) = run(LossWeights::align_only());
        Converged { records, tokenizer, masked, masked_scores, masked_time, align_scores }
    })
}

#[test]
fn c4_synthetic_alignment_convergence() {
    let c = converged();
    let (m, a) = (&c.masked_scores, &c.align_scores);
    let baseline = 100.0 / m.n_stays as f64;
    let converged_ok = m.m_to_t[0] >= R1_TARGET && m.t_to_m[0] >= R1_TARGET && c.masked_time < CONVERGE_BUDGET;
    let ordering_ok = m.m_to_t[0] >= a.m_to_t[0] && m.t_to_m[0] >= a.t_to_m[0];
    let pass = converged_ok && ordering_ok;
    report(
        4,
        pass,
        &format!(
            "align+mask R@1 m->t {:.1}% t->m {:.1}% (target {R1_TARGET}%, chance {baseline:.1}%) in {:.1}s; align-only {:.1}% / {:.1}%; \
             convergence {} ordering {}",
            m.m_to_t[0],
            m.t_to_m[0],
            c.masked_time.as_secs_f64(),
            a.m_to_t[0],
            a.t_to_m[0],
            if converged_ok { "ok" } else { "FAIL" },
            if ordering_ok { "ok" } else { "FAIL" },
        ),
    );
    assert!(pass);
}

#[test]
fn c5_masked_reconstruction_learning() {
    let c = converged();
    let model = &c.masked;
    let mean_row = feature_mean_row(&c.records).unwrap();
    let f = mean_row.len();
    let mut rng = seed::stream(7, "recon-eval", 0);
    let (mut model_l1, mut base_l1, mut cells) = (0.0, 0.0, 0usize);
    let (mut ce, mut tokens) = (0.0, 0usize);
    for r in &c.records {
        let win = r.window().unwrap();
        let mw = mask_measurements(&win, MASK_RATE, &mut rng, &mean_row).unwrap();
        let out = model.encode_measurements(&mw.masked_input).unwrap();
        for (&t, target) in mw.mask_positions.iter().zip(&mw.original_targets) {
            for j in 0..f {
                // recon row t + 1 belongs to timestep t
                model_l1 += smooth_l1(out.recon.row(t + 1)[j] - target[j]);
                base_l1 += smooth_l1(mean_row[j] - target[j]);
            }
            cells += f;
        }
        for note in &r.notes {
            let seq = c.tokenizer.encode(&note.text, 64);
            let mn = mask_notes(&seq, MASK_RATE, &mut rng).unwrap();
            let out = model.encode_text(&mn.masked_input).unwrap();
            for (&p, &y) in mn.mask_positions.iter().zip(&mn.original_targets) {
                let row = out.recon.row(p);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                ce += lse - row[y as usize];
                tokens += 1;
            }
        }
    }
    let (model_l1, base_l1, ce) = (model_l1 / cells as f64, base_l1 / cells as f64, ce / tokens as f64);
    let ln_v = (c.tokenizer.vocab_size() as f64).ln();
    let pass = cells > 0 && tokens > 0 && model_l1 < base_l1 && ce < ln_v;
    report(
        5,
        pass,
        &format!(
            "masked smooth-L1 {model_l1:.4} vs mean predictor {base_l1:.4} over {cells} cells; masked token CE {ce:.3} vs ln(vocab) {ln_v:.3} over {tokens} tokens"
        ),
    );
    assert!(pass);
}

fn smooth_l1(d: f64) -> f64 {
    let a = d.abs();
    if a < DEFAULT_SMOOTH_L1_BETA {
        0.5 * a * a / DEFAULT_SMOOTH_L1_BETA
    } else {
        a - 0.5 * DEFAULT_SMOOTH_L1_BETA
    }
}

const SEMISUP_STAYS: usize = 400;
const SEMISUP_REPEATS: usize = 5;

#[test]
fn c6_semi_supervised_trend() {
    let mut all = synthetic(SEMISUP_STAYS, 21);
    let splits = make_splits(&all, SplitRatios::default(), &mut seed::stream(21, "splits", 0)).unwrap();
    let pick = |ids: &[StayId], rs: &[StayRecord]| -> Vec<StayRecord> {
        rs.iter().filter(|r| ids.contains(&r.stay_id)).cloned().collect()
    };
    let train_raw = pick(&splits.train, &all);
    normalize(&mut all, &train_raw);
    let train = pick(&splits.train, &all);
    let test = pick(&splits.test, &all);
    let tokenizer = tokenizer_for(&train);
    let cfg = tiny_pretrain_config(LossWeights::default(), 15);
    let out = pretrain(&PretrainData { train: &train, validation: &[], tokenizer: &tokenizer }, &cfg, PretrainOptions::default()).unwrap();
    let model = out.state.model;

    let ft = FinetuneConfig { epochs: 5, batch_size: 16, lr: 1e-3, ..Default::default() };
    let rows = model.config.measurement.max_seq_len - 1;
    let fractions: Vec<(u32, TaskExamples)> = LABEL_FRACTIONS
        .iter()
        .map(|&p| (p, TaskExamples::from_records(&pick(splits.fraction(p).unwrap(), &all), Task::Ihm, rows, ft.ihm_hours).unwrap()))
        .collect();
    let test = TaskExamples::from_records(&test, Task::Ihm, rows, ft.ihm_hours).unwrap();
    let table = semi_supervised_eval(Some(&model), &model.config, Task::Ihm, &fractions, &test, SEMISUP_REPEATS, &ft).unwrap();

    let gaps: Vec<(u32, f64, f64)> = LABEL_FRACTIONS
        .iter()
        .map(|&p| (p, table.mean("pretrained", p, "auc_roc").unwrap(), table.mean("random", p, "auc_roc").unwrap()))
        .collect();
    let gap = |i: usize| gaps[i].1 - gaps[i].2;
    let low_ok = gap(0) >= 0.0;
    let monotone = (1..gaps.len()).all(|i| gap(i) <= gap(i - 1));
    let vanishes = gap(gaps.len() - 1) <= GAP_VANISH_TOL;
    let pass = low_ok && (monotone || vanishes);
    let cells: Vec<String> = gaps.iter().map(|(p, a, b)| format!("{p}%: {a:.3} vs {b:.3}")).collect();
    report(
        6,
        pass,
        &format!(
            "IHM AUC-ROC pretrained vs random over {SEMISUP_REPEATS} seeds [{}]; gap shrinks monotonically: {monotone}, within {GAP_VANISH_TOL} at 100%: {vanishes}",
            cells.join(", ")
        ),
    );
    assert!(pass);
}

#[test]
fn c7_zero_shot_soundness() {
    let c = converged();
    let ex = TaskExamples::from_records(&c.records, Task::Ihm, 63, 48).unwrap();
    let anchors = ("patient critical", "patient stable");
    let probs = zero_shot_probabilities(&c.masked, &c.tokenizer, anchors, &ex.windows).unwrap();
    let swapped = zero_shot_probabilities(&c.masked, &c.tokenizer, (anchors.1, anchors.0), &ex.windows).unwrap();
    let sum_err = probs.iter().map(|(a, b)| (a + b - 1.0).abs()).fold(0.0, f64::max);
    let swap_exact = probs.iter().zip(&swapped).all(|(p, q)| p.0 == q.1 && p.1 == q.0 && q.0 == 1.0 - p.0);
    let labels: Vec<bool> = ex.targets.iter().map(|t| t[0] > 0.5).collect();
    let (rep, _) = zero_shot_ihm(&c.masked, &c.tokenizer, anchors, &ex.windows, &labels).unwrap();
    let auc = rep.metrics["auc_roc"];
    let pass = sum_err <= PROB_SUM_TOL && swap_exact && auc >= 0.5 + ZERO_SHOT_MARGIN;
    report(
        7,
        pass,
        &format!(
            "max |p+q-1| {sum_err:.1e} <= {PROB_SUM_TOL:e}; swap exact: {swap_exact}; AUC-ROC {auc:.3} with {anchors:?} (need >= {})",
            0.5 + ZERO_SHOT_MARGIN
        ),
    );
    assert!(pass);
}

#[test]
fn c8_determinism_and_persistence() {
    let mut rs = synthetic(24, 31);
    let fit = rs.clone();
    normalize(&mut rs, &fit);
    let tok = tokenizer_for(&rs);
    let data = PretrainData { train: &rs, validation: &rs[..8], tokenizer: &tok };
    let mut cfg = tiny_pretrain_config(LossWeights::default(), 3);
    cfg.model = ModelShape { num_layers: 1, hidden_dim: 16, num_heads: 2, max_seq_len: 64 };
    cfg.batch_size = 8;
    cfg.text_dropout = 0.1;
    cfg.meas_dropout = 0.1;
    let bytes = |s: &TrainState| s.to_checkpoint(&cfg).to_bytes().unwrap();

    let a = pretrain(&data, &cfg, PretrainOptions::default()).unwrap();
    let b = pretrain(&data, &cfg, PretrainOptions::default()).unwrap();
    let reproducible = bytes(&a.state) == bytes(&b.state) && a.log.iter().map(|l| &l.loss).eq(b.log.iter().map(|l| &l.loss));

    let ckpt = Checkpoint::from_bytes(&Checkpoint::from_model(&a.state.model).to_bytes().unwrap()).unwrap();
    let loaded = ckpt.to_model(Some(&a.state.model.config)).unwrap();
    let win = rs[0].window().unwrap();
    let seq = tok.encode(&rs[0].notes[0].text, 64);
    let round_trip = loaded.encode_measurements(&win).unwrap() == a.state.model.encode_measurements(&win).unwrap()
        && loaded.encode_text(&seq).unwrap() == a.state.model.encode_text(&seq).unwrap();

    let part = pretrain(&data, &cfg, PretrainOptions { stop_after: Some(1), ..Default::default() }).unwrap();
    let resumed_state = TrainState::from_checkpoint(&Checkpoint::from_bytes(&bytes(&part.state)).unwrap()).unwrap();
    let resumed = pretrain(&data, &cfg, PretrainOptions { resume: Some(resumed_state), ..Default::default() }).unwrap();
    let resume_ok = bytes(&resumed.state) == bytes(&a.state);

    let pass = reproducible && round_trip && resume_ok;
    report(
        8,
        pass,
        &format!("bitwise rerun: {reproducible}; checkpoint forward round trip: {round_trip}; resume after 1 of 3 epochs identical: {resume_ok}"),
    );
    assert!(pass);
}

fn record_with(notes: Vec<(NoteType, f64)>, hours: usize) -> StayRecord {
    StayRecord {
        stay_id: StayId(1),
        admission_id: 1,
        timestamps: (0..hours).map(|h| 10.0 + h as f64).collect(),
        values: Tensor::zeros(&[hours, 2]),
        notes: notes.into_iter().map(|(note_type, timestamp)| Note { note_type, timestamp, text: "x".into() }).collect(),
        labels: Labels::default(),
    }
}

#[test]
fn c9_data_rule_conformance() {
    // retained list, exactly and in order of the category table
    let retained: Vec<&str> = NoteType::RETAINED.iter().map(|t| t.as_str()).collect();
    let expected = ["Echo", "ECG", "Nursing", "Physician", "Respiratory", "Radiology", "Discharge summary"];
    let mut list_ok = retained.len() == expected.len()
        && expected.iter().all(|e| NoteType::RETAINED.contains(&NoteType::parse(e)));
    for excluded in ["Social Work", "Nutrition", "Pharmacy", "Case Management", "Consult", "Rehab Services", "General"] {
        let mut r = vec![record_with(vec![(NoteType::parse(excluded), 12.0)], 5)];
        pair_notes(&mut r, &NoteType::RETAINED, Default::default()).unwrap();
        list_ok &= r[0].notes.is_empty();
    }

    // window [10, 14] inclusive; discharge summaries survive outside it
    let mut r = vec![record_with(
        vec![
            (NoteType::Nursing, 10.0),
            (NoteType::Nursing, 14.0),
            (NoteType::Physician, 9.99),
            (NoteType::Radiology, 14.01),
            (NoteType::DischargeSummary, 40.0),
            (NoteType::DischargeSummary, 2.0),
            (NoteType::Ecg, 12.5),
        ],
        5,
    )];
    let rep = pair_notes(&mut r, &NoteType::RETAINED, Default::default()).unwrap();
    let kept: Vec<(NoteType, f64)> = r[0].notes.iter().map(|n| (n.note_type.clone(), n.timestamp)).collect();
    let window_ok = kept
        == vec![
            (NoteType::Nursing, 10.0),
            (NoteType::Nursing, 14.0),
            (NoteType::DischargeSummary, 40.0),
            (NoteType::DischargeSummary, 2.0),
            (NoteType::Ecg, 12.5),
        ]
        && rep.dropped_window == 2
        && rep.pair_count == 5;

    // per-epoch positive choice is uniform over a stay's notes
    let k = 5usize;
    let trials = 20_000u64;
    let stay = vec![record_with((0..k).map(|i| (NoteType::Nursing, 10.0 + i as f64 * 0.5)).collect(), 5)];
    let mut counts = vec![0usize; k];
    for e in 0..trials {
        counts[sample_epoch_pairs(&stay, &mut seed::stream(8, "sampling", e))[0].note_index] += 1;
    }
    let p = 1.0 / k as f64;
    let sd = (trials as f64 * p * (1.0 - p)).sqrt();
    let worst_z = counts.iter().map(|&c| (c as f64 - trials as f64 * p).abs() / sd).fold(0.0, f64::max);
    let uniform_ok = worst_z <= SIGMA_BOUND;

    // random crops of a 300-row window to 256 rows
    let t = 300;
    let vals: Vec<Vec<f64>> = (0..t).map(|i| vec![i as f64]).collect();
    let win = MeasurementWindow::from_rows(&vals).unwrap();
    let mut rng = seed::stream(9, "crop", 0);
    let mut starts = std::collections::BTreeSet::new();
    let mut crop_ok = true;
    for _ in 0..2000 {
        let c = crop_window(&win, 256, &mut rng);
        let s = c.row(0)[0] as usize;
        crop_ok &= c.timesteps() == 256 && s <= t - 256 && (0..256).all(|i| c.row(i)[0] == (s + i) as f64);
        starts.insert(s);
    }
    crop_ok &= starts.contains(&0) && starts.contains(&(t - 256));
    let short = crop_window(&MeasurementWindow::from_rows(&vals[..200]).unwrap(), 256, &mut rng);
    crop_ok &= short.timesteps() == 200;

    let pass = list_ok && window_ok && uniform_ok && crop_ok;
    report(
        9,
        pass,
        &format!(
            "retained types exact: {list_ok}; window/discharge rule: {window_ok}; uniform positives max |z| {worst_z:.2} <= {SIGMA_BOUND}; crop bounds: {crop_ok}"
        ),
    );
    assert!(pass);
}
