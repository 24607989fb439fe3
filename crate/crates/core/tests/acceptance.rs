//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! `ORD2SEQ_ACCEPTANCE_ONLY=1,2,5` runs a subset; with
//! `ORD2SEQ_ACCEPTANCE_STRICT=1` any failing criterion makes the process
//! exit non-zero.

use std::collections::HashMap;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ord2seq::codec::{CategoryRange, DichotomicTree};
use ord2seq::databench::{bayes_oracle, calibrate_noise, generate, Imbalance, Splits, SyntheticSpec};
use ord2seq::decoder::{self, apply_mask, decide, greedy_decode, Model, ModelConfig};
use ord2seq::numerics::{Tape, Tensor};
use ord2seq::training::{self, batch_loss, sequence_bce, Metrics, ModelShape, NoHooks, TrainConfig, Variant};
use ord2seq::CategoryId;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

/// Trained test metrics keyed by data spec and training config.
#[derive(Default)]
struct Runs {
    data: HashMap<String, Splits>,
    results: HashMap<String, Metrics>,
}

impl Runs {
    fn splits(&mut self, spec: &SyntheticSpec) -> &Splits {
        let key = serde_json::to_string(spec).unwrap();
        self.data.entry(key).or_insert_with(|| generate(spec).unwrap())
    }

    fn test_metrics(&mut self, spec: &SyntheticSpec, cfg: &TrainConfig) -> Metrics {
        let key = format!("{}|{}", serde_json::to_string(spec).unwrap(), serde_json::to_string(cfg).unwrap());
        if let Some(m) = self.results.get(&key) {
            return m.clone();
        }
        let splits = self.splits(spec);
        let out = training::train(cfg, splits, &mut NoHooks).unwrap();
        self.results.insert(key, out.test.clone());
        out.test
    }
}

fn within(elapsed: Duration, budget: Duration) -> bool {
    elapsed <= budget
}

// ---------------------------------------------------------------- 1

fn codec_suite() -> Verdict {
    let start = Instant::now();
    let mut checked = 0;
    for n in 2..=64usize {
        let tree = DichotomicTree::build(n).unwrap();
        let depth = (n as f64).log2().ceil() as usize;
        if tree.depth() != depth {
            return verdict(false, format!("n={n}: depth {} != {depth}", tree.depth()));
        }
        for node in tree.nodes() {
            if let (Some(l), Some(r)) = (node.left, node.right) {
                let (a, b) = (tree.nodes()[l].range().len(), tree.nodes()[r].range().len());
                if a.abs_diff(b) > 1 {
                    return verdict(false, format!("n={n}: unbalanced split {a}/{b}"));
                }
            }
        }
        for c in 0..n {
            let path = tree.encode_path(CategoryId(c)).unwrap();
            if path.len() != depth || tree.decode_path(&path).unwrap() != CategoryId(c) {
                return verdict(false, format!("n={n}: round trip fails for {c}"));
            }
            let mh = tree.encode_multihot(CategoryId(c)).unwrap();
            let steps = mh.steps();
            let nested = steps.windows(2).all(|w| w[0].iter().zip(&w[1]).all(|(a, b)| b <= a));
            let holds_c = steps.iter().all(|o| o[c] == 1.0);
            let leaf = steps[depth - 1].iter().sum::<f64>() == 1.0;
            if !(nested && holds_c && leaf) {
                return verdict(false, format!("n={n}: multi-hot nesting fails for {c}"));
            }
            checked += 1;
        }
    }
    let t = start.elapsed();
    verdict(within(t, Duration::from_secs(1)), format!("{checked} categories over n=2..64 in {t:.2?} (budget 1s)"))
}

// ---------------------------------------------------------------- 2

fn mask_decision_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut decision_mismatch = 0;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let tree = DichotomicTree::build(n).unwrap();
        let c = rng.random_range(0..n);
        let path = tree.encode_path(CategoryId(c)).unwrap();
        let t = rng.random_range(1..=tree.depth());
        let alpha: f64 = rng.random_range(0.01..=1.0);
        let logits: Vec<f64> = (0..n).map(|_| rng.random_range(-8.0..8.0)).collect();
        let mh = tree.encode_multihot(CategoryId(c)).unwrap();
        let prev = (t > 1).then(|| mh.step(t - 1));
        let p = apply_mask(&logits, prev, alpha).unwrap();
        let mut oracle = Vec::with_capacity(n);
        for i in 0..n {
            let s = 1.0 / (1.0 + (-logits[i]).exp());
            let keep = prev.is_none_or(|o| o[i] == 1.0);
            oracle.push(if keep { s } else { alpha * s });
        }
        for (a, b) in p.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
        let (l, r) = tree.node_ranges_at(&path.bits()[..t - 1]).unwrap();
        let mean = |rg: CategoryRange| {
            oracle[rg.lo..=rg.hi].iter().sum::<f64>() / rg.len() as f64
        };
        let expect = if mean(r) > mean(l) { 1 } else { 0 };
        if decide(&p, l, r).unwrap().bit != expect {
            decision_mismatch += 1;
        }
    }
    let mut tie_ok = true;
    for n in 2..=16 {
        let tree = DichotomicTree::build(n).unwrap();
        let (l, r) = tree.node_ranges_at(&[]).unwrap();
        for v in [0.0, 0.3, 0.5, 1.0] {
            tie_ok &= decide(&vec![v; n], l, r).unwrap().bit == 0;
        }
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-12 && decision_mismatch == 0 && tie_ok && within(t, Duration::from_secs(1)),
        format!("max |mask - closed form| {worst:.1e}, decision mismatches {decision_mismatch}/1000, ties->0 {tie_ok}, {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 3

fn loss_oracle() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let n = rng.random_range(2..=16);
        let tree = DichotomicTree::build(n).unwrap();
        let mh = tree.encode_multihot(CategoryId(rng.random_range(0..n))).unwrap();
        let p: Vec<Vec<f64>> = (0..tree.depth())
            .map(|_| {
                (0..n)
                    .map(|_| if rng.random_bool(0.05) { rng.random_range(0.0..1e-9) } else { rng.random::<f64>() })
                    .collect()
            })
            .collect();
        let got = sequence_bce(&p, &mh).unwrap().total;
        let mut naive = 0.0;
        for (row, target) in p.iter().zip(mh.steps()) {
            let mut s = 0.0;
            for (&pi, &o) in row.iter().zip(target) {
                let q = pi.clamp(1e-7, 1.0 - 1e-7);
                s += o * q.ln() + (1.0 - o) * (1.0 - q).ln();
            }
            naive -= s / n as f64;
        }
        worst = worst.max((got - naive).abs());
    }
    let t = start.elapsed();
    verdict(
        worst <= 1e-12 && within(t, Duration::from_secs(1)),
        format!("max |loss - scalar loop| {worst:.1e} over 1000 instances, {t:.2?}"),
    )
}

// ---------------------------------------------------------------- 4

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    for inst in 0..20u64 {
        let mut cfg = TrainConfig::new(4);
        cfg.alpha = rng.random_range(0.05..=1.0);
        cfg.model = ModelShape {
            width: 8,
            heads: 2,
            layers: 1,
            ff_width: 16,
            encoder_hidden: 8,
            encoder_tokens: 2,
            shared_head: false,
        };
        let model = Model::new(cfg.model_config(3), 1000 + inst).unwrap();
        let x = Tensor::uniform(&[3, 3], 2.0, &mut rng);
        let y: Vec<CategoryId> = (0..3).map(|_| CategoryId(rng.random_range(0..4))).collect();
        let loss_of = |m: &Model| {
            let mut tape = Tape::new();
            let (l, _) = batch_loss(&cfg, m, &mut tape, &x, &y).unwrap();
            tape.value(l).item()
        };
        let mut tape = Tape::new();
        let (l, _) = batch_loss(&cfg, &model, &mut tape, &x, &y).unwrap();
        let mut store = model.params().clone();
        tape.backward(l, &mut store).unwrap();
        let mut probe = model.clone();
        let (mut diff, mut an, mut nn) = (0.0, 0.0, 0.0);
        for id in model.params().ids().collect::<Vec<_>>() {
            let g = store.grad(id).unwrap().to_vec();
            for (k, &a) in g.iter().enumerate() {
                let orig = probe.params().value(id).data()[k];
                probe.params_mut().value_mut(id).data_mut()[k] = orig + 1e-5;
                let up = loss_of(&probe);
                probe.params_mut().value_mut(id).data_mut()[k] = orig - 1e-5;
                let down = loss_of(&probe);
                probe.params_mut().value_mut(id).data_mut()[k] = orig;
                let num = (up - down) / 2e-5;
                diff += (a - num) * (a - num);
                an += a * a;
                nn += num * num;
            }
        }
        let rel = diff.sqrt() / an.sqrt().max(nn.sqrt()).max(1e-8);
        worst = worst.max(rel);
    }
    let t = start.elapsed();
    verdict(
        worst < 1e-4 && within(t, Duration::from_secs(30)),
        format!("worst relative error {worst:.2e} over 20 instances, {t:.2?} (budget 30s)"),
    )
}

// ---------------------------------------------------------------- 5

fn oracle_decoder_recovery() -> Verdict {
    let start = Instant::now();
    let mut failures = 0;
    let mut total = 0;
    for n in 2..=9 {
        for c in 0..n {
            let mut cfg = ModelConfig::new(n, 3);
            cfg.width = 8;
            cfg.heads = 2;
            cfg.layers = 1;
            cfg.ff_width = 8;
            cfg.encoder_hidden = 8;
            cfg.encoder_tokens = 2;
            let mut model = Model::new(cfg, c as u64).unwrap();
            let mh = model.tree().encode_multihot(CategoryId(c)).unwrap();
            for t in 1..=model.depth() {
                let (w, b) = model.head_params(t);
                let store = model.params_mut();
                store.value_mut(w).data_mut().fill(0.0);
                let bias: Vec<f64> = mh.step(t).iter().map(|&o| if o == 1.0 { 10.0 } else { -10.0 }).collect();
                store.value_mut(b).data_mut().copy_from_slice(&bias);
            }
            let mut rng = ChaCha8Rng::seed_from_u64((n * 100 + c) as u64);
            let x = Tensor::uniform(&[2, 8], 1.0, &mut rng);
            total += 1;
            if greedy_decode(&model, &x, decoder::DEFAULT_ALPHA).unwrap().category != CategoryId(c) {
                failures += 1;
            }
        }
    }
    let t = start.elapsed();
    verdict(
        failures == 0 && within(t, Duration::from_secs(1)),
        format!("{}/{total} categories recovered for n=2..9, {t:.2?}", total - failures),
    )
}

// ---------------------------------------------------------------- 6

fn moderate_spec(n: usize, imbalance: Imbalance) -> SyntheticSpec {
    let mut spec = SyntheticSpec::new(n);
    spec.imbalance = imbalance;
    spec.noise = calibrate_noise(&spec, 0.85).unwrap();
    spec
}

fn learnability(runs: &mut Runs, moderate: &SyntheticSpec) -> Verdict {
    let start = Instant::now();
    let clean = SyntheticSpec::new(8);
    let mut clean_acc = Vec::new();
    for seed in 0..3 {
        let mut cfg = TrainConfig::new(8);
        cfg.seed = seed;
        clean_acc.push(runs.test_metrics(&clean, &cfg).accuracy);
    }
    let oracle = bayes_oracle(moderate, &runs.splits(moderate).test).unwrap();
    let mut gaps = Vec::new();
    for seed in 0..3 {
        let mut cfg = TrainConfig::new(8);
        cfg.seed = seed;
        let m = runs.test_metrics(moderate, &cfg);
        gaps.push((m.accuracy, m.mae));
    }
    let t = start.elapsed();
    let clean_ok = clean_acc.iter().all(|&a| a >= 0.99);
    let oracle_ok = (oracle.accuracy - 0.85).abs() <= 0.02;
    let noisy_ok = gaps
        .iter()
        .all(|&(acc, mae)| oracle.accuracy - acc <= 0.05 && mae - oracle.mae <= 0.08);
    verdict(
        clean_ok && oracle_ok && noisy_ok && within(t, Duration::from_secs(600)),
        format!(
            "sigma=0 test accuracy {clean_acc:.4?} (need >= 0.99 each); sigma={:.4}: oracle acc {:.4} mae {:.4}, model (acc, mae) {gaps:.4?} (need within 0.05 / 0.08); {t:.0?} (budget 600s)",
            moderate.noise, oracle.accuracy, oracle.mae
        ),
    )
}

// ---------------------------------------------------------------- 7

fn ablation_direction(runs: &mut Runs, moderate: &SyntheticSpec) -> Verdict {
    let start = Instant::now();
    let order = [Variant::Full, Variant::NoMask, Variant::OneShot, Variant::SoftmaxBaseline];
    let mut means = Vec::new();
    for v in order {
        let (mut acc, mut mae) = (0.0, 0.0);
        for seed in 0..5 {
            let mut cfg = TrainConfig::new(8);
            cfg.variant = v;
            cfg.seed = seed;
            let m = runs.test_metrics(moderate, &cfg);
            acc += m.accuracy / 5.0;
            mae += m.mae / 5.0;
        }
        means.push((v, acc, mae));
    }
    let t = start.elapsed();
    let acc_order = means.windows(2).all(|w| w[0].1 >= w[1].1);
    let mae_order = means.windows(2).all(|w| w[0].2 <= w[1].2);
    let gain = means[0].1 - means[3].1;
    let table: Vec<String> = means.iter().map(|(v, a, m)| format!("{v} acc {a:.4} mae {m:.4}")).collect();
    verdict(
        acc_order && mae_order && gain > 0.0 && within(t, Duration::from_secs(1800)),
        format!(
            "{}; accuracy order {acc_order}, MAE order {mae_order}, full - baseline {gain:+.4}; {t:.0?} (budget 1800s)",
            table.join(", ")
        ),
    )
}

// ---------------------------------------------------------------- 8

fn alpha_sweep(runs: &mut Runs, moderate: &SyntheticSpec) -> Verdict {
    let start = Instant::now();
    let grid: Vec<f64> = (1..=9).map(|i| i as f64 / 10.0).collect();
    let mut curve = Vec::new();
    for &alpha in &grid {
        let mut mae = 0.0;
        let mut acc = 0.0;
        for seed in 0..5 {
            let mut cfg = TrainConfig::new(8);
            cfg.alpha = alpha;
            cfg.seed = seed;
            let m = runs.test_metrics(moderate, &cfg);
            mae += m.mae / 5.0;
            acc += m.accuracy / 5.0;
        }
        curve.push((alpha, acc, mae));
    }
    let t = start.elapsed();
    let interior = curve[1..8].iter().map(|c| c.2).fold(f64::INFINITY, f64::min);
    let ends = curve[0].2.min(curve[8].2);
    let best = curve.iter().min_by(|a, b| a.2.total_cmp(&b.2)).unwrap().0;
    let text: Vec<String> = curve.iter().map(|(a, acc, m)| format!("{a}:{acc:.4}/{m:.4}")).collect();
    verdict(
        interior <= ends && within(t, Duration::from_secs(2700)),
        format!(
            "alpha:acc/mae {}; best mean-MAE alpha {best}; {t:.0?} (budget 2700s)",
            text.join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 9

fn imbalance_robustness(runs: &mut Runs) -> Verdict {
    let start = Instant::now();
    let spec = moderate_spec(5, Imbalance::Geometric { ratio: 0.4 });
    let minority = spec
        .priors()
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .unwrap()
        .0;
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..5 {
        let mut cfg = TrainConfig::new(5);
        cfg.seed = seed;
        let full = runs.test_metrics(&spec, &cfg).adjacency[minority].correct;
        cfg.variant = Variant::SoftmaxBaseline;
        let base = runs.test_metrics(&spec, &cfg).adjacency[minority].correct;
        if full > base {
            wins += 1;
        }
        pairs.push((full, base));
    }
    let t = start.elapsed();
    verdict(
        wins >= 3 && within(t, Duration::from_secs(900)),
        format!(
            "minority class {minority} correct proportion (full, baseline) {pairs:.3?}; full wins {wins}/5 (need 3); {t:.0?} (budget 900s)"
        ),
    )
}

// ---------------------------------------------------------------- 10

fn cli(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_ord2seq"))
        .args(args)
        .env("ORD2SEQ_THREADS", "1")
        .output()
        .unwrap()
}

fn replay_matches(dir: &Path, name: &str, cmd: &[&str], artifacts: &[&str]) -> Result<(), String> {
    let out = dir.join(name);
    let mut args = cmd.to_vec();
    let out_s = out.to_str().unwrap().to_string();
    args.extend(["--out", &out_s]);
    let first = cli(&args);
    if !first.status.success() {
        return Err(format!("{name}: {}", String::from_utf8_lossy(&first.stderr)));
    }
    let again = dir.join(format!("{name}-replay"));
    let manifest = out.join("manifest.json");
    let r = cli(&["replay", "--manifest", manifest.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    if !r.status.success() {
        return Err(format!("{name} replay: {}", String::from_utf8_lossy(&r.stderr)));
    }
    for a in artifacts {
        if std::fs::read(out.join(a)).unwrap() != std::fs::read(again.join(a)).unwrap() {
            return Err(format!("{name}/{a} differs"));
        }
    }
    Ok(())
}

fn determinism_and_replay() -> Verdict {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let gen = cli(&[
        "generate", "--categories", "6", "--noise", "0.1", "--train-samples", "300", "--val-samples", "100",
        "--test-samples", "300", "--out", data.to_str().unwrap(),
    ]);
    if !gen.status.success() {
        return verdict(false, String::from_utf8_lossy(&gen.stderr));
    }
    let spec = data.join("spec.json");
    let spec = spec.to_str().unwrap();
    let small = ["--width", "16", "--heads", "2", "--layers", "1", "--ff-width", "32", "--encoder-hidden", "16"];
    let mut train = vec!["train", "--categories", "6", "--data", spec, "--epochs", "3", "--seed", "7"];
    train.extend(small);
    let mut sweep = vec!["sweep-alpha", "--categories", "6", "--data", spec, "--epochs", "2", "--alphas", "0,0.5", "--seeds", "2"];
    sweep.extend(small);
    let mut results = vec![
        replay_matches(dir.path(), "train", &train, &["checkpoint.json", "metrics.json", "log.jsonl"]),
        replay_matches(dir.path(), "sweep", &sweep, &["sweep.csv"]),
    ];

    // in-process: identical configs give bit-identical histories
    let mut spec = SyntheticSpec::new(4);
    spec.train_samples = 200;
    spec.noise = 0.2;
    let splits = generate(&spec).unwrap();
    let mut cfg = TrainConfig::new(4);
    cfg.epochs = 2;
    cfg.model.width = 16;
    cfg.model.ff_width = 16;
    let a = training::train(&cfg, &splits, &mut NoHooks).unwrap();
    let b = training::train(&cfg, &splits, &mut NoHooks).unwrap();
    let bits = |o: &training::TrainOutcome| o.history.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    if bits(&a) != bits(&b) || a.test != b.test {
        results.push(Err("in-process training is not bit-identical".into()));
    }
    let t = start.elapsed();
    let errors: Vec<String> = results.into_iter().filter_map(|r| r.err()).collect();
    verdict(
        errors.is_empty(),
        if errors.is_empty() {
            format!("train and sweep manifests replay bit for bit; repeated in-process runs identical; {t:.1?}")
        } else {
            errors.join("; ")
        },
    )
}

fn main() {
    // the test harness passes flags such as --nocapture; none apply here
    let only: Option<Vec<usize>> = std::env::var("ORD2SEQ_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var("ORD2SEQ_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let wanted = |k: usize| only.as_ref().is_none_or(|o| o.contains(&k));

    let mut runs = Runs::default();
    let moderate = if (6..=8).any(wanted) { Some(moderate_spec(8, Imbalance::Uniform)) } else { None };
    let mut results: Vec<(usize, &str, Verdict)> = Vec::new();
    let mut report = |k: usize, name: &'static str, v: Verdict| {
        println!("{} [{k}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((k, name, v));
    };
    if wanted(1) {
        report(1, "codec suite", codec_suite());
    }
    if wanted(2) {
        report(2, "mask/decision suite", mask_decision_suite());
    }
    if wanted(3) {
        report(3, "loss oracle", loss_oracle());
    }
    if wanted(4) {
        report(4, "gradient suite", gradient_suite());
    }
    if wanted(5) {
        report(5, "oracle-decoder recovery", oracle_decoder_recovery());
    }
    if let Some(m) = &moderate {
        if wanted(6) {
            report(6, "learnability", learnability(&mut runs, m));
        }
        if wanted(7) {
            report(7, "ablation direction", ablation_direction(&mut runs, m));
        }
        if wanted(8) {
            report(8, "alpha-sweep sanity", alpha_sweep(&mut runs, m));
        }
    }
    if wanted(9) {
        report(9, "imbalance robustness", imbalance_robustness(&mut runs));
    }
    if wanted(10) {
        report(10, "determinism & replay", determinism_and_replay());
    }
    let passed = results.iter().filter(|r| r.2.pass).count();
    println!("acceptance: {passed}/{} criteria passed", results.len());
    if strict && passed != results.len() {
        std::process::exit(1);
    }
}
