use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::experiments::{self, ALPHA_ZERO_SUBSTITUTE};
use super::manifest::{compare_artifacts, Run, RunManifest};
use super::*;
use crate::codec::DichotomicTree;
use crate::databench::{self, DataSidecar, Dataset, Imbalance, Splits, SyntheticSpec};
use crate::decoder;
use crate::numerics::Checkpoint;
use crate::training::{self, EpochLog, Metrics, TrainHooks, TrainedModel};

const LOG_FILE: &str = "log.jsonl";
const DIAGNOSTICS_FILE: &str = "nan_diagnostics.json";

fn imbalance(geometric: Option<f64>) -> Imbalance {
    match geometric {
        Some(ratio) => Imbalance::Geometric { ratio },
        None => Imbalance::Uniform,
    }
}

struct LoadedData {
    sidecar: DataSidecar,
    splits: Splits,
}

fn load_data(path: &Path) -> Result<LoadedData> {
    let sidecar = DataSidecar::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let splits = sidecar.splits(base)?;
    Ok(LoadedData { sidecar, splits })
}

fn pick(splits: &Splits, split: Split) -> &Dataset {
    match split {
        Split::Train => &splits.train,
        Split::Val => &splits.val,
        Split::Test => &splits.test,
    }
}

fn check_data_categories(expected: usize, data: &LoadedData) -> Result<()> {
    let got = data.sidecar.spec.categories;
    if got != expected {
        return Err(Error::Config(format!("--categories {expected} but the data has {got} categories")));
    }
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn seed_range(start: u64, count: usize) -> Vec<u64> {
    (0..count as u64).map(|i| start + i).collect()
}

pub fn generate(mut a: GenerateArgs) -> Result<()> {
    check_categories(a.categories)?;
    let mut spec = SyntheticSpec::new(a.categories);
    spec.feature_dim = a.feature_dim;
    spec.noise = a.noise;
    spec.train_samples = a.train_samples;
    spec.val_samples = a.val_samples;
    spec.test_samples = a.test_samples;
    spec.imbalance = imbalance(a.geometric);
    spec.seed = a.seed;
    spec.validate()?;
    if let Some(target) = a.target_accuracy {
        spec.noise = databench::calibrate_noise(&spec, target)?;
    }
    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    if a.spec_only {
        let sidecar = DataSidecar {
            spec: spec.clone(),
            files: None,
            index_base: 0,
        };
        run.write_json("spec.json", &sidecar)?;
    } else {
        databench::export(&spec, &a.out)?;
        for f in ["train.csv", "val.csv", "test.csv", "spec.json"] {
            run.record(f)?;
        }
    }
    println!("{}", a.out.join("spec.json").display());
    run.finish(&Command::Generate(a), json!({ "spec": spec }), vec![spec.seed])?;
    Ok(())
}

/// Streams the per-epoch log and reports progress on stderr.
struct CliHooks {
    log: BufWriter<File>,
    diagnostics: PathBuf,
}

impl CliHooks {
    fn create(run: &Run) -> Result<Self> {
        Ok(CliHooks {
            log: BufWriter::new(File::create(run.path(LOG_FILE))?),
            diagnostics: run.path(DIAGNOSTICS_FILE),
        })
    }
}

impl TrainHooks for CliHooks {
    fn on_epoch(&mut self, log: &EpochLog) -> Result<()> {
        serde_json::to_writer(&mut self.log, log)?;
        self.log.write_all(b"\n")?;
        self.log.flush()?;
        eprintln!(
            "epoch {:>3}  loss {:.6}  val_acc {:.4}  val_mae {:.4}",
            log.epoch, log.loss, log.val_accuracy, log.val_mae
        );
        Ok(())
    }

    fn diagnostics_path(&self) -> Option<PathBuf> {
        Some(self.diagnostics.clone())
    }
}

#[derive(Debug, Serialize)]
struct TrainMetrics<'a> {
    variant: Variant,
    alpha: f64,
    epochs: usize,
    best_epoch: usize,
    val: &'a Metrics,
    test: &'a Metrics,
}

pub fn train(mut a: TrainArgs) -> Result<()> {
    check_categories(a.categories)?;
    let cfg = a.hyper.train_config(a.categories, a.alpha, a.seed, a.variant);
    cfg.validate()?;
    a.data = canonical(&a.data)?;
    let data = load_data(&a.data)?;
    check_data_categories(a.categories, &data)?;
    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    let mut hooks = CliHooks::create(&run)?;
    let outcome = training::train(&cfg, &data.splits, &mut hooks)?;
    drop(hooks);
    run.record(LOG_FILE)?;
    let ck = outcome.best.to_checkpoint()?;
    run.write("checkpoint.json", &serde_json::to_vec(&ck)?)?;
    let val = training::evaluate(&outcome.best, &data.splits.val)?;
    let metrics = TrainMetrics {
        variant: cfg.variant,
        alpha: cfg.effective_alpha(),
        epochs: cfg.epochs,
        best_epoch: outcome.best_epoch,
        val: &val,
        test: &outcome.test,
    };
    run.write_json("metrics.json", &metrics)?;
    println!(
        "test accuracy {:.4}  mae {:.4}  (best epoch {})",
        outcome.test.accuracy, outcome.test.mae, outcome.best_epoch
    );
    run.finish(&Command::Train(a), json!({ "train": cfg, "data": data.sidecar }), vec![cfg.seed])?;
    Ok(())
}

fn load_model(path: &Path, alpha: Option<f64>) -> Result<TrainedModel> {
    let mut trained = TrainedModel::from_checkpoint(&Checkpoint::load(path)?)?;
    if let Some(alpha) = alpha {
        decoder::validate_alpha(alpha)?;
        trained.alpha = alpha;
    }
    Ok(trained)
}

pub fn evaluate(mut a: EvaluateArgs) -> Result<()> {
    a.checkpoint = canonical(&a.checkpoint)?;
    a.data = canonical(&a.data)?;
    let trained = load_model(&a.checkpoint, a.alpha)?;
    let data = load_data(&a.data)?;
    check_data_categories(trained.model.config().categories, &data)?;
    let metrics = training::evaluate(&trained, pick(&data.splits, a.split))?;
    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    run.write_json("metrics.json", &json!({ "split": a.split, "alpha": trained.alpha, "metrics": metrics }))?;
    println!("accuracy {:.4}  mae {:.4}", metrics.accuracy, metrics.mae);
    run.finish(&Command::Evaluate(a), json!({ "data": data.sidecar }), vec![])?;
    Ok(())
}

pub fn decode(mut a: DecodeArgs) -> Result<()> {
    a.checkpoint = canonical(&a.checkpoint)?;
    let trained = load_model(&a.checkpoint, a.alpha)?;
    let (features, label) = match (&a.data, a.index) {
        (Some(path), Some(index)) => {
            let path = canonical(path)?;
            let data = load_data(&path)?;
            a.data = Some(path);
            let ds = pick(&data.splits, a.split);
            let s = ds
                .samples
                .get(index)
                .ok_or_else(|| Error::Config(format!("index {index} out of range for {} samples", ds.len())))?;
            (s.features.clone(), Some(s.label))
        }
        _ if !a.features.is_empty() => (a.features.clone(), None),
        _ => return Err(Error::Config("decode needs --features or --data with --index".into())),
    };
    let encoded = decoder::encode_features(&trained.model, &features)?;
    let decoded = decoder::greedy_decode(&trained.model, &encoded, trained.alpha)?;
    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    if a.trace {
        let mut text = String::new();
        for step in &decoded.steps {
            text.push_str(&serde_json::to_string(step)?);
            text.push('\n');
        }
        run.write("trace.jsonl", text.as_bytes())?;
    }
    let summary = json!({
        "category": decoded.category,
        "path": decoded.path,
        "label": label,
        "alpha": trained.alpha,
    });
    run.write_json("decode.json", &summary)?;
    print_json(&summary)?;
    run.finish(&Command::Decode(a), json!({ "alpha": trained.alpha }), vec![])?;
    Ok(())
}

pub fn sweep_alpha(mut a: SweepArgs) -> Result<()> {
    check_categories(a.categories)?;
    if a.alphas.is_empty() || a.seeds == 0 {
        return Err(Error::Config("sweep needs a non-empty alpha grid and at least one seed".into()));
    }
    if let Some(bad) = a.alphas.iter().find(|&&x| experiments::sweep_alpha_value(x).is_none()) {
        return Err(Error::Config(format!("alpha {bad} outside [0, 1]")));
    }
    a.data = canonical(&a.data)?;
    let data = load_data(&a.data)?;
    check_data_categories(a.categories, &data)?;
    let base = a.hyper.train_config(a.categories, 1.0, a.seed, Variant::Full);
    let seeds = seed_range(a.seed, a.seeds);
    let rows = experiments::run_sweep(&base, &data.splits, &a.alphas, &seeds)?;

    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    if a.alphas.contains(&0.0) {
        run.substitute(format!("alpha 0 trained and decoded with alpha {ALPHA_ZERO_SUBSTITUTE:e}"));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r).map_err(|e| Error::Csv(e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Csv(e.to_string()))?;
    run.write("sweep.csv", &bytes)?;
    for (alpha, acc, mae) in experiments::sweep_means(&rows) {
        println!("alpha {alpha:<4}  mean accuracy {acc:.4}  mean mae {mae:.4}");
    }
    run.finish(&Command::SweepAlpha(a), json!({ "train": base, "data": data.sidecar }), seeds)?;
    Ok(())
}

pub fn ablation(mut a: AblationArgs) -> Result<()> {
    check_categories(a.categories)?;
    if a.seeds < experiments::MIN_ABLATION_SEEDS {
        return Err(Error::Config(format!(
            "ablation needs --seeds >= {}",
            experiments::MIN_ABLATION_SEEDS
        )));
    }
    let base = a.hyper.train_config(a.categories, a.alpha, a.seed, Variant::Full);
    base.validate()?;
    a.data = canonical(&a.data)?;
    let data = load_data(&a.data)?;
    check_data_categories(a.categories, &data)?;
    let seeds = seed_range(a.seed, a.seeds);
    let report = experiments::run_ablation(&base, &data.splits, &seeds)?;
    let mut run = Run::start(&a.out)?;
    a.out = canonical(&a.out)?;
    run.write_json("ablation.json", &report)?;
    for e in &report.variants {
        println!(
            "{:<17} accuracy {:.4} ± {:.4}  mae {:.4} ± {:.4}",
            e.variant.name(),
            e.accuracy.mean,
            e.accuracy.std,
            e.mae.mean,
            e.mae.std
        );
    }
    run.finish(&Command::Ablation(a), json!({ "train": base, "data": data.sidecar }), seeds)?;
    Ok(())
}

pub fn tree(mut a: TreeArgs) -> Result<()> {
    let tree = DichotomicTree::build(a.categories)?;
    let value = serde_json::from_str::<serde_json::Value>(&tree.to_json()?)?;
    print_json(&value)?;
    if let Some(out) = a.out.clone() {
        let mut run = Run::start(&out)?;
        a.out = Some(canonical(&out)?);
        run.write_json("tree.json", &value)?;
        run.finish(&Command::Tree(a), json!({ "categories": tree.n() }), vec![])?;
    }
    Ok(())
}

pub fn calibrate_noise(mut a: CalibrateArgs) -> Result<()> {
    check_categories(a.categories)?;
    let mut spec = SyntheticSpec::new(a.categories);
    spec.feature_dim = a.feature_dim;
    spec.imbalance = imbalance(a.geometric);
    spec.seed = a.seed;
    spec.validate()?;
    let noise = databench::calibrate_noise(&spec, a.target)?;
    let value = json!({ "target": a.target, "noise": noise });
    print_json(&value)?;
    if let Some(out) = a.out.clone() {
        let mut run = Run::start(&out)?;
        a.out = Some(canonical(&out)?);
        run.write_json("calibration.json", &value)?;
        run.finish(&Command::CalibrateNoise(a), json!({ "spec": spec }), vec![spec.seed])?;
    }
    Ok(())
}

pub fn oracle(mut a: OracleArgs) -> Result<()> {
    a.data = canonical(&a.data)?;
    let data = load_data(&a.data)?;
    let report = databench::bayes_oracle(&data.sidecar.spec, pick(&data.splits, a.split))?;
    let value = json!({ "split": a.split, "accuracy": report.accuracy, "mae": report.mae });
    print_json(&value)?;
    if let Some(out) = a.out.clone() {
        let mut run = Run::start(&out)?;
        a.out = Some(canonical(&out)?);
        run.write_json("oracle.json", &value)?;
        run.finish(&Command::Oracle(a), json!({ "data": data.sidecar }), vec![])?;
    }
    Ok(())
}

pub fn replay(a: ReplayArgs) -> Result<()> {
    let original = RunManifest::load(&a.manifest)?;
    if matches!(original.invocation, Command::Replay(_)) {
        return Err(Error::Config("cannot replay a replay manifest".into()));
    }
    let out = match &a.out {
        Some(out) => out.clone(),
        None => a.manifest.parent().unwrap_or(Path::new(".")).join("replay"),
    };
    run(original.invocation.with_out(out.clone()))?;
    let replayed = RunManifest::load(&out.join(MANIFEST_FILE))?;
    let diffs = compare_artifacts(&original, &replayed);
    if !diffs.is_empty() {
        return Err(Error::ReplayMismatch(diffs.join(", ")));
    }
    println!("replay reproduced {} artifacts bit for bit", original.artifacts.len());
    Ok(())
}
