mod config;

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use eva_core::ablation::{expert_load, grid, run_row, Axis, LayerLoad};
use eva_core::checkpoint::Checkpoint;
use eva_core::dataset::{generate, load_split, verify_split, Dataset, Phase, WorldMode};
use eva_core::encoders::PromptKind;
use eva_core::evaluator::{evaluate, EvalReport};
use eva_core::model::EvaModel;
use eva_core::trainer::train;
use eva_core::{Error, Result};
use serde::Serialize;
use serde_json::json;

use config::RunConfig;

#[derive(Parser, Debug)]
#[command(name = "eva", version, about = "Compositional zero-shot learning with mixture-of-experts adapters")]
struct Cli {
    /// TOML file with [data], [model], [train] and [eval] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: runs/<timestamp>-seed<seed>).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Default)]
struct TrainFlags {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    lambda1: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lambda2: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    lr: Option<f64>,
}

#[derive(Args, Debug, Default)]
struct EvalFlags {
    /// closed | open
    #[arg(long, default_value = "closed")]
    mode: String,
    /// val | test
    #[arg(long, default_value = "test")]
    phase: String,
    #[arg(long, allow_negative_numbers = true)]
    beta: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    feasibility_threshold: Option<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset.
    GenData,
    /// Train a model and evaluate its best checkpoint.
    Train {
        /// Dataset directory or manifest; generated from [data] when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Train and evaluate every row of an ablation grid.
    Ablate {
        /// r | K | split | alignment | base | all
        #[arg(long, default_value = "all")]
        axis: String,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        train: TrainFlags,
        #[command(flatten)]
        eval: EvalFlags,
    },
    /// Routed-expert load of state and object prompts.
    InspectExperts {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Command::GenData => {
            let cfg = resolve(&cli, None, None, None)?;
            let out = out_dir(&cli, &cfg)?;
            let ds = generate(&cfg.data)?;
            ds.write(&out)?;
            let report = verify_split(&ds);
            write_json(&out.join("split_report.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.is_clean() {
                return Err(Error::Data(report.violations.join("; ")));
            }
            Ok(())
        }
        Command::Train { data, train: tf, eval: ef } => {
            let mut cfg = resolve(&cli, None, Some(tf), Some(ef))?;
            let ds = dataset(data.as_deref(), &mut cfg)?;
            let out = out_dir(&cli, &cfg)?;
            let (mode, phase) = (parse_mode(ef)?, parse_phase(ef)?);
            let mut model = EvaModel::<f64>::new(cfg.model.clone())?;
            let mut log = fs::File::create(out.join("train_log.jsonl"))?;
            let mut write_err: Option<io::Error> = None;
            let outcome = train(&mut model, &ds, &cfg.train, |l| {
                let line = serde_json::to_string(l).expect("epoch log serializes");
                println!("{line}");
                if let Err(e) = writeln!(log, "{line}") {
                    write_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = write_err {
                return Err(e.into());
            }
            let ck = snapshot(&model, outcome.best_epoch as u64, &cfg)?;
            ck.save(&out.join("best.ckpt"))?;
            let report = evaluate(&model, &ds, phase, mode, &cfg.eval)?;
            write_report(&out, &report)?;
            eprintln!(
                "best epoch {} | {mode} {phase:?}: seen {:.3} unseen {:.3} HM {:.3} AUC {:.4}",
                outcome.best_epoch, report.best_seen, report.best_unseen, report.best_hm, report.auc
            );
            Ok(())
        }
        Command::Eval { checkpoint, data, eval: ef } => {
            let ck = Checkpoint::load(checkpoint)?;
            let mut cfg = resolve(&cli, Some(&ck), None, Some(ef))?;
            let ds = dataset(data.as_deref(), &mut cfg)?;
            let model = ck.to_model::<f64>()?;
            let out = out_dir(&cli, &cfg)?;
            let report = evaluate(&model, &ds, parse_phase(ef)?, parse_mode(ef)?, &cfg.eval)?;
            write_report(&out, &report)?;
            println!("{}", serde_json::to_string(&summary(&report))?);
            Ok(())
        }
        Command::Ablate {
            axis,
            data,
            train: tf,
            eval: ef,
        } => {
            let mut cfg = resolve(&cli, None, Some(tf), Some(ef))?;
            let ds = dataset(data.as_deref(), &mut cfg)?;
            let out = out_dir(&cli, &cfg)?;
            let axes = if axis == "all" {
                vec![Axis::Rank, Axis::K, Axis::Split, Axis::Alignment]
            } else {
                vec![axis.parse()?]
            };
            let mut table = csv::Writer::from_path(out.join("ablation.csv")).map_err(csv_err)?;
            for axis in axes {
                for row in grid(axis, &cfg.model, &cfg.train) {
                    let r = run_row::<f64>(&row, &ds, &cfg.eval)?;
                    println!("{}", serde_json::to_string(&r)?);
                    table.serialize(&r).map_err(csv_err)?;
                    table.flush()?;
                }
            }
            Ok(())
        }
        Command::InspectExperts { checkpoint } => {
            let ck = Checkpoint::load(checkpoint)?;
            let cfg = resolve(&cli, Some(&ck), None, None)?;
            let model = ck.to_model::<f64>()?;
            let out = out_dir(&cli, &cfg)?;
            let state = expert_load(&model, PromptKind::State)?;
            let object = expert_load(&model, PromptKind::Object)?;
            let mut w = csv::Writer::from_path(out.join("expert_load.csv")).map_err(csv_err)?;
            w.write_record(["domain", "layer", "expert", "count", "share"]).map_err(csv_err)?;
            for (domain, layers) in [("state", &state), ("object", &object)] {
                for l in layers.iter().cloned().chain([pooled(layers)]) {
                    let layer = if l.layer == usize::MAX { "all".to_string() } else { l.layer.to_string() };
                    for (e, (c, s)) in l.counts.iter().zip(&l.shares).enumerate() {
                        let rec = [domain.to_string(), layer.clone(), (e + 1).to_string(), c.to_string(), s.to_string()];
                        w.write_record(&rec).map_err(csv_err)?;
                    }
                }
            }
            w.flush()?;
            let (ps, po) = (pooled(&state).shares, pooled(&object).shares);
            let l1: f64 = ps.iter().zip(&po).map(|(a, b)| (a - b).abs()).sum();
            let report = json!({
                "state": { "shares": ps, "layers": state },
                "object": { "shares": po, "layers": object },
                "l1_distance": l1,
            });
            write_json(&out.join("expert_load.json"), &report)?;
            println!("{}", serde_json::to_string(&report)?);
            Ok(())
        }
    }
}

/// Layers' counts summed; `layer` is `usize::MAX`.
fn pooled(layers: &[LayerLoad]) -> LayerLoad {
    let n = layers.first().map_or(0, |l| l.counts.len());
    let mut counts = vec![0u64; n];
    for l in layers {
        for (c, x) in counts.iter_mut().zip(&l.counts) {
            *c += x;
        }
    }
    let total = counts.iter().sum::<u64>().max(1) as f64;
    LayerLoad {
        layer: usize::MAX,
        shares: counts.iter().map(|&c| c as f64 / total).collect(),
        counts,
    }
}

fn resolve(cli: &Cli, ck: Option<&Checkpoint>, tf: Option<&TrainFlags>, ef: Option<&EvalFlags>) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(ck) = ck {
        cfg = cfg.overlay_snapshot(&ck.config)?;
    }
    if let Some(path) = &cli.config {
        cfg = cfg.overlay_file(path)?;
    }
    if let Some(ck) = ck {
        // the stored architecture always wins
        cfg.model = ck.model_config()?;
    }
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    if let Some(tf) = tf {
        let t = &mut cfg.train;
        t.epochs = tf.epochs.unwrap_or(t.epochs);
        t.lambda1 = tf.lambda1.unwrap_or(t.lambda1);
        t.lambda2 = tf.lambda2.unwrap_or(t.lambda2);
        t.lr = tf.lr.unwrap_or(t.lr);
    }
    if let Some(ef) = ef {
        let e = &mut cfg.eval;
        e.beta = ef.beta.unwrap_or(e.beta);
        e.feasibility_threshold = ef.feasibility_threshold.unwrap_or(e.feasibility_threshold);
        cfg.train.beta = e.beta;
        parse_mode(ef)?;
        parse_phase(ef)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_mode(ef: &EvalFlags) -> Result<WorldMode> {
    ef.mode.parse()
}

fn parse_phase(ef: &EvalFlags) -> Result<Phase> {
    ef.phase.parse()
}

/// Loads or generates the dataset and fits the model geometry to it.
fn dataset(path: Option<&Path>, cfg: &mut RunConfig) -> Result<Dataset> {
    let ds = match path {
        Some(p) if p.is_dir() => load_split(&p.join("manifest.jsonl"))?,
        Some(p) => load_split(p)?,
        None => generate(&cfg.data)?,
    };
    let m = &mut cfg.model;
    m.n_states = ds.labels.n_states;
    m.n_objects = ds.labels.n_objects;
    m.encoder.patch_dim = ds.patch_dim;
    m.encoder.image_tokens = ds.patches + 1;
    m.validate()?;
    Ok(ds)
}

fn out_dir(cli: &Cli, cfg: &RunConfig) -> Result<PathBuf> {
    let dir = match &cli.out {
        Some(d) => d.clone(),
        None => {
            let secs = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
            PathBuf::from("runs").join(format!("{secs}-seed{}", cfg.model.seed))
        }
    };
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    Ok(dir)
}

fn snapshot(model: &EvaModel<f64>, epoch: u64, cfg: &RunConfig) -> Result<Checkpoint> {
    Ok(Checkpoint::from_model(model, epoch)?
        .with_section("data", serde_json::to_value(&cfg.data)?)
        .with_section("train", serde_json::to_value(&cfg.train)?)
        .with_section("eval", serde_json::to_value(&cfg.eval)?))
}

fn summary(r: &EvalReport) -> serde_json::Value {
    json!({
        "mode": r.mode,
        "target_size": r.target_size,
        "best_seen": r.best_seen,
        "best_unseen": r.best_unseen,
        "best_hm": r.best_hm,
        "auc": r.auc,
    })
}

fn write_report(out: &Path, r: &EvalReport) -> Result<()> {
    write_json(&out.join("report.json"), r)?;
    let mut w = csv::Writer::from_path(out.join("curve.csv")).map_err(csv_err)?;
    w.write_record(["bias", "seen", "unseen"]).map_err(csv_err)?;
    for p in &r.curve {
        w.write_record(p.iter().map(|x| x.to_string())).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(io::Error::other(e))
}
