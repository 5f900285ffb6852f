use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use hcprune::compact::{bench_inference, compact, derive_plan, time_forward, BatchSpec, CompactModel, ScaleRule};
use hcprune::config::RunConfig;
use hcprune::export::{export_gate_trajectories, export_weight_heatmaps};
use hcprune::gates::{gate_sim, gate_sim_csv, HardConcrete};
use hcprune::model::{Checkpoint, EncoderModel};
use hcprune::rng::{streams, Rng};
use hcprune::score::{parse_table, superb_score};
use hcprune::train::{self, load_gated, train_prune_with};
use hcprune::{Error, Tensor};

#[derive(Parser)]
#[command(name = "hcprune", version, about = "Structured pruning of transformer encoders with hard-concrete gates")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Prune a student against a frozen teacher and write a run directory.
    TrainPrune {
        config: PathBuf,
        /// Override one config key, e.g. `--set ste=\"off\"`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Progress line every this many steps (0 disables).
        #[arg(long, default_value_t = 250)]
        every: usize,
    },
    /// Delete pruned structures and fold gate values into the weights.
    Compact {
        ckpt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        threshold: f64,
        #[arg(long, value_enum, default_value_t = Scale::Keep)]
        scale_rule: Scale,
    },
    /// Single-thread forward timing, with speedup over a dense reference.
    Bench {
        ckpt: PathBuf,
        #[arg(long)]
        dense: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long)]
        seq: Option<usize>,
        #[arg(long, default_value_t = 21)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Monte Carlo summary of the gate distribution.
    GateSim {
        #[arg(long, default_value_t = 2.0 / 3.0)]
        beta: f64,
        #[arg(long, default_value_t = -0.1)]
        gamma: f64,
        #[arg(long, default_value_t = 1.1)]
        zeta: f64,
        #[arg(long = "log-alpha", allow_hyphen_values = true)]
        log_alpha: Vec<f64>,
        /// Sweep log_alpha over [-4, 4] in steps of 0.5.
        #[arg(long)]
        sweep: bool,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Aggregate score from `{task: {u, sota, fbank, direction}}`.
    Score { metrics: PathBuf },
    /// Figure data from a run directory (or its train_log.jsonl).
    ExportFig {
        run: PathBuf,
        #[arg(value_enum)]
        kind: FigKind,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Scale {
    Keep,
    Retained,
}

impl From<Scale> for ScaleRule {
    fn from(s: Scale) -> Self {
        match s {
            Scale::Keep => ScaleRule::Keep,
            Scale::Retained => ScaleRule::Retained,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FigKind {
    Traj,
    Heatmap,
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::TrainPrune { config, overrides, out, every } => train_cmd(&config, &overrides, out, every),
        Cmd::Compact { ckpt, out, threshold, scale_rule } => compact_cmd(&ckpt, out, threshold, scale_rule.into()),
        Cmd::Bench { ckpt, dense, batch, seq, repeats, seed } => bench_cmd(&ckpt, dense.as_deref(), batch, seq, repeats, seed),
        Cmd::GateSim { beta, gamma, zeta, log_alpha, sweep, samples, seed } => {
            let dist = HardConcrete { beta, gamma, zeta };
            dist.validate()?;
            let mut las = log_alpha;
            if sweep {
                las.extend((-8..=8).map(|i| i as f64 * 0.5));
            }
            if las.is_empty() {
                las = vec![-2.0, -1.0, 0.0, 1.0, 2.0];
            }
            let rows = gate_sim(&dist, &las, samples, &mut Rng::new(seed));
            print!("{}", gate_sim_csv(&rows));
            Ok(())
        }
        Cmd::Score { metrics } => {
            let text = fs::read_to_string(&metrics).with_context(|| format!("reading {}", metrics.display()))?;
            let report = superb_score(&parse_table(&text)?)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Cmd::ExportFig { run, kind, out } => export_cmd(&run, kind, out),
    }
}

/// Read a config file and apply `key=value` overrides written as TOML values
/// (bare words fall back to strings).
fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    for ov in overrides {
        let Some((k, v)) = ov.split_once('=') else { bail!("override {ov:?} is not KEY=VALUE") };
        let value = match toml::from_str::<toml::Table>(&format!("v = {v}")) {
            Ok(mut t) => t.remove("v").expect("key present"),
            Err(_) => toml::Value::String(v.to_string()),
        };
        table.insert(k.trim().to_string(), value);
    }
    Ok(RunConfig::from_toml(&toml::to_string(&table)?)?)
}

fn train_cmd(path: &Path, overrides: &[String], out: Option<PathBuf>, every: usize) -> Result<()> {
    let mut cfg = load_config(path, overrides)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    let total = cfg.total_steps;
    let result = train_prune_with(&cfg, |r| {
        if every > 0 && (r.step % every == 0 || r.step + 1 == total) {
            eprintln!(
                "step {:>6}  distill {:.5}  p_hat {:.4}  det {:.4}  target {:.3}  lambda1 {:+.4}",
                r.step, r.distill_loss, r.p_hat, r.p_hat_deterministic, r.target_p, r.lambda1
            );
        }
    });
    match result {
        Ok(outputs) => {
            println!("{}", serde_json::to_string_pretty(&outputs.summary)?);
            Ok(())
        }
        Err(e @ Error::NonFinite(_)) => {
            bail!("{e}; state before the failing step saved to {}", cfg.output_dir.join(train::LAST_GOOD_FILE).display())
        }
        Err(e) => Err(e.into()),
    }
}

/// Any checkpoint kind as a runnable model.
fn load_runnable(path: &Path) -> Result<CompactModel> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    Ok(match ck.kind.as_str() {
        "compact" => CompactModel::from_checkpoint(&ck)?,
        "gated" => {
            let (model, gates) = load_gated(&ck)?;
            compact(&model, &derive_plan(&gates, 0.0)?, ScaleRule::Keep)?
        }
        _ => CompactModel::from_dense(&EncoderModel::from_checkpoint(&ck)?)?,
    })
}

fn compact_cmd(path: &Path, out: Option<PathBuf>, threshold: f64, rule: ScaleRule) -> Result<()> {
    let ck = Checkpoint::load(path).with_context(|| format!("loading {}", path.display()))?;
    let (model, gates) = load_gated(&ck)?;
    let plan = derive_plan(&gates, threshold)?;
    let small = compact(&model, &plan, rule)?;
    let out = out.unwrap_or_else(|| path.with_file_name("compact.ckpt"));
    small.to_checkpoint().save(&out)?;
    let dense = CompactModel::from_dense(&model)?;
    let report = serde_json::json!({
        "output": out,
        "params": small.count_params(),
        "dense_params": dense.count_params(),
        "removed_sublayers": small.removed_sublayers(),
        "notes": plan.notes,
    });
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn bench_cmd(path: &Path, dense: Option<&Path>, batch: usize, seq: Option<usize>, repeats: usize, seed: u64) -> Result<()> {
    let model = load_runnable(path)?;
    let dense_model = match dense {
        Some(p) => load_runnable(p)?,
        None => {
            let ck = Checkpoint::load(path)?;
            if ck.kind == "compact" {
                bail!("a compact checkpoint needs --dense for the reference timing");
            }
            CompactModel::from_dense(&EncoderModel::from_checkpoint(&ck)?)?
        }
    };
    let cfg = model.config;
    let spec = BatchSpec { batch, seq: seq.unwrap_or(cfg.max_seq_len) };
    let mut rng = Rng::stream(seed, streams::EVAL);
    let x = Tensor::from_fn(spec.batch * spec.seq, cfg.input_dim, |_, _| rng.normal(0.0, 1.0));
    let dense_s = time_forward(&dense_model, &x, spec, repeats, 2)?;
    let dense_report = bench_inference("dense", &dense_model, &x, spec, repeats, Some(dense_s))?;
    let report = bench_inference("model", &model, &x, spec, repeats, Some(dense_s))?;
    println!("{}", serde_json::to_string_pretty(&[dense_report, report])?);
    Ok(())
}

fn export_cmd(run: &Path, kind: FigKind, out: Option<PathBuf>) -> Result<()> {
    let dir = if run.is_file() { run.parent().map(Path::to_path_buf).unwrap_or_default() } else { run.to_path_buf() };
    let out = out.unwrap_or_else(|| dir.clone());
    fs::create_dir_all(&out)?;
    match kind {
        FigKind::Traj => {
            let log_path = if run.is_file() { run.to_path_buf() } else { dir.join(train::LOG_FILE) };
            let log = train::read_log(&log_path).with_context(|| format!("reading {}", log_path.display()))?;
            let target = out.join("gate_trajectories.csv");
            fs::write(&target, export_gate_trajectories(&log))?;
            println!("{}", target.display());
        }
        FigKind::Heatmap => {
            let ck = Checkpoint::load(dir.join(train::MODEL_FILE))?;
            let (model, gates) = load_gated(&ck)?;
            let maps = export_weight_heatmaps(&model.config, &derive_plan(&gates, 0.0)?);
            for (l, grid) in maps.grids.iter().enumerate() {
                fs::write(out.join(format!("wv_keep_layer{l}.csv")), grid)?;
            }
            fs::write(out.join("remaining_fractions.csv"), &maps.fractions_csv)?;
            println!("{}", out.display());
        }
    }
    Ok(())
}
