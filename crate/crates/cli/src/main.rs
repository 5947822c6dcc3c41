use std::error::Error;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use cevae::data::{generate_phantoms, load_manifest, load_samples, PreprocessConfig, Split};
use cevae::evaluation::{evaluate, EvalReport};
use cevae::model::load_checkpoint;
use cevae::objectives::ModelKind;
use cevae::scoring::{read_score_dir, score_samples, write_score_dir, AttributionMode};
use cevae::trainer::{factor_sweep, train, SweepResult};

mod settings;
use settings::{Layers, Settings};

type CliResult<T> = Result<T, Box<dyn Error>>;

pub const EFFECTIVE_CONFIG: &str = "effective_config.json";

#[derive(Parser)]
#[command(name = "cevae", version, about = "Context-encoding VAE anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat JSON file of configuration keys.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one configuration key; may be repeated.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset and its manifest.
    GenData {
        #[arg(long)]
        out: PathBuf,
        /// Number of test patients.
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        slices: Option<usize>,
        #[arg(long = "anomaly-frac")]
        anomaly_frac: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and write a run directory.
    Train {
        /// Path to manifest.csv.
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model-kind")]
        model_kind: Option<ModelKind>,
        #[arg(long = "cevae-factor")]
        cevae_factor: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compute slice scores and pixel maps for the test split.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// vanilla, guided or smooth_guided.
        #[arg(long)]
        mode: Option<String>,
        /// Also write PNG heatmaps.
        #[arg(long)]
        png: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Compute ROC-AUCs and Dice from a score directory.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Report JSON path; the text table is written next to it.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate over a grid of ceVAE factors and seeds.
    Sweep {
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated factors, e.g. 0,0.25,0.5,0.75,1.
        #[arg(long, value_delimiter = ',')]
        factors: Option<Vec<f64>>,
        /// Number of seeds per factor.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Render an evaluation report or sweep result as a table (and plot).
    Report {
        /// report.json or sweep.json.
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn settings(common: &Common, flags: &[(&str, Option<Value>)]) -> CliResult<Settings> {
    let mut layers = Layers::new();
    if let Some(path) = &common.config {
        layers.file(path)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            layers.flag(key, v)?;
        }
    }
    for pair in &common.overrides {
        layers.set(pair)?;
    }
    Ok(layers.finish()?)
}

fn json<T: serde::Serialize>(v: Option<T>) -> Option<Value> {
    v.map(|v| serde_json::to_value(v).expect("serializable flag"))
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, body).map_err(|e| format!("cannot write {}: {e}", path.display()).into())
}

fn echo_config(dir: &Path, s: &Settings) -> CliResult<()> {
    write_file(&dir.join(EFFECTIVE_CONFIG), serde_json::to_string_pretty(s)?)
}

fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::GenData {
            out,
            patients,
            slices,
            anomaly_frac,
            seed,
            common,
        } => {
            let s = settings(
                &common,
                &[
                    ("n_patients", json(patients)),
                    ("slices_per_patient", json(slices)),
                    ("anomaly_fraction", json(anomaly_frac)),
                    ("seed", json(seed)),
                ],
            )?;
            let manifest = generate_phantoms(&s.phantom(), &out)?;
            echo_config(&out, &s)?;
            println!("wrote {} slices to {}", manifest.entries.len(), out.display());
        }
        Command::Train {
            data,
            model_kind,
            cevae_factor,
            seed,
            out,
            common,
        } => {
            let s = settings(
                &common,
                &[
                    ("model_kind", json(model_kind)),
                    ("cevae_factor", json(cevae_factor)),
                    ("seed", json(seed)),
                ],
            )?;
            echo_config(&out, &s)?;
            let manifest = load_manifest(&data)?;
            let record = train(&manifest, &s.model(), &s.train(), Some(&out))?;
            let best = record.best_val();
            println!(
                "best epoch {} of {}: validation total {:.4}",
                record.best_epoch,
                record.epochs.len(),
                best.total
            );
        }
        Command::Score {
            checkpoint,
            data,
            out,
            mode,
            png,
            common,
        } => {
            let mode = match mode {
                Some(m) => Some(serde_json::from_value::<AttributionMode>(Value::String(m.clone())).map_err(
                    |_| format!("--mode must be vanilla, guided or smooth_guided, got {m:?}"),
                )?),
                None => None,
            };
            let s = settings(&common, &[("mode", json(mode)), ("png", png.then_some(Value::Bool(true)))])?;
            echo_config(&out, &s)?;
            let params = load_checkpoint::<f32>(&checkpoint)?;
            let manifest = load_manifest(&data)?;
            let pre = PreprocessConfig {
                resolution: params.config.resolution,
                ..Default::default()
            };
            let test = load_samples(&manifest, &pre, &[Split::Test])?;
            let scored = score_samples(&params, &test, &s.attribution(), &s.score(), s.seed)?;
            write_score_dir(&out, &scored, s.png)?;
            println!("scored {} slices into {}", scored.len(), out.display());
        }
        Command::Evaluate {
            scores,
            data,
            out,
            common,
        } => {
            let s = settings(&common, &[])?;
            let dump = read_score_dir(&scores)?;
            let resolution = dump
                .maps
                .first()
                .map(|m| m.height())
                .ok_or("score directory holds no slices")?;
            let manifest = load_manifest(&data)?;
            let pre = PreprocessConfig {
                resolution,
                ..Default::default()
            };
            let test = load_samples(&manifest, &pre, &[Split::Test])?;
            let report = EvalReport::single(evaluate(&test, &dump, &s.eval())?);
            write_file(&out, report.to_json()?)?;
            write_file(&out.with_extension("txt"), report.to_table())?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                echo_config(dir, &s)?;
            }
            print!("{}", report.to_table());
        }
        Command::Sweep {
            data,
            factors,
            seeds,
            out,
            common,
        } => {
            let s = settings(&common, &[("factors", json(factors)), ("seeds", json(seeds))])?;
            echo_config(&out, &s)?;
            let manifest = load_manifest(&data)?;
            let pre = PreprocessConfig {
                resolution: s.resolution,
                ..Default::default()
            };
            let get = |split| load_samples(&manifest, &pre, &[split]);
            let (tr, va, te) = (get(Split::Train)?, get(Split::Val)?, get(Split::Test)?);
            let result = factor_sweep(&tr, &va, &te, &s.model(), &s.train(), &s.sweep(), Some(&out))?;
            print!("{}", result.to_table());
        }
        Command::Report { input, out } => {
            let text = fs::read_to_string(&input).map_err(|e| format!("cannot read {}: {e}", input.display()))?;
            if let Ok(sweep) = serde_json::from_str::<SweepResult>(&text) {
                print!("{}", sweep.to_table());
                if let Some(dir) = out {
                    write_file(&dir.join("sweep.txt"), sweep.to_table())?;
                    write_file(&dir.join("sweep.svg"), sweep.to_svg())?;
                }
            } else {
                let report: EvalReport =
                    serde_json::from_str(&text).map_err(|e| format!("{}: not a report or sweep: {e}", input.display()))?;
                print!("{}", report.to_table());
                if let Some(dir) = out {
                    write_file(&dir.join("report.txt"), report.to_table())?;
                }
            }
        }
    }
    Ok(())
}

fn init_threads() -> CliResult<()> {
    if let Ok(v) = std::env::var("CEVAE_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| format!("CEVAE_NUM_THREADS must be a positive integer, got {v:?}"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
