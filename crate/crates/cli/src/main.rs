use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anatomix_core::checkpoint::Checkpoint;
use anatomix_core::config::{validate_config, ExperimentConfig};
use anatomix_core::data::{self, Sample, Split};
use anatomix_core::evaluation;
use anatomix_core::losses::Stage;
use anatomix_core::training::{self, DomainData, RunPaths};
use anatomix_core::{selftest, Error};
use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Environment variable that overrides the configured output root.
const OUTPUT_ROOT_ENV: &str = "ANATOMIX_OUTPUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "anatomix", version, about = "Shared-basis anatomical manifold for segmentation domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the synthetic two-domain benchmark.
    GenerateData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one stage.
    Train(TrainArgs),
    /// Segment a labelled split and report DSC / ASSD.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset root or a single split directory.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode template segmentations along a Fisher-Rao geodesic.
    Traverse {
        #[command(subcommand)]
        kind: TraverseKind,
    },
    /// Write composition weights of every image plus a 2-D PCA scatter.
    ExportLatents {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated split names.
        #[arg(long, default_value = "source_train,target_train")]
        splits: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the analytic-oracle suite.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mode {
    Sa,
    Sf1,
    Sf2,
}

impl From<Mode> for Stage {
    fn from(m: Mode) -> Self {
        match m {
            Mode::Sa => Stage::Sa,
            Mode::Sf1 => Stage::Sf1,
            Mode::Sf2 => Stage::Sf2,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long, value_enum)]
    mode: Mode,
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to resume from; for sf2, the stage-1 checkpoint.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Dataset root; overrides `data_root`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Run directory; defaults to `<output_root>/<mode>`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Single-threaded, seed-stable execution.
    #[arg(long)]
    deterministic: bool,
}

#[derive(Subcommand, Debug)]
enum TraverseKind {
    /// Between the compositions of two images.
    InterImage {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "target_test")]
        split: String,
        /// Subject ids of the two images.
        #[arg(long)]
        a: String,
        #[arg(long)]
        b: String,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Between one-hot compositions of bases i and j (one-based).
    InterBasis {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        i: usize,
        #[arg(long)]
        j: usize,
        #[arg(long, default_value_t = 8)]
        steps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    argv: Vec<String>,
    version: &'a str,
    seed: Option<u64>,
    deterministic: bool,
    config_file: Option<String>,
    started: String,
    finished: String,
    status: &'a str,
}

fn output_root(cfg: Option<&ExperimentConfig>) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_ENV) {
        Some(p) => PathBuf::from(p),
        None => cfg.map_or_else(|| PathBuf::from("runs"), |c| c.output_root.clone()),
    }
}

fn write_manifest(dir: &Path, command: &str, cfg: Option<&ExperimentConfig>, deterministic: bool, started: String, status: &str) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let config_file = match cfg {
        Some(c) => {
            let p = dir.join("config.toml");
            std::fs::write(&p, c.to_toml()).with_context(|| format!("writing {}", p.display()))?;
            Some("config.toml".to_string())
        }
        None => None,
    };
    let m = RunManifest {
        command,
        argv: std::env::args().collect(),
        version: env!("CARGO_PKG_VERSION"),
        seed: cfg.map(|c| c.seed),
        deterministic,
        config_file,
        started,
        finished: now(),
        status,
    };
    let p = dir.join("run_manifest.json");
    std::fs::write(&p, serde_json::to_string_pretty(&m)? + "\n").with_context(|| format!("writing {}", p.display()))?;
    Ok(())
}

fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Loads `split` from a dataset root, or `data` itself when it is a split
/// directory.
fn load_split(data: &Path, split: &str) -> anyhow::Result<Vec<Sample>> {
    let dir = if data.join(data::MANIFEST).is_file() { data.to_path_buf() } else { data.join(split) };
    Ok(data::load_split(&dir)?)
}

fn domain(root: &Path, train: Split, val: Split) -> anyhow::Result<DomainData> {
    Ok(DomainData {
        train: load_split(root, train.name())?,
        val: load_split(root, val.name())?,
    })
}

fn train(a: &TrainArgs) -> anyhow::Result<()> {
    let started = now();
    let cfg = validate_config(&a.config)?;
    let mode: Stage = a.mode.into();
    if let Some(m) = cfg.mode.filter(|m| *m != mode) {
        return Err(Error::Validation(vec![format!("--mode {mode} conflicts with mode = \"{m}\" in the configuration")]).into());
    }
    if mode == Stage::Sf2 && a.resume.is_none() {
        return Err(Error::Validation(vec!["train --mode sf2 requires --resume <stage-1 checkpoint>".into()]).into());
    }
    let data_root = a
        .data
        .clone()
        .or_else(|| cfg.data_root.clone())
        .ok_or_else(|| Error::Validation(vec!["no dataset: set data_root or pass --data".into()]))?;
    if !data_root.is_dir() {
        return Err(Error::Validation(vec![format!("dataset {} does not exist", data_root.display())]).into());
    }
    let tc = cfg.train_config(mode);
    let v = tc.violations();
    if !v.is_empty() {
        return Err(Error::Validation(v).into());
    }
    let dir = a.out.clone().unwrap_or_else(|| output_root(Some(&cfg)).join(mode.to_string()));
    let paths = RunPaths::new(&dir);
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let deterministic = a.deterministic || cfg.deterministic;
    let outcome = match mode {
        Stage::Sa => {
            let src = domain(&data_root, Split::SourceTrain, Split::SourceVal)?;
            let tgt = domain(&data_root, Split::TargetTrain, Split::TargetVal)?;
            training::train_sa(&tc, &src, &tgt, &paths, resume.as_ref())
        }
        Stage::Sf1 => {
            let src = domain(&data_root, Split::SourceTrain, Split::SourceVal)?;
            training::train_sf1(&tc, &src, &paths, resume.as_ref())
        }
        Stage::Sf2 => {
            let tgt = domain(&data_root, Split::TargetTrain, Split::TargetVal)?;
            training::train_sf2(&tc, &tgt, resume.as_ref().expect("checked above"), &paths)
        }
        Stage::Baseline => unreachable!("not a CLI mode"),
    };
    let status = if outcome.is_ok() { "ok" } else { "failed" };
    write_manifest(&dir, "train", Some(&cfg), deterministic, started, status)?;
    let outcome = outcome?;
    println!(
        "{mode}: {} steps, best validation score {:.5}; checkpoints in {}",
        outcome.last.step,
        outcome.best_score,
        dir.display()
    );
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenerateData { config, out } => {
            let started = now();
            let cfg = config.as_deref().map(validate_config).transpose()?;
            let gen = cfg.as_ref().map(|c| c.generator.clone()).unwrap_or_default();
            data::generate(&gen, &out)?;
            write_manifest(&out, "generate-data", cfg.as_ref(), true, started, "ok")?;
            println!("dataset written to {} (sha256 {})", out.display(), data::dataset_checksum(&out)?);
        }
        Command::Train(a) => train(&a)?,
        Command::Evaluate { ckpt, data, split, out } => {
            let started = now();
            let c = Checkpoint::load(&ckpt)?;
            let samples = load_split(&data, &split)?;
            let report = evaluation::evaluate(&c.model, &samples)?;
            let dir = out.unwrap_or_else(|| output_root(None).join("evaluate"));
            report.write(&dir)?;
            let act = evaluation::basis_activation_report(&c.model, &samples, evaluation::ACTIVATION_THRESHOLD)?;
            let p = dir.join("activation.json");
            std::fs::write(&p, serde_json::to_string_pretty(&act)? + "\n").with_context(|| format!("writing {}", p.display()))?;
            write_manifest(&dir, "evaluate", None, true, started, "ok")?;
            print!("{}", report.table());
            println!("bases activated: {} of {}", act.activated, c.model.config.num_bases);
        }
        Command::Traverse { kind } => {
            let started = now();
            let (t, dir, name) = match kind {
                TraverseKind::InterImage { ckpt, data, split, a, b, steps, out } => {
                    let c = Checkpoint::load(&ckpt)?;
                    let samples = load_split(&data, &split)?;
                    let find = |id: &str| {
                        samples
                            .iter()
                            .find(|s| s.subject_id == id)
                            .ok_or_else(|| anyhow!(Error::Config(format!("no subject `{id}` in split {split}"))))
                    };
                    let t = evaluation::traverse_inter_image(&c.model, find(&a)?, find(&b)?, steps)?;
                    (t, out.unwrap_or_else(|| output_root(None).join("traverse")), format!("inter_image_{a}_{b}"))
                }
                TraverseKind::InterBasis { ckpt, i, j, steps, out } => {
                    let c = Checkpoint::load(&ckpt)?;
                    let t = evaluation::traverse_inter_basis(&c.model, i, j, steps)?;
                    (t, out.unwrap_or_else(|| output_root(None).join("traverse")), format!("inter_basis_{i}_{j}"))
                }
            };
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            evaluation::write_traversal_grid(std::slice::from_ref(&t), &dir.join(format!("{name}.png")))?;
            let p = dir.join(format!("{name}_weights.csv"));
            std::fs::write(&p, t.weight_path_csv()?).with_context(|| format!("writing {}", p.display()))?;
            write_manifest(&dir, "traverse", None, true, started, "ok")?;
            println!("traversal written to {}", dir.display());
        }
        Command::ExportLatents { ckpt, data, splits, out } => {
            let started = now();
            let c = Checkpoint::load(&ckpt)?;
            let mut samples = Vec::new();
            for s in splits.split(',').map(str::trim).filter(|s| !s.is_empty()) {
                samples.extend(load_split(&data, s)?);
            }
            let rows = evaluation::export_latents(&c.model, &samples)?;
            let dir = out.unwrap_or_else(|| output_root(None).join("latents"));
            std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
            let p = dir.join("latents.csv");
            std::fs::write(&p, evaluation::latents_csv(&rows)).with_context(|| format!("writing {}", p.display()))?;
            let pca = evaluation::pca2(&rows.iter().map(|r| r.w.clone()).collect::<Vec<_>>())?;
            evaluation::write_pca_scatter(&rows, &pca, &dir.join("latents_pca.png"), 400)?;
            let p = dir.join("latents_pca_caption.txt");
            std::fs::write(&p, evaluation::pca_caption(&pca) + "\n").with_context(|| format!("writing {}", p.display()))?;
            write_manifest(&dir, "export-latents", None, true, started, "ok")?;
            println!("{} rows; {}", rows.len(), evaluation::pca_caption(&pca));
        }
        Command::Selftest { seed } => {
            let checks = selftest::run_all(seed);
            for c in &checks {
                println!("{} {:<14} {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Err(anyhow!("selftest failed"));
            }
        }
    }
    Ok(())
}

/// Validation problems exit with 1, everything else with 2.
fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::Validation(_) | Error::Config(_) | Error::Schema { .. }) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            match e.downcast_ref::<Error>() {
                Some(Error::Validation(v)) => {
                    eprintln!("error: invalid configuration:");
                    for m in v {
                        eprintln!("  - {m}");
                    }
                }
                _ => eprintln!("error: {e:#}"),
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
