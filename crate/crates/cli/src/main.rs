use clap::{Args, Parser, Subcommand};
use compil_core::data::{self, build_splits, validate_protocol};
use compil_core::experiment::{self, ExperimentConfig, SplitKind};
use compil_core::trainer::{Method, Preset};
use compil_core::{Error, Result};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

const OUTPUT_ROOT_VAR: &str = "COMPIL_OUTPUT_ROOT";

#[derive(Parser)]
#[command(name = "compil", version, about = "Compositional incremental learning experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a configuration field, e.g. `--set train.lr=0.02`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    preset: Option<Preset>,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Output directory; defaults to `$COMPIL_OUTPUT_ROOT/<name>` (or
    /// `runs/<name>`).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic dataset to metadata.csv plus a pixel store.
    GenerateData {
        #[command(flatten)]
        common: Common,
        /// Target directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the task sequence for one seed and check the protocol.
    Split {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the sequence as JSON here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every method and seed.
    Train {
        #[command(flatten)]
        common: Common,
        /// Comma-separated methods; overrides the configuration.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Evaluate a checkpoint on the test splits of the tasks it has seen.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Seed the checkpoint was trained with.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run the ablation grid of the configuration.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Write per-sample query and composition-prompt features as CSV.
    ExportFeatures {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_parser = parse_split, default_value = "test")]
        split: SplitKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Recompute aggregate tables from the matrices in a result directory.
    Report {
        dir: PathBuf,
    },
}

fn parse_split(s: &str) -> std::result::Result<SplitKind, String> {
    match s {
        "train" => Ok(SplitKind::Train),
        "test" => Ok(SplitKind::Test),
        other => Err(format!("unknown split {other:?} (train or test)")),
    }
}

fn resolve(common: &Common, extra: &[String]) -> Result<ExperimentConfig> {
    let mut sets = Vec::new();
    if let Some(p) = common.preset {
        sets.push(format!("preset={}", serde_json::to_string(&p)?));
    }
    if !common.seeds.is_empty() {
        let seeds: Vec<String> = common.seeds.iter().map(u64::to_string).collect();
        sets.push(format!("seeds=[{}]", seeds.join(",")));
    }
    sets.extend(common.sets.iter().cloned());
    sets.extend(extra.iter().cloned());
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path, &sets),
        None => ExperimentConfig::from_toml("", &sets),
    }?;
    if let Some(o) = &common.output {
        cfg.output_dir = Some(o.clone());
    }
    if cfg.output_dir.is_none() {
        let root = std::env::var_os(OUTPUT_ROOT_VAR).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        cfg.output_dir = Some(root.join(&cfg.name));
    }
    log::info!("resolved configuration:\n{}", cfg.to_toml()?);
    Ok(cfg)
}

fn print_rows(rows: &[experiment::ReportRow]) {
    print!("{}", experiment::report_csv(rows));
}

fn finish(bundle: &experiment::Bundle, out: &Path) -> Result<()> {
    let rows = experiment::report(out)?;
    print_rows(&rows);
    eprintln!("results in {}", out.display());
    if bundle.failures.is_empty() {
        Ok(())
    } else {
        Err(Error::Training(format!("{} run(s) failed; see FAILED.csv", bundle.failures.len())))
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenerateData { common, out } => {
            let cfg = resolve(&common, &[])?;
            let n = experiment::write_dataset(&cfg.data.synthetic, &out)?;
            println!("wrote {n} samples to {}", out.display());
        }
        Command::Split { common, seed, out } => {
            let cfg = resolve(&common, &[])?;
            let ds = experiment::load_dataset(&cfg.data, seed)?;
            let protocol = build_splits(&ds.rows, cfg.split.top_k, cfg.split.n_tasks, cfg.split.policy, seed)?;
            let report = validate_protocol(&protocol.tasks, &protocol.registry)?;
            println!(
                "{} compositions, {} states, {} objects, {} tasks",
                protocol.registry.n_compositions(),
                protocol.registry.n_states(),
                protocol.registry.n_objects(),
                protocol.tasks.len()
            );
            println!("recurring primitives: {}", report.recurring_primitives());
            for (t, (train, test)) in report.train_images.iter().zip(&report.test_images).enumerate() {
                println!("task {}: {train} train, {test} test", t + 1);
            }
            if let Some(path) = out {
                data::export_task_sequence(&path, &protocol)?;
            }
        }
        Command::Train { common, methods } => {
            let extra = if methods.is_empty() {
                vec![]
            } else {
                let names: Vec<String> = methods.iter().map(|m| format!("\"{}\"", m.name())).collect();
                vec![format!("methods=[{}]", names.join(","))]
            };
            let cfg = resolve(&common, &extra)?;
            let bundle = experiment::run_experiment(&cfg)?;
            finish(&bundle, cfg.output_dir.as_deref().expect("resolved"))?;
        }
        Command::Evaluate {
            common,
            checkpoint,
            seed,
        } => {
            let cfg = resolve(&common, &[])?;
            let restored = experiment::restore(&cfg, &checkpoint, seed)?;
            let counts = experiment::evaluate_restored(&restored, cfg.train.mu)?;
            println!("task,samples,composition,state,object");
            for (t, c) in counts.iter().enumerate() {
                let (a, s, o) = c.accuracy();
                println!("{},{},{:.4},{:.4},{:.4}", t + 1, c.total, a, s, o);
            }
        }
        Command::Ablate { common } => {
            let cfg = resolve(&common, &[])?;
            let bundle = experiment::ablate(&cfg)?;
            finish(&bundle, cfg.output_dir.as_deref().expect("resolved"))?;
        }
        Command::ExportFeatures {
            common,
            checkpoint,
            seed,
            split,
            out,
        } => {
            let cfg = resolve(&common, &[])?;
            let restored = experiment::restore(&cfg, &checkpoint, seed)?;
            let rows = experiment::export_features(&restored, split, cfg.train.mu)?;
            experiment::write_features(&out, &rows)?;
            println!("wrote {} rows to {}", rows.len(), out.display());
        }
        Command::Report { dir } => print_rows(&experiment::report(&dir)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
