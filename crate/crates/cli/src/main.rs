use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use drivesig_core::data::{Dataset, Split};
use drivesig_core::eval::EvalReport;
use drivesig_core::pipeline::{self as pl, PipelineError, Prepared, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "drivesig", version, about = "Driver identification from vehicle telemetry")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run every parallel section on one thread.
    #[arg(long, global = true)]
    single_thread: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate a synthetic dataset (CSV files plus manifest) into the output directory.
    Synth,
    /// Train the encoder and classifier; writes checkpoints and loss history.
    Train,
    /// Evaluate trained artifacts found in the output directory.
    Eval,
    /// Feature-group ablation, interval-length and embedding-size sweeps.
    Ablate,
    /// Project embeddings of one split to 2-D points.
    Project,
}

fn load_config(cli: &Cli) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let cfg = cfg.resolve();
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let manifest = pl::write_synthetic(&cfg.data.synth, out)?;
    log::info!("wrote {}", manifest.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let prepared = Prepared::new(pl::load_or_generate(&cfg.data)?, &cfg.windowing)?;
    let ds = &prepared.dataset;
    log::info!(
        "{} drivers, {} channels, windows train/eval/test {}/{}/{}",
        ds.num_drivers(),
        ds.num_channels(),
        ds.split(Split::Train).len(),
        ds.split(Split::Eval).len(),
        ds.split(Split::Test).len()
    );
    let trained = pl::train_model(cfg, ds)?;
    pl::save_trained(out, &trained, &prepared)?;
    log::info!("training took {:.1} s", trained.wall_time_s);
    Ok(())
}

fn base_meta(cfg: &RunConfig, command: &str) -> std::collections::BTreeMap<String, String> {
    [
        ("command".to_string(), command.to_string()),
        ("seed".to_string(), cfg.seed.to_string()),
        ("version".to_string(), env!("CARGO_PKG_VERSION").to_string()),
    ]
    .into_iter()
    .collect()
}

fn cmd_eval(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let (model, normalizer) = pl::load_trained(out)?;
    let ds = pl::dataset_with(cfg, &normalizer)?;
    let mut report = pl::evaluate(&model, &ds, &cfg.eval)?;
    report.meta = base_meta(cfg, "eval");
    report
        .meta
        .insert("test_windows".into(), ds.split(Split::Test).len().to_string());
    report.write(&out.join(pl::EVAL_REPORT_FILE))?;
    pl::write_text(&out.join(pl::CONFUSION_FILE), &report.confusion_csv())?;
    log::info!(
        "top-1 {:.4}, pairwise {:.4}",
        report.top1_accuracy,
        report.nway.get(&2).copied().unwrap_or(f64::NAN)
    );
    Ok(())
}

fn cmd_ablate(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let recordings = pl::load_or_generate(&cfg.data)?;
    let raw = Dataset::build(recordings.clone(), &cfg.windowing)?;
    let mut report = EvalReport {
        meta: base_meta(cfg, "ablate"),
        drivers: raw.drivers().to_vec(),
        ..Default::default()
    };
    if cfg.ablate.feature_groups {
        let rows = pl::ablate_features(cfg, &raw, &pl::ablation_selections(&raw))?;
        report.tables.insert("feature_groups".into(), rows);
    }
    if !cfg.ablate.interval_lengths_s.is_empty() {
        let rows = pl::interval_sweep(cfg, &recordings, &cfg.ablate.interval_lengths_s)?;
        report.tables.insert("interval_length".into(), rows);
    }
    if !cfg.ablate.tcn_embedding_sizes.is_empty() {
        let prepared = Prepared::from_dataset(&raw)?;
        let rows = pl::embedding_size_sweep(cfg, &prepared.dataset, &cfg.ablate.tcn_embedding_sizes)?;
        report.tables.insert("tcn_embedding_size".into(), rows);
    }
    for (name, rows) in &report.tables {
        pl::write_text(&out.join(format!("ablation_{name}.csv")), &pl::table_csv(rows))?;
    }
    report.write(&out.join(pl::ABLATION_REPORT_FILE))?;
    Ok(())
}

fn cmd_project(cfg: &RunConfig, out: &Path) -> Result<(), PipelineError> {
    let (model, normalizer) = pl::load_trained(out)?;
    let ds = pl::dataset_with(cfg, &normalizer)?;
    let points = pl::project(&model, &ds, &cfg.project)?;
    pl::write_text(
        &out.join(pl::PROJECTION_FILE),
        &pl::projection_csv(&points, ds.drivers()),
    )?;
    log::info!("projected {} windows", points.len());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = load_config(cli)?;
    pl::write_resolved_config(&cfg, &cli.out)?;
    match cli.command {
        Command::Synth => cmd_synth(&cfg, &cli.out),
        Command::Train => cmd_train(&cfg, &cli.out),
        Command::Eval => cmd_eval(&cfg, &cli.out),
        Command::Ablate => cmd_ablate(&cfg, &cli.out),
        Command::Project => cmd_project(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!(
                "error: {}",
                msg.lines()
                    .next()
                    .unwrap_or("invalid arguments")
                    .trim_start_matches("error: ")
            );
            return ExitCode::from(1);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if cli.single_thread {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            eprintln!("error: cannot configure thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
