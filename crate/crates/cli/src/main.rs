//! `dst`: runs the forecasting pipeline stage by stage.
//!
//! Failures print one line, `error[<class>]: <message>`, to stderr and exit
//! with status 1.

use std::fs::File;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use dst_core::config::ExperimentConfig;
use dst_core::data::synthetic::CoupledSinusoids;
use dst_core::data::write_table;
use dst_core::pipeline::{self, Artifacts, PipelineError};
use dst_core::train_eval::format_summary;

#[derive(Debug, Parser)]
#[command(name = "dst", version, about = "Decomposition-based spatio-temporal forecasting pipeline")]
struct Cli {
    /// Experiment config (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Dataset CSV; same as `--set dataset.path=...`.
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    /// Single run seed; replaces `train.seeds`.
    #[arg(long, global = true, conflicts_with = "seeds")]
    seed: Option<u64>,
    /// Comma-separated seeds, e.g. `0,1,2,3,4`.
    #[arg(long, global = true)]
    seeds: Option<String>,
    /// Output directory; same as `--set output.dir=...`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set graph.k=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Load, impute, split and standardize the dataset.
    Ingest {
        /// Write the seeded two-channel sinusoid dataset to the dataset path first.
        #[arg(long)]
        synthetic: bool,
    },
    /// Write trend, seasonal and residual tables of the ingested data.
    Decompose,
    /// Infer the component graphs from the training split.
    BuildGraph {
        /// Neighbors per node; same as `--set graph.k=...`.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Train one model per seed.
    Train,
    /// Score trained models on the test split.
    Evaluate,
    /// Train and score the single-module ablations.
    Ablate,
    /// Train and score one model per GATv2 depth.
    SweepLayers {
        #[arg(long)]
        max_layers: Option<usize>,
    },
    /// Forecast the horizon after the end of the data, in raw units.
    Forecast,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig, PipelineError> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    for pair in &cli.overrides {
        cfg.set_pair(pair)?;
    }
    if let Some(p) = &cli.data {
        cfg.dataset_path = Some(p.clone());
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(s) = &cli.seeds {
        cfg.set("train.seeds", s)?;
    }
    match &cli.command {
        Command::BuildGraph { k: Some(k) } => cfg.set("graph.k", &k.to_string())?,
        Command::SweepLayers { max_layers: Some(n) } => cfg.set("sweep.max_layers", &n.to_string())?,
        _ => {}
    }
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let cfg = resolve(cli)?;
    let paths = Artifacts::new(&cfg.output_dir);
    match &cli.command {
        Command::Ingest { synthetic } => {
            if *synthetic {
                let path = cfg.dataset_path()?.to_path_buf();
                let table = CoupledSinusoids {
                    seed: cfg.seeds[0],
                    ..CoupledSinusoids::default()
                }
                .generate();
                let file = File::create(&path).map_err(|source| PipelineError::Io { path: path.clone(), source })?;
                write_table(file, &table)?;
            }
            let ds = pipeline::ingest(&cfg)?;
            println!(
                "ingested {} rows x {} channels into {} (train {:?}, val {:?}, test {:?})",
                ds.table.len(),
                ds.channels(),
                paths.data().display(),
                ds.splits.train,
                ds.splits.val,
                ds.splits.test
            );
        }
        Command::Decompose => {
            pipeline::decompose_stage(&cfg)?;
            println!("wrote component tables under {}", cfg.output_dir.display());
        }
        Command::BuildGraph { .. } => {
            let g = pipeline::build_graph_stage(&cfg)?;
            for (name, graph) in [
                ("trend", &g.components.trend),
                ("seasonal", &g.components.seasonal),
                ("residual", &g.components.residual),
                (pipeline::RAW_GRAPH, &g.raw),
            ] {
                println!("{name}: {} edges -> {}", graph.edges().len(), paths.edges(name).display());
            }
        }
        Command::Train => {
            for (seed, out) in cfg.seeds.iter().zip(pipeline::train_stage(&cfg)?) {
                println!(
                    "seed {seed}: {} epochs, {} steps, best epoch {:?}, validation MSE {:.6}{}",
                    out.epochs.len(),
                    out.history.len(),
                    out.best_epoch,
                    out.best_val_loss,
                    if out.diverged { " (diverged; kept last finite checkpoint)" } else { "" }
                );
            }
        }
        Command::Evaluate => {
            let reports = pipeline::evaluate_stage(&cfg)?;
            print!("{}", format_summary(&reports));
            println!("records: {}", paths.report().display());
        }
        Command::Ablate => {
            let rows = pipeline::ablate_stage(&cfg)?;
            println!("{:<18} {:>6} {:>10} {:>10}", "variant", "seed", "MSE", "MAE");
            for r in rows {
                println!("{:<18} {:>6} {:>10.5} {:>10.5}", r.variant, r.report.seed, r.report.mse, r.report.mae);
            }
        }
        Command::SweepLayers { .. } => {
            println!("layers,mse");
            for p in pipeline::sweep_stage(&cfg)? {
                println!("{},{}", p.layers, p.report.mse);
            }
        }
        Command::Forecast => {
            let t = pipeline::forecast_stage(&cfg)?;
            println!("forecast of {} steps x {} channels -> {}", t.len(), t.channels(), paths.forecast().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.class());
            ExitCode::FAILURE
        }
    }
}
