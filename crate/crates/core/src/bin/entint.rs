//! Experiment CLI: corpus generation, intervention training and evaluation,
//! neighbor queries, k sweeps, in-context runs, and report aggregation.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use entint::experiment::{
    cmd_gen, cmd_incontext, cmd_neighbors, cmd_report, cmd_sweep_k, cmd_train_eval, ClientKind,
    ExperimentConfig, ExperimentError,
};
use entint::incontext::IncontextVariant;
use entint::intervention::InterventionMode;

#[derive(Parser)]
#[command(
    name = "entint",
    about = "Entity-bias mitigation experiments: convex-hull embedding interventions and prompt rewriting",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Experiment config (TOML); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Comma-separated seed list overriding the config.
    #[arg(long, global = true, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Results directory overriding the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<ExperimentConfig, ExperimentError> {
        let mut config = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seeds) = &self.seed {
            config.seeds = seeds.clone();
        }
        if let Some(out) = &self.out {
            config.out_dir = out.clone();
        }
        Ok(config)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    HullSample,
    HullCenter,
    Mask,
    Substitute,
    Core,
}

#[derive(Clone, Copy, ValueEnum)]
enum ClientArg {
    Live,
    Mock,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    Gen {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the shortcut strength rho in [0, 1].
        #[arg(long)]
        rho: Option<f64>,
    },
    /// Train with the configured intervention and evaluate on both test splits.
    TrainEval {
        #[command(flatten)]
        common: CommonArgs,
        /// Override the intervention mode (`core` evaluates the CoRE baseline).
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        /// Override the number of hull neighbors k.
        #[arg(long)]
        k: Option<usize>,
    },
    /// Print the k nearest neighbors of an entity as TSV.
    Neighbors {
        /// Embedding table path.
        #[arg(long)]
        table: PathBuf,
        /// Anchor entity name.
        #[arg(long)]
        anchor: String,
        #[arg(long, default_value_t = 3)]
        k: usize,
        /// Restrict candidates to one type tag.
        #[arg(long)]
        type_filter: Option<String>,
        /// Error instead of truncating when k exceeds the pool.
        #[arg(long)]
        strict: bool,
    },
    /// Train/eval the hull intervention across several k values.
    SweepK {
        #[command(flatten)]
        common: CommonArgs,
        /// Comma-separated k values.
        #[arg(long, value_delimiter = ',', default_value = "0,1,3,5,9")]
        k_values: Vec<usize>,
    },
    /// Run the in-context intervention over the corpus's conflict set.
    Incontext {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value = "mock")]
        client: ClientArg,
        /// Transcript fixture for the mock client (JSON lines).
        #[arg(long)]
        transcript: Option<PathBuf>,
        /// Ablation: drop the placeholder definitions.
        #[arg(long)]
        no_definition: bool,
        /// Ablation: drop the original entity from each definition.
        #[arg(long)]
        no_original: bool,
        /// Ablation: keep the originals at matching positions.
        #[arg(long)]
        no_random_order: bool,
        /// Run the plain attribute-style baseline prompt instead.
        #[arg(long)]
        attribute: bool,
    },
    /// Aggregate all run manifests under the results directory.
    Report {
        #[command(flatten)]
        common: CommonArgs,
    },
}

fn run() -> Result<(), ExperimentError> {
    let cli = Cli::parse();
    match cli.command {
        Command::Gen { common, rho } => {
            let mut config = common.resolve()?;
            if let Some(rho) = rho {
                config.generator.shortcut_strength = rho;
            }
            cmd_gen(&config)?;
        }
        Command::TrainEval { common, mode, k } => {
            let mut config = common.resolve()?;
            if let Some(mode) = mode {
                config.core_baseline = false;
                match mode {
                    ModeArg::None => config.intervention.mode = InterventionMode::None,
                    ModeArg::HullSample => {
                        config.intervention.mode = InterventionMode::HullSample
                    }
                    ModeArg::HullCenter => {
                        config.intervention.mode = InterventionMode::HullCenter
                    }
                    ModeArg::Mask => config.intervention.mode = InterventionMode::Mask,
                    ModeArg::Substitute => {
                        config.intervention.mode = InterventionMode::Substitute
                    }
                    ModeArg::Core => {
                        config.intervention.mode = InterventionMode::None;
                        config.core_baseline = true;
                    }
                }
            }
            if let Some(k) = k {
                config.intervention.k = k;
            }
            let summary = cmd_train_eval(&config)?;
            println!("config {}", summary.config_hash);
            for split in &summary.splits {
                println!(
                    "{}: F1 {:.2} ± {:.2} over {} runs",
                    split.split, split.mean_f1, split.std_f1, split.runs
                );
            }
        }
        Command::Neighbors {
            table,
            anchor,
            k,
            type_filter,
            strict,
        } => {
            let tsv = cmd_neighbors(&table, &anchor, k, type_filter, strict)?;
            print!("{tsv}");
        }
        Command::SweepK { common, k_values } => {
            let config = common.resolve()?;
            let table = cmd_sweep_k(&config, &k_values)?;
            print!("{}", table.to_tsv());
        }
        Command::Incontext {
            common,
            client,
            transcript,
            no_definition,
            no_original,
            no_random_order,
            attribute,
        } => {
            let mut config = common.resolve()?;
            if let Some(path) = transcript {
                config.incontext.transcript = Some(path);
            }
            let variant = if attribute {
                IncontextVariant::Attribute
            } else if no_definition {
                IncontextVariant::NoDefinition
            } else if no_original {
                IncontextVariant::NoOriginal
            } else if no_random_order {
                IncontextVariant::NoRandomOrder
            } else {
                IncontextVariant::Full
            };
            let kind = match client {
                ClientArg::Live => ClientKind::Live,
                ClientArg::Mock => ClientKind::Mock,
            };
            let report = cmd_incontext(&config, variant, kind)?;
            println!("{report}");
        }
        Command::Report { common } => {
            let config = common.resolve()?;
            print!("{}", cmd_report(&config.out_dir)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(error) => {
            eprintln!("error: {error}");
            ExitCode::FAILURE
        }
    }
}
