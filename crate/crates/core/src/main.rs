use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use mpgcn::bench::{cmd_bench, default_lineup, summary_table};
use mpgcn::config::{extract_overrides, ExperimentConfig, Override};
use mpgcn::data::{generate_sbm, write_cache, SbmParams};
use mpgcn::gradcheck::run_suite;
use mpgcn::model::{conv_param_count, param_count, Architecture, ModelSpec};
use mpgcn::{Error, Result};

/// Graph convolutional networks with parallel multipath stacks.
///
/// `train` and `bench` also accept config overrides as dotted flags
/// (`--train.lr 0.05`, `--model.paths [1,2]`) or the short forms
/// `--epochs --lr --weight-decay --seeds --seed-count --arch --hidden --depth
/// --paths --shared-stem --dropout --bias --dataset --row-normalize --metrics
/// --summary`.
#[derive(Parser)]
#[command(name = "mpgcn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model over every configured seed.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Compare models on one dataset. A single model config expands into the
    /// standard gcn / resgcn / mpgcn lineup built from it; a file holding a
    /// JSON array supplies several models at once.
    Bench {
        #[arg(long)]
        config: Vec<PathBuf>,
    },
    /// Write a stochastic block model dataset to the binary cache format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 4)]
        blocks: usize,
        #[arg(long, default_value_t = 60)]
        per_block: usize,
        #[arg(long, default_value_t = 0.1)]
        p_intra: f64,
        #[arg(long, default_value_t = 0.02)]
        p_inter: f64,
        #[arg(long, default_value_t = 16)]
        features: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Check analytic gradients against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print trainable parameter counts for a model.
    Count {
        #[arg(long, value_enum)]
        arch: ArchKind,
        #[arg(long)]
        in_dim: usize,
        #[arg(long)]
        hidden: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, required_if_eq_any = [("arch", "gcn"), ("arch", "resgcn")])]
        depth: Option<usize>,
        #[arg(long, value_delimiter = ',', required_if_eq("arch", "mpgcn"))]
        paths: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        shared_stem: usize,
        #[arg(long)]
        no_bias: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchKind {
    Gcn,
    Resgcn,
    Mpgcn,
}

fn load_configs(paths: &[PathBuf], overrides: &[Override]) -> Result<Vec<ExperimentConfig>> {
    match paths {
        [] => Ok(vec![ExperimentConfig::load(None, overrides)?]),
        _ => {
            let mut configs = Vec::new();
            for p in paths {
                configs.extend(ExperimentConfig::load_all(p, overrides)?);
            }
            Ok(configs)
        }
    }
}

fn run(command: Command, overrides: &[Override]) -> Result<()> {
    match command {
        Command::Train { config } => {
            let cfg = ExperimentConfig::load(config.as_deref(), overrides)?;
            let results = cmd_bench(std::slice::from_ref(&cfg))?;
            print!("{}", summary_table(&results));
        }
        Command::Bench { config } => {
            let mut configs = load_configs(&config, overrides)?;
            if configs.len() == 1 {
                configs = default_lineup(&configs[0]);
            }
            let results = cmd_bench(&configs)?;
            print!("{}", summary_table(&results));
        }
        Command::Synth {
            out,
            blocks,
            per_block,
            p_intra,
            p_inter,
            features,
            seed,
        } => {
            let ds = generate_sbm(&SbmParams {
                blocks,
                per_block,
                p_intra,
                p_inter,
                features,
                seed,
            })?;
            write_cache(&ds, &out)?;
            println!(
                "wrote {} nodes, {} edges, {} features to {}",
                ds.num_nodes(),
                ds.graph.edges.len(),
                ds.num_features(),
                out.display()
            );
        }
        Command::Gradcheck { seed } => {
            let outcomes = run_suite(seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            let failed = outcomes.iter().filter(|o| !o.passed()).count();
            if failed > 0 {
                return Err(Error::InvalidArgument(format!("{failed} gradient checks failed")));
            }
        }
        Command::Count {
            arch,
            in_dim,
            hidden,
            classes,
            depth,
            paths,
            shared_stem,
            no_bias,
        } => {
            let arch = match arch {
                ArchKind::Gcn => Architecture::Sequential { depth: depth.unwrap_or_default() },
                ArchKind::Resgcn => Architecture::Residual { depth: depth.unwrap_or_default() },
                ArchKind::Mpgcn => Architecture::Multipath { paths, shared_stem },
            };
            let spec = ModelSpec {
                arch,
                in_dim,
                hidden,
                classes,
                dropout: 0.0,
                bias: !no_bias,
            };
            spec.validate()?;
            println!("conv_params {}", conv_param_count(&spec));
            println!("total_params {}", param_count(&spec));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let args: Vec<String> = std::env::args().collect();
    let takes_overrides = matches!(args.get(1).map(String::as_str), Some("train" | "bench"));
    let (args, overrides) = if takes_overrides {
        let (rest, overrides) = extract_overrides(&args[2..]);
        (args[..2].iter().cloned().chain(rest).collect(), overrides)
    } else {
        (args, Vec::new())
    };
    let cli = Cli::parse_from(args);
    match run(cli.command, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
