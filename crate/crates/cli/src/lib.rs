//! `gdt` command dispatcher. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use gdt_core::evalrollout::{env_table, eval_report, EnvSpec, SuiteEntry};
use gdt_core::gradsuite::{gradient_suite, SuiteTarget, GRADCHECK_TOL};
use gdt_core::graphrep::{build_adjacency, ConnectionMode, RewardSetting};
use gdt_core::model::Gdt;
use gdt_core::trainer::{ablate, resume, train, AblationAxis, TrainConfig};
use gdt_core::trajstore::{generate_synthetic, load_dataset, write_dataset, Dataset, SynthSpec};
use gdt_core::GdtError;

pub const SEED_ENV: &str = "GDT_SEED";

#[derive(Debug, Parser)]
#[command(
    name = "gdt",
    version,
    about = "Graph Decision Transformer: datasets, training, evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Create, check and summarize trajectory files.
    Dataset {
        #[command(subcommand)]
        action: DatasetCommand,
    },
    /// Inspect token graphs.
    Graph {
        #[command(subcommand)]
        action: GraphCommand,
    },
    /// Train a model on a trajectory file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Trajectory file; overrides the config entry.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Train and score every variant along one axis.
    Ablate {
        #[arg(long, value_parser = ["connection", "reward", "length", "stmethod"])]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Defaults to `ablate-<axis>`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Return-conditioned rollouts of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        env: String,
        /// Conditioning target; defaults to the optimal return.
        #[arg(long)]
        rtg: Option<f64>,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        /// Number of seeds, starting at 0.
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Lower bound on the running return-to-go.
        #[arg(long)]
        floor: Option<f64>,
        /// Report CSV path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter tensor.
    Gradcheck {
        #[arg(long, value_parser = ["graphformer", "seqformer"])]
        module: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Debug, Subcommand)]
enum DatasetCommand {
    /// Roll out an epsilon-optimal scripted policy on a toy environment.
    Synth {
        #[arg(long)]
        env: String,
        /// Exploration rate, or a comma-separated list cycled over episodes.
        #[arg(long, value_delimiter = ',', default_value = "0")]
        eps: Vec<f64>,
        #[arg(long)]
        episodes: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    Validate {
        file: PathBuf,
    },
    Stats {
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
enum GraphCommand {
    /// Print the edge list and relation matrix of a window graph.
    Dump {
        #[arg(long = "K", alias = "k")]
        k: usize,
        #[arg(long, default_value = "causal")]
        mode: String,
        #[arg(long, default_value = "rtg")]
        reward: String,
        /// Edge seed for the random mode.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Usage(String),
    Runtime(GdtError),
}

impl From<GdtError> for Failure {
    fn from(e: GdtError) -> Self {
        match e {
            GdtError::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Runs one command line (including the program name) and returns the
/// process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            eprint!("{}", e.render());
            return code;
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn seed_override() -> std::result::Result<Option<u64>, Failure> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map(Some).map_err(|_| {
            Failure::Usage(format!("{SEED_ENV} must be an unsigned integer, got `{v}`"))
        }),
        Err(_) => Ok(None),
    }
}

fn write_text(path: &Path, text: &str) -> Outcome {
    std::fs::write(path, text).map_err(|e| {
        Failure::Runtime(GdtError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

/// `<output>.config.toml` beside a single-file output.
fn snapshot_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".config.toml");
    output.with_file_name(name)
}

fn load_config(
    path: &Path,
    data: Option<PathBuf>,
) -> std::result::Result<(TrainConfig, Dataset), Failure> {
    let mut cfg = TrainConfig::load(path)?;
    if let Some(seed) = seed_override()? {
        cfg.seed = seed;
    }
    if data.is_some() {
        cfg.data = data;
    }
    let data = cfg.data.clone().ok_or_else(|| {
        Failure::Usage("no dataset: pass --data or set `data` in the config".into())
    })?;
    let ds = load_dataset(&data)?;
    Ok((cfg, ds))
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Dataset { action } => dataset(action),
        Command::Graph {
            action:
                GraphCommand::Dump {
                    k,
                    mode,
                    reward,
                    seed,
                },
        } => {
            if k == 0 {
                return Err(Failure::Usage("--K must be at least 1".into()));
            }
            let mode: ConnectionMode = mode.parse::<ConnectionMode>()?.with_seed(seed);
            let reward: RewardSetting = reward.parse()?;
            print!("{}", build_adjacency(k, mode, reward).dump());
            Ok(())
        }
        Command::Train {
            config,
            data,
            out,
            resume: from,
        } => {
            let (cfg, ds) = load_config(&config, data)?;
            let summary = match from {
                Some(ckpt) => resume(&ckpt, &ds, &out)?,
                None => train(&cfg, &ds, &out)?,
            };
            println!("steps {}", summary.steps);
            println!("final loss {:.6}", summary.final_loss);
            if let Some(score) = summary.best_score {
                println!("best eval {score:.3}");
            }
            println!("last checkpoint {}", summary.last.display());
            Ok(())
        }
        Command::Ablate {
            axis,
            config,
            data,
            out,
        } => {
            let axis: AblationAxis = axis.parse()?;
            let (cfg, ds) = load_config(&config, data)?;
            let out = out.unwrap_or_else(|| PathBuf::from(format!("ablate-{axis}")));
            std::fs::create_dir_all(&out).map_err(|e| {
                Failure::Runtime(GdtError::Io {
                    path: out.clone(),
                    source: e,
                })
            })?;
            write_text(&out.join("config.toml"), &cfg.to_toml())?;
            let report = ablate(&cfg, &ds, axis, &out)?;
            print!("{}", report.text_table());
            Ok(())
        }
        Command::Eval {
            ckpt,
            env,
            rtg,
            episodes,
            seeds,
            floor,
            out,
        } => {
            let env: EnvSpec = env.parse()?;
            if seeds == 0 || episodes == 0 {
                return Err(Failure::Usage(
                    "--seeds and --episodes must be positive".into(),
                ));
            }
            let loaded = Gdt::load(&ckpt)?;
            let entry = SuiteEntry {
                env,
                target: rtg.unwrap_or_else(|| env.plan().optimal_return),
                floor,
            };
            let seed_list: Vec<u64> = (0..seeds).collect();
            let report = eval_report(
                &loaded.model,
                &loaded.store,
                &[entry],
                episodes,
                &seed_list,
                &env_table(&env),
            )?;
            print!("{}", report.text_table());
            if let Some(out) = out {
                report.write_csv(&out)?;
                let snap = format!(
                    "ckpt = {:?}\nenv = \"{env}\"\nrtg = {}\nepisodes = {episodes}\nseeds = {seeds}\n",
                    ckpt.display().to_string(),
                    entry.target
                );
                write_text(&snapshot_path(&out), &snap)?;
            }
            Ok(())
        }
        Command::Gradcheck { module, seed } => {
            let target: SuiteTarget = module.parse()?;
            let seed = seed_override()?.unwrap_or(seed);
            let cases = gradient_suite(target, seed)?;
            let mut ok = true;
            for case in &cases {
                println!("[{}]", case.label);
                for (group, err) in case.report.by_group() {
                    let mark = if err < GRADCHECK_TOL { "ok" } else { "FAIL" };
                    println!("  {group:<32} {err:.3e} {mark}");
                }
                ok &= case.passed();
            }
            if ok {
                Ok(())
            } else {
                Err(Failure::Runtime(GdtError::Contract(format!(
                    "relative error at or above {GRADCHECK_TOL} in {target}"
                ))))
            }
        }
    }
}

fn dataset(action: DatasetCommand) -> Outcome {
    match action {
        DatasetCommand::Synth {
            env,
            eps,
            episodes,
            out,
            seed,
        } => {
            let env: EnvSpec = env.parse()?;
            let seed = seed_override()?.unwrap_or(seed);
            let spec = SynthSpec {
                env,
                epsilons: eps,
                episodes,
                seed,
            };
            let (header, trajs) = generate_synthetic(&spec)?;
            write_dataset(&out, &header, &trajs)?;
            let eps: Vec<String> = spec.epsilons.iter().map(|e| e.to_string()).collect();
            let snap = format!(
                "env = \"{env}\"\neps = [{}]\nepisodes = {episodes}\nseed = {seed}\n",
                eps.join(", ")
            );
            write_text(&snapshot_path(&out), &snap)?;
            let steps: usize = trajs.iter().map(|t| t.len()).sum();
            println!(
                "wrote {} episodes, {steps} steps to {}",
                trajs.len(),
                out.display()
            );
            Ok(())
        }
        DatasetCommand::Validate { file } => {
            let ds = load_dataset(&file).map_err(Failure::Runtime)?;
            println!(
                "ok: {} episodes, {} steps",
                ds.stats.episodes, ds.stats.steps
            );
            Ok(())
        }
        DatasetCommand::Stats { file } => {
            let ds = load_dataset(&file).map_err(Failure::Runtime)?;
            let s = &ds.stats;
            println!("state      {:?}", ds.header.state);
            println!("action     {:?}", ds.header.action);
            println!("episodes   {}", s.episodes);
            println!("steps      {}", s.steps);
            println!("max length {}", s.max_len);
            println!(
                "return     mean {:.4} min {:.4} max {:.4}",
                s.mean_return, s.min_return, s.max_return
            );
            for (k, v) in &ds.header.metadata {
                println!("meta       {k} = {v}");
            }
            Ok(())
        }
    }
}
