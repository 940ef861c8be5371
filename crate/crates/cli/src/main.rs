use clap::{Parser, Subcommand};
use grabs::{HarnessError, PolicySource, RunConfig};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "grabs", version, about = "Container-agent object discovery on synthetic scenes")]
struct Cli {
    /// TOML run configuration; defaults apply to missing keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the seed of the chosen command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; all cores when absent.
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate scene files.
    Gen {
        #[arg(long)]
        count: usize,
    },
    /// Train the container policy.
    Train {
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long)]
        updates: Option<usize>,
        /// Continue from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Run a policy over scenes and store the accepted masks.
    Discover {
        #[arg(long)]
        scenes: Option<PathBuf>,
        #[arg(long, conflicts_with = "random", required_unless_present = "random")]
        checkpoint: Option<PathBuf>,
        /// Use uniformly random actions instead of a checkpoint.
        #[arg(long)]
        random: bool,
        #[arg(long)]
        trajectories: Option<usize>,
    },
    /// Score a mask file against scene ground truth.
    Eval {
        #[arg(long)]
        masks: PathBuf,
        #[arg(long)]
        scenes: Option<PathBuf>,
    },
    /// Train, discover and evaluate once per value of a config key.
    Ablate {
        /// Dotted config key, e.g. env.step_size.
        #[arg(long)]
        param: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<String>,
        #[arg(long)]
        scenes: Option<PathBuf>,
        /// Held-out scenes for evaluation; the training scenes when absent.
        #[arg(long)]
        eval_scenes: Option<PathBuf>,
        #[arg(long)]
        updates: Option<usize>,
        #[arg(long)]
        trajectories: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("grabs: {e}");
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

fn required(p: Option<PathBuf>, fallback: &Option<PathBuf>, flag: &str) -> Result<PathBuf, HarnessError> {
    p.or_else(|| fallback.clone())
        .ok_or_else(|| HarnessError::Usage(format!("{flag} is required (or set it in the config)")))
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cli.out.clone().or(cfg.paths.out.clone()).unwrap_or_else(|| PathBuf::from("."));
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(HarnessError::Usage("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| HarnessError::Config(e.to_string()))?;
    let scenes_default = cfg.paths.scenes.clone();
    pool.install(|| match cli.command {
        Command::Gen { count } => {
            let files = grabs::cmd_gen(&cfg, &out, count, cli.seed.unwrap_or(cfg.seeds.gen))?;
            println!("wrote {} scenes to {}", files.len(), out.display());
            Ok(())
        }
        Command::Train { scenes, updates, resume } => {
            let scenes = required(scenes, &scenes_default, "--scenes")?;
            let updates = updates.unwrap_or(cfg.schedule.updates);
            let seed = cli.seed.unwrap_or(cfg.seeds.train);
            let run = grabs::cmd_train(&cfg, &scenes, &out, updates, seed, resume.as_deref())?;
            if let Some(last) = run.log.last() {
                println!(
                    "update {} mean reward {:.3} positive rate {:.3} masks {}",
                    last.update, last.mean_reward, last.positive_rate, last.total_masks
                );
            }
            println!("checkpoint at step {} in {}", run.checkpoint.step, out.join(grabs::POLICY_FILE).display());
            Ok(())
        }
        Command::Discover {
            scenes,
            checkpoint,
            random,
            trajectories,
        } => {
            let scenes = required(scenes, &scenes_default, "--scenes")?;
            let source = match (&checkpoint, random) {
                (_, true) => PolicySource::Random,
                (Some(p), false) => PolicySource::Checkpoint(p),
                (None, false) => return Err(HarnessError::Usage("--checkpoint or --random is required".into())),
            };
            let n = trajectories.unwrap_or(cfg.schedule.trajectories);
            let seed = cli.seed.unwrap_or(cfg.seeds.discover);
            let store = grabs::cmd_discover(&cfg, &scenes, source, &out, n, seed)?;
            println!("{} masks in {}", store.len(), out.join(grabs::MASK_FILE).display());
            Ok(())
        }
        Command::Eval { masks, scenes } => {
            let scenes = required(scenes, &scenes_default, "--scenes")?;
            let report = grabs::cmd_eval(&cfg, &masks, &scenes, &out)?;
            print!("{}", report.to_table());
            Ok(())
        }
        Command::Ablate {
            param,
            values,
            scenes,
            eval_scenes,
            updates,
            trajectories,
        } => {
            let scenes = required(scenes, &scenes_default, "--scenes")?;
            if let Some(u) = updates {
                cfg.schedule.updates = u;
            }
            if let Some(t) = trajectories {
                cfg.schedule.trajectories = t;
            }
            if let Some(s) = cli.seed {
                cfg.seeds.train = s;
                cfg.seeds.discover = s;
            }
            let grid = grabs::Grid { key: param, values };
            let rows = grabs::cmd_ablate(&cfg, &grid, &scenes, eval_scenes.as_deref().map(Path::new), &out)?;
            print!("{}", grabs::ablation_table(&grid.key, &rows));
            Ok(())
        }
    })
}
