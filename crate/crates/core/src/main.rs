use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use activeloc::anl::{self, TrainConfig};
use activeloc::harness::{
    build_test_set, default_lengths, episodes_to_csv, evaluate, parse_config, render_strip,
    set_train_key, trace_episode, ExperimentConfig, Method, ResultsTable, TestSet, DEFAULT_SIZES,
};
use activeloc::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "activeloc",
    version,
    about = "Active localization in 2D mazes: filters, baselines and a learned localizer"
)]
struct Cli {
    /// Base seed (test-set seed for eval/bench/render, training seed for train).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Flat key=value configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded held-out maze set.
    GenTestset {
        #[arg(long, default_value_t = 7)]
        size: usize,
        #[arg(long, default_value_t = 1000)]
        count: usize,
    },
    /// Train the neural localizer.
    Train(TrainArgs),
    /// Evaluate one method on one test set.
    Eval(EvalArgs),
    /// Evaluate methods over a grid of map sizes and episode lengths.
    Bench(BenchArgs),
    /// Render the beliefs of one episode as a PPM strip.
    Render(RenderArgs),
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
    /// Wall-clock budget in seconds.
    #[arg(long)]
    time_budget: Option<f64>,
    /// Budget in environment steps; disables the wall-clock budget unless
    /// --time-budget is also given.
    #[arg(long)]
    steps: Option<u64>,
    /// Start from an existing checkpoint.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Maze-set file (otherwise generated from --seed).
    #[arg(long)]
    testset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Take the most probable action instead of sampling (anl only).
    #[arg(long)]
    greedy: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = ["markov".to_string(), "aml-fast".to_string(), "aml-slow".to_string()])]
    methods: Vec<String>,
    #[arg(long, value_delimiter = ',')]
    sizes: Vec<usize>,
    /// Episode lengths (default: the standard pair for each size).
    #[arg(long, value_delimiter = ',')]
    lengths: Vec<usize>,
    #[arg(long)]
    episodes: Option<usize>,
    /// Checkpoint for `anl`; used for cells matching its map size.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct RenderArgs {
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    episode_len: Option<usize>,
    /// Test-set entry to render.
    #[arg(long, default_value_t = 0)]
    index: usize,
    #[arg(long)]
    testset: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

fn read_config(path: Option<&Path>) -> Result<Vec<(String, String)>> {
    match path {
        Some(p) => parse_config(&std::fs::read_to_string(p).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(p.to_path_buf())
            } else {
                e.into()
            }
        })?),
        None => Ok(Vec::new()),
    }
}

fn experiment(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::default();
    for (k, v) in read_config(cli.config.as_deref())? {
        cfg.set(&k, &v)?;
    }
    if let Some(s) = cli.seed {
        cfg.test_seed = s;
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    Ok(cfg)
}

fn load_or_build(cfg: &ExperimentConfig) -> Result<TestSet> {
    let set = match &cfg.testset {
        Some(p) => TestSet::load(p)?,
        None => build_test_set(cfg.episodes, cfg.map_size, cfg.test_seed)?,
    };
    Ok(set.truncated(cfg.episodes))
}

fn write_results(out: &Path, table: &ResultsTable) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("results.csv"), table.to_csv()?)?;
    std::fs::write(out.join("results.json"), table.to_json()?)?;
    print!("{}", table.to_text());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenTestset { size, count } => {
            let set = build_test_set(*count, *size, cli.seed.unwrap_or(7))?;
            let path = cli.out.join(format!("testset_{size}x{size}.txt"));
            set.save(&path)?;
            println!("{}", path.display());
        }
        Command::Train(args) => {
            let mut cfg = TrainConfig::default();
            for (k, v) in read_config(cli.config.as_deref())? {
                set_train_key(&mut cfg, &k, &v)?;
            }
            if let Some(s) = cli.seed {
                cfg.seed = s;
            }
            if let Some(w) = cli.workers {
                cfg.workers = w;
            }
            if let Some(s) = args.size {
                cfg.map_size = s;
            }
            if let Some(l) = args.episode_len {
                cfg.episode_len = l;
            }
            if let Some(n) = args.steps {
                cfg.step_budget = Some(n);
                cfg.time_budget_s = args.time_budget;
            } else if let Some(t) = args.time_budget {
                cfg.time_budget_s = Some(t);
            }
            let init = match &args.init {
                Some(p) => Some(anl::load_checkpoint(p)?.1),
                None => None,
            };
            let summary = anl::train(&cfg, init, &cli.out)?;
            println!(
                "steps {} updates {} episodes {} best validation accuracy {:.3}\nbest: {}\nlast: {}",
                summary.env_steps,
                summary.updates,
                summary.episodes,
                summary.best_validation_accuracy,
                summary.best_checkpoint.display(),
                summary.last_checkpoint.display()
            );
        }
        Command::Eval(args) => {
            let mut cfg = experiment(&cli)?;
            if let Some(m) = &args.method {
                cfg.method = m.clone();
            }
            if let Some(s) = args.size {
                cfg.map_size = s;
            }
            if let Some(l) = args.episode_len {
                cfg.episode_len = Some(l);
            }
            if let Some(e) = args.episodes {
                cfg.episodes = e;
            }
            if let Some(t) = &args.testset {
                cfg.testset = Some(t.clone());
            }
            if let Some(c) = &args.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            cfg.greedy |= args.greedy;
            let method = cfg.resolve_method()?;
            let set = load_or_build(&cfg)?;
            let size = set
                .map_size()
                .ok_or_else(|| Error::Config("empty or mixed-size test set".into()))?;
            let len = cfg.episode_len.unwrap_or(default_lengths(size)[0]);
            let result = evaluate(&method, &set, len, cfg.workers)?;
            std::fs::create_dir_all(&cli.out)?;
            std::fs::write(
                cli.out.join("episodes.csv"),
                episodes_to_csv(&result.episodes)?,
            )?;
            write_results(
                &cli.out,
                &ResultsTable {
                    rows: vec![result.row],
                },
            )?;
        }
        Command::Bench(args) => {
            let mut cfg = experiment(&cli)?;
            if let Some(e) = args.episodes {
                cfg.episodes = e;
            }
            if let Some(c) = &args.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            let sizes = if args.sizes.is_empty() {
                DEFAULT_SIZES.to_vec()
            } else {
                args.sizes.clone()
            };
            let anl_size = match &cfg.checkpoint {
                Some(p) if args.methods.iter().any(|m| m == "anl") => {
                    Some(anl::load_checkpoint(p)?.0.config().rows)
                }
                _ => None,
            };
            let mut table = ResultsTable::default();
            for &size in &sizes {
                let set = build_test_set(cfg.episodes, size, cfg.test_seed)?;
                let lengths = if args.lengths.is_empty() {
                    default_lengths(size)
                } else {
                    args.lengths.clone()
                };
                for &len in &lengths {
                    for name in &args.methods {
                        if name == "anl" && anl_size != Some(size) {
                            eprintln!("skipping anl on {size}x{size}: no checkpoint for this size");
                            continue;
                        }
                        cfg.method = name.clone();
                        let method: Method = cfg.resolve_method()?;
                        table
                            .rows
                            .push(evaluate(&method, &set, len, cfg.workers)?.row);
                    }
                }
            }
            write_results(&cli.out, &table)?;
        }
        Command::Render(args) => {
            let mut cfg = experiment(&cli)?;
            if let Some(m) = &args.method {
                cfg.method = m.clone();
            }
            if let Some(s) = args.size {
                cfg.map_size = s;
            }
            if let Some(t) = &args.testset {
                cfg.testset = Some(t.clone());
            }
            if let Some(c) = &args.checkpoint {
                cfg.checkpoint = Some(c.clone());
            }
            let method = cfg.resolve_method()?;
            let set = match &cfg.testset {
                Some(p) => TestSet::load(p)?,
                None => build_test_set(args.index + 1, cfg.map_size, cfg.test_seed)?,
            };
            let size = set
                .map_size()
                .ok_or_else(|| Error::Config("empty or mixed-size test set".into()))?;
            let len = args
                .episode_len
                .or(cfg.episode_len)
                .unwrap_or(default_lengths(size)[0]);
            let frames = trace_episode(&method, &set, args.index, len)?;
            let img = render_strip(&frames, &set.records[args.index].map);
            std::fs::create_dir_all(&cli.out)?;
            let path = cli
                .out
                .join(format!("episode_{}_{}.ppm", method.name(), args.index));
            img.save_ppm(&path)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
