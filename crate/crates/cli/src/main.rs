use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use gcpc::checkpoint::load_trajnet;
use gcpc::data::{load_dataset, write_dataset};
use gcpc::envs::{collect_dataset, AuditSummary, CollectorConfig, EnvSpec, Style};
use gcpc::pipeline::{run_eval, run_train_policy, run_train_trajnet, threads_from_env, RunConfig};
use gcpc::policy::Conditioning;
use gcpc::viz::{future_csv, future_view, maze_svg};
use gcpc::{Error, Result};

#[derive(Parser)]
#[command(name = "gcpc", version, about = "Goal-conditioned predictive coding pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvName {
    Minimaze,
    Linerun,
}

#[derive(Clone, Copy, ValueEnum)]
enum StyleArg {
    Play,
    Expert,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConditioningArg {
    Bottleneck,
    ExplicitFuture,
    None,
}

#[derive(Subcommand)]
enum Command {
    /// Collect an offline dataset with a scripted controller.
    GenData {
        #[arg(long, value_enum)]
        env: EnvName,
        #[arg(long)]
        layout: Option<String>,
        #[arg(long, value_enum, default_value = "play")]
        style: StyleArg,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Run config whose `data` section overrides collector defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 1: train the masked trajectory model.
    TrainTrajnet {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Stage 2: train the policy on a frozen TrajNet.
    TrainPolicy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        trajnet: Option<PathBuf>,
        #[arg(long, value_enum)]
        conditioning: Option<ConditioningArg>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score the last policy checkpoints of one or more runs.
    Eval {
        #[arg(long = "run", required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, num_args = 1.., value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Directory for report.json and eval metrics; the first run by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Decode the future predicted from one dataset step.
    VizFuture {
        #[arg(long)]
        trajnet: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        index: usize,
        #[arg(long)]
        t: usize,
        #[arg(long)]
        no_goal: bool,
        /// Output path; FILE.csv is always written, FILE.svg for maze data.
        #[arg(long)]
        out: PathBuf,
    },
}

fn read_json(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io { path: path.into(), source: e })?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("plain data serializes"));
}

fn gen_data(
    env: EnvName,
    layout: Option<String>,
    style: StyleArg,
    n: Option<usize>,
    seed: u64,
    config: Option<PathBuf>,
    out: &Path,
) -> Result<()> {
    let env = match (env, layout) {
        (EnvName::Minimaze, Some(l)) => EnvSpec::minimaze(&l)?,
        (EnvName::Minimaze, None) => return Err(Error::Config("minimaze needs --layout".into())),
        (EnvName::Linerun, Some(_)) => return Err(Error::Config("linerun takes no --layout".into())),
        (EnvName::Linerun, None) => EnvSpec::Linerun,
    };
    let mut cfg = match &config {
        Some(p) => {
            let user = read_json(p)?;
            RunConfig::resolve(&user, &env)?.data
        }
        None => CollectorConfig::default(),
    };
    cfg.style = match style {
        StyleArg::Play => Style::Play,
        StyleArg::Expert => Style::Expert,
    };
    if let Some(n) = n {
        cfg.n_trajectories = n;
    }
    let (meta, trajs) = collect_dataset(&env, &cfg, seed)?;
    write_dataset(out, &meta, &trajs)?;
    print_json(&AuditSummary::new(&env, &trajs)?);
    Ok(())
}

fn viz_future(trajnet: &Path, data: &Path, index: usize, t: usize, no_goal: bool, out: &Path) -> Result<()> {
    let ckpt = load_trajnet(trajnet)?;
    let ds = load_dataset(data)?;
    let view = future_view(&ckpt.model, &ckpt.stats, &ds, index, t, !no_goal)?;
    let csv = out.with_extension("csv");
    fs::write(&csv, future_csv(&view)).map_err(|e| Error::Io { path: csv.clone(), source: e })?;
    println!("{}", csv.display());
    if let Some(spec) = EnvSpec::from_meta(&ds.meta)?.maze_spec()? {
        let svg = out.with_extension("svg");
        fs::write(&svg, maze_svg(&spec, &view)?).map_err(|e| Error::Io { path: svg.clone(), source: e })?;
        println!("{}", svg.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    threads_from_env()?;
    match cli.command {
        Command::GenData { env, layout, style, n, seed, config, out } => {
            gen_data(env, layout, style, n, seed, config, &out)
        }
        Command::TrainTrajnet { config, data, seed, out } => {
            let ds = load_dataset(&data)?;
            let env = EnvSpec::from_meta(&ds.meta)?;
            let cfg = RunConfig::load(config.as_deref(), &env)?;
            let summary = run_train_trajnet(&cfg, &ds, seed, &out)?;
            println!("best validation epoch: {}", summary.best_epoch);
            print_json(&summary);
            Ok(())
        }
        Command::TrainPolicy { config, data, trajnet, conditioning, seed, out } => {
            let ds = load_dataset(&data)?;
            let env = EnvSpec::from_meta(&ds.meta)?;
            let mut cfg = RunConfig::load(config.as_deref(), &env)?;
            if let Some(c) = conditioning {
                cfg.policy.conditioning = match c {
                    ConditioningArg::Bottleneck => Conditioning::Bottleneck,
                    ConditioningArg::ExplicitFuture => Conditioning::ExplicitFuture,
                    ConditioningArg::None => Conditioning::None,
                };
            }
            print_json(&run_train_policy(&cfg, &ds, trajnet.as_deref(), seed, &out)?);
            Ok(())
        }
        Command::Eval { runs, episodes, seeds, out } => {
            let mut cfg = match fs::read_to_string(runs[0].join(gcpc::pipeline::RESOLVED_CONFIG)) {
                Ok(text) => {
                    serde_json::from_str::<RunConfig>(&text).map_err(|e| Error::Config(format!("resolved config: {e}")))?.eval
                }
                Err(_) => Default::default(),
            };
            if episodes.is_some() {
                cfg.n_episodes = episodes;
            }
            let report = run_eval(&runs, &seeds, &cfg, threads_from_env()?, out.as_deref())?;
            println!("{:<40} {:>6} {:>8}  scores", "run", "seed", "chosen");
            for r in &report.records {
                let scores: Vec<String> = r.scores.iter().map(|s| format!("{s:.1}")).collect();
                println!("{:<40} {:>6} {:>8.2}  [{}]", r.run, r.seed, r.chosen, scores.join(", "));
            }
            let a = &report.aggregate;
            println!(
                "n={} mean={:.2} std={:.2} median={:.2} iqm={:.2}",
                a.n_seeds, a.mean, a.std, a.median, a.iqm
            );
            Ok(())
        }
        Command::VizFuture { trajnet, data, index, t, no_goal, out } => {
            viz_future(&trajnet, &data, index, t, no_goal, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
