use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use minute::driver::{Pipeline, Profile, RunConfig, RunManifest, Stage};
use minute::evaluation::{self, recall_at_k_iou, vr_recall_at_k, Task};

#[derive(Parser)]
#[command(name = "minute", version, about = "Two-stage video corpus moment retrieval")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct RunArgs {
    /// JSON run config; without it the chosen profile's defaults are used.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Default settings used when no config file is given.
    #[arg(long, value_enum, default_value_t = Profile::Desk)]
    profile: Profile,
    /// Overrides `seed` from the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides `out_dir` from the config.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Score a standalone predictions file instead of a run directory.
    #[arg(long, requires_all = ["gt", "task", "k"])]
    predictions: Option<PathBuf>,
    /// Query file with ground-truth moments.
    #[arg(long)]
    gt: Option<PathBuf>,
    /// vcmr, svmr or vr.
    #[arg(long)]
    task: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.5)]
    iou: f64,
    /// Count a hit only when IoU exceeds the threshold.
    #[arg(long)]
    strict: bool,
    /// Retrieval lists, needed for `--task vr`.
    #[arg(long)]
    rank_lists: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus.
    GenData(RunArgs),
    /// Train the video retriever.
    TrainRetriever(RunArgs),
    /// Encode every corpus video into the search index.
    BuildIndex(RunArgs),
    /// Train the moment localizer on retriever-sampled negatives.
    TrainLocalizer(RunArgs),
    /// Rank moments for the eval queries under both scoring modes.
    Infer(RunArgs),
    /// Compute recall metrics for a run, or for one predictions file.
    Eval(EvalArgs),
    /// Profile which retrieval ranks the top-1 moments come from.
    BiasReport(RunArgs),
    /// Run every stage, resuming from the earliest missing artifact.
    RunAll(RunArgs),
    /// Print the resolved run config as JSON.
    ShowConfig(RunArgs),
}

fn resolve(args: &RunArgs) -> Result<(RunConfig, PathBuf)> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::profile(args.profile),
    };
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &args.out_dir {
        cfg.out_dir = Some(dir.clone());
    }
    let out = cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"));
    Ok((cfg, out))
}

fn run_stage(args: &RunArgs, stage: Stage) -> Result<()> {
    let (cfg, out) = resolve(args)?;
    let mut pipeline = Pipeline::new(cfg, &out)?;
    pipeline.run_stage(stage)?;
    println!("{} done: {}", stage.name(), out.display());
    Ok(())
}

fn standalone_eval(args: &EvalArgs, predictions: &Path) -> Result<()> {
    let gt_path = args.gt.as_ref().context("--gt is required")?;
    let task_name = args.task.as_deref().context("--task is required")?;
    let Some(task) = Task::parse(task_name) else {
        bail!("unknown task {task_name:?}; expected vcmr, svmr or vr");
    };
    let k = args.k.context("--k is required")?;
    let gt = evaluation::read_ground_truth(gt_path)?;
    let value = if task == Task::Vr {
        let lists = args.rank_lists.as_ref().context("--task vr needs --rank-lists")?;
        vr_recall_at_k(&evaluation::read_rank_lists(lists)?, &gt, k)?
    } else {
        let preds = evaluation::read_predictions(predictions)?;
        recall_at_k_iou(&preds, &gt, task, k, args.iou, args.strict)?
    };
    println!("{value}");
    Ok(())
}

fn print_summary(m: &RunManifest) {
    let bias = &m.metrics.bias.profile;
    println!("seed {}  total {:.1}s", m.seed, m.total_seconds);
    for t in &m.timings {
        println!("  {:<16} {:>8.1}s{}", t.stage, t.seconds, if t.ran { "" } else { "  (reused)" });
    }
    if let Some(r) = m.metrics.eval.values().next() {
        for k in [1, 5, 10] {
            if let Some(v) = r.get(Task::Vr, k, None) {
                println!("  VR R@{k}: {v:.2}");
            }
        }
    }
    println!("  VCMR R@1 IoU={} by number of retrieved videos:", bias.iou);
    for mode in &bias.modes {
        let curve: Vec<String> = mode.recall_at_1.iter().map(|p| format!("K{}={:.1}", p.k, p.value)).collect();
        println!(
            "    {:<22} {}  top-2 source share {:.3}",
            mode.scoring_mode,
            curve.join(" "),
            mode.head_fraction(2)
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => run_stage(&a, Stage::GenData),
        Command::TrainRetriever(a) => run_stage(&a, Stage::TrainRetriever),
        Command::BuildIndex(a) => run_stage(&a, Stage::BuildIndex),
        Command::TrainLocalizer(a) => run_stage(&a, Stage::TrainLocalizer),
        Command::Infer(a) => run_stage(&a, Stage::Infer),
        Command::Eval(a) => match &a.predictions {
            Some(p) => standalone_eval(&a, p),
            None => {
                run_stage(&a.run, Stage::Eval)?;
                let (_, out) = resolve(&a.run)?;
                print!("{}", std::fs::read_to_string(out.join("metrics.csv"))?);
                Ok(())
            }
        },
        Command::BiasReport(a) => {
            run_stage(&a, Stage::BiasReport)?;
            let (_, out) = resolve(&a)?;
            print!("{}", std::fs::read_to_string(out.join("bias.csv"))?);
            Ok(())
        }
        Command::RunAll(a) => {
            let (cfg, out) = resolve(&a)?;
            let manifest = Pipeline::new(cfg, &out)?.run_all()?;
            print_summary(&manifest);
            println!("manifest: {}", out.join("manifest.json").display());
            Ok(())
        }
        Command::ShowConfig(a) => {
            let (cfg, _) = resolve(&a)?;
            print!("{}", cfg.to_json());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
