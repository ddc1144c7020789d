use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use adaspan::bench::bench;
use adaspan::checkpoint::Checkpoint;
use adaspan::config::RunConfig;
use adaspan::eval::evaluate;
use adaspan::metrics::export_csv;
use adaspan::train::{span_layout, train, CONFIG_FILE};

/// Stable TransformerXL agents with adaptive attention spans.
#[derive(Parser)]
#[command(version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an agent and write metrics, checkpoints and a summary.
    Train(RunArgs),
    /// Greedy and sampled returns of a checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, default_value_t = 100)]
        episodes: usize,
    },
    /// Attention FLOPs and learner step time, adaptive against fixed spans.
    Bench {
        #[command(flatten)]
        run: RunArgs,
        /// Span per layer applied to every head, e.g. `33,2,2`.
        #[arg(long, value_delimiter = ',')]
        spans: Option<Vec<f64>>,
        #[arg(long, default_value_t = 5)]
        reps: usize,
    },
    /// Export a run's metrics to returns.csv, spans.csv and flops.csv.
    Report {
        /// Run directory; defaults to `--out`.
        run_dir: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// One training run per value of the config's `sweep` section.
    Sweep(RunArgs),
}

#[derive(Args, Clone)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    deterministic: bool,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => match &self.checkpoint {
                Some(ck) => Checkpoint::load(ck)?.config,
                None => RunConfig::default(),
            },
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if self.deterministic {
            cfg.deterministic = true;
        }
        if let Some(o) = &self.out {
            cfg.out_dir = o.display().to_string();
        }
        Ok(cfg)
    }

    fn checkpoint(&self) -> Result<Option<Checkpoint>> {
        self.checkpoint
            .as_ref()
            .map(|p| Checkpoint::load(p).with_context(|| format!("loading {}", p.display())))
            .transpose()
    }
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn run_train(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let resume = args.checkpoint()?;
    let out = PathBuf::from(&cfg.out_dir);
    let summary = train(&cfg, &out, resume.as_ref())?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn run_eval(args: &RunArgs, episodes: usize) -> Result<()> {
    let Some(ck) = args.checkpoint()? else {
        bail!("eval needs --checkpoint");
    };
    let cfg = args.resolve()?;
    if cfg.model != ck.config.model || cfg.env != ck.config.env {
        bail!("checkpoint was trained with a different model or environment than the config");
    }
    let learner = ck.into_learner()?;
    let summary = evaluate(&learner.agent, &learner.store, &cfg.env, episodes, cfg.seed)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("eval.json"), &serde_json::to_value(&summary)?)?;
    }
    println!(
        "{}: greedy {:.3} ± {:.3}, sampled {:.3} ± {:.3} over {} episodes",
        summary.env, summary.greedy_mean, summary.greedy_std, summary.sampled_mean, summary.sampled_std, episodes
    );
    Ok(())
}

fn run_bench(args: &RunArgs, spans: Option<&[f64]>, reps: usize) -> Result<()> {
    let cfg = args.resolve()?;
    let ck = args.checkpoint()?;
    let report = bench(&cfg, ck.as_ref(), spans, reps)?;
    if let Some(out) = &args.out {
        std::fs::create_dir_all(out)?;
        write_json(&out.join("bench.json"), &serde_json::to_value(&report)?)?;
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn run_report(dir: &Path) -> Result<()> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg = RunConfig::load(&cfg_path).with_context(|| format!("loading {}", cfg_path.display()))?;
    let files = export_csv(dir, &span_layout(&cfg))?;
    println!(
        "{} rows -> {}, {}, {}",
        files.rows,
        files.returns.display(),
        files.spans.display(),
        files.flops.display()
    );
    Ok(())
}

fn run_sweep(args: &RunArgs) -> Result<()> {
    let cfg = args.resolve()?;
    let Some(sweep) = cfg.sweep.clone() else {
        bail!("config has no sweep section");
    };
    let root = PathBuf::from(&cfg.out_dir);
    let key = serde_json::to_value(sweep.key)?;
    let key = key.as_str().unwrap_or("value");
    let mut results = Vec::new();
    for &v in &sweep.values {
        let mut member = cfg.with_sweep_value(sweep.key, v);
        let dir = root.join(format!("{key}_{v}"));
        member.out_dir = dir.display().to_string();
        log::info!("sweep member {key} = {v} -> {}", dir.display());
        let s = train(&member, &dir, None)?;
        results.push(serde_json::json!({
            "value": v,
            "run_dir": dir,
            "mean_return_100": s.mean_return_100,
            "max_span_per_layer": s.max_span_per_layer,
            "flop_ratio": s.flop_ratio,
        }));
    }
    let summary = serde_json::json!({ "key": key, "runs": results });
    write_json(&root.join("sweep.json"), &summary)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match &cli.command {
        Command::Train(a) => run_train(a),
        Command::Eval { run, episodes } => run_eval(run, *episodes),
        Command::Bench { run, spans, reps } => run_bench(run, spans.as_deref(), *reps),
        Command::Report { run_dir, out } => {
            let Some(dir) = run_dir.as_ref().or(out.as_ref()) else {
                bail!("report needs a run directory");
            };
            run_report(dir)
        }
        Command::Sweep(a) => run_sweep(a),
    }
}
