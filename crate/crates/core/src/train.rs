//! Training runs: metrics, checkpoints and the final summary in one
//! directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::learner::{run, Flow, Learner, StatsSnapshot, StepMetrics};
use crate::metrics::{MetricsWriter, METRICS_FILE};
use crate::model::ModelKind;

pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.json";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub env: String,
    pub model: ModelKind,
    pub n_layers: usize,
    pub parameters: usize,
    pub steps: u64,
    pub frames: u64,
    pub episodes: u64,
    /// Mean return of the last 100 finished episodes.
    pub mean_return_100: Option<f64>,
    /// `spans[layer][head]` at the end of training.
    pub spans: Vec<Vec<f64>>,
    pub max_span_per_layer: Vec<f64>,
    pub flop_ratio: f64,
    pub trajectories_produced: u64,
    pub trajectories_consumed: u64,
    pub trajectories_in_flight: u64,
    pub actor_restarts: u64,
    pub wall_seconds: f64,
    pub checkpoint: PathBuf,
}

#[derive(Serialize)]
struct Diagnostic<'a> {
    error: String,
    step: u64,
    last_metrics: Option<&'a StepMetrics>,
    /// `(name, l2 norm, all finite)` per parameter tensor.
    parameters: Vec<(String, f64, bool)>,
}

fn checkpoint_path(out: &Path, step: u64) -> PathBuf {
    out.join("checkpoints").join(format!("step_{step:08}.ckpt"))
}

/// Heads with spans per layer, for CSV column layout.
pub fn span_layout(cfg: &RunConfig) -> Vec<usize> {
    if cfg.model.kind == ModelKind::Adaptive {
        vec![cfg.model.n_heads; cfg.model.n_layers]
    } else {
        Vec::new()
    }
}

/// Runs training into `out`. With `resume`, continues from that
/// checkpoint's parameters, optimizer state and counters, appending to the
/// existing metrics file.
pub fn train(cfg: &RunConfig, out: &Path, resume: Option<&Checkpoint>) -> Result<TrainSummary> {
    std::fs::create_dir_all(out.join("checkpoints"))?;
    std::fs::write(out.join(CONFIG_FILE), cfg.to_json() + "\n")?;
    let mut learner = cfg.build_learner()?;
    let metrics_path = out.join(METRICS_FILE);
    let mut writer = match resume {
        Some(ck) => {
            ck.restore(&mut learner)?;
            MetricsWriter::append(&metrics_path)?
        }
        None => MetricsWriter::create(&metrics_path)?,
    };
    let every = cfg.checkpoint_interval();
    let started = Instant::now();
    let mut last: Option<StepMetrics> = None;

    let result = run(&mut learner, cfg.env_factory(), cfg.seed, cfg.deterministic, &mut |l, m| {
        writer.write(m)?;
        if m.step % every == 0 && m.step < l.total_steps {
            Checkpoint::from_learner(l, cfg).save(&checkpoint_path(out, m.step))?;
        }
        if m.step % 100 == 0 {
            log::info!(
                "step {} frames {} return {:?} loss {:.4} spans {:?}",
                m.step,
                m.frames,
                m.mean_return_100,
                m.loss.total,
                m.flops.max_span_per_layer
            );
        }
        last = Some(m.clone());
        Ok(Flow::Continue)
    });

    let stats: StatsSnapshot = match result {
        Ok(s) => s,
        Err(e) => {
            write_diagnostic(out, &learner, last.as_ref(), &e)?;
            return Err(e);
        }
    };
    let final_path = out.join(FINAL_CHECKPOINT);
    Checkpoint::from_learner(&learner, cfg).save(&final_path)?;
    let flops = learner.agent.flop_report(&learner.store, cfg.pipeline.mini_batch);
    let summary = TrainSummary {
        env: cfg.env.name().to_string(),
        model: cfg.model.kind,
        n_layers: cfg.model.n_layers,
        parameters: learner.store.num_scalars(),
        steps: learner.step,
        frames: learner.frames,
        episodes: learner.episodes,
        mean_return_100: learner.mean_return_100(),
        spans: learner.agent.span_states(&learner.store).into_iter().map(|s| s.z).collect(),
        max_span_per_layer: flops.max_span_per_layer.clone(),
        flop_ratio: flops.ratio,
        trajectories_produced: stats.produced,
        trajectories_consumed: stats.consumed,
        trajectories_in_flight: stats.in_flight,
        actor_restarts: stats.restarts,
        wall_seconds: started.elapsed().as_secs_f64(),
        checkpoint: final_path,
    };
    std::fs::write(out.join(SUMMARY_FILE), serde_json::to_string_pretty(&summary)? + "\n")?;
    Ok(summary)
}

fn write_diagnostic(out: &Path, learner: &Learner, last: Option<&StepMetrics>, err: &Error) -> Result<()> {
    let parameters = learner
        .store
        .iter()
        .map(|(_, name, t)| {
            let norm = t.data().iter().map(|x| x * x).sum::<f64>().sqrt();
            (name.to_string(), norm, t.all_finite())
        })
        .collect();
    let d = Diagnostic {
        error: err.to_string(),
        step: learner.step,
        last_metrics: last,
        parameters,
    };
    std::fs::write(out.join(DIAGNOSTIC_FILE), serde_json::to_string_pretty(&d)? + "\n")?;
    Ok(())
}
