//! Attention compute benchmark: cost-model FLOPs and measured learner step
//! time for adaptive spans against fixed full-memory attention at the same
//! memory length.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{FlopReport, MemoryState};
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::error::{contract, Result};
use crate::learner::{Learner, Trajectory};
use crate::model::{ModelKind, RecurrentState};
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub mem_len: usize,
    pub ramp: usize,
    pub chunk_len: usize,
    pub unroll_length: usize,
    /// `spans[layer][head]` of the adaptive model.
    pub spans: Vec<Vec<f64>>,
    pub flops: FlopReport,
    pub adaptive_step_seconds: Vec<f64>,
    pub fixed_step_seconds: Vec<f64>,
    pub adaptive_median_seconds: f64,
    pub fixed_median_seconds: f64,
    /// Adaptive over fixed median step time.
    pub time_ratio: f64,
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// A single-episode trajectory from uniformly random actions whose
/// memory already holds `mem_len` rows, so every chunk sees a full context.
fn synthetic_trajectory(cfg: &RunConfig, seed: u64) -> Result<Trajectory> {
    let mut rng = Rng::new(seed);
    let mut env = cfg.env.build()?;
    let t = cfg.pipeline.unroll_length;
    let a = env.n_actions();
    let m = &cfg.model;
    let mut memory = MemoryState::new(m.n_layers, m.d_model, m.mem_len);
    for layer in 0..m.n_layers {
        let rows: Vec<f64> = (0..m.mem_len * m.d_model).map(|_| rng.uniform(-1.0, 1.0)).collect();
        memory.push(layer, &rows);
    }
    let mut obs = Vec::new();
    let mut rewards = Vec::with_capacity(t);
    let mut actions = Vec::with_capacity(t);
    let mut step = env.reset(rng.next_u64());
    for _ in 0..t {
        obs.extend_from_slice(&step.observation);
        let action = rng.below(a);
        actions.push(action);
        step = env.step(action)?;
        rewards.push(step.reward);
        if step.done {
            step = env.reset(rng.next_u64());
        }
    }
    obs.extend_from_slice(&step.observation);
    Ok(Trajectory {
        obs,
        starts: vec![false; t + 1],
        actions,
        behavior_logits: vec![vec![0.0; a]; t],
        rewards,
        dones: vec![false; t],
        initial_state: RecurrentState::Memory(memory),
        episode_returns: Vec::new(),
        policy_version: 0,
        actor: 0,
    })
}

/// Sets every head of layer `l` to `spans[l]` timesteps.
pub fn set_layer_spans(learner: &mut Learner, spans: &[f64]) -> Result<()> {
    let ids = learner.agent.span_params();
    if ids.len() != spans.len() {
        return Err(contract(format!(
            "{} span values for {} adaptive layers",
            spans.len(),
            ids.len()
        )));
    }
    let s_max = learner.agent.config().mem_len as f64;
    for (&id, &z) in ids.iter().zip(spans) {
        learner.store.get_mut(id).data_mut().fill(z / s_max);
    }
    learner.agent.clamp_spans(&mut learner.store);
    Ok(())
}

/// Times `reps` learner gradient evaluations for the adaptive model described by `cfg`
/// (spans from `checkpoint`, else `layer_spans`, else initialization) and
/// for the same model with fixed full-memory attention.
pub fn bench(cfg: &RunConfig, checkpoint: Option<&Checkpoint>, layer_spans: Option<&[f64]>, reps: usize) -> Result<BenchReport> {
    if cfg.model.kind != ModelKind::Adaptive {
        return Err(contract("bench needs an adaptive model config"));
    }
    let reps = reps.max(1);
    let mut adaptive = cfg.build_learner()?;
    if let Some(ck) = checkpoint {
        ck.restore_params(&mut adaptive.store)?;
    } else if let Some(s) = layer_spans {
        set_layer_spans(&mut adaptive, s)?;
    }
    let mut fixed_cfg = cfg.clone();
    fixed_cfg.model.kind = ModelKind::Stable;
    let mut fixed = fixed_cfg.build_learner()?;
    let spans_before = adaptive.agent.span_states(&adaptive.store);
    let flops = adaptive.agent.flop_report(&adaptive.store, cfg.pipeline.mini_batch);

    let traj = synthetic_trajectory(cfg, cfg.seed)?;
    let batch = vec![traj; cfg.pipeline.batch_size];
    let time = |l: &mut Learner| -> Result<f64> {
        let t0 = Instant::now();
        let (grads, _, _) = l.compute_gradients(&batch)?;
        let elapsed = t0.elapsed().as_secs_f64();
        std::hint::black_box(grads);
        Ok(elapsed)
    };
    let mut a_times = Vec::with_capacity(reps);
    let mut f_times = Vec::with_capacity(reps);
    // one untimed warmup each, then alternate
    time(&mut adaptive)?;
    time(&mut fixed)?;
    for _ in 0..reps {
        a_times.push(time(&mut adaptive)?);
        f_times.push(time(&mut fixed)?);
    }
    let (am, fm) = (median(&a_times), median(&f_times));
    Ok(BenchReport {
        mem_len: cfg.model.mem_len,
        ramp: cfg.model.ramp,
        chunk_len: cfg.pipeline.mini_batch,
        unroll_length: cfg.pipeline.unroll_length,
        spans: spans_before.into_iter().map(|s| s.z).collect(),
        flops,
        adaptive_step_seconds: a_times,
        fixed_step_seconds: f_times,
        adaptive_median_seconds: am,
        fixed_median_seconds: fm,
        time_ratio: am / fm,
    })
}
