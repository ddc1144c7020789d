//! IMPALA-style actor-learner training with chunked recurrence memory.
//!
//! Actors roll out `unroll_length` steps with a snapshot of the parameters
//! and record the behavior logits. The learner re-evaluates each trajectory
//! chunk by chunk (`mini_batch` steps at a time, memory carried and
//! detached between chunks), computes V-trace targets over the whole
//! unroll, and minimizes
//! `pg + baseline_cost * baseline + entropy_cost * entropy + λ Σ z / S_max`
//! with RMSProp under a cosine learning-rate schedule.

mod actor;
mod learn;
mod optim;
mod pipeline;
mod vtrace;

pub use actor::{Actor, Trajectory};
pub use learn::{span_penalty, Learner, LossReport, StepMetrics};
pub use optim::{clip_grad_norm, cosine_schedule, EpsilonPlacement, OptimConfig, RmsProp};
pub use pipeline::{run, worker_count, EnvFactory, Flow, PipelineStats, Snapshots, StatsSnapshot};
pub use vtrace::{vtrace, VTraceInput, VTraceOutput};

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub n_actors: usize,
    pub n_buffers: usize,
    pub unroll_length: usize,
    pub mini_batch: usize,
    pub batch_size: usize,
    /// Deterministic mode only: actors act with parameters this many
    /// updates old.
    pub snapshot_lag: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_actors: 4,
            n_buffers: 6,
            unroll_length: 64,
            mini_batch: 16,
            batch_size: 4,
            snapshot_lag: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.unroll_length == 0 || self.mini_batch == 0 || self.batch_size == 0 {
            return Err(contract("unroll_length, mini_batch and batch_size must be positive"));
        }
        if !self.unroll_length.is_multiple_of(self.mini_batch) {
            return Err(contract(format!(
                "unroll_length {} is not divisible by mini_batch {}",
                self.unroll_length, self.mini_batch
            )));
        }
        if self.n_actors == 0 || self.n_buffers == 0 {
            return Err(contract("n_actors and n_buffers must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub baseline_cost: f64,
    pub entropy_cost: f64,
    /// λ of the span penalty `λ Σ z / S_max`.
    pub span_penalty: f64,
    pub discount: f64,
    /// Rewards are clipped to `[-reward_clip, reward_clip]`.
    pub reward_clip: f64,
    pub grad_clip: f64,
    pub rho_bar: f64,
    pub c_bar: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            baseline_cost: 0.5,
            entropy_cost: 0.01,
            span_penalty: 0.025,
            discount: 0.99,
            reward_clip: 1.0,
            grad_clip: 40.0,
            rho_bar: 1.0,
            c_bar: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.baseline_cost,
            self.entropy_cost,
            self.span_penalty,
            self.reward_clip,
            self.grad_clip,
        ];
        if weights.iter().any(|&w| !(w >= 0.0 && w.is_finite())) {
            return Err(contract("loss weights and clips must be finite and non-negative"));
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return Err(contract("discount must lie in (0, 1]"));
        }
        if !(self.rho_bar >= self.c_bar && self.c_bar > 0.0) {
            return Err(contract("need rho_bar >= c_bar > 0"));
        }
        Ok(())
    }
}
