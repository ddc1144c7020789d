use std::collections::VecDeque;

use serde::{Deserialize, Serialize};

use super::optim::{clip_grad_norm, cosine_schedule, OptimConfig, RmsProp};
use super::vtrace::{vtrace, VTraceInput};
use super::{LossConfig, PipelineConfig, Trajectory};
use crate::attention::FlopReport;
use crate::error::{contract, Error, Result};
use crate::model::{Agent, ModelConfig, ObsSpec};
use crate::tensor::{Gradients, Graph, ParamId, ParamStore, Rng, Tensor};

/// Loss components of one learner step. `total` is
/// `pg + baseline_cost * baseline + entropy_cost * entropy + span_penalty * span_l1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// `-Σ log π(a) · advantage`
    pub pg: f64,
    /// `0.5 Σ (vs - V)²`
    pub baseline: f64,
    /// `Σ π log π`, i.e. the negative entropy; `-ln A` per step when uniform.
    pub entropy: f64,
    /// `Σ z / S_max` over every head.
    pub span_l1: f64,
    /// `Σ z` in timesteps.
    pub span_raw: f64,
    pub baseline_cost: f64,
    pub entropy_cost: f64,
    pub span_penalty: f64,
}

/// One JSON-lines record per learner step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub frames: u64,
    pub lr: f64,
    pub loss: LossReport,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub grad_norm_clipped: f64,
    /// `spans[layer][head]` in timesteps; empty for models without spans.
    pub spans: Vec<Vec<f64>>,
    pub flops: FlopReport,
    pub env: String,
    pub episodes: u64,
    /// Mean return of the last 100 finished episodes.
    pub mean_return_100: Option<f64>,
    /// Mean `|π(a)/μ(a) - 1|` over the batch.
    pub mean_ratio_deviation: f64,
    /// Mean number of updates between the behavior and learner parameters.
    pub policy_lag: f64,
}

/// Owns the live parameters and optimizer state.
pub struct Learner {
    pub agent: Agent,
    pub store: ParamStore,
    pub optimizer: RmsProp,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub pipeline: PipelineConfig,
    pub total_steps: u64,
    pub step: u64,
    pub frames: u64,
    pub episodes: u64,
    env_name: String,
    pub(crate) recent_returns: VecDeque<f64>,
    rng: Rng,
}

struct TrajectoryLoss {
    pg: f64,
    baseline: f64,
    entropy: f64,
    total: f64,
    ratio_deviation: f64,
}

impl Learner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model: &ModelConfig,
        obs: ObsSpec,
        n_actions: usize,
        loss: LossConfig,
        optim: OptimConfig,
        pipeline: PipelineConfig,
        total_steps: u64,
        env_name: &str,
        seed: u64,
    ) -> Result<Self> {
        pipeline.validate()?;
        loss.validate()?;
        let mut rng = Rng::new(seed);
        let mut store = ParamStore::new();
        let agent = Agent::init(&mut store, model, obs, n_actions, &mut rng)?;
        let optimizer = RmsProp::new(&store, &optim);
        Ok(Self {
            agent,
            store,
            optimizer,
            loss,
            optim,
            pipeline,
            total_steps,
            step: 0,
            frames: 0,
            episodes: 0,
            env_name: env_name.to_string(),
            recent_returns: VecDeque::with_capacity(100),
            rng,
        })
    }

    pub fn learning_rate(&self) -> f64 {
        cosine_schedule(
            self.step,
            self.optim.learning_rate,
            self.total_steps,
            self.optim.schedule_every,
            self.optim.min_lr,
            self.optim.warmup_steps,
        )
    }

    pub fn mean_return_100(&self) -> Option<f64> {
        if self.recent_returns.is_empty() {
            None
        } else {
            Some(self.recent_returns.iter().sum::<f64>() / self.recent_returns.len() as f64)
        }
    }

    pub fn record_returns(&mut self, returns: &[f64]) {
        for &r in returns {
            if self.recent_returns.len() == 100 {
                self.recent_returns.pop_front();
            }
            self.recent_returns.push_back(r);
            self.episodes += 1;
        }
    }

    /// Gradients of the full loss for a batch, without updating anything.
    pub fn compute_gradients(&mut self, batch: &[Trajectory]) -> Result<(Gradients, LossReport, f64)> {
        if batch.len() < self.pipeline.batch_size {
            return Err(Error::BufferUnderflow {
                needed: self.pipeline.batch_size,
                got: batch.len(),
            });
        }
        let mut grads = Gradients::zeros_like(&self.store);
        let (mut pg, mut baseline, mut entropy, mut total, mut dev) = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut steps = 0usize;
        for traj in batch {
            let l = self.trajectory_loss(traj, &mut grads)?;
            pg += l.pg;
            baseline += l.baseline;
            entropy += l.entropy;
            total += l.total;
            dev += l.ratio_deviation;
            steps += traj.len();
        }
        let (span_l1, span_raw) = self.span_penalty(&mut grads)?;
        total += self.loss.span_penalty * span_l1;
        let report = LossReport {
            total,
            pg,
            baseline,
            entropy,
            span_l1,
            span_raw,
            baseline_cost: self.loss.baseline_cost,
            entropy_cost: self.loss.entropy_cost,
            span_penalty: self.loss.span_penalty,
        };
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("loss at step {}: {report:?}", self.step)));
        }
        Ok((grads, report, dev / steps as f64))
    }

    /// One optimizer update from a full batch of trajectories.
    pub fn learn_step(&mut self, batch: &[Trajectory], learner_version: u64) -> Result<StepMetrics> {
        let (mut grads, loss, ratio_dev) = self.compute_gradients(batch)?;
        let lr = self.learning_rate();
        let grad_norm = clip_grad_norm(&mut grads, self.loss.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite(format!("gradient norm at step {}", self.step)));
        }
        let grad_norm_clipped = grads.global_norm();
        self.optimizer.step(&mut self.store, &grads, lr)?;
        self.agent.clamp_spans(&mut self.store);
        self.step += 1;
        for traj in batch {
            self.frames += traj.len() as u64;
            self.record_returns(&traj.episode_returns);
        }
        let policy_lag = batch
            .iter()
            .map(|t| learner_version.saturating_sub(t.policy_version) as f64)
            .sum::<f64>()
            / batch.len() as f64;
        Ok(StepMetrics {
            step: self.step,
            frames: self.frames,
            lr,
            loss,
            grad_norm,
            grad_norm_clipped,
            spans: self.agent.span_states(&self.store).into_iter().map(|s| s.z).collect(),
            flops: self.agent.flop_report(&self.store, self.pipeline.mini_batch),
            env: self.env_name.clone(),
            episodes: self.episodes,
            mean_return_100: self.mean_return_100(),
            mean_ratio_deviation: ratio_dev,
            policy_lag,
        })
    }

    fn trajectory_loss(&mut self, traj: &Trajectory, grads: &mut Gradients) -> Result<TrajectoryLoss> {
        traj.validate()?;
        let t_len = traj.len();
        let mb = self.pipeline.mini_batch;
        if !t_len.is_multiple_of(mb) {
            return Err(contract(format!(
                "trajectory of {t_len} steps does not split into chunks of {mb}"
            )));
        }
        let dim = traj.obs_dim();
        let mut g = if self.agent.config().dropout > 0.0 {
            Graph::training(self.rng.fork())
        } else {
            Graph::new()
        };
        let mut state = traj.initial_state.clone();
        let mut chunks = Vec::with_capacity(t_len / mb);
        for c in 0..t_len / mb {
            let range = c * mb..(c + 1) * mb;
            let obs = &traj.obs[range.start * dim..range.end * dim];
            let (out, next) = self.agent.forward(&mut g, &self.store, obs, &state, &traj.starts[range])?;
            chunks.push(out);
            state = next;
        }
        let bootstrap = {
            let mut gi = Graph::inference();
            let obs = &traj.obs[t_len * dim..];
            let (out, _) = self.agent.forward(&mut gi, &self.store, obs, &state, &traj.starts[t_len..])?;
            gi.value(out.values).item()
        };

        let mut target_logits = Vec::with_capacity(t_len);
        let mut values = Vec::with_capacity(t_len);
        for out in &chunks {
            let lt = g.value(out.logits);
            for r in 0..mb {
                target_logits.push(lt.row(r).to_vec());
            }
            values.extend_from_slice(g.value(out.values).data());
        }
        let clip = self.loss.reward_clip;
        let rewards: Vec<f64> = traj.rewards.iter().map(|r| r.clamp(-clip, clip)).collect();
        let vt = vtrace(&VTraceInput {
            behavior_logits: &traj.behavior_logits,
            target_logits: &target_logits,
            actions: &traj.actions,
            rewards: &rewards,
            dones: &traj.dones,
            values: &values,
            bootstrap,
            gamma: self.loss.discount,
            rho_bar: self.loss.rho_bar,
            c_bar: self.loss.c_bar,
        })?;

        let mut pg_terms = Vec::new();
        let mut base_terms = Vec::new();
        let mut ent_terms = Vec::new();
        for (c, out) in chunks.iter().enumerate() {
            let range = c * mb..(c + 1) * mb;
            let logp = g.log_softmax(out.logits);
            let picked = g.pick(logp, &traj.actions[range.clone()])?;
            let adv = g.constant(Tensor::vector(vt.pg_advantages[range.clone()].to_vec()));
            let weighted = g.mul(picked, adv)?;
            let s = g.sum(weighted);
            pg_terms.push(g.scale(s, -1.0));

            let vs = g.constant(Tensor::vector(vt.vs[range].to_vec()));
            let diff = g.sub(vs, out.values)?;
            let sq = g.mul(diff, diff)?;
            let s = g.sum(sq);
            base_terms.push(g.scale(s, 0.5));

            let p = g.exp(logp);
            let plogp = g.mul(p, logp)?;
            ent_terms.push(g.sum(plogp));
        }
        let sum_all = |g: &mut Graph, terms: &[crate::tensor::Var]| -> Result<crate::tensor::Var> {
            let mut acc = terms[0];
            for &t in &terms[1..] {
                acc = g.add(acc, t)?;
            }
            Ok(acc)
        };
        let pg = sum_all(&mut g, &pg_terms)?;
        let baseline = sum_all(&mut g, &base_terms)?;
        let entropy = sum_all(&mut g, &ent_terms)?;
        let wb = g.scale(baseline, self.loss.baseline_cost);
        let we = g.scale(entropy, self.loss.entropy_cost);
        let total = g.add(pg, wb)?;
        let total = g.add(total, we)?;
        g.backward(total)?;
        grads.accumulate(&g);
        Ok(TrajectoryLoss {
            pg: g.value(pg).item(),
            baseline: g.value(baseline).item(),
            entropy: g.value(entropy).item(),
            total: g.value(total).item(),
            ratio_deviation: vt.ratios.iter().map(|r| (r - 1.0).abs()).sum(),
        })
    }

    /// Adds the gradient of `λ Σ z / S_max` and returns `(Σ z / S_max, Σ z)`.
    fn span_penalty(&self, grads: &mut Gradients) -> Result<(f64, f64)> {
        let ids: Vec<ParamId> = self.agent.span_params();
        if ids.is_empty() {
            return Ok((0.0, 0.0));
        }
        let mut g = Graph::new();
        let (loss, l1) = span_penalty(&mut g, &self.store, &ids, self.loss.span_penalty)?;
        let l1 = g.value(l1).item();
        g.backward(loss)?;
        grads.accumulate(&g);
        Ok((l1, l1 * self.agent.config().mem_len as f64))
    }
}

/// `λ Σ_heads z / S_max`. Span parameters already store `z / S_max`, so this
/// is `λ` times their plain sum. Returns `(penalty, Σ z / S_max)`.
pub fn span_penalty(
    g: &mut Graph,
    store: &ParamStore,
    span_ids: &[ParamId],
    lambda: f64,
) -> Result<(crate::tensor::Var, crate::tensor::Var)> {
    let mut parts = Vec::with_capacity(span_ids.len());
    for &id in span_ids {
        let p = g.param(store, id);
        parts.push(g.sum(p));
    }
    let mut l1 = parts[0];
    for &p in &parts[1..] {
        l1 = g.add(l1, p)?;
    }
    Ok((g.scale(l1, lambda), l1))
}
