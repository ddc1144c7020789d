//! Policy evaluation, plus imitation of the environment oracle for
//! building known-good checkpoints.

use serde::{Deserialize, Serialize};

use crate::envs::EnvConfig;
use crate::error::{contract, Result};
use crate::learner::Learner;
use crate::model::{Agent, RecurrentState};
use crate::tensor::{softmax_row, Gradients, Graph, ParamStore, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    Greedy,
    Sampled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeRecord {
    pub mode: ActionMode,
    pub episode: usize,
    pub seed: u64,
    pub episode_return: f64,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub env: String,
    pub n_episodes: usize,
    pub greedy_mean: f64,
    pub greedy_std: f64,
    pub sampled_mean: f64,
    pub sampled_std: f64,
    pub episodes: Vec<EpisodeRecord>,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Plays `n_episodes` greedy and `n_episodes` sampled episodes. Episode `i`
/// uses the same environment seed in both modes.
pub fn evaluate(agent: &Agent, store: &ParamStore, env: &EnvConfig, n_episodes: usize, seed: u64) -> Result<EvalSummary> {
    let mut e = env.build()?;
    if e.n_actions() != agent.n_actions() || e.obs_spec() != agent.obs_spec() {
        return Err(contract("environment does not match the agent's observation or action space"));
    }
    let mut rng = Rng::new(seed);
    let seeds: Vec<u64> = (0..n_episodes).map(|_| rng.next_u64()).collect();
    let mut episodes = Vec::with_capacity(2 * n_episodes);
    for mode in [ActionMode::Greedy, ActionMode::Sampled] {
        for (i, &s) in seeds.iter().enumerate() {
            let mut step = e.reset(s);
            let mut state = agent.initial_state();
            let mut start = true;
            let (mut ret, mut len) = (0.0, 0);
            while !step.done {
                let (policy, next) = agent.step(store, &step.observation, &state, start)?;
                let action = match mode {
                    ActionMode::Greedy => argmax(&policy.logits),
                    ActionMode::Sampled => rng.categorical(&softmax_row(&policy.logits)),
                };
                state = next;
                start = false;
                step = e.step(action)?;
                ret += step.reward;
                len += 1;
            }
            episodes.push(EpisodeRecord {
                mode,
                episode: i,
                seed: s,
                episode_return: ret,
                length: len,
            });
        }
    }
    let returns = |m: ActionMode| -> Vec<f64> {
        episodes.iter().filter(|r| r.mode == m).map(|r| r.episode_return).collect()
    };
    let (greedy_mean, greedy_std) = mean_std(&returns(ActionMode::Greedy));
    let (sampled_mean, sampled_std) = mean_std(&returns(ActionMode::Sampled));
    Ok(EvalSummary {
        env: env.name().to_string(),
        n_episodes,
        greedy_mean,
        greedy_std,
        sampled_mean,
        sampled_std,
        episodes,
    })
}

/// Trains the policy head to imitate the environment oracle by minimizing
/// cross-entropy on oracle-driven rollouts. Returns the mean per-step
/// cross-entropy of the last update.
pub fn distill_from_oracle(learner: &mut Learner, env: &EnvConfig, updates: usize, lr: f64, seed: u64) -> Result<f64> {
    let mut e = env.build()?;
    let mut rng = Rng::new(seed);
    let unroll = learner.pipeline.unroll_length;
    let mb = learner.pipeline.mini_batch;
    let dim = e.obs_spec().numel();
    let mut obs = e.reset(rng.next_u64()).observation;
    let mut start = true;
    let mut state = learner.agent.initial_state();
    let mut last = f64::NAN;
    for _ in 0..updates {
        let initial: RecurrentState = state.clone();
        let mut xs = Vec::with_capacity(unroll * dim);
        let mut starts = Vec::with_capacity(unroll);
        let mut targets = Vec::with_capacity(unroll);
        for _ in 0..unroll {
            let (_, next) = learner.agent.step(&learner.store, &obs, &state, start)?;
            state = next;
            let a = e.oracle_action();
            xs.extend_from_slice(&obs);
            starts.push(start);
            targets.push(a);
            let step = e.step(a)?;
            if step.done {
                obs = e.reset(rng.next_u64()).observation;
                start = true;
            } else {
                obs = step.observation;
                start = false;
            }
        }
        let mut g = Graph::new();
        let mut s = initial;
        let mut total = None;
        for c in 0..unroll / mb {
            let r = c * mb..(c + 1) * mb;
            let (out, next) = learner.agent.forward(&mut g, &learner.store, &xs[r.start * dim..r.end * dim], &s, &starts[r.clone()])?;
            s = next;
            let logp = g.log_softmax(out.logits);
            let picked = g.pick(logp, &targets[r])?;
            let sum = g.sum(picked);
            let nll = g.scale(sum, -1.0 / unroll as f64);
            total = Some(match total {
                None => nll,
                Some(t) => g.add(t, nll)?,
            });
        }
        let total = total.expect("unroll holds at least one chunk");
        g.backward(total)?;
        let mut grads = Gradients::zeros_like(&learner.store);
        grads.accumulate(&g);
        learner.optimizer.step(&mut learner.store, &grads, lr)?;
        learner.agent.clamp_spans(&mut learner.store);
        last = g.value(total).item();
    }
    Ok(last)
}
