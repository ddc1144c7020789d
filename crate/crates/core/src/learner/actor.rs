use crate::envs::Env;
use crate::error::{contract, Result};
use crate::model::{Agent, RecurrentState};
use crate::tensor::{softmax_row, ParamStore, Rng};

/// One actor rollout of `T` steps.
#[derive(Clone, Debug)]
pub struct Trajectory {
    /// `T + 1` flattened observations; the last one only bootstraps.
    pub obs: Vec<f64>,
    /// `T + 1` flags marking the first step of an episode.
    pub starts: Vec<bool>,
    pub actions: Vec<usize>,
    pub behavior_logits: Vec<Vec<f64>>,
    pub rewards: Vec<f64>,
    pub dones: Vec<bool>,
    /// Recurrent state before `obs[0]` was processed.
    pub initial_state: RecurrentState,
    /// Returns of episodes that finished during this rollout.
    pub episode_returns: Vec<f64>,
    /// Parameter version the behavior policy came from.
    pub policy_version: u64,
    pub actor: usize,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn obs_dim(&self) -> usize {
        self.obs.len() / (self.len() + 1)
    }

    pub fn validate(&self) -> Result<()> {
        let t = self.len();
        let ok = t > 0
            && self.obs.len().is_multiple_of(t + 1)
            && self.starts.len() == t + 1
            && self.behavior_logits.len() == t
            && self.rewards.len() == t
            && self.dones.len() == t;
        if ok {
            Ok(())
        } else {
            Err(contract("trajectory fields have inconsistent lengths"))
        }
    }
}

/// Environment plus the agent state carried across rollouts.
pub struct Actor {
    id: usize,
    env: Box<dyn Env>,
    agent: Agent,
    rng: Rng,
    state: RecurrentState,
    obs: Vec<f64>,
    start: bool,
    episode_return: f64,
}

impl Actor {
    pub fn new(id: usize, mut env: Box<dyn Env>, agent: Agent, seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let first = env.reset(rng.next_u64());
        let state = agent.initial_state();
        Self {
            id,
            env,
            agent,
            rng,
            state,
            obs: first.observation,
            start: true,
            episode_return: 0.0,
        }
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Rolls out `unroll` steps with the given parameters, sampling actions
    /// from the policy.
    pub fn rollout(&mut self, store: &ParamStore, version: u64, unroll: usize) -> Result<Trajectory> {
        let initial_state = self.state.clone();
        let dim = self.obs.len();
        let mut obs = Vec::with_capacity((unroll + 1) * dim);
        let mut starts = Vec::with_capacity(unroll + 1);
        let mut actions = Vec::with_capacity(unroll);
        let mut behavior_logits = Vec::with_capacity(unroll);
        let mut rewards = Vec::with_capacity(unroll);
        let mut dones = Vec::with_capacity(unroll);
        let mut episode_returns = Vec::new();
        for _ in 0..unroll {
            let (policy, next) = self.agent.step(store, &self.obs, &self.state, self.start)?;
            let action = self.rng.categorical(&softmax_row(&policy.logits));
            obs.extend_from_slice(&self.obs);
            starts.push(self.start);
            let step = self.env.step(action)?;
            self.episode_return += step.reward;
            actions.push(action);
            behavior_logits.push(policy.logits);
            rewards.push(step.reward);
            dones.push(step.done);
            self.state = next;
            if step.done {
                episode_returns.push(self.episode_return);
                self.episode_return = 0.0;
                self.obs = self.env.reset(self.rng.next_u64()).observation;
                self.start = true;
            } else {
                self.obs = step.observation;
                self.start = false;
            }
        }
        obs.extend_from_slice(&self.obs);
        starts.push(self.start);
        Ok(Trajectory {
            obs,
            starts,
            actions,
            behavior_logits,
            rewards,
            dones,
            initial_state,
            episode_returns,
            policy_version: version,
            actor: self.id,
        })
    }
}
