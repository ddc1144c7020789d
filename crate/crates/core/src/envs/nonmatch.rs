use serde::{Deserialize, Serialize};

use super::{Env, EnvStep};
use crate::error::{contract, Error, Result};
use crate::model::ObsSpec;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NonMatchConfig {
    pub n_objects: usize,
    pub cue_len: usize,
    pub delay: usize,
}

impl Default for NonMatchConfig {
    fn default() -> Self {
        Self {
            n_objects: 4,
            cue_len: 1,
            delay: 8,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Phase {
    Cue,
    Delay,
    Choice,
}

/// Delayed non-matching-to-sample.
///
/// A cue object is shown for `cue_len` steps, then `delay` steps of random
/// distractor objects, then two objects side by side: the cue and a
/// different one. Action 0 picks the left object, 1 the right; picking the
/// object that does not match the cue pays +1, the match -1. Actions before
/// the choice have no effect.
///
/// Observation layout: phase one-hot (3), cue slot (K), distractor slot (K),
/// left object (K), right object (K).
#[derive(Clone, Debug)]
pub struct NonMatch {
    cfg: NonMatchConfig,
    rng: Rng,
    cue: usize,
    other: usize,
    cue_on_left: bool,
    t: usize,
    done: bool,
}

impl NonMatch {
    pub fn new(cfg: NonMatchConfig) -> Result<Self> {
        if cfg.n_objects < 2 || cfg.cue_len < 1 {
            return Err(contract("nonmatch needs n_objects >= 2 and cue_len >= 1"));
        }
        Ok(Self {
            cfg,
            rng: Rng::new(0),
            cue: 0,
            other: 1,
            cue_on_left: true,
            t: 0,
            done: true,
        })
    }

    pub fn cue(&self) -> usize {
        self.cue
    }

    fn phase(&self) -> Phase {
        if self.t < self.cfg.cue_len {
            Phase::Cue
        } else if self.t < self.cfg.cue_len + self.cfg.delay {
            Phase::Delay
        } else {
            Phase::Choice
        }
    }

    fn observe(&mut self, reward: f64) -> EnvStep {
        let k = self.cfg.n_objects;
        let mut obs = vec![0.0; 3 + 4 * k];
        if !self.done {
            match self.phase() {
                Phase::Cue => {
                    obs[0] = 1.0;
                    obs[3 + self.cue] = 1.0;
                }
                Phase::Delay => {
                    obs[1] = 1.0;
                    let d = self.rng.below(k);
                    obs[3 + k + d] = 1.0;
                }
                Phase::Choice => {
                    obs[2] = 1.0;
                    let (left, right) = if self.cue_on_left {
                        (self.cue, self.other)
                    } else {
                        (self.other, self.cue)
                    };
                    obs[3 + 2 * k + left] = 1.0;
                    obs[3 + 3 * k + right] = 1.0;
                }
            }
        }
        EnvStep {
            observation: obs,
            reward,
            done: self.done,
            episode_step: self.t,
        }
    }
}

impl Env for NonMatch {
    fn obs_spec(&self) -> ObsSpec {
        ObsSpec::Vector {
            dim: 3 + 4 * self.cfg.n_objects,
        }
    }

    fn n_actions(&self) -> usize {
        2
    }

    fn reset(&mut self, seed: u64) -> EnvStep {
        self.rng = Rng::new(seed);
        let k = self.cfg.n_objects;
        self.cue = self.rng.below(k);
        self.other = (self.cue + 1 + self.rng.below(k - 1)) % k;
        self.cue_on_left = self.rng.bernoulli(0.5);
        self.t = 0;
        self.done = false;
        self.observe(0.0)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= 2 {
            return Err(Error::InvalidAction { action, n_actions: 2 });
        }
        let mut reward = 0.0;
        if self.phase() == Phase::Choice {
            let picked_left = action == 0;
            reward = if picked_left == self.cue_on_left { -1.0 } else { 1.0 };
            self.done = true;
        }
        self.t += 1;
        Ok(self.observe(reward))
    }

    fn oracle_action(&self) -> usize {
        // pick the side that does not hold the cue
        if self.cue_on_left {
            1
        } else {
            0
        }
    }

    fn max_episode_len(&self) -> usize {
        self.cfg.cue_len + self.cfg.delay + 1
    }
}
