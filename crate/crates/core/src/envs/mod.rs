//! Toy environments: a reactive catch game and a delayed non-matching
//! choice task that needs memory.

mod catch;
mod nonmatch;

pub use catch::{Catch, CatchConfig};
pub use nonmatch::{NonMatch, NonMatchConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ObsSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct EnvStep {
    pub observation: Vec<f64>,
    pub reward: f64,
    pub done: bool,
    pub episode_step: usize,
}

pub trait Env: Send {
    fn obs_spec(&self) -> ObsSpec;

    fn n_actions(&self) -> usize;

    /// Starts a new episode fully determined by `seed`.
    fn reset(&mut self, seed: u64) -> EnvStep;

    fn step(&mut self, action: usize) -> Result<EnvStep>;

    /// Optimal action using privileged state (the hidden cue, the ball
    /// column). Test and distillation support only; training never calls it.
    fn oracle_action(&self) -> usize;

    /// Upper bound on episode length.
    fn max_episode_len(&self) -> usize;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum EnvConfig {
    Catch(CatchConfig),
    Nonmatch(NonMatchConfig),
}

impl Default for EnvConfig {
    fn default() -> Self {
        EnvConfig::Nonmatch(NonMatchConfig::default())
    }
}

impl EnvConfig {
    pub fn build(&self) -> Result<Box<dyn Env>> {
        Ok(match self {
            EnvConfig::Catch(c) => Box::new(Catch::new(c.clone())?),
            EnvConfig::Nonmatch(c) => Box::new(NonMatch::new(c.clone())?),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            EnvConfig::Catch(_) => "catch",
            EnvConfig::Nonmatch(_) => "nonmatch",
        }
    }
}
