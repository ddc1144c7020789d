use serde::{Deserialize, Serialize};

use super::{Env, EnvStep};
use crate::error::{contract, Error, Result};
use crate::model::ObsSpec;
use crate::tensor::Rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CatchConfig {
    pub width: usize,
    pub height: usize,
}

impl Default for CatchConfig {
    fn default() -> Self {
        Self { width: 7, height: 7 }
    }
}

/// A ball falls one row per step from a random column of the top row; a
/// one-cell paddle on the bottom row moves left, stays, or moves right.
/// Catching the ball pays +1, missing it -1.
#[derive(Clone, Debug)]
pub struct Catch {
    cfg: CatchConfig,
    ball_row: usize,
    ball_col: usize,
    paddle: usize,
    t: usize,
    done: bool,
}

impl Catch {
    pub fn new(cfg: CatchConfig) -> Result<Self> {
        if cfg.width < 1 || cfg.height < 2 {
            return Err(contract("catch needs width >= 1 and height >= 2"));
        }
        Ok(Self {
            ball_row: 0,
            ball_col: 0,
            paddle: cfg.width / 2,
            t: 0,
            done: true,
            cfg,
        })
    }

    pub fn ball(&self) -> (usize, usize) {
        (self.ball_row, self.ball_col)
    }

    pub fn paddle(&self) -> usize {
        self.paddle
    }

    fn observe(&self, reward: f64) -> EnvStep {
        let w = self.cfg.width;
        let mut grid = vec![0.0; w * self.cfg.height];
        grid[self.ball_row * w + self.ball_col] = 1.0;
        grid[(self.cfg.height - 1) * w + self.paddle] = 1.0;
        EnvStep {
            observation: grid,
            reward,
            done: self.done,
            episode_step: self.t,
        }
    }
}

impl Env for Catch {
    fn obs_spec(&self) -> ObsSpec {
        ObsSpec::Grid {
            channels: 1,
            height: self.cfg.height,
            width: self.cfg.width,
        }
    }

    fn n_actions(&self) -> usize {
        3
    }

    fn reset(&mut self, seed: u64) -> EnvStep {
        let mut rng = Rng::new(seed);
        self.ball_row = 0;
        self.ball_col = rng.below(self.cfg.width);
        self.paddle = self.cfg.width / 2;
        self.t = 0;
        self.done = false;
        self.observe(0.0)
    }

    fn step(&mut self, action: usize) -> Result<EnvStep> {
        if self.done {
            return Err(Error::StepAfterDone);
        }
        if action >= 3 {
            return Err(Error::InvalidAction { action, n_actions: 3 });
        }
        match action {
            0 => self.paddle = self.paddle.saturating_sub(1),
            2 => self.paddle = (self.paddle + 1).min(self.cfg.width - 1),
            _ => {}
        }
        self.ball_row += 1;
        self.t += 1;
        let mut reward = 0.0;
        if self.ball_row == self.cfg.height - 1 {
            self.done = true;
            reward = if self.paddle == self.ball_col { 1.0 } else { -1.0 };
        }
        Ok(self.observe(reward))
    }

    fn oracle_action(&self) -> usize {
        match self.ball_col.cmp(&self.paddle) {
            std::cmp::Ordering::Less => 0,
            std::cmp::Ordering::Equal => 1,
            std::cmp::Ordering::Greater => 2,
        }
    }

    fn max_episode_len(&self) -> usize {
        self.cfg.height - 1
    }
}
