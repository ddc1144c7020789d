use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread;

use crossbeam_channel::bounded;
use parking_lot::RwLock;

use super::actor::{Actor, Trajectory};
use super::learn::{Learner, StepMetrics};
use crate::envs::Env;
use crate::error::{Error, Result};
use crate::tensor::{ParamStore, Rng};

/// Builds a fresh environment for an actor.
pub type EnvFactory = Arc<dyn Fn() -> Result<Box<dyn Env>> + Send + Sync>;

/// Latest published parameters. Published stores are never mutated.
pub struct Snapshots {
    latest: RwLock<(u64, Arc<ParamStore>)>,
}

impl Snapshots {
    pub fn new(store: &ParamStore) -> Self {
        Self {
            latest: RwLock::new((0, Arc::new(store.clone()))),
        }
    }

    pub fn publish(&self, version: u64, store: &ParamStore) {
        *self.latest.write() = (version, Arc::new(store.clone()));
    }

    pub fn latest(&self) -> (u64, Arc<ParamStore>) {
        let guard = self.latest.read();
        (guard.0, Arc::clone(&guard.1))
    }
}

/// Trajectory accounting shared by actors and the learner.
#[derive(Debug, Default)]
pub struct PipelineStats {
    pub produced: AtomicU64,
    pub consumed: AtomicU64,
    pub restarts: AtomicU64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StatsSnapshot {
    pub produced: u64,
    pub consumed: u64,
    pub in_flight: u64,
    pub restarts: u64,
}

/// What the learner loop does after an update.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Flow {
    Continue,
    /// End the run early, as if `total_steps` had been reached.
    Stop,
}

/// Number of actor threads after applying the `ADASPAN_THREADS` cap.
pub fn worker_count(requested: usize) -> usize {
    let cap = std::env::var("ADASPAN_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0);
    match cap {
        Some(c) => requested.min(c).max(1),
        None => requested.max(1),
    }
}

fn actor_seed(base: u64, id: usize, generation: u64) -> u64 {
    let mut rng = Rng::new(base ^ 0x9e37_79b9_7f4a_7c15);
    for _ in 0..id {
        rng.next_u64();
    }
    rng.next_u64().wrapping_add(generation.wrapping_mul(0x1000_0000_01b3))
}

/// Runs the learner until `learner.total_steps` or until `on_step`, called
/// after every update, returns [`Flow::Stop`].
///
/// Deterministic mode uses one actor that alternates with the learner on
/// the calling thread; its behavior parameters lag `snapshot_lag` updates
/// behind. Otherwise `n_actors` threads feed a bounded queue of `n_buffers`
/// trajectories.
pub fn run(
    learner: &mut Learner,
    factory: EnvFactory,
    seed: u64,
    deterministic: bool,
    on_step: &mut dyn FnMut(&Learner, &StepMetrics) -> Result<Flow>,
) -> Result<StatsSnapshot> {
    if deterministic {
        run_synchronous(learner, factory, seed, on_step)
    } else {
        run_threaded(learner, factory, seed, on_step)
    }
}

fn run_synchronous(
    learner: &mut Learner,
    factory: EnvFactory,
    seed: u64,
    on_step: &mut dyn FnMut(&Learner, &StepMetrics) -> Result<Flow>,
) -> Result<StatsSnapshot> {
    let lag = learner.pipeline.snapshot_lag;
    let mut actor = Actor::new(0, factory()?, learner.agent.clone(), actor_seed(seed, 0, 0));
    let mut history: VecDeque<(u64, ParamStore)> = VecDeque::new();
    history.push_back((learner.step, learner.store.clone()));
    let mut produced = 0;
    while learner.step < learner.total_steps {
        let (version, params) = history.front().expect("history is never empty");
        let mut batch = Vec::with_capacity(learner.pipeline.batch_size);
        for _ in 0..learner.pipeline.batch_size {
            batch.push(actor.rollout(params, *version, learner.pipeline.unroll_length)?);
            produced += 1;
        }
        let metrics = learner.learn_step(&batch, learner.step)?;
        history.push_back((learner.step, learner.store.clone()));
        while history.len() > lag + 1 {
            history.pop_front();
        }
        if on_step(learner, &metrics)? == Flow::Stop {
            break;
        }
    }
    Ok(StatsSnapshot {
        produced,
        consumed: produced,
        in_flight: 0,
        restarts: 0,
    })
}

fn run_threaded(
    learner: &mut Learner,
    factory: EnvFactory,
    seed: u64,
    on_step: &mut dyn FnMut(&Learner, &StepMetrics) -> Result<Flow>,
) -> Result<StatsSnapshot> {
    let p = learner.pipeline.clone();
    let n_actors = worker_count(p.n_actors);
    let (tx, rx) = bounded::<Trajectory>(p.n_buffers);
    let snapshots = Arc::new(Snapshots::new(&learner.store));
    snapshots.publish(learner.step, &learner.store);
    let stats = Arc::new(PipelineStats::default());
    let stop = Arc::new(AtomicBool::new(false));

    let mut handles = Vec::with_capacity(n_actors);
    for id in 0..n_actors {
        let tx = tx.clone();
        let snapshots = Arc::clone(&snapshots);
        let stats = Arc::clone(&stats);
        let stop = Arc::clone(&stop);
        let factory = Arc::clone(&factory);
        let agent = learner.agent.clone();
        let unroll = p.unroll_length;
        handles.push(thread::spawn(move || {
            let mut generation = 0u64;
            let mut actor = None;
            while !stop.load(Ordering::SeqCst) {
                let current = match actor.as_mut() {
                    Some(a) => a,
                    None => match factory() {
                        Ok(env) => actor.insert(Actor::new(id, env, agent.clone(), actor_seed(seed, id, generation))),
                        Err(e) => {
                            log::error!("actor {id}: cannot build environment: {e}");
                            return;
                        }
                    },
                };
                let (version, params) = snapshots.latest();
                match current.rollout(&params, version, unroll) {
                    Ok(traj) => {
                        stats.produced.fetch_add(1, Ordering::SeqCst);
                        if tx.send(traj).is_err() {
                            stats.produced.fetch_sub(1, Ordering::SeqCst);
                            return;
                        }
                    }
                    Err(e) => {
                        log::warn!("actor {id} restarting after error: {e}");
                        stats.restarts.fetch_add(1, Ordering::SeqCst);
                        generation += 1;
                        actor = None;
                    }
                }
            }
        }));
    }
    drop(tx);

    let result = (|| -> Result<()> {
        while learner.step < learner.total_steps {
            let mut batch = Vec::with_capacity(p.batch_size);
            while batch.len() < p.batch_size {
                let traj = rx.recv().map_err(|_| Error::Disconnected)?;
                stats.consumed.fetch_add(1, Ordering::SeqCst);
                batch.push(traj);
            }
            let metrics = learner.learn_step(&batch, learner.step)?;
            snapshots.publish(learner.step, &learner.store);
            if on_step(learner, &metrics)? == Flow::Stop {
                break;
            }
        }
        Ok(())
    })();

    stop.store(true, Ordering::SeqCst);
    // trajectories still queued or in the middle of being sent at shutdown
    let mut in_flight = 0;
    while rx.recv().is_ok() {
        in_flight += 1;
    }
    for h in handles {
        let _ = h.join();
    }
    let final_stats = StatsSnapshot {
        produced: stats.produced.load(Ordering::SeqCst),
        consumed: stats.consumed.load(Ordering::SeqCst),
        in_flight,
        restarts: stats.restarts.load(Ordering::SeqCst),
    };
    result.map(|_| final_stats)
}
