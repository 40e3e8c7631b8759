//! Deterministic mini-batch streams over one or more image datasets.
//!
//! A schedule is a list of phases. Each phase names the tasks it draws from
//! and a step budget. Within a phase, the examples of all its tasks form one
//! pool that is shuffled once per epoch and consumed without replacement;
//! several tasks in one phase is joint training, several single-task phases
//! in a row is continual training.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::idx::{ImageExample, TaskId};
use crate::error::{Error, Result};

pub type ImageSets = BTreeMap<TaskId, Vec<ImageExample>>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Phase {
    pub tasks: Vec<TaskId>,
    pub steps: usize,
}

/// Parsed from text such as `0:3000`, `0+1:5000` or `0:3000,1:3000`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule(pub Vec<Phase>);

impl Schedule {
    pub fn single(task: TaskId, steps: usize) -> Self {
        Schedule(vec![Phase { tasks: vec![task], steps }])
    }

    pub fn total_steps(&self) -> usize {
        self.0.iter().map(|p| p.steps).sum()
    }

    pub fn tasks(&self) -> Vec<TaskId> {
        let mut t: Vec<TaskId> = self.0.iter().flat_map(|p| p.tasks.iter().copied()).collect();
        t.sort_unstable();
        t.dedup();
        t
    }
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut phases = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (tasks, steps) = part
                .split_once(':')
                .ok_or_else(|| Error::Config(format!("schedule phase {part:?} needs the form tasks:steps")))?;
            let steps = steps
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad step count in schedule phase {part:?}")))?;
            let tasks = tasks
                .split('+')
                .map(|t| {
                    t.trim()
                        .parse::<TaskId>()
                        .map_err(|_| Error::Config(format!("bad task id in schedule phase {part:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            phases.push(Phase { tasks, steps });
        }
        if phases.is_empty() {
            return Err(Error::Config("empty schedule".into()));
        }
        Ok(Schedule(phases))
    }
}

impl fmt::Display for Schedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .0
            .iter()
            .map(|p| {
                let tasks: Vec<String> = p.tasks.iter().map(|t| t.to_string()).collect();
                format!("{}:{}", tasks.join("+"), p.steps)
            })
            .collect();
        f.write_str(&parts.join(","))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExampleRef {
    pub task: TaskId,
    pub index: u32,
}

#[derive(Clone, Debug)]
pub struct Batch {
    /// Global step counter, starting at 0.
    pub step: u32,
    pub examples: Vec<ExampleRef>,
}

#[derive(Clone, Debug)]
pub struct TrainingStream {
    schedule: Schedule,
    batch_size: usize,
    seed: u64,
    sizes: BTreeMap<TaskId, usize>,
    rng: ChaCha8Rng,
    phase: usize,
    step_in_phase: usize,
    step: u32,
    pool: Vec<ExampleRef>,
    cursor: usize,
}

/// Builds a stream over the given datasets.
pub fn make_stream(datasets: &ImageSets, schedule: Schedule, batch_size: usize, seed: u64) -> Result<TrainingStream> {
    let sizes = datasets.iter().map(|(t, v)| (*t, v.len())).collect();
    TrainingStream::new(sizes, schedule, batch_size, seed)
}

impl TrainingStream {
    pub fn new(sizes: BTreeMap<TaskId, usize>, schedule: Schedule, batch_size: usize, seed: u64) -> Result<Self> {
        if schedule.0.is_empty() {
            return Err(Error::contract("empty schedule"));
        }
        if batch_size == 0 {
            return Err(Error::contract("batch size must be positive"));
        }
        for task in schedule.tasks() {
            match sizes.get(&task) {
                None => return Err(Error::contract(format!("schedule references task {task} which is not loaded"))),
                Some(0) => {
                    return Err(Error::Ingest {
                        path: format!("<task {task}>").into(),
                        offset: 0,
                        msg: "dataset is empty".into(),
                    })
                }
                Some(_) => {}
            }
        }
        let mut stream = TrainingStream {
            schedule,
            batch_size,
            seed,
            sizes,
            rng: ChaCha8Rng::seed_from_u64(seed),
            phase: 0,
            step_in_phase: 0,
            step: 0,
            pool: Vec::new(),
            cursor: 0,
        };
        stream.enter_phase();
        Ok(stream)
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn schedule(&self) -> &Schedule {
        &self.schedule
    }

    pub fn total_examples(&self) -> usize {
        self.schedule.total_steps() * self.batch_size
    }

    fn enter_phase(&mut self) {
        self.pool.clear();
        self.cursor = 0;
        if let Some(phase) = self.schedule.0.get(self.phase) {
            for &task in &phase.tasks {
                let n = self.sizes[&task];
                self.pool.extend((0..n as u32).map(|index| ExampleRef { task, index }));
            }
            self.pool.shuffle(&mut self.rng);
        }
    }

    fn next_example(&mut self) -> ExampleRef {
        if self.cursor == self.pool.len() {
            self.pool.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        let ex = self.pool[self.cursor];
        self.cursor += 1;
        ex
    }

    pub fn next_batch(&mut self) -> Option<Batch> {
        while self.phase < self.schedule.0.len() && self.step_in_phase >= self.schedule.0[self.phase].steps {
            self.phase += 1;
            self.step_in_phase = 0;
            self.enter_phase();
        }
        if self.phase >= self.schedule.0.len() {
            return None;
        }
        let examples = (0..self.batch_size).map(|_| self.next_example()).collect();
        let batch = Batch { step: self.step, examples };
        self.step += 1;
        self.step_in_phase += 1;
        Some(batch)
    }
}

impl Iterator for TrainingStream {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        self.next_batch()
    }
}
