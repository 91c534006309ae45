//! Seeded train and evaluation scenario sets.

use crate::config::Config;
use crate::error::{CoopError, Result};
use crate::sim::{generate_scenario, Scenario, ScenarioSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7EA1,
            Split::Eval => 0xE7A1,
        }
    }
}

/// Scenario seed for item `i` of a split. Train and eval seeds never
/// collide for the same config seed.
pub fn scenario_seed(cfg: &Config, split: Split, i: usize) -> u64 {
    let mut rng = crate::sim::rng_for(&[cfg.seed, split.tag(), i as u64]);
    rand::Rng::random(&mut rng)
}

/// Detector-noise seed for item `i` of a split at training epoch `epoch`.
/// Evaluation always uses epoch 0.
pub fn observation_seed(cfg: &Config, split: Split, i: usize, epoch: usize) -> u64 {
    let mut rng = crate::sim::rng_for(&[cfg.seed, split.tag(), i as u64, epoch as u64, 0x0B5]);
    rand::Rng::random(&mut rng)
}

pub fn scenarios(cfg: &Config, split: Split, spec: &ScenarioSpec) -> Result<Vec<Scenario>> {
    let n = match split {
        Split::Train => cfg.train_scenarios,
        Split::Eval => cfg.eval_scenarios,
    };
    if n == 0 {
        return Err(CoopError::Validation(format!("{split:?} split has no scenarios")));
    }
    (0..n).map(|i| generate_scenario(spec, scenario_seed(cfg, split, i))).collect()
}

pub fn train_set(cfg: &Config) -> Result<Vec<Scenario>> {
    scenarios(cfg, Split::Train, &ScenarioSpec::from_config(cfg)?)
}

pub fn eval_set(cfg: &Config) -> Result<Vec<Scenario>> {
    scenarios(cfg, Split::Eval, &ScenarioSpec::from_config(cfg)?)
}
