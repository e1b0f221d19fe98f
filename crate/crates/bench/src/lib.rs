//! Shared fixtures for the estimator benchmarks.

use std::sync::Arc;

use opelab_core::bandit::CachedOracle;
use opelab_core::policy::EpsilonGreedyPolicy;
use opelab_core::synth::{self, SynthConfig, SynthWorld};
use opelab_core::{ActionStructure, BanditDataset, Policy, RewardOracle, Result};

pub struct Fixture {
    pub world: Arc<SynthWorld>,
    pub structure: Arc<ActionStructure>,
    pub dataset: BanditDataset,
    pub target: Arc<dyn Policy>,
}

/// A synthetic world with uniform logging and an ε-greedy target, plus one
/// logged dataset of `n_logged` rounds.
pub fn fixture(n_actions: usize, n_logged: usize) -> Result<Fixture> {
    let config = SynthConfig {
        n_actions,
        n_logged,
        noise_draws: 2,
        ..SynthConfig::default()
    };
    let world = Arc::new(SynthWorld::build(&config)?);
    let structure = Arc::new(ActionStructure::new(Arc::clone(world.embeddings()), None, 0)?);
    let oracle: Arc<dyn RewardOracle> = Arc::new(CachedOracle::new(Arc::clone(&world), n_logged + 1));
    let logging = Arc::new(synth::logging_policy(Arc::clone(&oracle), 0.0)?);
    let target: Arc<dyn Policy> = Arc::new(EpsilonGreedyPolicy::new(oracle, config.epsilon)?);
    let dataset = synth::generate_dataset(&world, logging, n_logged, 1)?;
    Ok(Fixture {
        world,
        structure,
        dataset,
        target,
    })
}
