use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use crate::bandit::{
    true_value, BanditDataset, CachedOracle, DatasetMeta, EmbeddingTable, LoggedInteraction, Policy, RewardOracle,
    TabularOracle, TabularPolicy,
};
use crate::error::{Error, Result};
use crate::movielens::{self, MovielensEnv, TwoStageLoggingPolicy};
use crate::policy::{apply_deficient_support, EpsilonGreedyPolicy, SoftmaxPolicy};
use crate::rng;
use crate::structure::{ActionStructure, ActionTree};
use crate::synth::{self, SynthConfig, SynthWorld};

/// One logged dataset together with the target policy to evaluate on it.
pub struct Sample {
    pub dataset: BanditDataset,
    pub target: Arc<dyn Policy>,
}

type Sampler = dyn Fn(u64) -> Result<Sample> + Send + Sync;

/// A fixed estimand: action structure, ground-truth value and a way to draw
/// logged datasets from it.
pub struct Scenario {
    name: String,
    structure: Arc<ActionStructure>,
    true_value: f64,
    sampler: Box<Sampler>,
}

impl std::fmt::Debug for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.name)
            .field("n_actions", &self.structure.n_actions())
            .field("true_value", &self.true_value)
            .finish()
    }
}

impl Scenario {
    pub fn new(
        name: impl Into<String>,
        structure: Arc<ActionStructure>,
        true_value: f64,
        sampler: impl Fn(u64) -> Result<Sample> + Send + Sync + 'static,
    ) -> Self {
        Self {
            name: name.into(),
            structure,
            true_value,
            sampler: Box::new(sampler),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn structure(&self) -> &Arc<ActionStructure> {
        &self.structure
    }

    pub fn true_value(&self) -> f64 {
        self.true_value
    }

    pub fn sample(&self, seed: u64) -> Result<Sample> {
        (self.sampler)(seed)
    }
}

/// Where each replication gets its scenario: shared by all seeds, or rebuilt
/// from the seed (for sweeps over world-level parameters).
#[derive(Clone)]
pub enum ScenarioSource {
    Fixed(Arc<Scenario>),
    PerSeed(Arc<dyn Fn(u64) -> Result<Scenario> + Send + Sync>),
}

impl ScenarioSource {
    pub fn scenario(&self, seed: u64) -> Result<Arc<Scenario>> {
        match self {
            ScenarioSource::Fixed(s) => Ok(Arc::clone(s)),
            ScenarioSource::PerSeed(build) => build(seed).map(Arc::new),
        }
    }
}

impl From<Scenario> for ScenarioSource {
    fn from(s: Scenario) -> Self {
        ScenarioSource::Fixed(Arc::new(s))
    }
}

pub const TOY_REWARDS: [f64; 4] = [5.0, 10.0, 15.0, 20.0];
pub const TOY_TARGET: [f64; 4] = [0.0, 0.2, 0.2, 0.6];
pub const TOY_LOGGING: [f64; 4] = [0.2, 0.2, 0.4, 0.2];

/// The four-action, single-context example with tree `{a1},{a2},{a3},{a4}` /
/// `{a1,a2},{a3,a4}` / `{a1..a4}`. Rewards are deterministic.
pub fn toy_scenario(n_logged: usize) -> Result<Scenario> {
    if n_logged == 0 {
        return Err(Error::invalid("toy dataset size must be at least 1"));
    }
    let embeddings = Arc::new(EmbeddingTable::new(4, 1, vec![0.0, 1.0, 10.0, 11.0])?);
    let tree = ActionTree::from_levels(vec![
        vec![vec![0], vec![1], vec![2], vec![3]],
        vec![vec![0, 1], vec![2, 3]],
        vec![vec![0, 1, 2, 3]],
    ])?;
    let structure = Arc::new(ActionStructure::with_tree(Arc::clone(&embeddings), tree)?);
    let oracle = Arc::new(TabularOracle::single(TOY_REWARDS.to_vec())?);
    let target: Arc<dyn Policy> = Arc::new(TabularPolicy::single(TOY_TARGET.to_vec())?);
    let logging: Arc<dyn Policy> = Arc::new(TabularPolicy::single(TOY_LOGGING.to_vec())?);
    let v = true_value(target.as_ref(), oracle.as_ref(), &[vec![0.0]])?;
    Ok(Scenario::new("toy", structure, v, move |seed| {
        let mut r = rng::stream(seed, "toy-dataset");
        let mut propensities = Vec::with_capacity(n_logged);
        let interactions = (0..n_logged)
            .map(|_| {
                let action = synth::sample_action(&TOY_LOGGING, r.random::<f64>());
                propensities.push(TOY_LOGGING[action]);
                LoggedInteraction {
                    context: vec![0.0],
                    action,
                    reward: oracle.expected_reward(action, &[0.0]),
                }
            })
            .collect();
        let dataset = BanditDataset::with_propensities(
            interactions,
            Arc::clone(&logging),
            Arc::clone(&embeddings),
            DatasetMeta {
                environment: "toy".into(),
                seed,
            },
            propensities,
        )?;
        Ok(Sample {
            dataset,
            target: Arc::clone(&target),
        })
    }))
}

/// Mean of `Σ_a π(a|x)·δ(a,x)` over `contexts`, in parallel chunks that
/// each share one evaluation of `δ(·, x)` between policy and oracle.
pub fn parallel_true_value(
    oracle: Arc<dyn RewardOracle>,
    target: impl Fn(Arc<dyn RewardOracle>) -> Result<Arc<dyn Policy>> + Sync,
    contexts: &[Vec<f64>],
) -> Result<f64> {
    if contexts.is_empty() {
        return Err(Error::invalid("true value needs at least one test context"));
    }
    const CHUNK: usize = 256;
    let sums: Vec<f64> = contexts
        .par_chunks(CHUNK)
        .map(|chunk| {
            let cached: Arc<dyn RewardOracle> = Arc::new(CachedOracle::new(Arc::clone(&oracle), CHUNK));
            let pi = target(Arc::clone(&cached))?;
            Ok(true_value(pi.as_ref(), cached.as_ref(), chunk)? * chunk.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(sums.iter().sum::<f64>() / contexts.len() as f64)
}

/// Synthetic world scenario: softmax(β) logging, ε-greedy target, optional
/// deficient support mask (fixed by `config.seed`).
pub fn synthetic_scenario(config: &SynthConfig, deficient_fraction: f64, tree_depth: Option<usize>) -> Result<Scenario> {
    if !(0.0..1.0).contains(&deficient_fraction) {
        return Err(Error::Config(format!("deficient_fraction {deficient_fraction} outside [0, 1)")));
    }
    let world = Arc::new(SynthWorld::build(config)?);
    let structure = Arc::new(ActionStructure::new(Arc::clone(world.embeddings()), tree_depth, config.seed)?);
    let epsilon = config.epsilon;
    let beta = config.beta;
    let v = parallel_true_value(
        world.clone(),
        |o| Ok(Arc::new(EpsilonGreedyPolicy::new(o, epsilon)?) as Arc<dyn Policy>),
        &world.test_contexts(),
    )?;
    let n_logged = config.n_logged;
    let mask_seed = config.seed;
    Ok(Scenario::new("synthetic", structure, v, move |seed| {
        // Per-dataset cache: logging, target and estimator all reuse δ(·, x).
        let oracle: Arc<dyn RewardOracle> = Arc::new(CachedOracle::new(Arc::clone(&world), n_logged + 1));
        let mut logging: Arc<dyn Policy> = Arc::new(SoftmaxPolicy::new(Arc::clone(&oracle), beta)?);
        if deficient_fraction > 0.0 {
            logging = apply_deficient_support(logging, deficient_fraction, mask_seed)?;
        }
        let target: Arc<dyn Policy> = Arc::new(EpsilonGreedyPolicy::new(oracle, epsilon)?);
        let dataset = synth::generate_dataset(&world, logging, n_logged, seed)?;
        Ok(Sample { dataset, target })
    }))
}

/// Movielens scenario: two-stage logging with logits fixed by `seed`,
/// ε-greedy target, users drawn uniformly.
#[allow(clippy::too_many_arguments)]
pub fn movielens_scenario(
    env: Arc<MovielensEnv>,
    beta: f64,
    epsilon: f64,
    eps_floor: f64,
    n_logged: usize,
    deficient_fraction: f64,
    tree_depth: Option<usize>,
    seed: u64,
) -> Result<Scenario> {
    if !(0.0..1.0).contains(&deficient_fraction) {
        return Err(Error::Config(format!("deficient_fraction {deficient_fraction} outside [0, 1)")));
    }
    let structure = Arc::new(ActionStructure::new(Arc::clone(env.embeddings()), tree_depth, seed)?);
    let target: Arc<dyn Policy> = Arc::new(EpsilonGreedyPolicy::new(env.clone(), epsilon)?);
    let v = true_value(target.as_ref(), env.as_ref(), env.contexts())?;
    let mut logging: Arc<dyn Policy> = Arc::new(TwoStageLoggingPolicy::new(env.clone(), beta, eps_floor, seed)?);
    if deficient_fraction > 0.0 {
        logging = apply_deficient_support(logging, deficient_fraction, seed)?;
    }
    Ok(Scenario::new("movielens", structure, v, move |s| {
        let dataset = movielens::generate_dataset(&env, Arc::clone(&logging), n_logged, s)?;
        Ok(Sample {
            dataset,
            target: Arc::clone(&target),
        })
    }))
}
