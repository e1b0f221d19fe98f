//! Off-policy estimators for contextual bandits with large action spaces,
//! including policy-convolution variants that pool propensities over
//! similar actions, plus the environments and replication harness used to
//! benchmark them.

pub mod bandit;
pub mod error;
pub mod estimators;
pub mod harness;
pub mod movielens;
pub mod policy;
pub mod rng;
pub mod structure;
pub mod synth;

pub use bandit::{
    true_value, BanditDataset, DatasetMeta, EmbeddingTable, LoggedInteraction, Policy, PolicyRows, RewardOracle,
};
pub use error::{Error, Result};
pub use estimators::{
    estimate_dm, estimate_dr, estimate_ips, estimate_pc, estimate_snips, estimate_sndr, fit_reward_model, Backbone,
    EstimateDiagnostics, EstimatorConfig, PreparedData, RewardModel,
};
pub use structure::{ActionStructure, ActionTree, ConvKind, Convolution, SimilarityOperator};
pub use synth::{SynthConfig, SynthWorld};
