//! Off-policy estimators: DM, IPS, SNIPS, DR, SNDR and their
//! policy-convolution (PC) variants.
//!
//! A PC estimator keeps the backbone's formula but replaces the importance
//! weight `π(a|x)/μ(a|x)` by
//! `(π(·|x) ∗ f_τ1)(a) / (μ(·|x) ∗ f_τ2)(a)`, with independent operators on
//! the target and logging sides. The direct-method term `Σ_a π(a|x)·δ̂(a,x)`
//! always uses the unconvolved target policy.

mod ridge;

use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, OnceLock};

pub use ridge::{fit_reward_model, ridge_solve, RewardModel};

use crate::bandit::{dot, BanditDataset, Policy, PolicyRows, RewardOracle};
use crate::error::{Error, Result};
use crate::structure::SimilarityOperator;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Backbone {
    Dm,
    Ips,
    Snips,
    Dr,
    Sndr,
}

impl Backbone {
    pub fn name(self) -> &'static str {
        match self {
            Backbone::Dm => "DM",
            Backbone::Ips => "IPS",
            Backbone::Snips => "SNIPS",
            Backbone::Dr => "DR",
            Backbone::Sndr => "SNDR",
        }
    }

    pub fn needs_reward_model(self) -> bool {
        matches!(self, Backbone::Dm | Backbone::Dr | Backbone::Sndr)
    }

    fn self_normalized(self) -> bool {
        matches!(self, Backbone::Snips | Backbone::Sndr)
    }
}

impl fmt::Display for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Backbone {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "DM" => Ok(Backbone::Dm),
            "IPS" => Ok(Backbone::Ips),
            "SNIPS" => Ok(Backbone::Snips),
            "DR" => Ok(Backbone::Dr),
            "SNDR" => Ok(Backbone::Sndr),
            other => Err(Error::Config(format!("unknown estimator `{other}`"))),
        }
    }
}

/// Output of one estimator run.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimateDiagnostics {
    pub value: f64,
    /// Per-sample summands; `value` is their mean.
    pub per_sample_terms: Vec<f64>,
    /// Smallest and largest importance weight (absent for DM).
    pub weight_range: Option<(f64, f64)>,
    /// Mean importance weight, for the self-normalised estimators.
    pub rho: Option<f64>,
}

/// Backbone plus optional target/logging convolutions and reward model.
#[derive(Clone)]
pub struct EstimatorConfig {
    pub backbone: Backbone,
    pub target_conv: Option<SimilarityOperator>,
    pub logging_conv: Option<SimilarityOperator>,
    pub reward_model: Option<Arc<dyn RewardOracle>>,
}

impl fmt::Debug for EstimatorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EstimatorConfig")
            .field("backbone", &self.backbone)
            .field("target_conv", &self.target_conv.as_ref().map(|o| o.convolution()))
            .field("logging_conv", &self.logging_conv.as_ref().map(|o| o.convolution()))
            .field("reward_model", &self.reward_model.is_some())
            .finish()
    }
}

impl EstimatorConfig {
    pub fn new(backbone: Backbone) -> Self {
        Self {
            backbone,
            target_conv: None,
            logging_conv: None,
            reward_model: None,
        }
    }

    pub fn with_reward_model(mut self, model: Arc<dyn RewardOracle>) -> Self {
        self.reward_model = Some(model);
        self
    }

    pub fn with_convolutions(
        mut self,
        target: Option<SimilarityOperator>,
        logging: Option<SimilarityOperator>,
    ) -> Self {
        self.target_conv = target;
        self.logging_conv = logging;
        self
    }

    pub fn is_pc(&self) -> bool {
        self.target_conv.is_some() || self.logging_conv.is_some()
    }

    fn validate(&self) -> Result<()> {
        if self.backbone.needs_reward_model() && self.reward_model.is_none() {
            return Err(Error::invalid(format!("{} needs a reward model", self.backbone)));
        }
        if self.backbone == Backbone::Dm && self.is_pc() {
            return Err(Error::invalid("policy convolution needs an importance-sampling backbone"));
        }
        Ok(())
    }
}

/// A dataset with the target policy's rows at every logged context.
///
/// Built once and reused across estimator configurations; the full logging
/// rows are computed on first use by a logging-side convolution.
pub struct PreparedData<'a> {
    dataset: &'a BanditDataset,
    target_rows: PolicyRows,
    logging_rows: OnceLock<PolicyRows>,
}

impl<'a> PreparedData<'a> {
    pub fn new(dataset: &'a BanditDataset, target: &dyn Policy) -> Result<Self> {
        if target.n_actions() != dataset.n_actions() {
            return Err(Error::invalid(format!(
                "target covers {} actions, dataset {}",
                target.n_actions(),
                dataset.n_actions()
            )));
        }
        Ok(Self {
            dataset,
            target_rows: PolicyRows::for_dataset(target, dataset),
            logging_rows: OnceLock::new(),
        })
    }

    pub fn dataset(&self) -> &BanditDataset {
        self.dataset
    }

    pub fn target_rows(&self) -> &PolicyRows {
        &self.target_rows
    }

    pub fn logging_rows(&self) -> &PolicyRows {
        self.logging_rows
            .get_or_init(|| PolicyRows::for_dataset(self.dataset.logging_policy().as_ref(), self.dataset))
    }

    /// Runs the configured estimator.
    pub fn estimate(&self, config: &EstimatorConfig) -> Result<EstimateDiagnostics> {
        config.validate()?;
        if self.dataset.is_empty() {
            return Err(Error::invalid("cannot estimate from an empty dataset"));
        }
        let n = self.dataset.len();
        let interactions = self.dataset.interactions();

        let baseline = |i: usize| -> (f64, f64) {
            // (δ̂(a_i, x_i), Σ_a π(a|x_i)·δ̂(a, x_i))
            let model = config.reward_model.as_ref().expect("validated");
            let x = &interactions[i].context;
            let row = model.reward_row(x);
            (row[interactions[i].action], dot(self.target_rows.row(i), &row))
        };

        if config.backbone == Backbone::Dm {
            let terms: Vec<f64> = (0..n).map(|i| baseline(i).1).collect();
            return Ok(finish(terms, None, None));
        }

        let weights = self.weights(config)?;
        let (lo, hi) = weights
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), w| (l.min(*w), h.max(*w)));
        let rho = if config.backbone.self_normalized() {
            let rho = weights.iter().sum::<f64>() / n as f64;
            if rho.is_nan() || rho <= 0.0 {
                return Err(Error::Degenerate(
                    "importance weights are all zero: the target puts no mass on any logged action".into(),
                ));
            }
            Some(rho)
        } else {
            None
        };
        let scale = rho.unwrap_or(1.0);
        let terms: Vec<f64> = match config.backbone {
            Backbone::Ips | Backbone::Snips => weights
                .iter()
                .zip(interactions)
                .map(|(w, it)| if rho.is_some() { w * it.reward / scale } else { w * it.reward })
                .collect(),
            Backbone::Dr | Backbone::Sndr => (0..n)
                .map(|i| {
                    let (fitted, direct) = baseline(i);
                    let w = if rho.is_some() { weights[i] / scale } else { weights[i] };
                    w * (interactions[i].reward - fitted) + direct
                })
                .collect(),
            Backbone::Dm => unreachable!(),
        };
        Ok(finish(terms, Some((lo, hi)), rho))
    }

    /// Importance weights, convolved where the config asks for it.
    fn weights(&self, config: &EstimatorConfig) -> Result<Vec<f64>> {
        let props = self.dataset.propensities();
        self.dataset
            .interactions()
            .iter()
            .enumerate()
            .map(|(i, it)| {
                let a = it.action;
                let num = match &config.target_conv {
                    Some(op) => op.convolve(self.target_rows.row(i), a),
                    None => self.target_rows.row(i)[a],
                };
                let den = match &config.logging_conv {
                    Some(op) => op.convolve(self.logging_rows().row(i), a),
                    None => props[i],
                };
                if den > 0.0 && den.is_finite() {
                    Ok(num / den)
                } else if config.logging_conv.is_some() {
                    Err(Error::Estimation {
                        index: i,
                        reason: format!("convolved logging propensity is {den}"),
                    })
                } else {
                    Err(Error::Estimation {
                        index: i,
                        reason: format!("logged propensity is {den}"),
                    })
                }
            })
            .collect()
    }
}

fn finish(terms: Vec<f64>, weight_range: Option<(f64, f64)>, rho: Option<f64>) -> EstimateDiagnostics {
    let value = terms.iter().sum::<f64>() / terms.len() as f64;
    EstimateDiagnostics {
        value,
        per_sample_terms: terms,
        weight_range,
        rho,
    }
}

/// Direct method: mean over logged contexts of `Σ_a π(a|x)·δ̂(a,x)`.
pub fn estimate_dm(
    dataset: &BanditDataset,
    target: &dyn Policy,
    model: Arc<dyn RewardOracle>,
) -> Result<EstimateDiagnostics> {
    PreparedData::new(dataset, target)?
        .estimate(&EstimatorConfig::new(Backbone::Dm).with_reward_model(model))
}

pub fn estimate_ips(dataset: &BanditDataset, target: &dyn Policy) -> Result<EstimateDiagnostics> {
    PreparedData::new(dataset, target)?.estimate(&EstimatorConfig::new(Backbone::Ips))
}

pub fn estimate_snips(dataset: &BanditDataset, target: &dyn Policy) -> Result<EstimateDiagnostics> {
    PreparedData::new(dataset, target)?.estimate(&EstimatorConfig::new(Backbone::Snips))
}

pub fn estimate_dr(
    dataset: &BanditDataset,
    target: &dyn Policy,
    model: Arc<dyn RewardOracle>,
) -> Result<EstimateDiagnostics> {
    PreparedData::new(dataset, target)?
        .estimate(&EstimatorConfig::new(Backbone::Dr).with_reward_model(model))
}

pub fn estimate_sndr(
    dataset: &BanditDataset,
    target: &dyn Policy,
    model: Arc<dyn RewardOracle>,
) -> Result<EstimateDiagnostics> {
    PreparedData::new(dataset, target)?
        .estimate(&EstimatorConfig::new(Backbone::Sndr).with_reward_model(model))
}

/// Policy-convolution estimator over any importance-sampling backbone.
pub fn estimate_pc(
    config: &EstimatorConfig,
    dataset: &BanditDataset,
    target: &dyn Policy,
) -> Result<EstimateDiagnostics> {
    if config.backbone == Backbone::Dm {
        return Err(Error::invalid("policy convolution needs an importance-sampling backbone"));
    }
    PreparedData::new(dataset, target)?.estimate(config)
}
