//! Policies defined through a reward oracle, plus support masking.

use std::sync::Arc;

use rand::seq::index::sample;

use crate::bandit::{Policy, RewardOracle};
use crate::error::{Error, Result};
use crate::rng;

/// Softmax over expected rewards: `μ(a|x) ∝ exp(β·δ(a,x))`.
pub struct SoftmaxPolicy {
    oracle: Arc<dyn RewardOracle>,
    beta: f64,
}

impl SoftmaxPolicy {
    pub fn new(oracle: Arc<dyn RewardOracle>, beta: f64) -> Result<Self> {
        if !beta.is_finite() {
            return Err(Error::invalid("softmax temperature must be finite"));
        }
        Ok(Self { oracle, beta })
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// Numerically stable `exp(β·v) / Σ exp(β·v)`.
pub fn softmax(values: &[f64], beta: f64) -> Vec<f64> {
    let max = values
        .iter()
        .map(|v| beta * v)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = values.iter().map(|v| (beta * v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

impl Policy for SoftmaxPolicy {
    fn n_actions(&self) -> usize {
        self.oracle.n_actions()
    }

    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        softmax(&self.oracle.reward_row(context), self.beta)
    }
}

/// `(1-ε)` on the reward argmax (lowest index on ties) plus `ε/|A|` everywhere.
pub struct EpsilonGreedyPolicy {
    oracle: Arc<dyn RewardOracle>,
    epsilon: f64,
}

impl EpsilonGreedyPolicy {
    pub fn new(oracle: Arc<dyn RewardOracle>, epsilon: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&epsilon) {
            return Err(Error::invalid(format!("epsilon {epsilon} outside [0, 1]")));
        }
        Ok(Self { oracle, epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

impl Policy for EpsilonGreedyPolicy {
    fn n_actions(&self) -> usize {
        self.oracle.n_actions()
    }

    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        let rewards = self.oracle.reward_row(context);
        let n = rewards.len();
        let mut row = vec![self.epsilon / n as f64; n];
        row[argmax(&rewards)] += 1.0 - self.epsilon;
        row
    }
}

/// A policy with a fixed set of actions forced to zero probability and the
/// remaining mass renormalised per row.
///
/// If a row puts no mass at all on the supported actions it becomes uniform
/// over them.
pub struct MaskedPolicy {
    inner: Arc<dyn Policy>,
    masked: Vec<bool>,
}

impl MaskedPolicy {
    pub fn new(inner: Arc<dyn Policy>, masked: Vec<bool>) -> Result<Self> {
        if masked.len() != inner.n_actions() {
            return Err(Error::invalid("mask length differs from action count"));
        }
        if masked.iter().all(|m| *m) {
            return Err(Error::invalid("mask leaves no supported action"));
        }
        Ok(Self { inner, masked })
    }

    pub fn masked(&self) -> &[bool] {
        &self.masked
    }
}

impl Policy for MaskedPolicy {
    fn n_actions(&self) -> usize {
        self.masked.len()
    }

    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        let mut row = self.inner.prob_row(context);
        for (p, m) in row.iter_mut().zip(&self.masked) {
            if *m {
                *p = 0.0;
            }
        }
        let z: f64 = row.iter().sum();
        if z > 0.0 {
            row.iter_mut().for_each(|p| *p /= z);
        } else {
            let k = self.masked.iter().filter(|m| !**m).count() as f64;
            for (p, m) in row.iter_mut().zip(&self.masked) {
                *p = if *m { 0.0 } else { 1.0 / k };
            }
        }
        row
    }
}

/// Removes support from a random global subset of `⌈fraction·|A|⌉` actions.
pub fn apply_deficient_support(
    logging: Arc<dyn Policy>,
    deficient_fraction: f64,
    seed: u64,
) -> Result<Arc<dyn Policy>> {
    if !(0.0..1.0).contains(&deficient_fraction) {
        return Err(Error::invalid(format!(
            "deficient fraction {deficient_fraction} outside [0, 1)"
        )));
    }
    let n = logging.n_actions();
    let k = (deficient_fraction * n as f64).ceil() as usize;
    if k == 0 {
        return Ok(logging);
    }
    if k >= n {
        return Err(Error::invalid(format!(
            "deficient fraction {deficient_fraction} leaves no supported action out of {n}"
        )));
    }
    let mut masked = vec![false; n];
    let mut r = rng::stream(seed, "deficient-support");
    for a in sample(&mut r, n, k) {
        masked[a] = true;
    }
    Ok(Arc::new(MaskedPolicy::new(logging, masked)?))
}
