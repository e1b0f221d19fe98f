//! Replicated experiments: run estimators over many logged datasets, compare
//! against the ground truth, pick convolution amounts on validation data and
//! write sweep results as CSV.

mod scenario;
mod select;
mod stats;
mod sweep;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bandit::RewardOracle;
use crate::error::{Error, Result};
use crate::estimators::{fit_reward_model, Backbone, EstimatorConfig, PreparedData};
use crate::rng;
use crate::structure::{ActionStructure, ConvKind, Convolution, SimilarityOperator};

pub use scenario::{
    movielens_scenario, parallel_true_value, synthetic_scenario, toy_scenario, Sample, Scenario, ScenarioSource,
    TOY_LOGGING, TOY_REWARDS, TOY_TARGET,
};
pub use select::{candidate_pairs, default_tau_grid, select_many, select_tau, Selection, SelectionOptions, TauConstraint};
pub use stats::{summarize, Stats};
pub use sweep::{
    build_source, run_sweep, run_sweep_to, toy_spec, EnvKind, SweepParam, SweepRow, SweepSpec, CSV_HEADER,
};

/// A backbone, optionally wrapped in a policy convolution of some kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EstimatorSpec {
    pub backbone: Backbone,
    pub conv: Option<ConvKind>,
}

impl EstimatorSpec {
    pub fn plain(backbone: Backbone) -> Self {
        Self { backbone, conv: None }
    }

    pub fn pc(backbone: Backbone, kind: ConvKind) -> Self {
        Self {
            backbone,
            conv: Some(kind),
        }
    }

    /// `IPS`, `PC-IPS`, ...
    pub fn label(&self) -> String {
        match self.conv {
            Some(_) => format!("PC-{}", self.backbone),
            None => self.backbone.to_string(),
        }
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.conv {
            Some(k) => write!(f, "pc-{}:{k}", self.backbone.name().to_ascii_lowercase()),
            None => f.write_str(&self.backbone.name().to_ascii_lowercase()),
        }
    }
}

/// Parses `ips`, `snips`, `dm`, `dr`, `sndr`, or `pc-<backbone>:<kind>`.
impl FromStr for EstimatorSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.strip_prefix("pc-") {
            Some(rest) => {
                let (b, k) = rest
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("`{s}`: expected pc-<backbone>:<kind>")))?;
                let backbone: Backbone = b.parse()?;
                if backbone == Backbone::Dm {
                    return Err(Error::Config("policy convolution needs an importance-sampling backbone".into()));
                }
                Ok(Self::pc(backbone, k.parse()?))
            }
            None => Ok(Self::plain(s.parse()?)),
        }
    }
}

/// One side of a convolution pair, as a grid coordinate: the tree level,
/// the neighbour count, the pairwise squared-distance quantile of the ball
/// radius, or the kernel bandwidth as a multiple of the median pairwise
/// distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TauPoint {
    Identity,
    At(f64),
}

impl TauPoint {
    pub fn value(self) -> Option<f64> {
        match self {
            TauPoint::Identity => None,
            TauPoint::At(v) => Some(v),
        }
    }

    /// Whether this point leaves every policy row unchanged whatever the world.
    pub fn is_identity(self, kind: ConvKind) -> bool {
        match self {
            TauPoint::Identity => true,
            TauPoint::At(v) => matches!(kind, ConvKind::Tree | ConvKind::Knn) && v == 1.0,
        }
    }

    fn magnitude(self) -> f64 {
        self.value().unwrap_or(0.0)
    }

    /// The convolution this point denotes on `structure`, or `None` when it
    /// is the identity there.
    pub fn resolve(
        self,
        kind: ConvKind,
        structure: &Arc<ActionStructure>,
        kernel_normalize: bool,
    ) -> Result<Option<SimilarityOperator>> {
        let v = match self {
            TauPoint::Identity => return Ok(None),
            TauPoint::At(v) => v,
        };
        let conv = match kind {
            ConvKind::Tree | ConvKind::Knn => kind.with_tau(v)?,
            ConvKind::Ball => {
                if !(v > 0.0 && v <= 1.0) {
                    return Err(Error::Config(format!("ball quantile {v} outside (0, 1]")));
                }
                Convolution::Ball {
                    radius_sq: structure.sq_distance_quantile(v),
                }
            }
            ConvKind::Kernel => {
                if !(v > 0.0 && v.is_finite()) {
                    return Err(Error::Config(format!("kernel bandwidth multiplier {v} must be positive")));
                }
                let median = structure.sq_distance_quantile(0.5).sqrt();
                Convolution::Kernel {
                    bandwidth: v * if median > 0.0 { median } else { 1.0 },
                }
            }
        };
        if structure.is_identity(&conv) {
            return Ok(None);
        }
        Ok(Some(
            SimilarityOperator::new(Arc::clone(structure), conv)?.normalized(kernel_normalize),
        ))
    }
}

/// An estimator with its convolution pair fixed (`None` for plain backbones).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub spec: EstimatorSpec,
    pub taus: Option<(TauPoint, TauPoint)>,
}

impl Candidate {
    pub fn plain(backbone: Backbone) -> Self {
        Self {
            spec: EstimatorSpec::plain(backbone),
            taus: None,
        }
    }

    pub fn pc(backbone: Backbone, kind: ConvKind, tau1: TauPoint, tau2: TauPoint) -> Self {
        Self {
            spec: EstimatorSpec::pc(backbone, kind),
            taus: Some((tau1, tau2)),
        }
    }

    fn config(
        &self,
        structure: &Arc<ActionStructure>,
        model: Option<Arc<dyn RewardOracle>>,
        opts: &RunOptions,
    ) -> Result<EstimatorConfig> {
        let mut config = EstimatorConfig::new(self.spec.backbone);
        if let Some(m) = model {
            config = config.with_reward_model(m);
        }
        if let (Some(kind), Some((t1, t2))) = (self.spec.conv, self.taus) {
            config = config.with_convolutions(
                t1.resolve(kind, structure, opts.kernel_normalize)?,
                t2.resolve(kind, structure, opts.kernel_normalize)?,
            );
        }
        Ok(config)
    }
}

/// Settings shared by every estimator run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunOptions {
    pub ridge_lambda: f64,
    pub kernel_normalize: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            ridge_lambda: 1.0,
            kernel_normalize: false,
        }
    }
}

/// Sets the number of worker threads used for replications. Only the first
/// call in a process takes effect.
pub fn set_jobs(jobs: usize) -> Result<()> {
    if jobs == 0 {
        return Err(Error::Config("jobs must be at least 1".into()));
    }
    // A pool already built by an earlier call is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    Ok(())
}

/// Seeds of the `n` evaluation replications.
pub fn evaluation_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_indexed(master, "evaluation", i)).collect()
}

/// Seeds of the `n` validation replications; disjoint from evaluation seeds.
pub fn validation_seeds(master: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|i| rng::derive_indexed(master, "validation", i)).collect()
}

/// Runs every candidate on one dataset; a reward model is fitted once and
/// shared by the candidates that need it.
fn evaluate_sample(
    scenario: &Scenario,
    sample: &Sample,
    candidates: &[Candidate],
    opts: &RunOptions,
) -> Result<Vec<std::result::Result<f64, String>>> {
    let prepared = PreparedData::new(&sample.dataset, sample.target.as_ref())?;
    let needs_model = candidates.iter().any(|c| c.spec.backbone.needs_reward_model());
    let model: Option<std::result::Result<Arc<dyn RewardOracle>, String>> = needs_model.then(|| {
        fit_reward_model(&sample.dataset, opts.ridge_lambda)
            .map(|m| Arc::new(m) as Arc<dyn RewardOracle>)
            .map_err(|e| e.to_string())
    });
    Ok(candidates
        .iter()
        .map(|c| {
            let m = if c.spec.backbone.needs_reward_model() {
                Some(model.clone().expect("fitted")?)
            } else {
                None
            };
            let config = c.config(scenario.structure(), m, opts).map_err(|e| e.to_string())?;
            prepared.estimate(&config).map(|d| d.value).map_err(|e| e.to_string())
        })
        .collect())
}

/// Per-candidate outcomes over a list of seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialResult {
    pub candidate: Candidate,
    /// `None` where the estimator failed on that seed.
    pub estimates: Vec<Option<f64>>,
    pub true_values: Vec<f64>,
    pub failures: usize,
    /// Absent when more than half of the seeds failed.
    pub stats: Option<Stats>,
    pub first_error: Option<String>,
}

impl TrialResult {
    fn new(candidate: Candidate, runs: Vec<(f64, std::result::Result<f64, String>)>) -> Self {
        let n = runs.len();
        let mut estimates = Vec::with_capacity(n);
        let mut true_values = Vec::with_capacity(n);
        let mut first_error = None;
        for (v, r) in runs {
            true_values.push(v);
            match r {
                Ok(e) => estimates.push(Some(e)),
                Err(msg) => {
                    first_error.get_or_insert(msg);
                    estimates.push(None);
                }
            }
        }
        let (ok_est, ok_truth): (Vec<f64>, Vec<f64>) = estimates
            .iter()
            .zip(&true_values)
            .filter_map(|(e, v)| e.map(|e| (e, *v)))
            .unzip();
        let failures = n - ok_est.len();
        let stats = (failures * 2 <= n && !ok_est.is_empty()).then(|| summarize(&ok_est, &ok_truth));
        Self {
            candidate,
            estimates,
            true_values,
            failures,
            stats,
            first_error,
        }
    }

    pub fn n_seeds(&self) -> usize {
        self.estimates.len()
    }

    pub fn mean_true_value(&self) -> f64 {
        self.true_values.iter().sum::<f64>() / self.true_values.len().max(1) as f64
    }

    pub fn is_failed(&self) -> bool {
        self.stats.is_none()
    }
}

/// Runs all candidates on the datasets of every seed (in parallel over
/// seeds, results in seed order).
pub fn run_candidates(
    source: &ScenarioSource,
    candidates: &[Candidate],
    seeds: &[u64],
    opts: &RunOptions,
) -> Result<Vec<TrialResult>> {
    let per_seed: Vec<(f64, Vec<std::result::Result<f64, String>>)> = seeds
        .par_iter()
        .map(|&seed| {
            let scenario = source.scenario(seed)?;
            let sample = scenario.sample(seed)?;
            Ok((scenario.true_value(), evaluate_sample(&scenario, &sample, candidates, opts)?))
        })
        .collect::<Result<_>>()?;
    let mut columns: Vec<Vec<(f64, std::result::Result<f64, String>)>> =
        candidates.iter().map(|_| Vec::with_capacity(seeds.len())).collect();
    for (v, results) in per_seed {
        for (col, r) in columns.iter_mut().zip(results) {
            col.push((v, r));
        }
    }
    Ok(candidates
        .iter()
        .zip(columns)
        .map(|(c, runs)| TrialResult::new(*c, runs))
        .collect())
}

/// Replicates one candidate over `n_seeds` evaluation seeds.
pub fn replicate(
    source: &ScenarioSource,
    candidate: Candidate,
    n_seeds: usize,
    master_seed: u64,
    opts: &RunOptions,
) -> Result<TrialResult> {
    if n_seeds < 2 {
        return Err(Error::invalid("replication needs at least 2 seeds"));
    }
    let seeds = evaluation_seeds(master_seed, n_seeds);
    Ok(run_candidates(source, &[candidate], &seeds, opts)?.remove(0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn estimator_spec_round_trip() {
        for s in ["ips", "snips", "dm", "dr", "sndr", "pc-ips:tree", "pc-sndr:kernel", "pc-snips:knn", "pc-dr:ball"] {
            let spec: EstimatorSpec = s.parse().unwrap();
            assert_eq!(spec.to_string(), s);
        }
        assert_eq!("PC-IPS:tree".parse::<EstimatorSpec>().unwrap().label(), "PC-IPS");
        assert!("pc-dm:tree".parse::<EstimatorSpec>().is_err());
        assert!("pc-ips".parse::<EstimatorSpec>().is_err());
        assert!("pc-ips:cube".parse::<EstimatorSpec>().is_err());
        assert!("ipw".parse::<EstimatorSpec>().is_err());
    }

    #[test]
    fn seed_streams_are_disjoint() {
        let e = evaluation_seeds(3, 500);
        let v = validation_seeds(3, 500);
        assert!(e.iter().all(|s| !v.contains(s)));
        assert_eq!(e, evaluation_seeds(3, 500));
    }

    #[test]
    fn toy_ips_is_unbiased_and_pc_full_pooling_is_constant() {
        let src: ScenarioSource = toy_scenario(10).unwrap().into();
        let opts = RunOptions::default();
        let ips = replicate(&src, Candidate::plain(Backbone::Ips), 4000, 1, &opts).unwrap();
        let s = ips.stats.unwrap();
        assert_eq!(ips.mean_true_value(), 17.0);
        // sd of the mean is sqrt(47.35/4000) ≈ 0.11
        assert!((s.mean_estimate - 17.0).abs() < 0.5, "{}", s.mean_estimate);
        let full = TauPoint::At(3.0);
        let pc = replicate(&src, Candidate::pc(Backbone::Ips, ConvKind::Tree, full, full), 200, 1, &opts).unwrap();
        // with full pooling the estimate is the mean logged reward
        let pc_stats = pc.stats.unwrap();
        assert_relative_eq!(pc_stats.mean_estimate, 13.0, epsilon = 0.5);
    }

    #[test]
    fn identity_points_resolve_to_no_convolution() {
        let scenario = toy_scenario(5).unwrap();
        let s = scenario.structure();
        assert!(TauPoint::At(1.0).resolve(ConvKind::Tree, s, false).unwrap().is_none());
        assert!(TauPoint::At(1.0).resolve(ConvKind::Knn, s, false).unwrap().is_none());
        assert!(TauPoint::Identity.resolve(ConvKind::Kernel, s, false).unwrap().is_none());
        assert!(TauPoint::At(2.0).resolve(ConvKind::Tree, s, false).unwrap().is_some());
        assert!(TauPoint::At(0.5).resolve(ConvKind::Ball, s, false).unwrap().is_some());
        assert!(TauPoint::At(1.5).resolve(ConvKind::Ball, s, false).is_err());
        assert!(TauPoint::At(4.0).resolve(ConvKind::Tree, s, false).is_err());
    }

    #[test]
    fn failures_are_counted_not_imputed() {
        let src: ScenarioSource = toy_scenario(3).unwrap().into();
        // DM with no convolution on a toy context works; a tree level beyond
        // the depth fails on every seed.
        let bad = Candidate::pc(Backbone::Ips, ConvKind::Tree, TauPoint::At(9.0), TauPoint::At(9.0));
        let r = replicate(&src, bad, 5, 0, &RunOptions::default()).unwrap();
        assert_eq!(r.failures, 5);
        assert!(r.is_failed());
        assert!(r.first_error.unwrap().contains("level"));
    }

    #[test]
    fn replicate_needs_two_seeds() {
        let src: ScenarioSource = toy_scenario(3).unwrap().into();
        assert!(replicate(&src, Candidate::plain(Backbone::Ips), 1, 0, &RunOptions::default()).is_err());
    }
}
