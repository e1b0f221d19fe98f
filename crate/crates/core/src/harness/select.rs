use serde::{Deserialize, Serialize};

use super::{run_candidates, validation_seeds, Candidate, RunOptions, ScenarioSource, TauPoint};
use crate::error::{Error, Result};
use crate::estimators::Backbone;
use crate::structure::{ActionTree, ConvKind};

/// How the target-side and logging-side amounts are searched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauConstraint {
    /// Every `(τ1, τ2)` pair of the grid.
    #[default]
    Free,
    /// `τ1 = τ2`.
    Equal,
    /// Only the target policy is convolved.
    TargetOnly,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SelectionOptions {
    pub constraint: TauConstraint,
    pub include_identity: bool,
    pub validation_seeds: usize,
    pub master_seed: u64,
}

impl Default for SelectionOptions {
    fn default() -> Self {
        Self {
            constraint: TauConstraint::Free,
            include_identity: false,
            validation_seeds: 10,
            master_seed: 0,
        }
    }
}

/// The chosen pair and its validation error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Selection {
    pub tau1: TauPoint,
    pub tau2: TauPoint,
    pub validation_mse: f64,
}

/// Default grid coordinates for `kind` (see [`TauPoint`] for their meaning).
pub fn default_tau_grid(kind: ConvKind, n_actions: usize, tree_depth: Option<usize>) -> Vec<TauPoint> {
    let values: Vec<f64> = match kind {
        ConvKind::Tree => (1..=tree_depth.unwrap_or_else(|| ActionTree::max_depth(n_actions)))
            .map(|l| l as f64)
            .collect(),
        ConvKind::Knn => [1usize, 2, 5, 10, 20, 50, 100]
            .into_iter()
            .filter(|k| *k <= n_actions)
            .map(|k| k as f64)
            .collect(),
        ConvKind::Ball => vec![0.01, 0.05, 0.10, 0.25, 0.50],
        ConvKind::Kernel => vec![0.1, 0.25, 0.5, 1.0, 2.0, 4.0],
    };
    values.into_iter().map(TauPoint::At).collect()
}

/// The `(τ1, τ2)` pairs searched for a grid. Identity points are dropped
/// unless `include_identity` is set or nothing else is left.
pub fn candidate_pairs(
    kind: ConvKind,
    grid: &[TauPoint],
    constraint: TauConstraint,
    include_identity: bool,
) -> Vec<(TauPoint, TauPoint)> {
    let mut points: Vec<TauPoint> = if include_identity {
        let mut p = grid.to_vec();
        if !p.iter().any(|t| t.is_identity(kind)) {
            p.insert(0, TauPoint::Identity);
        }
        p
    } else {
        let p: Vec<TauPoint> = grid.iter().copied().filter(|t| !t.is_identity(kind)).collect();
        if p.is_empty() {
            grid.to_vec()
        } else {
            p
        }
    };
    points.dedup();
    match constraint {
        TauConstraint::Equal => points.iter().map(|&t| (t, t)).collect(),
        TauConstraint::TargetOnly => points.iter().map(|&t| (t, TauPoint::Identity)).collect(),
        TauConstraint::Free => points
            .iter()
            .flat_map(|&a| points.iter().map(move |&b| (a, b)))
            .collect(),
    }
}

/// Selects `(τ1, τ2)` for several estimators at once, sharing the
/// validation datasets. Each entry is `(backbone, kind, grid)`.
pub fn select_many(
    source: &ScenarioSource,
    requests: &[(Backbone, ConvKind, Vec<TauPoint>)],
    sel: &SelectionOptions,
    opts: &RunOptions,
) -> Result<Vec<Result<Selection>>> {
    if sel.validation_seeds == 0 {
        return Err(Error::Config("validation_seeds must be positive".into()));
    }
    let mut candidates = Vec::new();
    let mut spans = Vec::with_capacity(requests.len());
    for (backbone, kind, grid) in requests {
        if grid.is_empty() {
            return Err(Error::Config(format!("empty tau grid for {kind}")));
        }
        let start = candidates.len();
        for (t1, t2) in candidate_pairs(*kind, grid, sel.constraint, sel.include_identity) {
            candidates.push(Candidate::pc(*backbone, *kind, t1, t2));
        }
        spans.push(start..candidates.len());
    }
    let seeds = validation_seeds(sel.master_seed, sel.validation_seeds);
    let results = run_candidates(source, &candidates, &seeds, opts)?;
    Ok(spans
        .into_iter()
        .map(|span| {
            let mut best: Option<Selection> = None;
            let mut last_error = None;
            for r in &results[span] {
                let Some(stats) = r.stats else {
                    last_error = r.first_error.clone();
                    continue;
                };
                let (t1, t2) = r.candidate.taus.expect("pc candidate");
                let cand = Selection {
                    tau1: t1,
                    tau2: t2,
                    validation_mse: stats.mse,
                };
                if best.is_none_or(|b| better(&cand, &b)) {
                    best = Some(cand);
                }
            }
            best.ok_or_else(|| {
                Error::Selection(format!(
                    "every tau pair failed on validation data{}",
                    last_error.map(|e| format!(" (e.g. {e})")).unwrap_or_default()
                ))
            })
        })
        .collect())
}

/// Lower validation MSE wins; ties go to the smaller `τ1 + τ2`, then the
/// smaller `τ1`.
fn better(a: &Selection, b: &Selection) -> bool {
    let key = |s: &Selection| (s.tau1.magnitude() + s.tau2.magnitude(), s.tau1.magnitude());
    match a.validation_mse.total_cmp(&b.validation_mse) {
        std::cmp::Ordering::Less => true,
        std::cmp::Ordering::Greater => false,
        std::cmp::Ordering::Equal => {
            let (ka, kb) = (key(a), key(b));
            ka.0 < kb.0 || (ka.0 == kb.0 && ka.1 < kb.1)
        }
    }
}

/// Grid search of `(τ1, τ2)` by validation MSE against the true value.
pub fn select_tau(
    source: &ScenarioSource,
    backbone: Backbone,
    kind: ConvKind,
    grid: &[TauPoint],
    sel: &SelectionOptions,
    opts: &RunOptions,
) -> Result<Selection> {
    select_many(source, &[(backbone, kind, grid.to_vec())], sel, opts)?.remove(0)
}
