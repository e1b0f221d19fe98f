use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::bandit::{dot, BanditDataset, EmbeddingTable, RewardOracle};
use crate::error::{Error, Result};

/// Solves `(XᵀX + λP) w = Xᵀy` where `P` is the identity with the
/// `unpenalized` column (if any) zeroed out.
pub fn ridge_solve(
    features: &[Vec<f64>],
    targets: &[f64],
    lambda: f64,
    unpenalized: Option<usize>,
) -> Result<Vec<f64>> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::invalid("ridge needs one target per non-empty feature row"));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("ridge lambda must be positive, got {lambda}")));
    }
    let p = features[0].len();
    let mut gram = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for (row, y) in features.iter().zip(targets) {
        if row.len() != p {
            return Err(Error::invalid("ragged ridge feature rows"));
        }
        for i in 0..p {
            rhs[i] += row[i] * y;
            for j in i..p {
                gram[(i, j)] += row[i] * row[j];
            }
        }
    }
    for i in 0..p {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
        if Some(i) != unpenalized {
            gram[(i, i)] += lambda;
        }
    }
    let solution = match gram.clone().cholesky() {
        Some(chol) => chol.solve(&rhs),
        None => gram
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Degenerate("singular ridge normal equations".into()))?,
    };
    Ok(solution.iter().copied().collect())
}

/// Linear reward model `δ̂(a, x) = w_x·x + w_e·E(a) + b` fitted by ridge
/// regression on logged rewards. The intercept is not penalised.
#[derive(Debug, Clone)]
pub struct RewardModel {
    context_weights: Vec<f64>,
    embedding_weights: Vec<f64>,
    intercept: f64,
    lambda: f64,
    /// `w_e·E(a)` for every action.
    action_scores: Vec<f64>,
}

impl RewardModel {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn context_weights(&self) -> &[f64] {
        &self.context_weights
    }

    pub fn embedding_weights(&self) -> &[f64] {
        &self.embedding_weights
    }

    fn context_part(&self, context: &[f64]) -> f64 {
        dot(&self.context_weights, context) + self.intercept
    }
}

impl RewardOracle for RewardModel {
    fn n_actions(&self) -> usize {
        self.action_scores.len()
    }

    fn expected_reward(&self, action: usize, context: &[f64]) -> f64 {
        self.context_part(context) + self.action_scores[action]
    }

    fn reward_row(&self, context: &[f64]) -> Vec<f64> {
        let base = self.context_part(context);
        self.action_scores.iter().map(|s| base + s).collect()
    }
}

/// Ridge fit of logged rewards on `[x ‖ E(a) ‖ 1]`.
pub fn fit_reward_model(dataset: &BanditDataset, lambda: f64) -> Result<RewardModel> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot fit a reward model on an empty dataset"));
    }
    let emb: &Arc<EmbeddingTable> = dataset.embeddings();
    let d_x = dataset.interactions()[0].context.len();
    let mut features = Vec::with_capacity(dataset.len());
    let mut targets = Vec::with_capacity(dataset.len());
    for it in dataset.interactions() {
        if it.context.len() != d_x {
            return Err(Error::invalid("contexts of differing dimension"));
        }
        let mut row = Vec::with_capacity(d_x + emb.dim() + 1);
        row.extend_from_slice(&it.context);
        row.extend_from_slice(emb.row(it.action));
        row.push(1.0);
        features.push(row);
        targets.push(it.reward);
    }
    let w = ridge_solve(&features, &targets, lambda, Some(d_x + emb.dim()))?;
    let context_weights = w[..d_x].to_vec();
    let embedding_weights = w[d_x..d_x + emb.dim()].to_vec();
    let action_scores = (0..emb.n_actions())
        .map(|a| dot(&embedding_weights, emb.row(a)))
        .collect();
    Ok(RewardModel {
        context_weights,
        embedding_weights,
        intercept: w[d_x + emb.dim()],
        lambda,
        action_scores,
    })
}
