//! Contextual-bandit domain types shared by every other module.
//!
//! Contexts are dense real vectors. A [`Policy`] yields a full probability
//! row over actions for a context; a [`RewardOracle`] yields the expected
//! reward of an action in a context. Logged data is a [`BanditDataset`] whose
//! logging propensities are cached when the dataset is built.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use crate::error::{Error, Result};

/// Anything that yields a probability distribution over actions per context.
///
/// Implementations must return rows of length `n_actions()` with nonnegative
/// entries summing to one.
pub trait Policy: Send + Sync {
    fn n_actions(&self) -> usize;

    fn prob_row(&self, context: &[f64]) -> Vec<f64>;

    fn prob(&self, action: usize, context: &[f64]) -> f64 {
        self.prob_row(context)[action]
    }
}

/// Expected reward `δ(a, x)`. Deterministic for fixed inputs.
pub trait RewardOracle: Send + Sync {
    fn n_actions(&self) -> usize;

    fn expected_reward(&self, action: usize, context: &[f64]) -> f64;

    /// Expected reward of every action in `context`.
    fn reward_row(&self, context: &[f64]) -> Vec<f64> {
        (0..self.n_actions())
            .map(|a| self.expected_reward(a, context))
            .collect()
    }
}

impl<T: Policy + ?Sized> Policy for Arc<T> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        (**self).prob_row(context)
    }
    fn prob(&self, action: usize, context: &[f64]) -> f64 {
        (**self).prob(action, context)
    }
}

impl<T: RewardOracle + ?Sized> RewardOracle for Arc<T> {
    fn n_actions(&self) -> usize {
        (**self).n_actions()
    }
    fn expected_reward(&self, action: usize, context: &[f64]) -> f64 {
        (**self).expected_reward(action, context)
    }
    fn reward_row(&self, context: &[f64]) -> Vec<f64> {
        (**self).reward_row(context)
    }
}

/// Action embeddings `E(a)`, one row per action.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    n_actions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(n_actions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if n_actions == 0 || dim == 0 {
            return Err(Error::invalid("embedding table must be non-empty"));
        }
        if data.len() != n_actions * dim {
            return Err(Error::invalid(format!(
                "embedding data has {} entries, expected {n_actions}x{dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite embedding entry for action {}",
                i / dim
            )));
        }
        Ok(Self {
            n_actions,
            dim,
            data,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("ragged embedding rows"));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, action: usize) -> &[f64] {
        &self.data[action * self.dim..(action + 1) * self.dim]
    }

    pub fn sq_distance(&self, a: usize, b: usize) -> f64 {
        self.row(a)
            .iter()
            .zip(self.row(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum()
    }
}

/// One logged `(x, a, r)` tuple.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedInteraction {
    pub context: Vec<f64>,
    pub action: usize,
    pub reward: f64,
}

/// Provenance of a generated dataset.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetMeta {
    pub environment: String,
    pub seed: u64,
}

/// Logged bandit feedback together with the logging policy that produced it.
#[derive(Clone)]
pub struct BanditDataset {
    interactions: Vec<LoggedInteraction>,
    n_actions: usize,
    logging_policy: Arc<dyn Policy>,
    embeddings: Arc<EmbeddingTable>,
    propensities: Vec<f64>,
    meta: DatasetMeta,
}

impl std::fmt::Debug for BanditDataset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BanditDataset")
            .field("len", &self.interactions.len())
            .field("n_actions", &self.n_actions)
            .field("meta", &self.meta)
            .finish()
    }
}

impl BanditDataset {
    /// Builds a dataset and caches `μ(a_i | x_i)` for every interaction.
    ///
    /// Zero propensities are stored as-is; they are reported by
    /// [`BanditDataset::logged_propensity`] and by the estimators.
    pub fn new(
        interactions: Vec<LoggedInteraction>,
        logging_policy: Arc<dyn Policy>,
        embeddings: Arc<EmbeddingTable>,
        meta: DatasetMeta,
    ) -> Result<Self> {
        let n_actions = logging_policy.n_actions();
        if embeddings.n_actions() != n_actions {
            return Err(Error::invalid(format!(
                "embedding table has {} rows but the logging policy covers {n_actions} actions",
                embeddings.n_actions()
            )));
        }
        let mut propensities = Vec::with_capacity(interactions.len());
        for (i, it) in interactions.iter().enumerate() {
            if it.action >= n_actions {
                return Err(Error::DataIntegrity {
                    index: i,
                    reason: format!("action {} out of range 0..{n_actions}", it.action),
                });
            }
            if !it.reward.is_finite() {
                return Err(Error::DataIntegrity {
                    index: i,
                    reason: "non-finite reward".into(),
                });
            }
            propensities.push(logging_policy.prob(it.action, &it.context));
        }
        Self::with_propensities(interactions, logging_policy, embeddings, meta, propensities)
    }

    /// Like [`BanditDataset::new`] but trusts propensities the caller already
    /// computed while sampling.
    pub(crate) fn with_propensities(
        interactions: Vec<LoggedInteraction>,
        logging_policy: Arc<dyn Policy>,
        embeddings: Arc<EmbeddingTable>,
        meta: DatasetMeta,
        propensities: Vec<f64>,
    ) -> Result<Self> {
        let n_actions = logging_policy.n_actions();
        if embeddings.n_actions() != n_actions || propensities.len() != interactions.len() {
            return Err(Error::invalid("dataset parts disagree in size"));
        }
        Ok(Self {
            interactions,
            n_actions,
            logging_policy,
            embeddings,
            propensities,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn interactions(&self) -> &[LoggedInteraction] {
        &self.interactions
    }

    pub fn logging_policy(&self) -> &Arc<dyn Policy> {
        &self.logging_policy
    }

    pub fn embeddings(&self) -> &Arc<EmbeddingTable> {
        &self.embeddings
    }

    pub fn meta(&self) -> &DatasetMeta {
        &self.meta
    }

    /// Cached propensities, including any zeros.
    pub fn propensities(&self) -> &[f64] {
        &self.propensities
    }

    /// `μ(a_i | x_i)` for the `index`-th interaction; strictly positive.
    pub fn logged_propensity(&self, index: usize) -> Result<f64> {
        let p = *self.propensities.get(index).ok_or_else(|| {
            Error::invalid(format!(
                "interaction index {index} out of range (len {})",
                self.len()
            ))
        })?;
        if p > 0.0 {
            Ok(p)
        } else {
            Err(Error::DataIntegrity {
                index,
                reason: "logging policy assigns zero probability to the logged action".into(),
            })
        }
    }

    pub fn mean_reward(&self) -> f64 {
        self.interactions.iter().map(|i| i.reward).sum::<f64>() / self.len() as f64
    }
}

/// Probability rows of one policy evaluated at a fixed list of contexts,
/// stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyRows {
    n_actions: usize,
    data: Vec<f64>,
}

impl PolicyRows {
    pub fn evaluate<'a, I>(policy: &dyn Policy, contexts: I) -> Self
    where
        I: IntoIterator<Item = &'a [f64]>,
    {
        let n_actions = policy.n_actions();
        let mut data = Vec::new();
        for x in contexts {
            data.extend(policy.prob_row(x));
        }
        Self { n_actions, data }
    }

    pub fn for_dataset(policy: &dyn Policy, dataset: &BanditDataset) -> Self {
        Self::evaluate(
            policy,
            dataset.interactions().iter().map(|i| i.context.as_slice()),
        )
    }

    pub fn n_actions(&self) -> usize {
        self.n_actions
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.n_actions.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.n_actions..(i + 1) * self.n_actions]
    }
}

/// Value of `policy`: mean over `test_contexts` of `Σ_a π(a|x)·δ(a,x)`.
pub fn true_value(
    policy: &dyn Policy,
    oracle: &dyn RewardOracle,
    test_contexts: &[Vec<f64>],
) -> Result<f64> {
    if test_contexts.is_empty() {
        return Err(Error::invalid("true_value needs at least one test context"));
    }
    if policy.n_actions() != oracle.n_actions() {
        return Err(Error::invalid(format!(
            "policy covers {} actions, oracle {}",
            policy.n_actions(),
            oracle.n_actions()
        )));
    }
    let total: f64 = test_contexts
        .iter()
        .map(|x| {
            let row = policy.prob_row(x);
            let rewards = oracle.reward_row(x);
            dot(&row, &rewards)
        })
        .sum();
    Ok(total / test_contexts.len() as f64)
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// The uniform policy over `n` actions.
#[derive(Debug, Clone, Copy)]
pub struct UniformPolicy {
    pub n_actions: usize,
}

impl Policy for UniformPolicy {
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn prob_row(&self, _context: &[f64]) -> Vec<f64> {
        vec![1.0 / self.n_actions as f64; self.n_actions]
    }
    fn prob(&self, _action: usize, _context: &[f64]) -> f64 {
        1.0 / self.n_actions as f64
    }
}

/// A policy over a finite set of contexts. The context's first coordinate,
/// rounded, selects the row.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    rows: Vec<Vec<f64>>,
}

impl TabularPolicy {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 {
            return Err(Error::invalid("tabular policy needs at least one action"));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(Error::invalid("ragged tabular policy rows"));
            }
            let s: f64 = r.iter().sum();
            if r.iter().any(|p| *p < 0.0 || !p.is_finite()) || (s - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!(
                    "row {i} is not a probability distribution (sum {s})"
                )));
            }
        }
        Ok(Self { rows })
    }

    pub fn single(row: Vec<f64>) -> Result<Self> {
        Self::new(vec![row])
    }

    fn index(&self, context: &[f64]) -> usize {
        context.first().map_or(0, |c| c.round().max(0.0) as usize)
    }
}

impl Policy for TabularPolicy {
    fn n_actions(&self) -> usize {
        self.rows[0].len()
    }
    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        self.rows[self.index(context)].clone()
    }
    fn prob(&self, action: usize, context: &[f64]) -> f64 {
        self.rows[self.index(context)][action]
    }
}

/// Tabular counterpart of [`TabularPolicy`] for rewards.
#[derive(Debug, Clone)]
pub struct TabularOracle {
    rows: Vec<Vec<f64>>,
}

impl TabularOracle {
    pub fn new(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.first().map_or(0, Vec::len);
        if n == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::invalid("tabular oracle rows must be non-empty and equal length"));
        }
        Ok(Self { rows })
    }

    pub fn single(row: Vec<f64>) -> Result<Self> {
        Self::new(vec![row])
    }
}

impl RewardOracle for TabularOracle {
    fn n_actions(&self) -> usize {
        self.rows[0].len()
    }
    fn expected_reward(&self, action: usize, context: &[f64]) -> f64 {
        let i = context.first().map_or(0, |c| c.round().max(0.0) as usize);
        self.rows[i][action]
    }
}

/// `δ̂ ≡ c`.
#[derive(Debug, Clone, Copy)]
pub struct ConstantReward {
    pub n_actions: usize,
    pub value: f64,
}

impl RewardOracle for ConstantReward {
    fn n_actions(&self) -> usize {
        self.n_actions
    }
    fn expected_reward(&self, _action: usize, _context: &[f64]) -> f64 {
        self.value
    }
}

/// Memoises reward rows per context so that several policies built over the
/// same oracle share one evaluation of `δ(·, x)`.
///
/// The cache is cleared wholesale once it holds `capacity` rows.
pub struct CachedOracle<O> {
    inner: O,
    capacity: usize,
    rows: Mutex<HashMap<Vec<u64>, Arc<[f64]>>>,
}

impl<O: RewardOracle> CachedOracle<O> {
    pub fn new(inner: O, capacity: usize) -> Self {
        Self {
            inner,
            capacity: capacity.max(1),
            rows: Mutex::new(HashMap::new()),
        }
    }

    pub fn inner(&self) -> &O {
        &self.inner
    }

    pub fn shared_row(&self, context: &[f64]) -> Arc<[f64]> {
        let key: Vec<u64> = context.iter().map(|v| v.to_bits()).collect();
        if let Some(row) = self.rows.lock().expect("oracle cache poisoned").get(&key) {
            return Arc::clone(row);
        }
        let row: Arc<[f64]> = self.inner.reward_row(context).into();
        let mut cache = self.rows.lock().expect("oracle cache poisoned");
        if cache.len() >= self.capacity {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&row));
        row
    }
}

impl<O: RewardOracle> RewardOracle for CachedOracle<O> {
    fn n_actions(&self) -> usize {
        self.inner.n_actions()
    }
    fn expected_reward(&self, action: usize, context: &[f64]) -> f64 {
        self.shared_row(context)[action]
    }
    fn reward_row(&self, context: &[f64]) -> Vec<f64> {
        self.shared_row(context).to_vec()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn toy_oracle() -> TabularOracle {
        TabularOracle::single(vec![5.0, 10.0, 15.0, 20.0]).unwrap()
    }

    fn embeddings(n: usize) -> Arc<EmbeddingTable> {
        Arc::new(EmbeddingTable::new(n, 1, (0..n).map(|i| i as f64).collect()).unwrap())
    }

    #[test]
    fn toy_values() {
        let x = vec![vec![0.0]];
        let pi = TabularPolicy::single(vec![0.0, 0.2, 0.2, 0.6]).unwrap();
        let mu = TabularPolicy::single(vec![0.2, 0.2, 0.4, 0.2]).unwrap();
        assert_relative_eq!(true_value(&pi, &toy_oracle(), &x).unwrap(), 17.0, epsilon = 1e-12);
        assert_relative_eq!(true_value(&mu, &toy_oracle(), &x).unwrap(), 13.0, epsilon = 1e-12);
        let uni = UniformPolicy { n_actions: 4 };
        assert_relative_eq!(true_value(&uni, &toy_oracle(), &x).unwrap(), 12.5, epsilon = 1e-12);
    }

    #[test]
    fn true_value_rejects_empty_contexts() {
        let uni = UniformPolicy { n_actions: 4 };
        assert!(matches!(
            true_value(&uni, &toy_oracle(), &[]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn true_value_rejects_mismatched_action_counts() {
        let uni = UniformPolicy { n_actions: 3 };
        assert!(true_value(&uni, &toy_oracle(), &[vec![0.0]]).is_err());
    }

    #[test]
    fn logged_propensity_cases() {
        let mu: Arc<dyn Policy> =
            Arc::new(TabularPolicy::single(vec![0.2, 0.2, 0.4, 0.2]).unwrap());
        let ds = BanditDataset::new(
            vec![LoggedInteraction {
                context: vec![0.0],
                action: 3,
                reward: 20.0,
            }],
            mu,
            embeddings(4),
            DatasetMeta::default(),
        )
        .unwrap();
        assert_relative_eq!(ds.logged_propensity(0).unwrap(), 0.2);
        assert!(ds.logged_propensity(1).is_err());

        let uni: Arc<dyn Policy> = Arc::new(UniformPolicy { n_actions: 4 });
        let ds = BanditDataset::new(
            vec![LoggedInteraction {
                context: vec![0.3, -1.0],
                action: 1,
                reward: 0.5,
            }],
            uni,
            embeddings(4),
            DatasetMeta::default(),
        )
        .unwrap();
        assert_relative_eq!(ds.logged_propensity(0).unwrap(), 0.25);

        let degenerate: Arc<dyn Policy> =
            Arc::new(TabularPolicy::single(vec![0.0, 0.5, 0.5, 0.0]).unwrap());
        let ds = BanditDataset::new(
            vec![LoggedInteraction {
                context: vec![0.0],
                action: 0,
                reward: 1.0,
            }],
            degenerate,
            embeddings(4),
            DatasetMeta::default(),
        )
        .unwrap();
        assert!(matches!(
            ds.logged_propensity(0),
            Err(Error::DataIntegrity { index: 0, .. })
        ));
    }

    #[test]
    fn dataset_rejects_out_of_range_action() {
        let uni: Arc<dyn Policy> = Arc::new(UniformPolicy { n_actions: 4 });
        let err = BanditDataset::new(
            vec![LoggedInteraction {
                context: vec![0.0],
                action: 4,
                reward: 1.0,
            }],
            uni,
            embeddings(4),
            DatasetMeta::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::DataIntegrity { index: 0, .. }));
    }

    #[test]
    fn cached_oracle_matches_inner_and_evicts() {
        let cached = CachedOracle::new(toy_oracle(), 2);
        for i in 0..5 {
            let x = [0.0, i as f64];
            assert_eq!(cached.reward_row(&x), toy_oracle().reward_row(&x));
        }
        assert!(cached.rows.lock().unwrap().len() <= 2);
    }

    proptest! {
        #[test]
        fn uniform_true_value_is_mean_reward(
            rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 6), 1..5)
        ) {
            let oracle = TabularOracle::new(rows.clone()).unwrap();
            let contexts: Vec<Vec<f64>> = (0..rows.len()).map(|i| vec![i as f64]).collect();
            let v = true_value(&UniformPolicy { n_actions: 6 }, &oracle, &contexts).unwrap();
            let direct = rows.iter().map(|r| r.iter().sum::<f64>() / 6.0).sum::<f64>()
                / rows.len() as f64;
            prop_assert!((v - direct).abs() < 1e-12);
        }

        #[test]
        fn true_value_ignores_context_order(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 3), 2..6),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let oracle = TabularOracle::new(rows.clone()).unwrap();
            let pol = TabularPolicy::new(vec![vec![0.5, 0.3, 0.2]; rows.len()]).unwrap();
            let mut contexts: Vec<Vec<f64>> = (0..rows.len()).map(|i| vec![i as f64]).collect();
            let before = true_value(&pol, &oracle, &contexts).unwrap();
            contexts.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let after = true_value(&pol, &oracle, &contexts).unwrap();
            prop_assert!((before - after).abs() < 1e-12);
        }
    }
}
