//! Action-action similarity functions and the policy-convolution operator.
//!
//! An [`ActionStructure`] holds everything precomputed from the embeddings
//! (the action tree and the neighbour index). A [`SimilarityOperator`] pairs
//! that structure with one [`Convolution`] and its amount `τ`; it evaluates
//! `f_τ(E(a), E(a'))` rows and the convolved probability
//! `(π(·|x) ∗ f_τ)(a) = Σ_{a'} π(a'|x)·f_τ(E(a), E(a'))`.

mod neighbors;
mod tree;

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use neighbors::{NeighborIndex, NeighborRow, PRECOMPUTE_LIMIT};
pub use tree::{build_tree, ActionTree};

use crate::bandit::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvKind {
    Kernel,
    Tree,
    Ball,
    Knn,
}

impl ConvKind {
    pub fn name(self) -> &'static str {
        match self {
            ConvKind::Kernel => "kernel",
            ConvKind::Tree => "tree",
            ConvKind::Ball => "ball",
            ConvKind::Knn => "knn",
        }
    }

    /// Builds the convolution of this kind with amount `tau`.
    pub fn with_tau(self, tau: f64) -> Result<Convolution> {
        let int = || {
            if tau >= 1.0 && tau.fract() == 0.0 {
                Ok(tau as usize)
            } else {
                Err(Error::invalid(format!("{} needs a positive integer tau, got {tau}", self.name())))
            }
        };
        Ok(match self {
            ConvKind::Kernel => Convolution::Kernel { bandwidth: tau },
            ConvKind::Ball => Convolution::Ball { radius_sq: tau },
            ConvKind::Tree => Convolution::Tree { level: int()? },
            ConvKind::Knn => Convolution::Knn { k: int()? },
        })
    }
}

impl fmt::Display for ConvKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ConvKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "kernel" => Ok(ConvKind::Kernel),
            "tree" => Ok(ConvKind::Tree),
            "ball" => Ok(ConvKind::Ball),
            "knn" => Ok(ConvKind::Knn),
            other => Err(Error::Config(format!("unknown convolution kind `{other}`"))),
        }
    }
}

/// A convolution function together with its amount of convolution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Convolution {
    /// Product Gaussian kernel with the given bandwidth.
    Kernel { bandwidth: f64 },
    /// Uniform averaging within the meta-action at the given tree level.
    Tree { level: usize },
    /// Uniform averaging over actions with squared distance below `radius_sq`.
    Ball { radius_sq: f64 },
    /// Uniform averaging over the `k` nearest actions (self included).
    Knn { k: usize },
}

impl Convolution {
    pub fn kind(&self) -> ConvKind {
        match self {
            Convolution::Kernel { .. } => ConvKind::Kernel,
            Convolution::Tree { .. } => ConvKind::Tree,
            Convolution::Ball { .. } => ConvKind::Ball,
            Convolution::Knn { .. } => ConvKind::Knn,
        }
    }

    pub fn tau(&self) -> f64 {
        match *self {
            Convolution::Kernel { bandwidth } => bandwidth,
            Convolution::Tree { level } => level as f64,
            Convolution::Ball { radius_sq } => radius_sq,
            Convolution::Knn { k } => k as f64,
        }
    }
}

/// Precomputed action structure shared by all operators over one embedding
/// table.
#[derive(Debug)]
pub struct ActionStructure {
    embeddings: Arc<EmbeddingTable>,
    tree: Option<ActionTree>,
    neighbors: NeighborIndex,
    /// Sorted sample of off-diagonal squared distances, used for default grids.
    distance_sample: Vec<f64>,
}

const MAX_EXACT_PAIRS: usize = 2_000_000;
const SAMPLED_PAIRS: usize = 1_000_000;

impl ActionStructure {
    /// `tree_depth = None` picks the deepest tree the action count allows.
    pub fn new(embeddings: Arc<EmbeddingTable>, tree_depth: Option<usize>, seed: u64) -> Result<Self> {
        let n = embeddings.n_actions();
        let depth = tree_depth.unwrap_or_else(|| ActionTree::max_depth(n));
        let tree = Some(build_tree(&embeddings, depth, seed)?);
        let neighbors = NeighborIndex::new(&embeddings);
        let distance_sample = pair_distances(&embeddings, seed);
        Ok(Self {
            embeddings,
            tree,
            neighbors,
            distance_sample,
        })
    }

    /// Uses a caller-supplied tree instead of building one.
    pub fn with_tree(embeddings: Arc<EmbeddingTable>, tree: ActionTree) -> Result<Self> {
        if tree.n_actions() != embeddings.n_actions() {
            return Err(Error::invalid("tree and embeddings disagree on the action count"));
        }
        let neighbors = NeighborIndex::new(&embeddings);
        let distance_sample = pair_distances(&embeddings, 0);
        Ok(Self {
            embeddings,
            tree: Some(tree),
            neighbors,
            distance_sample,
        })
    }

    pub fn embeddings(&self) -> &Arc<EmbeddingTable> {
        &self.embeddings
    }

    pub fn n_actions(&self) -> usize {
        self.embeddings.n_actions()
    }

    pub fn tree(&self) -> Option<&ActionTree> {
        self.tree.as_ref()
    }

    pub fn tree_depth(&self) -> usize {
        self.tree.as_ref().map_or(0, ActionTree::depth)
    }

    pub fn neighbors(&self) -> &NeighborIndex {
        &self.neighbors
    }

    /// Quantile (linear interpolation) of the off-diagonal squared distances.
    pub fn sq_distance_quantile(&self, q: f64) -> f64 {
        quantile(&self.distance_sample, q)
    }

    /// Whether `conv` reproduces every policy row unchanged.
    pub fn is_identity(&self, conv: &Convolution) -> bool {
        match *conv {
            Convolution::Tree { level } => level == 1,
            Convolution::Knn { k } => k == 1,
            Convolution::Ball { radius_sq } => (0..self.n_actions()).all(|a| {
                let row = self.neighbors.row(&self.embeddings, a);
                row.sq_dist.get(1).is_none_or(|d| *d >= radius_sq)
            }),
            Convolution::Kernel { .. } => false,
        }
    }

    /// Default grid of convolution amounts for `kind`:
    /// tree levels `1..=D`; kNN `{1,2,5,10,20,50,100}`; ball radii at the
    /// 1/5/10/25/50% quantiles of pairwise squared distance; kernel
    /// bandwidths `{0.1,0.25,0.5,1,2,4}` times the median pairwise distance.
    pub fn default_grid(&self, kind: ConvKind) -> Vec<Convolution> {
        let n = self.n_actions();
        match kind {
            ConvKind::Tree => (1..=self.tree_depth())
                .map(|level| Convolution::Tree { level })
                .collect(),
            ConvKind::Knn => [1, 2, 5, 10, 20, 50, 100]
                .into_iter()
                .filter(|k| *k <= n)
                .map(|k| Convolution::Knn { k })
                .collect(),
            ConvKind::Ball => {
                let mut radii: Vec<f64> = [0.01, 0.05, 0.10, 0.25, 0.50]
                    .iter()
                    .map(|q| self.sq_distance_quantile(*q))
                    .filter(|r| *r > 0.0)
                    .collect();
                radii.dedup();
                radii
                    .into_iter()
                    .map(|radius_sq| Convolution::Ball { radius_sq })
                    .collect()
            }
            ConvKind::Kernel => {
                let median = self.sq_distance_quantile(0.5).sqrt();
                let scale = if median > 0.0 { median } else { 1.0 };
                [0.1, 0.25, 0.5, 1.0, 2.0, 4.0]
                    .iter()
                    .map(|m| Convolution::Kernel { bandwidth: m * scale })
                    .collect()
            }
        }
    }
}

fn pair_distances(embeddings: &EmbeddingTable, seed: u64) -> Vec<f64> {
    let n = embeddings.n_actions();
    let pairs = n * n.saturating_sub(1) / 2;
    let mut out = Vec::with_capacity(pairs.min(MAX_EXACT_PAIRS));
    if pairs <= MAX_EXACT_PAIRS {
        for a in 0..n {
            for b in a + 1..n {
                out.push(embeddings.sq_distance(a, b));
            }
        }
    } else {
        let mut r = rng::stream(seed, "pair-distance-sample");
        while out.len() < SAMPLED_PAIRS {
            let a = r.random_range(0..n);
            let b = r.random_range(0..n);
            if a != b {
                out.push(embeddings.sq_distance(a, b));
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// A prepared convolution function `f_τ`.
#[derive(Debug, Clone)]
pub struct SimilarityOperator {
    structure: Arc<ActionStructure>,
    conv: Convolution,
    normalize: bool,
}

impl SimilarityOperator {
    pub fn new(structure: Arc<ActionStructure>, conv: Convolution) -> Result<Self> {
        let n = structure.n_actions();
        match conv {
            Convolution::Kernel { bandwidth } => {
                if !(bandwidth > 0.0 && bandwidth.is_finite()) {
                    return Err(Error::invalid(format!("kernel bandwidth must be positive, got {bandwidth}")));
                }
            }
            Convolution::Tree { level } => {
                let depth = structure.tree_depth();
                if level == 0 || level > depth {
                    return Err(Error::invalid(format!("tree level {level} outside 1..={depth}")));
                }
            }
            Convolution::Ball { radius_sq } => {
                if !(radius_sq > 0.0 && radius_sq.is_finite()) {
                    return Err(Error::invalid(format!(
                        "ball radius must be positive (a zero radius leaves the ball empty), got {radius_sq}"
                    )));
                }
            }
            Convolution::Knn { k } => {
                if k == 0 || k > n {
                    return Err(Error::invalid(format!("knn k={k} outside 1..={n}")));
                }
            }
        }
        Ok(Self {
            structure,
            conv,
            normalize: false,
        })
    }

    /// Renormalise similarity rows to sum to one. Only changes kernel
    /// operators; the other kinds are already row-stochastic.
    pub fn normalized(mut self, on: bool) -> Self {
        self.normalize = on;
        self
    }

    pub fn convolution(&self) -> Convolution {
        self.conv
    }

    pub fn structure(&self) -> &Arc<ActionStructure> {
        &self.structure
    }

    pub fn is_identity(&self) -> bool {
        self.structure.is_identity(&self.conv)
    }

    fn kernel_value(&self, bandwidth: f64, sq_dist: f64) -> f64 {
        let d = self.structure.embeddings.dim() as f64;
        let log_norm = -0.5 * d * (2.0 * std::f64::consts::PI).ln() - d * bandwidth.ln();
        (log_norm - sq_dist / (2.0 * bandwidth * bandwidth)).exp()
    }

    /// `(f_τ(E(action), E(a')))_{a'}`.
    pub fn similarity_row(&self, action: usize) -> Vec<f64> {
        let s = &self.structure;
        let n = s.n_actions();
        let mut row = vec![0.0; n];
        match self.conv {
            Convolution::Kernel { bandwidth } => {
                for (b, v) in row.iter_mut().enumerate() {
                    *v = self.kernel_value(bandwidth, s.embeddings.sq_distance(action, b));
                }
                if self.normalize {
                    let z: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= z);
                }
            }
            Convolution::Tree { level } => {
                let c = s.tree.as_ref().expect("validated").cluster_of(level, action);
                for &b in c {
                    row[b] = 1.0 / c.len() as f64;
                }
            }
            Convolution::Knn { k } => {
                let nb = s.neighbors.row(&s.embeddings, action);
                for &b in &nb.order[..k] {
                    row[b as usize] = 1.0 / k as f64;
                }
            }
            Convolution::Ball { radius_sq } => {
                let nb = s.neighbors.row(&s.embeddings, action);
                let count = ball_count(&nb.sq_dist, radius_sq);
                for &b in &nb.order[..count] {
                    row[b as usize] = 1.0 / count as f64;
                }
            }
        }
        row
    }

    /// `Σ_{a'} policy_row[a']·f_τ(E(action), E(a'))`.
    pub fn convolve(&self, policy_row: &[f64], action: usize) -> f64 {
        let s = &self.structure;
        debug_assert_eq!(policy_row.len(), s.n_actions());
        match self.conv {
            Convolution::Kernel { bandwidth } => {
                let (mut num, mut z) = (0.0, 0.0);
                for (b, p) in policy_row.iter().enumerate() {
                    let f = self.kernel_value(bandwidth, s.embeddings.sq_distance(action, b));
                    num += p * f;
                    z += f;
                }
                if self.normalize {
                    num / z
                } else {
                    num
                }
            }
            Convolution::Tree { level } => {
                let c = s.tree.as_ref().expect("validated").cluster_of(level, action);
                c.iter().map(|&b| policy_row[b]).sum::<f64>() / c.len() as f64
            }
            Convolution::Knn { k } => {
                let nb = s.neighbors.row(&s.embeddings, action);
                nb.order[..k].iter().map(|&b| policy_row[b as usize]).sum::<f64>() / k as f64
            }
            Convolution::Ball { radius_sq } => {
                let nb = s.neighbors.row(&s.embeddings, action);
                let count = ball_count(&nb.sq_dist, radius_sq);
                nb.order[..count]
                    .iter()
                    .map(|&b| policy_row[b as usize])
                    .sum::<f64>()
                    / count as f64
            }
        }
    }
}

/// Number of leading neighbours strictly inside the ball; rows are sorted by
/// distance, so the members form a prefix.
fn ball_count(sorted_sq_dist: &[f64], radius_sq: f64) -> usize {
    sorted_sq_dist.partition_point(|d| *d < radius_sq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn structure(points: &[f64], depth: Option<usize>) -> Arc<ActionStructure> {
        let emb = Arc::new(EmbeddingTable::new(points.len(), 1, points.to_vec()).unwrap());
        Arc::new(ActionStructure::new(emb, depth, 0).unwrap())
    }

    fn op(s: &Arc<ActionStructure>, conv: Convolution) -> SimilarityOperator {
        SimilarityOperator::new(s.clone(), conv).unwrap()
    }

    fn toy() -> Arc<ActionStructure> {
        structure(&[0.0, 1.0, 10.0, 11.0], Some(3))
    }

    #[test]
    fn table_one_tree_rows() {
        let s = toy();
        assert_eq!(op(&s, Convolution::Tree { level: 2 }).similarity_row(0), vec![0.5, 0.5, 0.0, 0.0]);
        let pi = [0.0, 0.2, 0.2, 0.6];
        let level2 = op(&s, Convolution::Tree { level: 2 });
        let conv: Vec<f64> = (0..4).map(|a| level2.convolve(&pi, a)).collect();
        for (c, e) in conv.iter().zip([0.1, 0.1, 0.4, 0.4]) {
            assert_relative_eq!(*c, e, epsilon = 1e-15);
        }
        let mu = [0.2, 0.2, 0.4, 0.2];
        let mu2: Vec<f64> = (0..4).map(|a| level2.convolve(&mu, a)).collect();
        for (c, e) in mu2.iter().zip([0.2, 0.2, 0.3, 0.3]) {
            assert_relative_eq!(*c, e, epsilon = 1e-15);
        }
        let root = op(&s, Convolution::Tree { level: 3 });
        for a in 0..4 {
            assert_relative_eq!(root.convolve(&mu, a), 0.25, epsilon = 1e-15);
            assert_eq!(op(&s, Convolution::Tree { level: 1 }).convolve(&pi, a), pi[a]);
        }
    }

    #[test]
    fn knn_and_ball_rows_on_a_line() {
        let s = structure(&[0.0, 1.0, 10.0], None);
        assert_eq!(op(&s, Convolution::Knn { k: 2 }).similarity_row(0), vec![0.5, 0.5, 0.0]);
        assert_eq!(op(&s, Convolution::Ball { radius_sq: 2.0 }).similarity_row(0), vec![0.5, 0.5, 0.0]);
    }

    #[test]
    fn kernel_density_at_zero() {
        let s = structure(&[0.0, 1.0], None);
        let row = op(&s, Convolution::Kernel { bandwidth: 1.0 }).similarity_row(0);
        assert_relative_eq!(row[0], 1.0 / (2.0 * std::f64::consts::PI).sqrt(), epsilon = 1e-15);
        assert_relative_eq!(row[0], 0.3989422804014327, epsilon = 1e-12);
    }

    #[test]
    fn kernel_matches_product_of_univariate_densities() {
        let emb = Arc::new(
            EmbeddingTable::from_rows(&[vec![0.0, 1.0, -0.5], vec![0.3, -0.2, 0.9], vec![2.0, 0.0, 0.0]]).unwrap(),
        );
        let s = Arc::new(ActionStructure::new(emb.clone(), None, 0).unwrap());
        let tau = 0.7;
        let phi = |u: f64| (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        let row = op(&s, Convolution::Kernel { bandwidth: tau }).similarity_row(1);
        for (b, v) in row.iter().enumerate() {
            let direct: f64 = (0..3)
                .map(|i| phi((emb.row(1)[i] - emb.row(b)[i]) / tau) / tau)
                .product();
            assert_relative_eq!(*v, direct, max_relative = 1e-12);
        }
    }

    #[test]
    fn normalized_kernel_row_sums_to_one() {
        let s = structure(&[0.0, 0.5, 3.0, 4.0], None);
        let k = op(&s, Convolution::Kernel { bandwidth: 0.8 }).normalized(true);
        assert_relative_eq!(k.similarity_row(2).iter().sum::<f64>(), 1.0, epsilon = 1e-12);
        let pi = [0.1, 0.2, 0.3, 0.4];
        let direct: f64 = k.similarity_row(2).iter().zip(pi).map(|(f, p)| f * p).sum();
        assert_relative_eq!(k.convolve(&pi, 2), direct, epsilon = 1e-12);
    }

    #[test]
    fn invalid_taus_are_rejected() {
        let s = toy();
        for conv in [
            Convolution::Kernel { bandwidth: 0.0 },
            Convolution::Tree { level: 0 },
            Convolution::Tree { level: 4 },
            Convolution::Ball { radius_sq: 0.0 },
            Convolution::Knn { k: 0 },
            Convolution::Knn { k: 5 },
        ] {
            assert!(SimilarityOperator::new(s.clone(), conv).is_err(), "{conv:?}");
        }
    }

    #[test]
    fn identity_detection() {
        let s = toy();
        assert!(s.is_identity(&Convolution::Tree { level: 1 }));
        assert!(s.is_identity(&Convolution::Knn { k: 1 }));
        assert!(s.is_identity(&Convolution::Ball { radius_sq: 1.0 }));
        assert!(!s.is_identity(&Convolution::Ball { radius_sq: 1.01 }));
        assert!(!s.is_identity(&Convolution::Kernel { bandwidth: 0.01 }));
    }

    #[test]
    fn default_grids() {
        let s = structure(&(0..200).map(|i| (i as f64).sqrt()).collect::<Vec<_>>(), None);
        let knn: Vec<f64> = s.default_grid(ConvKind::Knn).iter().map(Convolution::tau).collect();
        assert_eq!(knn, vec![1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0]);
        let tree = s.default_grid(ConvKind::Tree);
        assert_eq!(tree.len(), 8);
        let ball = s.default_grid(ConvKind::Ball);
        assert_eq!(ball.len(), 5);
        assert!(ball.windows(2).all(|w| w[0].tau() < w[1].tau()));
        assert_eq!(s.default_grid(ConvKind::Kernel).len(), 6);
    }

    fn random_structure(points: &[Vec<f64>]) -> Arc<ActionStructure> {
        let emb = Arc::new(EmbeddingTable::from_rows(points).unwrap());
        Arc::new(ActionStructure::new(emb, None, 1).unwrap())
    }

    fn all_ops(s: &Arc<ActionStructure>) -> Vec<SimilarityOperator> {
        let mut ops = vec![];
        for kind in [ConvKind::Tree, ConvKind::Knn, ConvKind::Ball] {
            for conv in s.default_grid(kind) {
                ops.push(op(s, conv));
            }
        }
        ops
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn binary_operators_are_row_stochastic(
            points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4..40),
        ) {
            let s = random_structure(&points);
            for o in all_ops(&s) {
                for a in 0..points.len() {
                    let sum: f64 = o.similarity_row(a).iter().sum();
                    prop_assert!((sum - 1.0).abs() < 1e-12, "{:?} sum {}", o.convolution(), sum);
                }
            }
        }

        #[test]
        fn convolution_is_bounded_and_fixes_uniform(
            points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 4..40),
            weights in prop::collection::vec(0.0f64..1.0, 40),
        ) {
            let n = points.len();
            let s = random_structure(&points);
            let z: f64 = weights[..n].iter().sum::<f64>() + 1e-9;
            let pi: Vec<f64> = weights[..n].iter().map(|w| (w + 1e-9 / n as f64) / z).collect();
            let (lo, hi) = pi.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), p| (l.min(*p), h.max(*p)));
            let uniform = vec![1.0 / n as f64; n];
            for o in all_ops(&s) {
                for a in 0..n {
                    let c = o.convolve(&pi, a);
                    prop_assert!(c >= lo - 1e-15 && c <= hi + 1e-15);
                    prop_assert!((o.convolve(&uniform, a) - 1.0 / n as f64).abs() < 1e-15);
                    let direct: f64 = o.similarity_row(a).iter().zip(&pi).map(|(f, p)| f * p).sum();
                    prop_assert!((c - direct).abs() < 1e-12);
                }
            }
        }

        #[test]
        fn tree_convolution_conserves_mass(
            points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 3), 4..60),
            weights in prop::collection::vec(0.01f64..1.0, 60),
        ) {
            let n = points.len();
            let s = random_structure(&points);
            let z: f64 = weights[..n].iter().sum();
            let pi: Vec<f64> = weights[..n].iter().map(|w| w / z).collect();
            for conv in s.default_grid(ConvKind::Tree) {
                let o = op(&s, conv);
                let total: f64 = (0..n).map(|a| o.convolve(&pi, a)).sum();
                prop_assert!((total - 1.0).abs() < 1e-9);
            }
        }

        #[test]
        fn identity_limits_reproduce_policy(
            points in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 2), 3..30),
            weights in prop::collection::vec(0.01f64..1.0, 30),
        ) {
            let n = points.len();
            let s = random_structure(&points);
            let z: f64 = weights[..n].iter().sum();
            let pi: Vec<f64> = weights[..n].iter().map(|w| w / z).collect();
            let min_d = s.sq_distance_quantile(0.0);
            let mut ids = vec![op(&s, Convolution::Tree { level: 1 }), op(&s, Convolution::Knn { k: 1 })];
            if min_d > 0.0 {
                ids.push(op(&s, Convolution::Ball { radius_sq: min_d }));
            }
            for o in ids {
                prop_assert!(o.is_identity());
                for a in 0..n {
                    prop_assert_eq!(o.convolve(&pi, a), pi[a]);
                }
            }
        }
    }
}
