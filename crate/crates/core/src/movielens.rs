//! Movielens-100k as a contextual bandit.
//!
//! Ratings are binarised (`rating >= 4`), factorised by a truncated
//! randomised SVD, and the user factors become contexts while the item
//! factors become action embeddings. Unobserved rewards are completed with
//! the clamped factor dot product.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::{Arc, OnceLock};

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::bandit::{dot, BanditDataset, DatasetMeta, EmbeddingTable, LoggedInteraction, Policy, RewardOracle};
use crate::error::{Error, Result};
use crate::policy::softmax;
use crate::rng;
use crate::synth::sample_action;

pub const POSITIVE_RATING: u8 = 4;
pub const DEFAULT_RANK: usize = 16;
pub const DEFAULT_EPS_FLOOR: f64 = 0.1;
pub const SHORTLIST_TOP: usize = 100;
pub const SHORTLIST_RANDOM: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rating {
    pub user: u32,
    pub item: u32,
    pub rating: u8,
}

/// Observed ratings with 0-based user and item indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RatingsMatrix {
    pub n_users: usize,
    pub n_items: usize,
    pub entries: Vec<Rating>,
}

impl RatingsMatrix {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Reads a `u.data` file: tab-separated `user item rating timestamp`, 1-based ids.
pub fn load_movielens(path: impl AsRef<Path>) -> Result<RatingsMatrix> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    parse_movielens(std::io::BufReader::new(file), path)
}

pub fn parse_movielens<R: BufRead>(reader: R, path: impl AsRef<Path>) -> Result<RatingsMatrix> {
    let path = path.as_ref();
    let parse_err = |line: usize, reason: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut m = RatingsMatrix::default();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(parse_err(line_no, format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let id = |s: &str, what: &str| -> Result<u32> {
            match s.parse::<u32>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(parse_err(line_no, format!("bad {what} id {s:?}"))),
            }
        };
        let user = id(fields[0], "user")?;
        let item = id(fields[1], "item")?;
        let rating: i64 = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad rating {:?}", fields[2])))?;
        fields[3]
            .parse::<u64>()
            .map_err(|_| parse_err(line_no, format!("bad timestamp {:?}", fields[3])))?;
        if !(1..=5).contains(&rating) {
            return Err(Error::Data {
                path: path.to_path_buf(),
                line: line_no,
                reason: format!("rating {rating} outside 1..=5"),
            });
        }
        m.n_users = m.n_users.max(user as usize + 1);
        m.n_items = m.n_items.max(item as usize + 1);
        m.entries.push(Rating {
            user,
            item,
            rating: rating as u8,
        });
    }
    Ok(m)
}

/// Sparse 0/1 matrix over the observed entries.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMatrix {
    pub n_users: usize,
    pub n_items: usize,
    /// Per user, `(item, value)` sorted by item.
    rows: Vec<Vec<(u32, u8)>>,
}

impl BinaryMatrix {
    pub fn user_row(&self, user: usize) -> &[(u32, u8)] {
        &self.rows[user]
    }

    pub fn get(&self, user: usize, item: usize) -> Option<u8> {
        let row = &self.rows[user];
        row.binary_search_by_key(&(item as u32), |e| e.0)
            .ok()
            .map(|i| row[i].1)
    }

    pub fn n_observed(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn n_ones(&self) -> usize {
        self.rows.iter().flatten().filter(|e| e.1 == 1).count()
    }

    /// Dense `n_users × n_items` matrix with unobserved entries as 0.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut a = DMatrix::zeros(self.n_users, self.n_items);
        for (u, row) in self.rows.iter().enumerate() {
            for &(i, v) in row {
                a[(u, i as usize)] = v as f64;
            }
        }
        a
    }
}

/// `1` iff the rating is at least 4. A repeated (user, item) pair keeps its
/// last rating.
pub fn binarize(matrix: &RatingsMatrix) -> BinaryMatrix {
    let mut rows: Vec<Vec<(u32, u8)>> = vec![Vec::new(); matrix.n_users];
    for e in &matrix.entries {
        rows[e.user as usize].push((e.item, (e.rating >= POSITIVE_RATING) as u8));
    }
    for row in &mut rows {
        // stable sort keeps file order among duplicates; keep the last one
        row.sort_by_key(|e| e.0);
        let mut dedup: Vec<(u32, u8)> = Vec::with_capacity(row.len());
        for e in row.drain(..) {
            match dedup.last_mut() {
                Some(last) if last.0 == e.0 => *last = e,
                _ => dedup.push(e),
            }
        }
        *row = dedup;
    }
    BinaryMatrix {
        n_users: matrix.n_users,
        n_items: matrix.n_items,
        rows,
    }
}

/// Rank-`k` factors `U = L·√Σ`, `V = R·√Σ` so that `U Vᵀ` is the truncated SVD.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel {
    pub rank: usize,
    /// `n_users × rank`, row-major.
    pub user_factors: Vec<f64>,
    /// `n_items × rank`, row-major.
    pub item_factors: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl FactorModel {
    pub fn n_users(&self) -> usize {
        self.user_factors.len() / self.rank
    }

    pub fn n_items(&self) -> usize {
        self.item_factors.len() / self.rank
    }

    pub fn user(&self, u: usize) -> &[f64] {
        &self.user_factors[u * self.rank..(u + 1) * self.rank]
    }

    pub fn item(&self, i: usize) -> &[f64] {
        &self.item_factors[i * self.rank..(i + 1) * self.rank]
    }

    pub fn predict(&self, u: usize, i: usize) -> f64 {
        dot(self.user(u), self.item(i))
    }

    pub fn item_embeddings(&self) -> Result<EmbeddingTable> {
        EmbeddingTable::new(self.n_items(), self.rank, self.item_factors.clone())
    }

    pub fn user_contexts(&self) -> Vec<Vec<f64>> {
        (0..self.n_users()).map(|u| self.user(u).to_vec()).collect()
    }
}

/// Randomised SVD settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SvdOptions {
    pub oversample: usize,
    pub power_iterations: usize,
}

impl Default for SvdOptions {
    fn default() -> Self {
        Self {
            oversample: 10,
            power_iterations: 20,
        }
    }
}

pub fn factorize(matrix: &BinaryMatrix, rank: usize, seed: u64) -> Result<FactorModel> {
    factorize_with(matrix, rank, seed, SvdOptions::default())
}

/// Truncated SVD of the binary matrix (missing entries as 0) by randomised
/// range finding with power iterations.
pub fn factorize_with(matrix: &BinaryMatrix, rank: usize, seed: u64, opts: SvdOptions) -> Result<FactorModel> {
    if matrix.n_observed() == 0 {
        return Err(Error::invalid("cannot factorise an empty ratings matrix"));
    }
    let (m, n) = (matrix.n_users, matrix.n_items);
    if rank == 0 || rank > m.min(n) {
        return Err(Error::invalid(format!("rank {rank} outside 1..={}", m.min(n))));
    }
    let a = matrix.to_dense();
    let l = (rank + opts.oversample).min(m.min(n));
    let mut r = rng::stream(seed, "movielens-svd");
    let omega = DMatrix::from_fn(n, l, |_, _| r.sample::<f64, _>(StandardNormal));
    let mut q = (&a * omega).qr().q();
    for _ in 0..opts.power_iterations {
        let z = (a.transpose() * &q).qr().q();
        q = (&a * z).qr().q();
    }
    let b = q.transpose() * &a;
    let svd = b.svd(true, true);
    let (bu, bvt) = (svd.u.expect("requested u"), svd.v_t.expect("requested v_t"));
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&x, &y| svd.singular_values[y].total_cmp(&svd.singular_values[x]));
    let left = q * bu;

    let mut user_factors = vec![0.0; m * rank];
    let mut item_factors = vec![0.0; n * rank];
    let mut singular_values = Vec::with_capacity(rank);
    for (c, &j) in order.iter().take(rank).enumerate() {
        let s = svd.singular_values[j];
        let root = s.sqrt();
        // Fix the sign so the largest-magnitude item loading is positive.
        let pivot = (0..n)
            .max_by(|&x, &y| bvt[(j, x)].abs().total_cmp(&bvt[(j, y)].abs()))
            .unwrap_or(0);
        let sign = if bvt[(j, pivot)] < 0.0 { -1.0 } else { 1.0 };
        for u in 0..m {
            user_factors[u * rank + c] = sign * left[(u, j)] * root;
        }
        for i in 0..n {
            item_factors[i * rank + c] = sign * bvt[(j, i)] * root;
        }
        singular_values.push(s);
    }
    Ok(FactorModel {
        rank,
        user_factors,
        item_factors,
        singular_values,
    })
}

/// Frobenius norm of `A − U Vᵀ`.
pub fn reconstruction_error(matrix: &BinaryMatrix, factors: &FactorModel) -> f64 {
    let mut sq = 0.0;
    for u in 0..matrix.n_users {
        let row = matrix.user_row(u);
        let mut k = 0;
        for i in 0..matrix.n_items {
            let observed = if k < row.len() && row[k].0 as usize == i {
                k += 1;
                row[k - 1].1 as f64
            } else {
                0.0
            };
            sq += (observed - factors.predict(u, i)).powi(2);
        }
    }
    sq.sqrt()
}

fn context_key(context: &[f64]) -> Vec<u64> {
    context.iter().map(|v| v.to_bits()).collect()
}

/// The bandit built from a factorised ratings matrix. Contexts are user
/// factor rows; actions are items.
///
/// Users whose factor rows coincide (e.g. users with no positive rating)
/// are indistinguishable from their context, so the expected reward of such
/// a context is the mean of its users' rewards.
#[derive(Debug)]
pub struct MovielensEnv {
    binary: BinaryMatrix,
    factors: FactorModel,
    embeddings: Arc<EmbeddingTable>,
    contexts: Vec<Vec<f64>>,
    class_by_context: HashMap<Vec<u64>, usize>,
    /// Users sharing each distinct context.
    classes: Vec<Vec<usize>>,
}

impl MovielensEnv {
    pub fn new(binary: BinaryMatrix, factors: FactorModel) -> Result<Self> {
        if factors.n_users() != binary.n_users || factors.n_items() != binary.n_items {
            return Err(Error::invalid("factor shapes do not match the ratings matrix"));
        }
        let embeddings = Arc::new(factors.item_embeddings()?);
        let contexts = factors.user_contexts();
        let mut class_by_context = HashMap::with_capacity(contexts.len());
        let mut classes: Vec<Vec<usize>> = Vec::new();
        for (u, c) in contexts.iter().enumerate() {
            let next = classes.len();
            let id = *class_by_context.entry(context_key(c)).or_insert(next);
            if id == next {
                classes.push(Vec::new());
            }
            classes[id].push(u);
        }
        Ok(Self {
            binary,
            factors,
            embeddings,
            contexts,
            class_by_context,
            classes,
        })
    }

    /// Loads, binarises and factorises a `u.data` file.
    pub fn from_file(path: impl AsRef<Path>, rank: usize, seed: u64) -> Result<Self> {
        let binary = binarize(&load_movielens(path)?);
        let factors = factorize(&binary, rank, seed)?;
        Self::new(binary, factors)
    }

    pub fn binary(&self) -> &BinaryMatrix {
        &self.binary
    }

    pub fn factors(&self) -> &FactorModel {
        &self.factors
    }

    pub fn embeddings(&self) -> &Arc<EmbeddingTable> {
        &self.embeddings
    }

    pub fn n_users(&self) -> usize {
        self.binary.n_users
    }

    /// One context per user; the uniform distribution over these is the
    /// context distribution.
    pub fn contexts(&self) -> &[Vec<f64>] {
        &self.contexts
    }

    /// Index of the group of users whose factor row equals `context`.
    pub fn class_of(&self, context: &[f64]) -> Option<usize> {
        self.class_by_context.get(&context_key(context)).copied()
    }

    pub fn class_members(&self, class: usize) -> &[usize] {
        &self.classes[class]
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    /// `δ(item, user)`: the observed binary reward, else the clamped factor
    /// dot product.
    pub fn user_reward(&self, user: usize, item: usize) -> f64 {
        match self.binary.get(user, item) {
            Some(v) => v as f64,
            None => self.factors.predict(user, item).clamp(0.0, 1.0),
        }
    }

    fn user_reward_row(&self, user: usize) -> Vec<f64> {
        let mut row: Vec<f64> = (0..self.binary.n_items)
            .map(|i| self.factors.predict(user, i).clamp(0.0, 1.0))
            .collect();
        for &(i, v) in self.binary.user_row(user) {
            row[i as usize] = v as f64;
        }
        row
    }
}

impl RewardOracle for MovielensEnv {
    fn n_actions(&self) -> usize {
        self.binary.n_items
    }

    fn expected_reward(&self, action: usize, context: &[f64]) -> f64 {
        match self.class_of(context) {
            Some(c) => {
                let members = &self.classes[c];
                members.iter().map(|&u| self.user_reward(u, action)).sum::<f64>() / members.len() as f64
            }
            None => dot(context, self.factors.item(action)).clamp(0.0, 1.0),
        }
    }

    fn reward_row(&self, context: &[f64]) -> Vec<f64> {
        match self.class_of(context) {
            Some(c) => {
                let members = &self.classes[c];
                if let [u] = members[..] {
                    return self.user_reward_row(u);
                }
                let mut row = vec![0.0; self.binary.n_items];
                for &u in members {
                    for (acc, r) in row.iter_mut().zip(self.user_reward_row(u)) {
                        *acc += r;
                    }
                }
                row.iter_mut().for_each(|v| *v /= members.len() as f64);
                row
            }
            None => (0..self.binary.n_items)
                .map(|i| self.expected_reward(i, context))
                .collect(),
        }
    }
}

/// Shortlist-then-softmax logging policy with a uniform floor.
///
/// Per user: the 100 items with the highest `δ` get logits `U(0, 1)`, 400
/// other items drawn at random get logits `U(0, 0.8)`, a `β`-softmax runs
/// over those 500 logits, and the result is mixed with the uniform
/// distribution as `(1 − ε)·softmax + ε/|A|`. Logits are fixed per
/// `(seed, context)`.
pub struct TwoStageLoggingPolicy {
    env: Arc<MovielensEnv>,
    beta: f64,
    eps_floor: f64,
    seed: u64,
    rows: Vec<OnceLock<Arc<[f64]>>>,
}

impl std::fmt::Debug for TwoStageLoggingPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TwoStageLoggingPolicy")
            .field("beta", &self.beta)
            .field("eps_floor", &self.eps_floor)
            .field("seed", &self.seed)
            .finish()
    }
}

impl TwoStageLoggingPolicy {
    pub fn new(env: Arc<MovielensEnv>, beta: f64, eps_floor: f64, seed: u64) -> Result<Self> {
        let n = env.binary.n_items;
        if n < SHORTLIST_TOP + SHORTLIST_RANDOM {
            return Err(Error::invalid(format!(
                "two-stage logging needs at least {} items, have {n}",
                SHORTLIST_TOP + SHORTLIST_RANDOM
            )));
        }
        if !(eps_floor > 0.0 && eps_floor < 1.0) {
            return Err(Error::invalid(format!("eps_floor {eps_floor} outside (0, 1)")));
        }
        if !beta.is_finite() {
            return Err(Error::invalid("softmax temperature must be finite"));
        }
        let rows = (0..env.n_classes()).map(|_| OnceLock::new()).collect();
        Ok(Self {
            env,
            beta,
            eps_floor,
            seed,
            rows,
        })
    }

    pub fn eps_floor(&self) -> f64 {
        self.eps_floor
    }

    /// The 100 items with the highest reward, ties to the lower index.
    pub fn top_items(rewards: &[f64]) -> Vec<usize> {
        let mut order: Vec<usize> = (0..rewards.len()).collect();
        order.sort_by(|&a, &b| rewards[b].total_cmp(&rewards[a]).then(a.cmp(&b)));
        order.truncate(SHORTLIST_TOP);
        order
    }

    fn build_row(&self, rewards: &[f64], stream: u64) -> Vec<f64> {
        let n = rewards.len();
        let mut r = rng::indexed_stream(self.seed, "movielens-logging", stream);
        let top = Self::top_items(rewards);
        let mut is_top = vec![false; n];
        for &a in &top {
            is_top[a] = true;
        }
        let rest: Vec<usize> = (0..n).filter(|&a| !is_top[a]).collect();
        let random: Vec<usize> = index::sample(&mut r, rest.len(), SHORTLIST_RANDOM)
            .into_iter()
            .map(|j| rest[j])
            .collect();
        let mut shortlist = top;
        let mut logits: Vec<f64> = shortlist.iter().map(|_| r.random_range(0.0..1.0)).collect();
        logits.extend(random.iter().map(|_| r.random_range(0.0..0.8)));
        shortlist.extend(random);
        let probs = softmax(&logits, self.beta);
        let floor = self.eps_floor / n as f64;
        let mut row = vec![floor; n];
        for (a, p) in shortlist.into_iter().zip(probs) {
            row[a] += (1.0 - self.eps_floor) * p;
        }
        row
    }
}

impl Policy for TwoStageLoggingPolicy {
    fn n_actions(&self) -> usize {
        self.env.binary.n_items
    }

    fn prob_row(&self, context: &[f64]) -> Vec<f64> {
        match self.env.class_of(context) {
            Some(u) => self.rows[u]
                .get_or_init(|| self.build_row(&self.env.reward_row(context), u as u64).into())
                .to_vec(),
            None => {
                let key = context_key(context)
                    .into_iter()
                    .fold(0u64, |h, b| rng::derive_indexed(h, "context", b));
                self.build_row(&self.env.reward_row(context), key)
            }
        }
    }
}

/// Logs `n` interactions: a uniformly drawn user, `a ~ μ(·|user)`, and the
/// reward `δ(a, user)`.
pub fn generate_dataset(env: &Arc<MovielensEnv>, logging: Arc<dyn Policy>, n: usize, seed: u64) -> Result<BanditDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if logging.n_actions() != env.binary.n_items {
        return Err(Error::invalid("logging policy and environment disagree on the action count"));
    }
    let mut r = rng::stream(seed, "movielens-dataset");
    let mut interactions = Vec::with_capacity(n);
    let mut propensities = Vec::with_capacity(n);
    for _ in 0..n {
        let u = r.random_range(0..env.n_users());
        let context = env.contexts[u].clone();
        let row = logging.prob_row(&context);
        let action = sample_action(&row, r.random::<f64>());
        propensities.push(row[action]);
        interactions.push(LoggedInteraction {
            reward: env.user_reward(u, action),
            context,
            action,
        });
    }
    BanditDataset::with_propensities(
        interactions,
        logging,
        Arc::clone(&env.embeddings),
        DatasetMeta {
            environment: "movielens".into(),
            seed,
        },
        propensities,
    )
}

/// Where the `u.data` file is looked up when no path is given: the
/// `OPELAB_MOVIELENS` environment variable, then `data/ml-100k/u.data`.
pub fn default_data_path() -> PathBuf {
    std::env::var_os("OPELAB_MOVIELENS")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data/ml-100k/u.data"))
}

/// Random ratings in the `u.data` layout, for tests and demos without the
/// real file.
pub fn synthetic_ratings(n_users: usize, n_items: usize, density: f64, seed: u64) -> RatingsMatrix {
    let mut r = rng::stream(seed, "synthetic-ratings");
    let user_bias: Vec<f64> = (0..n_users).map(|_| r.random_range(-1.0..1.0)).collect();
    let item_bias: Vec<f64> = (0..n_items).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut entries = Vec::new();
    for (u, ub) in user_bias.iter().enumerate() {
        for (i, ib) in item_bias.iter().enumerate() {
            if r.random::<f64>() < density {
                let score = 3.0 + ub + ib + r.random_range(-1.0..1.0);
                entries.push(Rating {
                    user: u as u32,
                    item: i as u32,
                    rating: score.round().clamp(1.0, 5.0) as u8,
                });
            }
        }
    }
    RatingsMatrix {
        n_users,
        n_items,
        entries,
    }
}
