use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::bandit::EmbeddingTable;
use crate::error::{Error, Result};
use crate::rng::{self, StreamRng};

const LLOYD_ITERATIONS: usize = 50;
const RESTARTS: usize = 4;

/// Nested partitions of the action set. Level 1 holds singletons and level
/// `depth` a single cluster with every action.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionTree {
    /// `levels[k]` is level `k + 1`; every cluster is sorted and clusters are
    /// ordered by their smallest member.
    levels: Vec<Vec<Vec<usize>>>,
    /// `membership[k][a]` is the cluster index of action `a` at level `k + 1`.
    membership: Vec<Vec<usize>>,
}

impl ActionTree {
    /// Builds a tree from explicit partitions, listed from level 1 upwards.
    pub fn from_levels(levels: Vec<Vec<Vec<usize>>>) -> Result<Self> {
        let n = levels
            .first()
            .map(|l| l.iter().map(Vec::len).sum::<usize>())
            .ok_or_else(|| Error::invalid("tree needs at least one level"))?;
        let mut normalized = Vec::with_capacity(levels.len());
        let mut membership = Vec::with_capacity(levels.len());
        for (k, mut level) in levels.into_iter().enumerate() {
            let mut owner = vec![usize::MAX; n];
            for c in level.iter_mut() {
                if c.is_empty() {
                    return Err(Error::invalid(format!("empty cluster at level {}", k + 1)));
                }
                c.sort_unstable();
            }
            level.sort_by_key(|c| c[0]);
            for (ci, c) in level.iter().enumerate() {
                for &a in c {
                    if a >= n || owner[a] != usize::MAX {
                        return Err(Error::invalid(format!(
                            "level {} is not a partition of 0..{n}",
                            k + 1
                        )));
                    }
                    owner[a] = ci;
                }
            }
            if owner.contains(&usize::MAX) {
                return Err(Error::invalid(format!("level {} does not cover every action", k + 1)));
            }
            normalized.push(level);
            membership.push(owner);
        }
        if normalized[0].len() != n {
            return Err(Error::invalid("level 1 must consist of singletons"));
        }
        for k in 1..normalized.len() {
            for c in &normalized[k - 1] {
                let parent = membership[k][c[0]];
                if c.iter().any(|&a| membership[k][a] != parent) {
                    return Err(Error::invalid(format!(
                        "level {} cluster splits across level {} clusters",
                        k,
                        k + 1
                    )));
                }
            }
        }
        Ok(Self {
            levels: normalized,
            membership,
        })
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn n_actions(&self) -> usize {
        self.membership[0].len()
    }

    /// Clusters at `level` (1-based).
    pub fn level(&self, level: usize) -> &[Vec<usize>] {
        &self.levels[level - 1]
    }

    /// Meta-action containing `action` at `level` (1-based).
    pub fn cluster_of(&self, level: usize, action: usize) -> &[usize] {
        let k = level - 1;
        &self.levels[k][self.membership[k][action]]
    }

    /// Largest depth accepted by [`build_tree`] for `n_actions`.
    pub fn max_depth(n_actions: usize) -> usize {
        (usize::BITS - n_actions.max(1).leading_zeros()) as usize
    }
}

impl fmt::Display for ActionTree {
    /// One line per level starting at level 1; clusters separated by `;`,
    /// members by `,`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for level in &self.levels {
            let line = level
                .iter()
                .map(|c| {
                    c.iter()
                        .map(|a| a.to_string())
                        .collect::<Vec<_>>()
                        .join(",")
                })
                .collect::<Vec<_>>()
                .join(";");
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

impl FromStr for ActionTree {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut levels = Vec::new();
        for (lineno, line) in s.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut level = Vec::new();
            for cluster in line.split(';') {
                let members = cluster
                    .split(',')
                    .map(|t| t.trim().parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|e| Error::Parse {
                        path: "<tree>".into(),
                        line: lineno + 1,
                        reason: e.to_string(),
                    })?;
                level.push(members);
            }
            levels.push(level);
        }
        Self::from_levels(levels)
    }
}

/// Recursive bisecting 2-means over the embeddings.
///
/// Level `depth` is the root; each lower level splits every cluster of the
/// level above in two, and level 1 is always singletons. Clusters of fewer
/// than two actions are copied down unchanged.
pub fn build_tree(embeddings: &EmbeddingTable, depth: usize, seed: u64) -> Result<ActionTree> {
    let n = embeddings.n_actions();
    if depth == 0 {
        return Err(Error::invalid("tree depth must be at least 1"));
    }
    if depth > ActionTree::max_depth(n) {
        return Err(Error::invalid(format!(
            "tree depth {depth} needs at least {} actions, have {n}",
            1usize << (depth - 1).min(63)
        )));
    }
    let singletons: Vec<Vec<usize>> = (0..n).map(|a| vec![a]).collect();
    if depth == 1 {
        return ActionTree::from_levels(vec![singletons]);
    }
    let mut rng = rng::stream(seed, "action-tree");
    let mut top_down: Vec<Vec<Vec<usize>>> = vec![vec![(0..n).collect()]];
    for _ in 2..depth {
        let parent = top_down.last().expect("root level present");
        let mut next = Vec::with_capacity(parent.len() * 2);
        for cluster in parent {
            if cluster.len() < 2 {
                next.push(cluster.clone());
            } else {
                let (left, right) = bisect(embeddings, cluster, &mut rng);
                next.push(left);
                next.push(right);
            }
        }
        top_down.push(next);
    }
    top_down.push(singletons);
    top_down.reverse();
    ActionTree::from_levels(top_down)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Best-of-restarts 2-means split of `members`. Both halves are non-empty.
fn bisect(
    embeddings: &EmbeddingTable,
    members: &[usize],
    rng: &mut StreamRng,
) -> (Vec<usize>, Vec<usize>) {
    let dim = embeddings.dim();
    let mut best: Option<(f64, Vec<bool>)> = None;
    for _ in 0..RESTARTS {
        // k-means++ seeding for two centres
        let first = members[rng.random_range(0..members.len())];
        let d2: Vec<f64> = members
            .iter()
            .map(|&a| sq_dist(embeddings.row(a), embeddings.row(first)))
            .collect();
        let total: f64 = d2.iter().sum();
        let second = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut pick = members[members.len() - 1];
            for (&a, &w) in members.iter().zip(&d2) {
                if u < w {
                    pick = a;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            members[rng.random_range(0..members.len())]
        };
        let mut centres = [embeddings.row(first).to_vec(), embeddings.row(second).to_vec()];
        let mut assign = vec![false; members.len()];
        for iter in 0..LLOYD_ITERATIONS {
            let mut changed = false;
            for (slot, &a) in assign.iter_mut().zip(members) {
                let e = embeddings.row(a);
                let right = sq_dist(e, &centres[1]) < sq_dist(e, &centres[0]);
                if right != *slot {
                    *slot = right;
                    changed = true;
                }
            }
            if iter > 0 && !changed {
                break;
            }
            let mut sums = [vec![0.0; dim], vec![0.0; dim]];
            let mut counts = [0usize; 2];
            for (&side, &a) in assign.iter().zip(members) {
                let s = side as usize;
                counts[s] += 1;
                for (acc, v) in sums[s].iter_mut().zip(embeddings.row(a)) {
                    *acc += v;
                }
            }
            for s in 0..2 {
                if counts[s] > 0 {
                    for (c, acc) in centres[s].iter_mut().zip(&sums[s]) {
                        *c = acc / counts[s] as f64;
                    }
                }
            }
        }
        let sse: f64 = assign
            .iter()
            .zip(members)
            .map(|(&side, &a)| sq_dist(embeddings.row(a), &centres[side as usize]))
            .sum();
        let both_sides = assign.iter().any(|s| *s) && assign.iter().any(|s| !*s);
        if both_sides && best.as_ref().is_none_or(|(b, _)| sse < *b) {
            best = Some((sse, assign));
        }
    }
    match best {
        Some((_, assign)) => {
            let left = members
                .iter()
                .zip(&assign)
                .filter(|(_, s)| !**s)
                .map(|(a, _)| *a)
                .collect();
            let right = members
                .iter()
                .zip(&assign)
                .filter(|(_, s)| **s)
                .map(|(a, _)| *a)
                .collect();
            (left, right)
        }
        // all embeddings coincide; any split is as good as another
        None => {
            let mid = members.len() / 2;
            (members[..mid].to_vec(), members[mid..].to_vec())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn line(points: &[f64]) -> EmbeddingTable {
        EmbeddingTable::new(points.len(), 1, points.to_vec()).unwrap()
    }

    /// Exhaustive oracle: the balanced bipartition with smallest within-cluster
    /// sum of squares.
    fn best_balanced_bipartition(points: &[f64]) -> Vec<Vec<usize>> {
        let n = points.len();
        let sse = |idx: &[usize]| {
            let m = idx.iter().map(|&i| points[i]).sum::<f64>() / idx.len() as f64;
            idx.iter().map(|&i| (points[i] - m).powi(2)).sum::<f64>()
        };
        let mut best = (f64::INFINITY, vec![]);
        for mask in 0u32..(1 << n) {
            if mask.count_ones() as usize != n / 2 || mask & 1 == 0 {
                continue;
            }
            let a: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 1).collect();
            let b: Vec<usize> = (0..n).filter(|i| mask >> i & 1 == 0).collect();
            let total = sse(&a) + sse(&b);
            if total < best.0 {
                best = (total, vec![a, b]);
            }
        }
        best.1
    }

    #[test]
    fn four_point_line_splits_into_pairs() {
        let points = [0.0, 1.0, 10.0, 11.0];
        let oracle = best_balanced_bipartition(&points);
        assert_eq!(oracle, vec![vec![0, 1], vec![2, 3]]);
        for seed in 0..10 {
            let tree = build_tree(&line(&points), 3, seed).unwrap();
            assert_eq!(tree.level(2), oracle.as_slice());
            assert_eq!(tree.level(3), &[vec![0, 1, 2, 3]]);
            assert_eq!(tree.level(1).len(), 4);
        }
    }

    #[test]
    fn depth_one_is_singletons() {
        let tree = build_tree(&line(&[3.0, 1.0, 2.0]), 1, 0).unwrap();
        assert_eq!(tree.depth(), 1);
        assert_eq!(tree.level(1), &[vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn table_one_tree_text_form() {
        let tree = build_tree(&line(&[0.0, 1.0, 10.0, 11.0]), 3, 0).unwrap();
        assert_eq!(tree.to_string(), "0;1;2;3\n0,1;2,3\n0,1,2,3\n");
        let parsed: ActionTree = tree.to_string().parse().unwrap();
        assert_eq!(parsed, tree);
    }

    #[test]
    fn rejects_too_deep() {
        assert!(build_tree(&line(&[0.0, 1.0, 2.0]), 3, 0).is_err());
        assert!(build_tree(&line(&[0.0, 1.0, 2.0, 3.0]), 3, 0).is_ok());
        assert!(build_tree(&line(&[0.0, 1.0, 2.0]), 0, 0).is_err());
    }

    #[test]
    fn identical_embeddings_still_split() {
        let tree = build_tree(&line(&[1.0; 8]), 4, 0).unwrap();
        assert_eq!(tree.level(3).len(), 2);
        assert_eq!(tree.level(2).len(), 4);
    }

    #[test]
    fn from_levels_rejects_non_nested() {
        let levels = vec![
            vec![vec![0], vec![1], vec![2], vec![3]],
            vec![vec![0, 1], vec![2, 3]],
            vec![vec![0, 2], vec![1, 3]],
        ];
        assert!(ActionTree::from_levels(levels).is_err());
    }

    proptest! {
        #[test]
        fn levels_are_nested_partitions(
            points in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 8..60),
            seed in any::<u64>(),
        ) {
            let n = points.len();
            let emb = EmbeddingTable::from_rows(&points).unwrap();
            let depth = ActionTree::max_depth(n);
            // from_levels re-validates the partition and nesting contract
            let tree = build_tree(&emb, depth, seed).unwrap();
            let again = ActionTree::from_levels(tree.levels.clone()).unwrap();
            prop_assert_eq!(&again, &tree);
            prop_assert_eq!(tree.level(depth).len(), 1);
            prop_assert_eq!(tree.level(1).len(), n);
            prop_assert_eq!(&tree, &build_tree(&emb, depth, seed).unwrap());
        }
    }
}
