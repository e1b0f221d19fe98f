use std::borrow::Cow;

use crate::bandit::EmbeddingTable;

/// Above this many actions neighbour rows are computed per query instead of
/// being held in memory.
pub const PRECOMPUTE_LIMIT: usize = 4096;

/// Exact nearest-neighbour ordering of all actions around each action.
///
/// Each row starts with the query action itself, followed by every other
/// action in increasing squared distance, ties broken by lower index.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    n: usize,
    table: Option<(Vec<u32>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
pub struct NeighborRow<'a> {
    pub order: Cow<'a, [u32]>,
    pub sq_dist: Cow<'a, [f64]>,
}

impl NeighborIndex {
    pub fn new(embeddings: &EmbeddingTable) -> Self {
        Self::with_limit(embeddings, PRECOMPUTE_LIMIT)
    }

    pub fn with_limit(embeddings: &EmbeddingTable, limit: usize) -> Self {
        let n = embeddings.n_actions();
        let table = (n <= limit).then(|| {
            let mut order = Vec::with_capacity(n * n);
            let mut dist = Vec::with_capacity(n * n);
            for a in 0..n {
                let (o, d) = compute_row(embeddings, a);
                order.extend(o);
                dist.extend(d);
            }
            (order, dist)
        });
        Self { n, table }
    }

    pub fn is_precomputed(&self) -> bool {
        self.table.is_some()
    }

    pub fn row<'a>(&'a self, embeddings: &EmbeddingTable, action: usize) -> NeighborRow<'a> {
        match &self.table {
            Some((order, dist)) => {
                let span = action * self.n..(action + 1) * self.n;
                NeighborRow {
                    order: Cow::Borrowed(&order[span.clone()]),
                    sq_dist: Cow::Borrowed(&dist[span]),
                }
            }
            None => {
                let (o, d) = compute_row(embeddings, action);
                NeighborRow {
                    order: Cow::Owned(o),
                    sq_dist: Cow::Owned(d),
                }
            }
        }
    }
}

fn compute_row(embeddings: &EmbeddingTable, action: usize) -> (Vec<u32>, Vec<f64>) {
    let n = embeddings.n_actions();
    let mut others: Vec<(f64, u32)> = (0..n)
        .filter(|&b| b != action)
        .map(|b| (embeddings.sq_distance(action, b), b as u32))
        .collect();
    others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
    let mut order = Vec::with_capacity(n);
    let mut dist = Vec::with_capacity(n);
    order.push(action as u32);
    dist.push(0.0);
    for (d, b) in others {
        order.push(b);
        dist.push(d);
    }
    (order, dist)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn self_first_then_by_distance_then_index() {
        let emb = EmbeddingTable::new(5, 1, vec![0.0, 2.0, -2.0, 0.0, 1.0]).unwrap();
        let idx = NeighborIndex::new(&emb);
        let row = idx.row(&emb, 3);
        assert_eq!(row.order.as_ref(), &[3, 0, 4, 1, 2]);
        assert_eq!(row.sq_dist.as_ref(), &[0.0, 0.0, 1.0, 4.0, 4.0]);
    }

    #[test]
    fn lazy_rows_match_precomputed() {
        let data: Vec<f64> = (0..40).map(|i| ((i * 37) % 11) as f64 * 0.3).collect();
        let emb = EmbeddingTable::new(20, 2, data).unwrap();
        let full = NeighborIndex::new(&emb);
        let lazy = NeighborIndex::with_limit(&emb, 0);
        assert!(full.is_precomputed() && !lazy.is_precomputed());
        for a in 0..20 {
            let (f, l) = (full.row(&emb, a), lazy.row(&emb, a));
            assert_eq!(f.order, l.order);
            assert_eq!(f.sq_dist, l.sq_dist);
        }
    }
}
