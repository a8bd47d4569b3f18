// Exact k-nearest-neighbour queries over 2-d points. Neighbours are ordered by
// (squared distance, index), the same total order the brute-force path uses,
// so both paths agree on ties.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

#[derive(Clone, Copy, Debug)]
pub(crate) struct Candidate {
    pub d2: f64,
    pub index: usize,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then(self.index.cmp(&other.index))
    }
}

#[inline]
pub(crate) fn dist2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

pub(crate) struct KdTree<'a> {
    points: &'a [[f64; 2]],
    order: Vec<usize>,
    nodes: Vec<Node>,
}

impl<'a> KdTree<'a> {
    pub(crate) fn new(points: &'a [[f64; 2]]) -> Self {
        let mut tree = KdTree {
            points,
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            tree.build(0, points.len());
        }
        tree
    }

    fn build(&mut self, start: usize, end: usize) -> usize {
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return self.nodes.len() - 1;
        }
        let slice = &self.order[start..end];
        let spread = |axis: usize| {
            let (lo, hi) = slice
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = self.points[i][axis];
                    (lo.min(v), hi.max(v))
                });
            hi - lo
        };
        let axis = if spread(0) >= spread(1) { 0 } else { 1 };
        let mid = start + (end - start) / 2;
        let points = self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = points[self.order[mid]][axis];

        let slot = self.nodes.len();
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build(start, mid);
        let right = self.build(mid, end);
        self.nodes[slot] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        slot
    }

    /// The `k` nearest points to point `query`, excluding `query` itself,
    /// ascending by (distance, index).
    pub(crate) fn nearest(&self, query: usize, k: usize) -> Vec<Candidate> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 && !self.nodes.is_empty() {
            self.search(0, query, k, &mut heap);
        }
        let mut out = heap.into_vec();
        out.sort_unstable();
        out
    }

    fn search(&self, node: usize, query: usize, k: usize, heap: &mut BinaryHeap<Candidate>) {
        let q = self.points[query];
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    if i == query {
                        continue;
                    }
                    let c = Candidate {
                        d2: dist2(q, self.points[i]),
                        index: i,
                    };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap holds k entries") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, query, k, heap);
                // Left holds coordinates ≤ value and right ≥ value, so diff² bounds
                // the distance to anything on the far side. Equality must still be
                // visited: a tie there may carry a lower index.
                let bound = diff * diff;
                if heap.len() < k || bound <= heap.peek().map_or(f64::INFINITY, |c| c.d2) {
                    self.search(far, query, k, heap);
                }
            }
        }
    }
}

/// O(N²) reference: all other points sorted by (distance, index), truncated.
pub(crate) fn brute_force_nearest(points: &[[f64; 2]], query: usize, k: usize) -> Vec<Candidate> {
    let q = points[query];
    let mut all: Vec<Candidate> = points
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != query)
        .map(|(i, &p)| Candidate {
            d2: dist2(q, p),
            index: i,
        })
        .collect();
    let k = k.min(all.len());
    if k < all.len() && k > 0 {
        all.select_nth_unstable(k - 1);
    }
    all.truncate(k);
    all.sort_unstable();
    all
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn tree_matches_brute_force() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for trial in 0..20 {
            let n = rng.random_range(1..400);
            // Coarse lattice coordinates force many exact distance ties.
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| {
                    if trial % 2 == 0 {
                        [rng.random::<f64>(), rng.random::<f64>()]
                    } else {
                        [
                            rng.random_range(0..6) as f64 / 5.0,
                            rng.random_range(0..6) as f64 / 5.0,
                        ]
                    }
                })
                .collect();
            let tree = KdTree::new(&pts);
            for k in [1, 3, 17, 60] {
                for q in 0..n {
                    let a: Vec<usize> = tree.nearest(q, k).iter().map(|c| c.index).collect();
                    let b: Vec<usize> = brute_force_nearest(&pts, q, k)
                        .iter()
                        .map(|c| c.index)
                        .collect();
                    assert_eq!(a, b, "trial {trial} n {n} k {k} q {q}");
                }
            }
        }
    }
}
