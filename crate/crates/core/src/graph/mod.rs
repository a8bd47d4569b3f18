//! Per-slide spatial graphs: centroid normalization, mutual-or kNN edges and
//! Gaussian edge weights.

mod kdtree;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::jigsaw::assign_bins;

pub(crate) use kdtree::{brute_force_nearest, dist2, KdTree};

/// Above this many patches kNN switches from brute force to a kd-tree.
pub const BRUTE_FORCE_LIMIT: usize = 2000;

/// One slide: patch features with centroids and a slide label.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBag {
    pub slide_id: String,
    pub patient_id: String,
    pub label: u8,
    /// Patch centroids, one `[x, y]` per row of `features`.
    pub centroids: Vec<[f64; 2]>,
    /// N×d1.
    pub features: Tensor,
}

impl PatchBag {
    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.is_empty() {
            return Err(Error::Data(format!(
                "slide {} has no patches",
                self.slide_id
            )));
        }
        if self.features.rows() != self.centroids.len() {
            return Err(Error::Data(format!(
                "slide {}: {} centroids but {} feature rows",
                self.slide_id,
                self.centroids.len(),
                self.features.rows()
            )));
        }
        if self.label > 1 {
            return Err(Error::Data(format!(
                "slide {}: label {} not in {{0,1}}",
                self.slide_id, self.label
            )));
        }
        for r in 0..self.features.rows() {
            if self.features.row(r).iter().any(|v| !v.is_finite()) {
                return Err(Error::Data(format!(
                    "slide {}: non-finite feature in row {r}",
                    self.slide_id
                )));
            }
        }
        Ok(())
    }
}

/// How the Gaussian bandwidth σ is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SigmaRule {
    /// σ = largest edge length in the graph.
    #[default]
    Main,
    /// σ² = largest nearest-neighbour distance over all nodes.
    Appendix,
}

impl std::str::FromStr for SigmaRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(SigmaRule::Main),
            "appendix" => Ok(SigmaRule::Appendix),
            other => Err(Error::Config(format!(
                "sigma_rule must be `main` or `appendix`, got `{other}`"
            ))),
        }
    }
}

/// Spatial graph over the patches of one slide.
#[derive(Clone, Debug, PartialEq)]
pub struct SlideGraph {
    pub n: usize,
    /// Undirected edges `(j, l)` with `j < l`, sorted, without self-loops.
    pub edges: Vec<(usize, usize)>,
    pub edge_weights: Vec<f64>,
    pub sigma: f64,
    /// Set when every edge had length 0 and σ fell back to 1.
    pub degenerate_sigma: bool,
    /// Grid cell of every patch.
    pub bin_labels: Vec<usize>,
    pub grid: usize,
    pub k: usize,
    /// Normalized centroids the graph was built from.
    pub centroids: Vec<[f64; 2]>,
}

/// Directed message-passing entries, grouped by target node. Every node
/// receives a self-loop with weight 1 ahead of its neighbours.
#[derive(Clone, Debug)]
pub struct MessageIndex {
    pub nodes: usize,
    pub target: Arc<[usize]>,
    pub source: Arc<[usize]>,
    pub weight: Arc<[f64]>,
}

impl SlideGraph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(a, b) in &self.edges {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    pub fn neighbors(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (&(a, b), &w) in self.edges.iter().zip(&self.edge_weights) {
            adj[a].push((b, w));
            adj[b].push((a, w));
        }
        for list in &mut adj {
            list.sort_unstable_by_key(|&(i, _)| i);
        }
        adj
    }

    pub fn message_index(&self) -> MessageIndex {
        let adj = self.neighbors();
        let total = self.n + 2 * self.edges.len();
        let mut target = Vec::with_capacity(total);
        let mut source = Vec::with_capacity(total);
        let mut weight = Vec::with_capacity(total);
        for (j, list) in adj.iter().enumerate() {
            target.push(j);
            source.push(j);
            weight.push(1.0);
            for &(l, w) in list {
                target.push(j);
                source.push(l);
                weight.push(w);
            }
        }
        MessageIndex {
            nodes: self.n,
            target: target.into(),
            source: source.into(),
            weight: weight.into(),
        }
    }

    /// Checks every structural invariant; a failure is an internal error.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Contract(format!("graph consistency: {msg}")));
        if self.centroids.len() != self.n || self.bin_labels.len() != self.n {
            return fail("per-node arrays disagree with node count".into());
        }
        if self.edges.len() != self.edge_weights.len() {
            return fail("edge and weight counts differ".into());
        }
        if !(self.sigma > 0.0) {
            return fail(format!("sigma {} not positive", self.sigma));
        }
        for w in self.edges.windows(2) {
            if w[0] >= w[1] {
                return fail(format!("edges not strictly sorted at {:?}", w[1]));
            }
        }
        for (&(a, b), &w) in self.edges.iter().zip(&self.edge_weights) {
            if a >= b || b >= self.n {
                return fail(format!("bad edge ({a}, {b})"));
            }
            let expected = gaussian_weight(self.centroids[a], self.centroids[b], self.sigma);
            let expected = if self.degenerate_sigma { 1.0 } else { expected };
            if w.to_bits() != expected.to_bits() || !(0.0..=1.0).contains(&w) {
                return fail(format!(
                    "weight {w} of edge ({a}, {b}) disagrees with kernel"
                ));
            }
        }
        if self.n > 1 {
            let need = self.k.min(self.n - 1);
            if let Some((j, d)) = self
                .degrees()
                .into_iter()
                .enumerate()
                .find(|&(_, d)| d < need)
            {
                return fail(format!("node {j} has degree {d} < {need}"));
            }
        }
        let bins = self.grid * self.grid;
        if let Some(b) = self.bin_labels.iter().find(|&&b| b >= bins) {
            return fail(format!("bin label {b} outside [0, {bins})"));
        }
        Ok(())
    }
}

/// Per-axis min-max scaling into `[0,1]²`; a constant axis maps to 0.5.
pub fn normalize_centroids(raw: &[[f64; 2]]) -> Result<Vec<[f64; 2]>> {
    if raw.is_empty() {
        return Err(Error::Data("no centroids to normalize".into()));
    }
    if let Some(row) = raw
        .iter()
        .position(|c| !c[0].is_finite() || !c[1].is_finite())
    {
        return Err(Error::Data(format!("non-finite centroid in row {row}")));
    }
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for c in raw {
        for a in 0..2 {
            lo[a] = lo[a].min(c[a]);
            hi[a] = hi[a].max(c[a]);
        }
    }
    Ok(raw
        .iter()
        .map(|c| {
            let mut out = [0.5; 2];
            for a in 0..2 {
                let span = hi[a] - lo[a];
                if span > 0.0 {
                    out[a] = ((c[a] - lo[a]) / span).clamp(0.0, 1.0);
                }
            }
            out
        })
        .collect())
}

/// Each node's `min(k, N−1)` nearest neighbours, nearest first; ties go to
/// the lower index.
pub fn nearest_neighbors(centroids: &[[f64; 2]], k: usize) -> Vec<Vec<usize>> {
    let n = centroids.len();
    let k = k.min(n.saturating_sub(1));
    if n > BRUTE_FORCE_LIMIT {
        let tree = KdTree::new(centroids);
        (0..n)
            .map(|j| tree.nearest(j, k).into_iter().map(|c| c.index).collect())
            .collect()
    } else {
        (0..n)
            .map(|j| {
                brute_force_nearest(centroids, j, k)
                    .into_iter()
                    .map(|c| c.index)
                    .collect()
            })
            .collect()
    }
}

/// Mutual-or kNN: `(j, l)` is an edge when either endpoint is among the
/// other's `k` nearest neighbours.
pub fn knn_edges(centroids: &[[f64; 2]], k: usize) -> Result<Vec<(usize, usize)>> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if centroids.is_empty() {
        return Err(Error::Data("no centroids".into()));
    }
    let knn = nearest_neighbors(centroids, k);
    let mut edges: Vec<(usize, usize)> = knn
        .iter()
        .enumerate()
        .flat_map(|(j, list)| list.iter().map(move |&l| (j.min(l), j.max(l))))
        .collect();
    edges.sort_unstable();
    edges.dedup();
    Ok(edges)
}

#[inline]
fn gaussian_weight(a: [f64; 2], b: [f64; 2], sigma: f64) -> f64 {
    let d = dist2(a, b).sqrt();
    (-(d * d) / (sigma * sigma)).exp()
}

/// Edge weights with the bandwidth they were computed under.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeWeights {
    pub weights: Vec<f64>,
    pub sigma: f64,
    pub degenerate: bool,
}

/// Gaussian kernel weights `exp(−d²/σ²)` with σ chosen by `rule`.
pub fn edge_weights(
    centroids: &[[f64; 2]],
    edges: &[(usize, usize)],
    rule: SigmaRule,
) -> EdgeWeights {
    if edges.is_empty() {
        return EdgeWeights {
            weights: Vec::new(),
            sigma: 1.0,
            degenerate: false,
        };
    }
    let lengths: Vec<f64> = edges
        .iter()
        .map(|&(a, b)| dist2(centroids[a], centroids[b]).sqrt())
        .collect();
    let sigma = match rule {
        SigmaRule::Main => lengths.iter().copied().fold(0.0, f64::max),
        SigmaRule::Appendix => {
            // A node's nearest neighbour is always one of its incident edges.
            let mut nearest = vec![f64::INFINITY; centroids.len()];
            for (&(a, b), &d) in edges.iter().zip(&lengths) {
                nearest[a] = nearest[a].min(d);
                nearest[b] = nearest[b].min(d);
            }
            nearest
                .into_iter()
                .filter(|d| d.is_finite())
                .fold(0.0, f64::max)
                .sqrt()
        }
    };
    if sigma == 0.0 {
        return EdgeWeights {
            weights: vec![1.0; edges.len()],
            sigma: 1.0,
            degenerate: true,
        };
    }
    let weights = edges
        .iter()
        .map(|&(a, b)| gaussian_weight(centroids[a], centroids[b], sigma))
        .collect();
    EdgeWeights {
        weights,
        sigma,
        degenerate: false,
    }
}

pub fn build_slide_graph(
    bag: &PatchBag,
    k: usize,
    grid: usize,
    rule: SigmaRule,
) -> Result<SlideGraph> {
    if k == 0 {
        return Err(Error::Config("k must be at least 1".into()));
    }
    if grid == 0 {
        return Err(Error::Config("grid must be at least 1".into()));
    }
    let centroids = normalize_centroids(&bag.centroids)?;
    let edges = knn_edges(&centroids, k)?;
    let w = edge_weights(&centroids, &edges, rule);
    let bin_labels = assign_bins(&centroids, grid)?;
    let graph = SlideGraph {
        n: centroids.len(),
        edges,
        edge_weights: w.weights,
        sigma: w.sigma,
        degenerate_sigma: w.degenerate,
        bin_labels,
        grid,
        k,
        centroids,
    };
    graph.validate()?;
    Ok(graph)
}

/// Summary row for the `graph` command.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphStats {
    pub n: usize,
    pub edges: usize,
    pub min_degree: usize,
    pub max_degree: usize,
    pub sigma: f64,
    pub degenerate_sigma: bool,
}

impl SlideGraph {
    pub fn stats(&self) -> GraphStats {
        let deg = self.degrees();
        GraphStats {
            n: self.n,
            edges: self.edges.len(),
            min_degree: deg.iter().copied().min().unwrap_or(0),
            max_degree: deg.iter().copied().max().unwrap_or(0),
            sigma: self.sigma,
            degenerate_sigma: self.degenerate_sigma,
        }
    }
}
