//! Graph data model: one-hot node features, a symmetric one-hot edge tensor
//! with an explicit non-edge channel, and the permutation machinery used by
//! the equivariance checks.

mod generate;
mod io;

pub use generate::{
    generate_community, generate_corpus, generate_ego, generate_erdos_renyi, generate_trees,
    mean_edge_density, size_histogram, split_corpus, DatasetKind, DatasetSpec, SizeHistogram,
};
pub use io::{deserialize_corpus, serialize_corpus, write_manifest};

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Channel index reserved for "no edge" in the edge tensor.
pub const NON_EDGE: usize = 0;

/// A node- and edge-labeled undirected graph without self-loops.
///
/// `node_features` is `N x K^v` with one-hot rows; `edge_tensor` is
/// `N x N x (K^e + 1)` with one-hot slices, channel 0 meaning "no edge".
/// Slices are symmetric in the first two indices and the diagonal is the
/// non-edge one-hot.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphSample {
    node_features: Array2<f64>,
    edge_tensor: Array3<f64>,
}

impl GraphSample {
    /// Build from categorical indices. `edge_channels` uses 0 for non-edge and
    /// `1..=k_e` for edge types; only its upper triangle is read.
    pub fn from_indices(
        node_types: &[usize],
        k_v: usize,
        edge_channels: &Array2<usize>,
        k_e: usize,
    ) -> Result<Self> {
        let n = node_types.len();
        if n == 0 {
            return Err(Error::InvalidGraph("graph must have at least one node".into()));
        }
        if edge_channels.dim() != (n, n) {
            return Err(Error::dim(format!(
                "edge_channels is {:?}, expected ({n}, {n})",
                edge_channels.dim()
            )));
        }
        let mut node_features = Array2::zeros((n, k_v));
        for (i, &t) in node_types.iter().enumerate() {
            if t >= k_v {
                return Err(Error::InvalidGraph(format!(
                    "node {i} has type {t}, but k_v = {k_v}"
                )));
            }
            node_features[(i, t)] = 1.0;
        }
        let mut edge_tensor = Array3::zeros((n, n, k_e + 1));
        for i in 0..n {
            edge_tensor[(i, i, NON_EDGE)] = 1.0;
            for j in (i + 1)..n {
                let c = edge_channels[(i, j)];
                if c > k_e {
                    return Err(Error::InvalidGraph(format!(
                        "edge ({i},{j}) has channel {c}, but k_e = {k_e}"
                    )));
                }
                edge_tensor[(i, j, c)] = 1.0;
                edge_tensor[(j, i, c)] = 1.0;
            }
        }
        Ok(Self {
            node_features,
            edge_tensor,
        })
    }

    /// Build an unlabeled graph (single node type, single edge type) from an
    /// undirected edge list.
    pub fn from_edges(n: usize, edges: &[(usize, usize)]) -> Result<Self> {
        let mut channels = Array2::zeros((n, n));
        for &(a, b) in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidGraph(format!(
                    "edge ({a},{b}) out of bounds for n = {n}"
                )));
            }
            if a == b {
                return Err(Error::InvalidGraph(format!("self-loop at node {a}")));
            }
            channels[(a, b)] = 1;
            channels[(b, a)] = 1;
        }
        Self::from_indices(&vec![0; n], 1, &channels, 1)
    }

    /// Wrap raw arrays, checking every invariant.
    pub fn from_arrays(node_features: Array2<f64>, edge_tensor: Array3<f64>) -> Result<Self> {
        let g = Self {
            node_features,
            edge_tensor,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_nodes();
        if n == 0 {
            return Err(Error::InvalidGraph("empty graph".into()));
        }
        let (en, em, _) = self.edge_tensor.dim();
        if en != n || em != n {
            return Err(Error::dim(format!(
                "edge tensor is {:?} for {n} nodes",
                self.edge_tensor.dim()
            )));
        }
        for i in 0..n {
            let row = self.node_features.row(i);
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidGraph(format!("node row {i} is not one-hot")));
            }
        }
        for i in 0..n {
            for j in 0..n {
                let slice = self.edge_tensor.slice(ndarray::s![i, j, ..]);
                let ones = slice.iter().filter(|&&v| v == 1.0).count();
                if ones != 1 || slice.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::InvalidGraph(format!(
                        "edge slice ({i},{j}) is not one-hot"
                    )));
                }
                for c in 0..slice.len() {
                    if self.edge_tensor[(i, j, c)] != self.edge_tensor[(j, i, c)] {
                        return Err(Error::InvalidGraph(format!(
                            "edge tensor asymmetric at ({i},{j},{c})"
                        )));
                    }
                }
            }
            if self.edge_tensor[(i, i, NON_EDGE)] != 1.0 {
                return Err(Error::InvalidGraph(format!("self-loop slice at node {i}")));
            }
        }
        Ok(())
    }

    pub fn num_nodes(&self) -> usize {
        self.node_features.nrows()
    }

    /// Number of node types.
    pub fn k_v(&self) -> usize {
        self.node_features.ncols()
    }

    /// Number of real edge types (the non-edge channel is extra).
    pub fn k_e(&self) -> usize {
        self.edge_tensor.dim().2 - 1
    }

    pub fn node_features(&self) -> &Array2<f64> {
        &self.node_features
    }

    pub fn edge_tensor(&self) -> &Array3<f64> {
        &self.edge_tensor
    }

    pub fn node_type(&self, i: usize) -> usize {
        self.node_features
            .row(i)
            .iter()
            .position(|&v| v == 1.0)
            .expect("validated one-hot row")
    }

    /// Channel of the (i, j) slice; 0 means no edge.
    pub fn edge_channel(&self, i: usize, j: usize) -> usize {
        let slice = self.edge_tensor.slice(ndarray::s![i, j, ..]);
        slice.iter().position(|&v| v == 1.0).expect("validated one-hot slice")
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        i != j && self.edge_tensor[(i, j, NON_EDGE)] == 0.0
    }

    pub fn num_edges(&self) -> usize {
        let n = self.num_nodes();
        let mut m = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(i, j) {
                    m += 1;
                }
            }
        }
        m
    }

    pub fn degrees(&self) -> Vec<usize> {
        let n = self.num_nodes();
        (0..n)
            .map(|i| (0..n).filter(|&j| self.has_edge(i, j)).count())
            .collect()
    }

    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.num_nodes()).filter(|&j| self.has_edge(i, j)).collect()
    }

    pub fn adjacency_list(&self) -> Vec<Vec<usize>> {
        (0..self.num_nodes()).map(|i| self.neighbors(i)).collect()
    }

    pub fn is_connected(&self) -> bool {
        let n = self.num_nodes();
        let adj = self.adjacency_list();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        let mut count = 1;
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if !seen[v] {
                    seen[v] = true;
                    count += 1;
                    stack.push(v);
                }
            }
        }
        count == n
    }

    pub fn triangle_count(&self) -> usize {
        let n = self.num_nodes();
        let mut t = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if !self.has_edge(i, j) {
                    continue;
                }
                for k in (j + 1)..n {
                    if self.has_edge(i, k) && self.has_edge(j, k) {
                        t += 1;
                    }
                }
            }
        }
        t
    }

    /// Undirected edge list over the upper triangle.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.num_nodes();
        let mut out = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if self.has_edge(i, j) {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// True when the graph contains at least one cycle.
    pub fn has_cycle(&self) -> bool {
        // union-find over edges
        let n = self.num_nodes();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut Vec<usize>, mut x: usize) -> usize {
            while parent[x] != x {
                parent[x] = parent[parent[x]];
                x = parent[x];
            }
            x
        }
        for (a, b) in self.edges() {
            let ra = find(&mut parent, a);
            let rb = find(&mut parent, b);
            if ra == rb {
                return true;
            }
            parent[ra] = rb;
        }
        false
    }

    /// Longest shortest path over the largest connected component.
    pub fn diameter(&self) -> usize {
        let n = self.num_nodes();
        let adj = self.adjacency_list();
        let mut best = 0;
        for s in 0..n {
            let mut dist = vec![usize::MAX; n];
            dist[s] = 0;
            let mut q = std::collections::VecDeque::from([s]);
            while let Some(u) = q.pop_front() {
                for &v in &adj[u] {
                    if dist[v] == usize::MAX {
                        dist[v] = dist[u] + 1;
                        q.push_back(v);
                    }
                }
            }
            let far = dist.iter().filter(|&&d| d != usize::MAX).max().copied().unwrap_or(0);
            best = best.max(far);
        }
        best
    }

    /// Induced subgraph on `nodes` (order defines the new labels).
    pub fn induced_subgraph(&self, nodes: &[usize]) -> Result<GraphSample> {
        let m = nodes.len();
        if m == 0 {
            return Err(Error::InvalidGraph("empty node set".into()));
        }
        let mut channels = Array2::zeros((m, m));
        for (a, &i) in nodes.iter().enumerate() {
            for (b, &j) in nodes.iter().enumerate() {
                if a < b {
                    channels[(a, b)] = self.edge_channel(i, j);
                }
            }
        }
        let types: Vec<usize> = nodes.iter().map(|&i| self.node_type(i)).collect();
        GraphSample::from_indices(&types, self.k_v(), &channels, self.k_e())
    }
}

/// A bijection on `{0..n-1}`, stored as `i -> mapping[i]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    mapping: Vec<usize>,
}

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Self {
            mapping: (0..n).collect(),
        }
    }

    pub fn from_mapping(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &m in &mapping {
            if m >= n || seen[m] {
                return Err(Error::InvalidGraph("mapping is not a bijection".into()));
            }
            seen[m] = true;
        }
        Ok(Self { mapping })
    }

    pub fn random<R: rand::Rng>(n: usize, rng: &mut R) -> Self {
        use rand::seq::SliceRandom;
        let mut mapping: Vec<usize> = (0..n).collect();
        mapping.shuffle(rng);
        Self { mapping }
    }

    pub fn len(&self) -> usize {
        self.mapping.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mapping.is_empty()
    }

    pub fn apply(&self, i: usize) -> usize {
        self.mapping[i]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.mapping.len()];
        for (i, &m) in self.mapping.iter().enumerate() {
            inv[m] = i;
        }
        Self { mapping: inv }
    }

    /// `self.compose(other)` maps `i` to `self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        if self.len() != other.len() {
            return Err(Error::dim("composing permutations of different sizes"));
        }
        Ok(Self {
            mapping: other.mapping.iter().map(|&i| self.mapping[i]).collect(),
        })
    }

    /// Permute the rows of a matrix: `out[p(i), :] = m[i, :]`.
    pub fn permute_rows(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(m.raw_dim());
        for i in 0..m.nrows() {
            let target = self.mapping[i];
            out.row_mut(target).assign(&m.row(i));
        }
        out
    }
}

/// Relabel a graph: node `i` becomes node `p(i)`.
pub fn apply_permutation(g: &GraphSample, p: &Permutation) -> Result<GraphSample> {
    let n = g.num_nodes();
    if p.len() != n {
        return Err(Error::dim(format!(
            "permutation on {} elements applied to a {n}-node graph",
            p.len()
        )));
    }
    let node_features = p.permute_rows(g.node_features());
    let mut edge_tensor = Array3::zeros(g.edge_tensor().raw_dim());
    for i in 0..n {
        for j in 0..n {
            let (pi, pj) = (p.apply(i), p.apply(j));
            edge_tensor
                .slice_mut(ndarray::s![pi, pj, ..])
                .assign(&g.edge_tensor().slice(ndarray::s![i, j, ..]));
        }
    }
    GraphSample::from_arrays(node_features, edge_tensor)
}
