//! Synthetic corpora: two-block community graphs, ego networks extracted from
//! a preferential-attachment parent graph, and uniform random trees for the
//! probe harness; plus the empirical graph-size distribution used as the
//! size prior at sampling time.


use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::GraphSample;
use crate::error::{Error, Result};

const MAX_ATTEMPTS_PER_GRAPH: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    CommunitySmall,
    Community,
    EgoSmall,
    Ego,
}

impl DatasetKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "community-small" => Ok(Self::CommunitySmall),
            "community" => Ok(Self::Community),
            "ego-small" => Ok(Self::EgoSmall),
            "ego" => Ok(Self::Ego),
            other => Err(Error::Config(vec![format!(
                "dataset: unknown name {other:?} (expected community-small, community, ego-small, ego)"
            )])),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::CommunitySmall => "community-small",
            Self::Community => "community",
            Self::EgoSmall => "ego-small",
            Self::Ego => "ego",
        }
    }

    /// Node-count range and default corpus size for each dataset.
    pub fn default_spec(&self, seed: u64) -> DatasetSpec {
        let (node_range, count) = match self {
            Self::CommunitySmall => ((12, 20), 500),
            Self::Community => ((60, 160), 500),
            Self::EgoSmall => ((4, 18), 500),
            Self::Ego => ((50, 399), 753),
        };
        DatasetSpec {
            kind: *self,
            count,
            node_range,
            seed,
        }
    }

    pub fn is_ego(&self) -> bool {
        matches!(self, Self::EgoSmall | Self::Ego)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub count: usize,
    pub node_range: (usize, usize),
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let expected = self.kind.default_spec(self.seed).node_range;
        if self.node_range != expected {
            return Err(Error::Config(vec![format!(
                "dataset.node_range: {:?} does not match {:?} for {}",
                self.node_range,
                expected,
                self.kind.name()
            )]));
        }
        if self.count == 0 {
            return Err(Error::Config(vec!["dataset.count: must be positive".into()]));
        }
        Ok(())
    }
}

/// Generate the corpus named by `spec` with its own RNG stream.
pub fn generate_corpus<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Vec<GraphSample>> {
    spec.validate()?;
    match spec.kind {
        DatasetKind::CommunitySmall | DatasetKind::Community => generate_community(spec, rng),
        DatasetKind::EgoSmall | DatasetKind::Ego => generate_ego(spec, rng),
    }
}

/// Two same-size (within one node) dense blocks joined by a few random
/// inter-community edges; resampled until connected.
pub fn generate_community<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Vec<GraphSample>> {
    let (lo, hi) = spec.node_range;
    let mut out = Vec::with_capacity(spec.count);
    for idx in 0..spec.count {
        let mut attempts = 0;
        let g = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_GRAPH {
                return Err(Error::GeneratorExhausted(format!(
                    "community graph {idx}: no connected sample in {MAX_ATTEMPTS_PER_GRAPH} attempts"
                )));
            }
            let n = rng.gen_range(lo..=hi);
            let n1 = n.div_ceil(2);
            let mut edges = Vec::new();
            for block in [(0, n1), (n1, n)] {
                for i in block.0..block.1 {
                    for j in (i + 1)..block.1 {
                        if rng.gen_bool(0.7) {
                            edges.push((i, j));
                        }
                    }
                }
            }
            let inter = (0.05 * n as f64).ceil() as usize;
            let mut cross: Vec<(usize, usize)> = (0..n1)
                .flat_map(|i| (n1..n).map(move |j| (i, j)))
                .collect();
            cross.shuffle(rng);
            edges.extend(cross.into_iter().take(inter));
            let g = GraphSample::from_edges(n, &edges)?;
            if g.is_connected() {
                break g;
            }
        };
        out.push(g);
    }
    Ok(out)
}

/// Radius-2 ego networks of random centers in a preferential-attachment
/// parent graph, resampled until the node count lands in range.
pub fn generate_ego<R: Rng>(spec: &DatasetSpec, rng: &mut R) -> Result<Vec<GraphSample>> {
    let (lo, hi) = spec.node_range;
    // parent sized so radius-2 neighborhoods straddle the target range
    let parent_n = match spec.kind {
        DatasetKind::EgoSmall => 80,
        _ => 1200,
    };
    let mut out = Vec::with_capacity(spec.count);
    let mut parent = barabasi_albert(parent_n, 2, rng)?;
    let mut parent_uses = 0;
    for idx in 0..spec.count {
        let mut attempts = 0;
        let g = loop {
            attempts += 1;
            if attempts > MAX_ATTEMPTS_PER_GRAPH {
                return Err(Error::GeneratorExhausted(format!(
                    "ego graph {idx}: no in-range ego net in {MAX_ATTEMPTS_PER_GRAPH} attempts"
                )));
            }
            // refresh the parent occasionally so corpora are not all drawn
            // from one realization
            if parent_uses >= 50 {
                parent = barabasi_albert(parent_n, 2, rng)?;
                parent_uses = 0;
            }
            parent_uses += 1;
            let center = rng.gen_range(0..parent.num_nodes());
            let ball = ball_nodes(&parent, center, 2);
            if ball.len() < lo || ball.len() > hi {
                continue;
            }
            break parent.induced_subgraph(&ball)?;
        };
        debug_assert!(g.is_connected());
        out.push(g);
    }
    Ok(out)
}

/// Uniform random labeled trees (Pruefer sequences). Acyclic and connected;
/// used to mix cycle-free graphs into probe corpora.
pub fn generate_trees<R: Rng>(
    count: usize,
    node_range: (usize, usize),
    rng: &mut R,
) -> Result<Vec<GraphSample>> {
    let (lo, hi) = node_range;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = rng.gen_range(lo.max(2)..=hi);
        let edges = if n == 2 {
            vec![(0, 1)]
        } else {
            let seq: Vec<usize> = (0..n - 2).map(|_| rng.gen_range(0..n)).collect();
            pruefer_to_edges(&seq, n)
        };
        out.push(GraphSample::from_edges(n, &edges)?);
    }
    Ok(out)
}

fn pruefer_to_edges(seq: &[usize], n: usize) -> Vec<(usize, usize)> {
    let mut degree = vec![1usize; n];
    for &s in seq {
        degree[s] += 1;
    }
    let mut edges = Vec::with_capacity(n - 1);
    let mut leaves: std::collections::BinaryHeap<std::cmp::Reverse<usize>> = (0..n)
        .filter(|&i| degree[i] == 1)
        .map(std::cmp::Reverse)
        .collect();
    for &s in seq {
        let std::cmp::Reverse(leaf) = leaves.pop().expect("tree always has a leaf");
        edges.push((leaf.min(s), leaf.max(s)));
        degree[s] -= 1;
        if degree[s] == 1 {
            leaves.push(std::cmp::Reverse(s));
        }
    }
    let std::cmp::Reverse(a) = leaves.pop().unwrap();
    let std::cmp::Reverse(b) = leaves.pop().unwrap();
    edges.push((a.min(b), a.max(b)));
    edges
}

/// Preferential-attachment graph: start from a small clique, attach each new
/// node to `m` distinct endpoints sampled proportionally to degree.
fn barabasi_albert<R: Rng>(n: usize, m: usize, rng: &mut R) -> Result<GraphSample> {
    assert!(n > m + 1);
    let mut edges: Vec<(usize, usize)> = Vec::new();
    // endpoint list doubles as the degree-proportional sampling pool
    let mut pool: Vec<usize> = Vec::new();
    for i in 0..=m {
        for j in (i + 1)..=m {
            edges.push((i, j));
            pool.push(i);
            pool.push(j);
        }
    }
    for v in (m + 1)..n {
        let mut targets = std::collections::BTreeSet::new();
        while targets.len() < m {
            let t = pool[rng.gen_range(0..pool.len())];
            targets.insert(t);
        }
        for &t in &targets {
            edges.push((t, v));
            pool.push(t);
            pool.push(v);
        }
    }
    GraphSample::from_edges(n, &edges)
}

fn ball_nodes(g: &GraphSample, center: usize, radius: usize) -> Vec<usize> {
    let adj = g.adjacency_list();
    let mut dist = vec![usize::MAX; g.num_nodes()];
    dist[center] = 0;
    let mut q = std::collections::VecDeque::from([center]);
    while let Some(u) = q.pop_front() {
        if dist[u] == radius {
            continue;
        }
        for &v in &adj[u] {
            if dist[v] == usize::MAX {
                dist[v] = dist[u] + 1;
                q.push_back(v);
            }
        }
    }
    (0..g.num_nodes()).filter(|&i| dist[i] <= radius).collect()
}

/// Empirical distribution over graph sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeHistogram {
    sizes: Vec<usize>,
    probs: Vec<f64>,
}

impl SizeHistogram {
    pub fn support(&self) -> &[usize] {
        &self.sizes
    }

    pub fn prob(&self, n: usize) -> f64 {
        self.sizes
            .iter()
            .position(|&s| s == n)
            .map_or(0.0, |i| self.probs[i])
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        for (&s, &p) in self.sizes.iter().zip(&self.probs) {
            acc += p;
            if u < acc {
                return s;
            }
        }
        *self.sizes.last().expect("non-empty histogram")
    }
}

/// Count observed node counts; probabilities sum to one over the support.
pub fn size_histogram(corpus: &[GraphSample]) -> Result<SizeHistogram> {
    if corpus.is_empty() {
        return Err(Error::InvalidGraph("size histogram of an empty corpus".into()));
    }
    let mut counts = std::collections::BTreeMap::new();
    for g in corpus {
        *counts.entry(g.num_nodes()).or_insert(0usize) += 1;
    }
    let total = corpus.len() as f64;
    let (sizes, probs) = counts
        .into_iter()
        .map(|(s, c)| (s, c as f64 / total))
        .unzip();
    Ok(SizeHistogram { sizes, probs })
}

/// Disjoint, exhaustive train/test split: the first `floor(frac * len)`
/// graphs (after a seeded shuffle) are the training set.
pub fn split_corpus(
    corpus: &[GraphSample],
    train_frac: f64,
    seed: u64,
) -> (Vec<GraphSample>, Vec<GraphSample>) {
    use rand::SeedableRng;
    let mut idx: Vec<usize> = (0..corpus.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let cut = (train_frac * corpus.len() as f64).floor() as usize;
    let train = idx[..cut].iter().map(|&i| corpus[i].clone()).collect();
    let test = idx[cut..].iter().map(|&i| corpus[i].clone()).collect();
    (train, test)
}

/// Mean edge density (fraction of realized node pairs) over a corpus.
pub fn mean_edge_density(corpus: &[GraphSample]) -> f64 {
    let mut acc = 0.0;
    for g in corpus {
        let n = g.num_nodes();
        if n > 1 {
            acc += g.num_edges() as f64 / (n * (n - 1) / 2) as f64;
        }
    }
    acc / corpus.len() as f64
}

/// Erdos-Renyi graphs with sizes drawn from `hist`; the density-matched
/// baseline for the end-to-end comparison.
pub fn generate_erdos_renyi<R: Rng>(
    count: usize,
    hist: &SizeHistogram,
    p: f64,
    rng: &mut R,
) -> Result<Vec<GraphSample>> {
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = hist.sample(rng);
        let mut edges = Vec::new();
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(p) {
                    edges.push((i, j));
                }
            }
        }
        out.push(GraphSample::from_edges(n, &edges)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn community_small_sizes_and_count() {
        let spec = DatasetKind::CommunitySmall.default_spec(3).clone();
        let spec = DatasetSpec { count: 60, ..spec };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let corpus = generate_corpus(&spec, &mut rng).unwrap();
        assert_eq!(corpus.len(), 60);
        for g in &corpus {
            let n = g.num_nodes();
            assert!((12..=20).contains(&n), "n = {n}");
            assert!(g.is_connected());
            assert_eq!(g.k_v(), 1);
            assert_eq!(g.k_e(), 1);
        }
    }

    #[test]
    fn default_count_matches_table() {
        assert_eq!(DatasetKind::CommunitySmall.default_spec(0).count, 500);
        assert_eq!(DatasetKind::Ego.default_spec(0).count, 753);
        assert_eq!(DatasetKind::EgoSmall.default_spec(0).node_range, (4, 18));
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let spec = DatasetSpec {
            count: 20,
            ..DatasetKind::CommunitySmall.default_spec(11)
        };
        let a = generate_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        let b = generate_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ego_small_sizes_and_connectivity() {
        let spec = DatasetSpec {
            count: 40,
            ..DatasetKind::EgoSmall.default_spec(5)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let corpus = generate_corpus(&spec, &mut rng).unwrap();
        assert_eq!(corpus.len(), 40);
        for g in &corpus {
            let n = g.num_nodes();
            assert!((4..=18).contains(&n), "n = {n}");
            assert!(g.is_connected());
        }
    }

    #[test]
    fn trees_are_acyclic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trees = generate_trees(30, (4, 18), &mut rng).unwrap();
        for t in &trees {
            assert!(t.is_connected());
            assert!(!t.has_cycle());
            assert_eq!(t.num_edges(), t.num_nodes() - 1);
        }
    }

    #[test]
    fn histogram_counts() {
        let g12 = GraphSample::from_edges(12, &[(0, 1)]).unwrap();
        let g20 = GraphSample::from_edges(20, &[(0, 1)]).unwrap();
        let hist = size_histogram(&[g12.clone(), g12.clone(), g20]).unwrap();
        assert!((hist.prob(12) - 2.0 / 3.0).abs() < 1e-12);
        assert!((hist.prob(20) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(hist.support(), &[12, 20]);

        let point = size_histogram(&[g12]).unwrap();
        assert_eq!(point.prob(12), 1.0);
    }

    #[test]
    fn histogram_sampling_matches_counts() {
        let g12 = GraphSample::from_edges(12, &[(0, 1)]).unwrap();
        let g20 = GraphSample::from_edges(20, &[(0, 1)]).unwrap();
        let hist = size_histogram(&[g12.clone(), g12, g20]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let draws = 10_000;
        let hits = (0..draws).filter(|_| hist.sample(&mut rng) == 12).count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - 2.0 / 3.0).abs() < 0.02, "freq = {freq}");
    }

    #[test]
    fn empty_corpus_errors() {
        assert!(size_histogram(&[]).is_err());
    }

    #[test]
    fn splits_are_disjoint_and_exhaustive() {
        let spec = DatasetSpec {
            count: 50,
            ..DatasetKind::CommunitySmall.default_spec(4)
        };
        let corpus = generate_corpus(&spec, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for frac in [0.9, 0.8] {
            let (train, test) = split_corpus(&corpus, frac, 17);
            assert_eq!(train.len() + test.len(), corpus.len());
            assert_eq!(train.len(), (frac * 50.0).floor() as usize);
        }
    }
}
