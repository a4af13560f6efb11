//! Graph feature vectors: degree histograms, local clustering-coefficient
//! histograms, and mean per-node orbit counts of connected 4-node graphlets
//! counted by exact enumeration.

use crate::graph::GraphSample;

/// Normalized degree histogram (index = degree, mass = fraction of nodes).
pub fn degree_features(g: &GraphSample) -> Vec<f64> {
    let degrees = g.degrees();
    let max = degrees.iter().copied().max().unwrap_or(0);
    let mut hist = vec![0.0; max + 1];
    for d in &degrees {
        hist[*d] += 1.0;
    }
    let n = g.num_nodes() as f64;
    hist.iter_mut().for_each(|v| *v /= n);
    hist
}

/// 100-bin histogram of local clustering coefficients over [0, 1]; nodes of
/// degree below two contribute coefficient zero.
pub fn clustering_features(g: &GraphSample) -> Vec<f64> {
    let n = g.num_nodes();
    let adj = g.adjacency_list();
    let mut hist = vec![0.0; 100];
    for i in 0..n {
        let neigh = &adj[i];
        let k = neigh.len();
        let c = if k < 2 {
            0.0
        } else {
            let mut links = 0usize;
            for (a, &u) in neigh.iter().enumerate() {
                for &v in neigh.iter().skip(a + 1) {
                    if g.has_edge(u, v) {
                        links += 1;
                    }
                }
            }
            2.0 * links as f64 / (k * (k - 1)) as f64
        };
        let bin = ((c * 100.0) as usize).min(99);
        hist[bin] += 1.0;
    }
    let nf = n as f64;
    hist.iter_mut().for_each(|v| *v /= nf);
    hist
}

/// The six connected graphs on four vertices, identified by edge count and
/// the sorted degree sequence of the induced subgraph.
///
/// Orbits follow the standard 4-node graphlet numbering (4..=14), stored at
/// `orbit - 4`:
/// path ends 4, path middles 5, star leaves 6, star center 7, cycle 8,
/// tailed-triangle tail 9 / far pair 10 / junction 11, diamond rim 12 /
/// hubs 13, clique 14.
pub const NUM_ORBITS: usize = 11;

/// Mean per-node orbit count vector over the 11 orbits of connected 4-node
/// graphlets, via ESU enumeration (each connected induced 4-subset visited
/// exactly once).
pub fn orbit_features(g: &GraphSample) -> Vec<f64> {
    let counts = orbit_counts(g);
    let n = g.num_nodes() as f64;
    let mut mean = vec![0.0; NUM_ORBITS];
    for node_counts in &counts {
        for (o, &c) in node_counts.iter().enumerate() {
            mean[o] += c as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    mean
}

/// Per-node orbit counts from ESU enumeration.
pub fn orbit_counts(g: &GraphSample) -> Vec<[u64; NUM_ORBITS]> {
    let n = g.num_nodes();
    let adj = g.adjacency_list();
    let mut counts = vec![[0u64; NUM_ORBITS]; n];
    let mut in_sub = vec![false; n];
    for v in 0..n {
        let ext: Vec<usize> = adj[v].iter().copied().filter(|&u| u > v).collect();
        let mut sub = vec![v];
        in_sub[v] = true;
        extend_esu(&adj, g, v, &mut sub, ext, &mut in_sub, &mut counts);
        in_sub[v] = false;
    }
    counts
}

fn extend_esu(
    adj: &[Vec<usize>],
    g: &GraphSample,
    root: usize,
    sub: &mut Vec<usize>,
    ext: Vec<usize>,
    in_sub: &mut [bool],
    counts: &mut [[u64; NUM_ORBITS]],
) {
    if sub.len() == 4 {
        classify_and_count(g, sub, counts);
        return;
    }
    let mut ext = ext;
    while let Some(w) = ext.pop() {
        // the extension set grows by exclusive neighbors of w beyond the root
        let mut ext_next = ext.clone();
        for &u in &adj[w] {
            if u > root && !in_sub[u] && !neighbor_of_sub(adj, sub, u) && !ext_next.contains(&u) {
                ext_next.push(u);
            }
        }
        sub.push(w);
        in_sub[w] = true;
        extend_esu(adj, g, root, sub, ext_next, in_sub, counts);
        in_sub[w] = false;
        sub.pop();
    }
}

fn neighbor_of_sub(adj: &[Vec<usize>], sub: &[usize], u: usize) -> bool {
    sub.iter().any(|&s| adj[s].contains(&u))
}

fn classify_and_count(g: &GraphSample, sub: &[usize], counts: &mut [[u64; NUM_ORBITS]]) {
    debug_assert_eq!(sub.len(), 4);
    let mut deg = [0usize; 4];
    let mut edges = 0usize;
    for a in 0..4 {
        for b in (a + 1)..4 {
            if g.has_edge(sub[a], sub[b]) {
                deg[a] += 1;
                deg[b] += 1;
                edges += 1;
            }
        }
    }
    // orbit of each member from (edge count, own degree)
    for (slot, &node) in sub.iter().enumerate() {
        let d = deg[slot];
        let orbit = match (edges, d) {
            (3, 1) if deg.contains(&3) => 6, // star leaf
            (3, 3) => 7,                     // star center
            (3, 1) => 4,                     // path end
            (3, 2) => 5,                     // path middle
            (4, 2) if !deg.contains(&3) => 8, // cycle
            (4, 1) => 9,                     // tail of the tailed triangle
            (4, 2) => 10,                    // triangle pair away from the tail
            (4, 3) => 11,                    // junction of the tailed triangle
            (5, 2) => 12,                    // diamond rim
            (5, 3) => 13,                    // diamond hub
            (6, 3) => 14,                    // clique
            _ => continue,                   // disconnected subsets never reach here
        };
        counts[node][orbit - 4] += 1;
    }
}

/// Reference enumerator over all 4-subsets; quadratic in C(N, 4), used as the
/// independent oracle for the ESU path.
pub fn orbit_counts_naive(g: &GraphSample) -> Vec<[u64; NUM_ORBITS]> {
    let n = g.num_nodes();
    let mut counts = vec![[0u64; NUM_ORBITS]; n];
    if n < 4 {
        return counts;
    }
    for a in 0..n {
        for b in (a + 1)..n {
            for c in (b + 1)..n {
                for d in (c + 1)..n {
                    let sub = [a, b, c, d];
                    if induced_connected(g, &sub) {
                        classify_and_count(g, &sub, &mut counts);
                    }
                }
            }
        }
    }
    counts
}

fn induced_connected(g: &GraphSample, sub: &[usize; 4]) -> bool {
    let mut seen = [false; 4];
    let mut stack = vec![0usize];
    seen[0] = true;
    let mut visited = 1;
    while let Some(i) = stack.pop() {
        for j in 0..4 {
            if !seen[j] && g.has_edge(sub[i], sub[j]) {
                seen[j] = true;
                visited += 1;
                stack.push(j);
            }
        }
    }
    visited == 4
}
