//! Isomorphism machinery: color-refinement certificates with an exact
//! backtracking check on collisions, plus uniqueness/novelty fractions and
//! largest-component extraction.

use std::collections::HashMap;

use crate::error::Result;
use crate::graph::GraphSample;

fn mix(h: u64, v: u64) -> u64 {
    // splitmix64 round
    let mut z = h ^ v.wrapping_mul(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

/// Node colors after full Weisfeiler-Lehman refinement (node types seed the
/// colors; edge types label the messages).
fn wl_colors(g: &GraphSample) -> Vec<u64> {
    let n = g.num_nodes();
    let mut colors: Vec<u64> = (0..n).map(|i| mix(0x5eed, g.node_type(i) as u64)).collect();
    let mut distinct = count_distinct(&colors);
    for _ in 0..n {
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            let mut msgs: Vec<u64> = (0..n)
                .filter(|&j| g.has_edge(i, j))
                .map(|j| mix(g.edge_channel(i, j) as u64, colors[j]))
                .collect();
            msgs.sort_unstable();
            let mut h = mix(colors[i], 0xa11ce);
            for m in msgs {
                h = mix(h, m);
            }
            next.push(h);
        }
        colors = next;
        let d = count_distinct(&colors);
        if d == distinct {
            break;
        }
        distinct = d;
    }
    colors
}

fn count_distinct(colors: &[u64]) -> usize {
    let mut sorted = colors.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    sorted.len()
}

/// Deterministic isomorphism-invariant certificate. Equal certificates are
/// confirmed by the exact check; distinct certificates imply non-isomorphic.
pub fn wl_certificate(g: &GraphSample) -> u64 {
    let mut colors = wl_colors(g);
    colors.sort_unstable();
    let mut h = mix(g.num_nodes() as u64, g.num_edges() as u64);
    h = mix(h, g.k_v() as u64);
    h = mix(h, g.k_e() as u64);
    for c in colors {
        h = mix(h, c);
    }
    h
}

/// Exact isomorphism by backtracking over WL color classes.
pub fn are_isomorphic(a: &GraphSample, b: &GraphSample) -> bool {
    let n = a.num_nodes();
    if n != b.num_nodes() || a.num_edges() != b.num_edges() || a.k_v() != b.k_v() {
        return false;
    }
    let ca = wl_colors(a);
    let cb = wl_colors(b);
    let mut sa = ca.clone();
    let mut sb = cb.clone();
    sa.sort_unstable();
    sb.sort_unstable();
    if sa != sb {
        return false;
    }
    // order nodes of `a` by ascending color-class size for early pruning
    let mut class_size: HashMap<u64, usize> = HashMap::new();
    for &c in &ca {
        *class_size.entry(c).or_insert(0) += 1;
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (class_size[&ca[i]], ca[i], i));

    let mut mapping = vec![usize::MAX; n]; // a-node -> b-node
    let mut used = vec![false; n];
    backtrack(a, b, &ca, &cb, &order, 0, &mut mapping, &mut used)
}

#[allow(clippy::too_many_arguments)]
fn backtrack(
    a: &GraphSample,
    b: &GraphSample,
    ca: &[u64],
    cb: &[u64],
    order: &[usize],
    depth: usize,
    mapping: &mut [usize],
    used: &mut [bool],
) -> bool {
    if depth == order.len() {
        return true;
    }
    let i = order[depth];
    for j in 0..b.num_nodes() {
        if used[j] || cb[j] != ca[i] || b.node_type(j) != a.node_type(i) {
            continue;
        }
        // consistency with already-mapped nodes, including edge types
        let ok = order[..depth].iter().all(|&prev| {
            let pj = mapping[prev];
            a.edge_channel(i, prev) == b.edge_channel(j, pj)
        });
        if !ok {
            continue;
        }
        mapping[i] = j;
        used[j] = true;
        if backtrack(a, b, ca, cb, order, depth + 1, mapping, used) {
            return true;
        }
        used[j] = false;
        mapping[i] = usize::MAX;
    }
    false
}

/// Group indices into isomorphism classes (certificate prefilter, exact
/// confirmation inside buckets).
fn isomorphism_classes(graphs: &[GraphSample]) -> Vec<usize> {
    let mut class_of = vec![usize::MAX; graphs.len()];
    let mut buckets: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in graphs.iter().enumerate() {
        buckets.entry(wl_certificate(g)).or_default().push(i);
    }
    let mut next_class = 0;
    let mut sorted: Vec<_> = buckets.into_iter().collect();
    sorted.sort_unstable_by_key(|(cert, _)| *cert);
    for (_, members) in sorted {
        let mut reps: Vec<(usize, usize)> = Vec::new(); // (rep index, class id)
        for &i in &members {
            let found = reps
                .iter()
                .find(|&&(rep, _)| are_isomorphic(&graphs[rep], &graphs[i]));
            match found {
                Some(&(_, class)) => class_of[i] = class,
                None => {
                    class_of[i] = next_class;
                    reps.push((i, next_class));
                    next_class += 1;
                }
            }
        }
    }
    class_of
}

/// Fraction of distinct isomorphism classes among the samples.
pub fn uniqueness(samples: &[GraphSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(crate::error::Error::range("uniqueness of an empty sample set"));
    }
    let classes = isomorphism_classes(samples);
    let mut distinct = classes.clone();
    distinct.sort_unstable();
    distinct.dedup();
    Ok(distinct.len() as f64 / samples.len() as f64)
}

/// Fraction of samples not isomorphic to any training graph.
pub fn novelty(samples: &[GraphSample], train: &[GraphSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(crate::error::Error::range("novelty of an empty sample set"));
    }
    let mut train_certs: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in train.iter().enumerate() {
        train_certs.entry(wl_certificate(g)).or_default().push(i);
    }
    let novel = samples
        .iter()
        .filter(|s| {
            let cert = wl_certificate(s);
            match train_certs.get(&cert) {
                None => true,
                Some(candidates) => !candidates
                    .iter()
                    .any(|&i| are_isomorphic(s, &train[i])),
            }
        })
        .count();
    Ok(novel as f64 / samples.len() as f64)
}

/// Induced subgraph on the largest connected component; ties go to the
/// component containing the smallest node index.
pub fn largest_component(g: &GraphSample) -> Result<GraphSample> {
    let n = g.num_nodes();
    let adj = g.adjacency_list();
    let mut comp = vec![usize::MAX; n];
    let mut comps: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if comp[start] != usize::MAX {
            continue;
        }
        let id = comps.len();
        let mut members = vec![start];
        comp[start] = id;
        let mut stack = vec![start];
        while let Some(u) = stack.pop() {
            for &v in &adj[u] {
                if comp[v] == usize::MAX {
                    comp[v] = id;
                    members.push(v);
                    stack.push(v);
                }
            }
        }
        members.sort_unstable();
        comps.push(members);
    }
    // first component of maximal size contains the smallest node index
    let best = comps
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| a.len().cmp(&b.len()).then(ib.cmp(ia)))
        .map(|(_, m)| m)
        .expect("at least one component");
    g.induced_subgraph(best)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{apply_permutation, Permutation};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cycle(n: usize) -> GraphSample {
        let edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
        GraphSample::from_edges(n, &edges).unwrap()
    }

    #[test]
    fn permuted_graphs_are_isomorphic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let g = GraphSample::from_edges(8, &[(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 7), (0, 7), (2, 6)]).unwrap();
        for _ in 0..10 {
            let p = Permutation::random(8, &mut rng);
            let h = apply_permutation(&g, &p).unwrap();
            assert_eq!(wl_certificate(&g), wl_certificate(&h));
            assert!(are_isomorphic(&g, &h));
        }
    }

    #[test]
    fn distinguishes_different_graphs() {
        let path = GraphSample::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let star = GraphSample::from_edges(4, &[(0, 1), (0, 2), (0, 3)]).unwrap();
        assert!(!are_isomorphic(&path, &star));
        assert_ne!(wl_certificate(&path), wl_certificate(&star));
    }

    #[test]
    fn edge_types_matter() {
        let mut c1 = ndarray::Array2::zeros((3, 3));
        c1[(0, 1)] = 1;
        c1[(1, 2)] = 2;
        let mut c2 = ndarray::Array2::zeros((3, 3));
        c2[(0, 1)] = 2;
        c2[(1, 2)] = 2;
        let a = GraphSample::from_indices(&[0, 0, 0], 1, &c1, 2).unwrap();
        let b = GraphSample::from_indices(&[0, 0, 0], 1, &c2, 2).unwrap();
        assert!(!are_isomorphic(&a, &b));
        // relabeling the typed path end-to-end IS isomorphic
        let mut c3 = ndarray::Array2::zeros((3, 3));
        c3[(0, 1)] = 2;
        c3[(1, 2)] = 1;
        let c = GraphSample::from_indices(&[0, 0, 0], 1, &c3, 2).unwrap();
        assert!(are_isomorphic(&a, &c));
    }

    #[test]
    fn uniqueness_counts_classes() {
        let g1 = cycle(5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let g2 = apply_permutation(&g1, &Permutation::random(5, &mut rng)).unwrap();
        let g3 = GraphSample::from_edges(5, &[(0, 1), (1, 2), (2, 3), (3, 4)]).unwrap();
        let u = uniqueness(&[g1, g2, g3]).unwrap();
        assert!((u - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn novelty_of_copies_is_zero() {
        let train = vec![cycle(5), cycle(6)];
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let samples: Vec<GraphSample> = train
            .iter()
            .map(|g| {
                let p = Permutation::random(g.num_nodes(), &mut rng);
                apply_permutation(g, &p).unwrap()
            })
            .collect();
        assert_eq!(novelty(&samples, &train).unwrap(), 0.0);
        let fresh = vec![cycle(7)];
        assert_eq!(novelty(&fresh, &train).unwrap(), 1.0);
    }

    #[test]
    fn random_graphs_are_mostly_unique() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut graphs = Vec::new();
        for _ in 0..30 {
            let n = 12;
            let mut edges = Vec::new();
            for i in 0..n {
                for j in (i + 1)..n {
                    if rng.gen_bool(0.3) {
                        edges.push((i, j));
                    }
                }
            }
            graphs.push(GraphSample::from_edges(n, &edges).unwrap());
        }
        assert_eq!(uniqueness(&graphs).unwrap(), 1.0);
    }

    #[test]
    fn largest_component_rules() {
        // connected graph maps to itself
        let g = cycle(4);
        assert_eq!(largest_component(&g).unwrap(), g);
        // components of size 3 and 2: keep the triangle
        let g = GraphSample::from_edges(5, &[(0, 1), (1, 2), (0, 2), (3, 4)]).unwrap();
        let lc = largest_component(&g).unwrap();
        assert_eq!(lc.num_nodes(), 3);
        assert_eq!(lc.num_edges(), 3);
        // tie between two 2-node components: keep the one with node 0
        let g = GraphSample::from_edges(4, &[(0, 2), (1, 3)]).unwrap();
        let lc = largest_component(&g).unwrap();
        assert_eq!(lc.num_nodes(), 2);
        // nodes {0, 2} win the tie
        assert!(lc.has_edge(0, 1));
    }
}
