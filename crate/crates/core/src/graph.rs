//! Undirected networks, bin partitions, and the structural statistics used to
//! build bins (Girvan–Newman communities, Newman modularity).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::Rng as _;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::rng_from_seed;

/// Fixed, undirected, simple graph on nodes `0..n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    /// Sorted, each pair stored as `(u, v)` with `u < v`.
    edges: Vec<(usize, usize)>,
    adjacency: Vec<Vec<usize>>,
    node_features: Option<Vec<Vec<f64>>>,
}

impl Graph {
    /// Builds a graph from unordered pairs. Duplicates (in either orientation)
    /// collapse to one edge; self-loops and out-of-range endpoints are rejected.
    pub fn new(n: usize, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut set = BTreeSet::new();
        for (u, v) in edges {
            if u >= n || v >= n {
                return Err(Error::invalid(format!("edge ({u},{v}) out of range for n={n}")));
            }
            if u == v {
                return Err(Error::invalid(format!("self-loop at node {u}")));
            }
            set.insert((u.min(v), u.max(v)));
        }
        let edges: Vec<_> = set.into_iter().collect();
        let mut adjacency = vec![Vec::new(); n];
        for &(u, v) in &edges {
            adjacency[u].push(v);
            adjacency[v].push(u);
        }
        for list in &mut adjacency {
            list.sort_unstable();
        }
        Ok(Self { n, edges, adjacency, node_features: None })
    }

    /// Attaches per-node covariates. They are carried along but no model in
    /// this crate reads them.
    pub fn with_node_features(mut self, features: Vec<Vec<f64>>) -> Result<Self> {
        if features.len() != self.n {
            return Err(Error::invalid(format!(
                "expected {} feature rows, got {}",
                self.n,
                features.len()
            )));
        }
        if let Some(first) = features.first() {
            if features.iter().any(|row| row.len() != first.len()) {
                return Err(Error::invalid("node feature rows have unequal length"));
            }
        }
        self.node_features = Some(features);
        Ok(self)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_features(&self) -> Option<&[Vec<f64>]> {
        self.node_features.as_deref()
    }

    /// Sorted neighbor list. Panics if `v >= n`.
    pub fn neighbors(&self, v: usize) -> &[usize] {
        &self.adjacency[v]
    }

    pub fn degree(&self, v: usize) -> Result<usize> {
        self.adjacency
            .get(v)
            .map(Vec::len)
            .ok_or_else(|| Error::invalid(format!("node {v} out of range for n={}", self.n)))
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.adjacency.iter().map(Vec::len).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.adjacency[u].binary_search(&v).is_ok()
    }

    /// Connected-component label per node, labels assigned in order of the
    /// smallest node of each component.
    pub fn components(&self) -> Vec<usize> {
        let adj: Vec<Vec<(usize, usize)>> = self.indexed_adjacency();
        components_masked(&adj, &vec![false; self.edges.len()])
    }

    /// Adjacency lists carrying the edge index of each incidence.
    fn indexed_adjacency(&self) -> Vec<Vec<(usize, usize)>> {
        let mut adj = vec![Vec::new(); self.n];
        for (id, &(u, v)) in self.edges.iter().enumerate() {
            adj[u].push((v, id));
            adj[v].push((u, id));
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

/// Assignment of every node to exactly one of `K` nonempty bins.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinPartition {
    bin_of: Vec<usize>,
    members: Vec<Vec<usize>>,
}

impl BinPartition {
    /// `bin_of[v]` is the bin of node `v`; `K = max + 1` and every bin in
    /// `0..K` must be used.
    pub fn new(bin_of: Vec<usize>) -> Result<Self> {
        if bin_of.is_empty() {
            return Err(Error::invalid("partition of zero nodes"));
        }
        let k = bin_of.iter().copied().max().unwrap_or(0) + 1;
        let mut members = vec![Vec::new(); k];
        for (v, &b) in bin_of.iter().enumerate() {
            members[b].push(v);
        }
        if let Some(empty) = members.iter().position(Vec::is_empty) {
            return Err(Error::invalid(format!("bin {empty} is empty")));
        }
        Ok(Self { bin_of, members })
    }

    /// Every node in one bin.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![0; n])
    }

    /// Builds a partition from groups of node ids and relabels bins by
    /// descending size (ties: smallest member id first).
    pub fn from_groups(n: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut bin_of = vec![usize::MAX; n];
        for (b, group) in groups.iter().enumerate() {
            for &v in group {
                if v >= n {
                    return Err(Error::invalid(format!("node {v} out of range for n={n}")));
                }
                if bin_of[v] != usize::MAX {
                    return Err(Error::invalid(format!("node {v} assigned twice")));
                }
                bin_of[v] = b;
            }
        }
        if let Some(v) = bin_of.iter().position(|&b| b == usize::MAX) {
            return Err(Error::invalid(format!("node {v} not assigned")));
        }
        Ok(Self::new(bin_of)?.relabeled_by_size())
    }

    pub fn n(&self) -> usize {
        self.bin_of.len()
    }

    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn bin_of(&self, v: usize) -> usize {
        self.bin_of[v]
    }

    pub fn assignments(&self) -> &[usize] {
        &self.bin_of
    }

    pub fn members(&self, b: usize) -> &[usize] {
        &self.members[b]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Relabels bins by descending size; equal sizes are ordered by their
    /// smallest member id.
    pub fn relabeled_by_size(&self) -> Self {
        let mut order: Vec<usize> = (0..self.k()).collect();
        order.sort_by_key(|&b| (std::cmp::Reverse(self.members[b].len()), self.members[b][0]));
        let mut new_label = vec![0; self.k()];
        for (new, &old) in order.iter().enumerate() {
            new_label[old] = new;
        }
        let bin_of = self.bin_of.iter().map(|&b| new_label[b]).collect();
        Self::new(bin_of).expect("relabeling preserves nonempty bins")
    }

    /// Reads `node,bin` lines (comments with `#`).
    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut pairs = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (a, b) = parse_pair(line, idx + 1)?;
            if a < 0 || b < 0 {
                return Err(Error::Parse { line: idx + 1, message: "negative id".into() });
            }
            pairs.push((a as usize, b as usize));
        }
        let n = pairs.iter().map(|p| p.0 + 1).max().unwrap_or(0);
        let mut bin_of = vec![usize::MAX; n];
        for (v, b) in pairs {
            bin_of[v] = b;
        }
        if let Some(v) = bin_of.iter().position(|&b| b == usize::MAX) {
            return Err(Error::invalid(format!("node {v} missing from partition file")));
        }
        Self::new(bin_of)
    }

    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for (v, b) in self.bin_of.iter().enumerate() {
            writeln!(writer, "{v},{b}")?;
        }
        Ok(())
    }
}

/// Samples a stochastic block model. Returns the graph and the ground-truth
/// block partition (block `i` of `block_sizes` is bin `i`).
pub fn gen_sbm(
    block_sizes: &[usize],
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<(Graph, BinPartition)> {
    if block_sizes.is_empty() {
        return Err(Error::invalid("empty block list"));
    }
    if block_sizes.contains(&0) {
        return Err(Error::invalid("block sizes must be >= 1"));
    }
    for (name, p) in [("p_in", p_in), ("p_out", p_out)] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid(format!("{name}={p} outside [0,1]")));
        }
    }
    if p_out > p_in {
        return Err(Error::invalid(format!("p_out={p_out} exceeds p_in={p_in}")));
    }
    let bin_of: Vec<usize> = block_sizes
        .iter()
        .enumerate()
        .flat_map(|(b, &size)| std::iter::repeat_n(b, size))
        .collect();
    let n = bin_of.len();
    let mut rng = rng_from_seed(seed);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in (u + 1)..n {
            let p = if bin_of[u] == bin_of[v] { p_in } else { p_out };
            let draw: f64 = rng.random();
            if draw < p {
                edges.push((u, v));
            }
        }
    }
    Ok((Graph::new(n, edges)?, BinPartition::new(bin_of)?))
}

/// A graph read from an edge list together with the original node ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EdgeList {
    pub graph: Graph,
    /// `original_ids[v]` is the id that dense node `v` had in the file.
    pub original_ids: Vec<i64>,
    pub dropped_self_loops: usize,
}

impl EdgeList {
    /// Edge set expressed in original ids, each pair ordered `(min, max)`.
    pub fn labeled_edges(&self) -> BTreeSet<(i64, i64)> {
        self.graph
            .edges()
            .iter()
            .map(|&(u, v)| {
                let (a, b) = (self.original_ids[u], self.original_ids[v]);
                (a.min(b), a.max(b))
            })
            .collect()
    }

    /// Writes `src,dst` lines using the original ids.
    pub fn write<W: Write>(&self, mut writer: W) -> Result<()> {
        for &(u, v) in self.graph.edges() {
            writeln!(writer, "{},{}", self.original_ids[u], self.original_ids[v])?;
        }
        Ok(())
    }
}

fn parse_pair(line: &str, line_no: usize) -> Result<(i64, i64)> {
    let mut parts = line.split(',');
    let mut next = |what: &str| -> Result<i64> {
        let raw = parts.next().ok_or_else(|| Error::Parse {
            line: line_no,
            message: format!("missing {what}"),
        })?;
        raw.trim().parse::<i64>().map_err(|e| Error::Parse {
            line: line_no,
            message: format!("bad {what} {raw:?}: {e}"),
        })
    };
    let a = next("first field")?;
    let b = next("second field")?;
    if parts.next().is_some() {
        return Err(Error::Parse { line: line_no, message: "expected exactly two fields".into() });
    }
    Ok((a, b))
}

/// Reads `src,dst` lines. Ids are renumbered densely in order of first
/// appearance; reversed and repeated edges collapse; self-loops are dropped
/// and counted.
pub fn load_edge_list<R: BufRead>(reader: R) -> Result<EdgeList> {
    let mut index: HashMap<i64, usize> = HashMap::new();
    let mut original_ids = Vec::new();
    let mut edges = Vec::new();
    let mut dropped = 0usize;
    let mut intern = |id: i64, original_ids: &mut Vec<i64>| -> usize {
        *index.entry(id).or_insert_with(|| {
            original_ids.push(id);
            original_ids.len() - 1
        })
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (a, b) = parse_pair(line, idx + 1)?;
        let u = intern(a, &mut original_ids);
        let v = intern(b, &mut original_ids);
        if u == v {
            dropped += 1;
            continue;
        }
        edges.push((u, v));
    }
    if dropped > 0 {
        log::warn!("dropped {dropped} self-loop(s) while loading edge list");
    }
    let graph = Graph::new(original_ids.len(), edges)?;
    Ok(EdgeList { graph, original_ids, dropped_self_loops: dropped })
}

/// Edge betweenness, aligned with [`Graph::edges`]. Each unordered node pair
/// contributes the fraction of its shortest paths that use the edge.
pub fn edge_betweenness(graph: &Graph) -> Vec<f64> {
    let adj = graph.indexed_adjacency();
    brandes_edges(&adj, &vec![false; graph.edge_count()])
}

/// Same as [`edge_betweenness`] keyed by the `(u, v)` pair, `u < v`.
pub fn edge_betweenness_map(graph: &Graph) -> BTreeMap<(usize, usize), f64> {
    graph.edges().iter().copied().zip(edge_betweenness(graph)).collect()
}

/// Brandes accumulation restricted to edges not marked `removed`.
fn brandes_edges(adj: &[Vec<(usize, usize)>], removed: &[bool]) -> Vec<f64> {
    let n = adj.len();
    let m = removed.len();
    let per_source: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|s| {
            let mut credit = vec![0.0; m];
            let mut sigma = vec![0.0f64; n];
            let mut dist = vec![usize::MAX; n];
            let mut delta = vec![0.0f64; n];
            let mut order = Vec::with_capacity(n);
            let mut queue = std::collections::VecDeque::new();
            sigma[s] = 1.0;
            dist[s] = 0;
            queue.push_back(s);
            while let Some(v) = queue.pop_front() {
                order.push(v);
                for &(w, e) in &adj[v] {
                    if removed[e] {
                        continue;
                    }
                    if dist[w] == usize::MAX {
                        dist[w] = dist[v] + 1;
                        queue.push_back(w);
                    }
                    if dist[w] == dist[v] + 1 {
                        sigma[w] += sigma[v];
                    }
                }
            }
            for &w in order.iter().rev() {
                for &(v, e) in &adj[w] {
                    if removed[e] || dist[v] == usize::MAX || dist[v] + 1 != dist[w] {
                        continue;
                    }
                    let c = sigma[v] / sigma[w] * (1.0 + delta[w]);
                    credit[e] += c;
                    delta[v] += c;
                }
            }
            credit
        })
        .collect();
    let mut total = vec![0.0; m];
    for credit in &per_source {
        for (t, c) in total.iter_mut().zip(credit) {
            *t += c;
        }
    }
    for t in &mut total {
        *t /= 2.0;
    }
    total
}

fn components_masked(adj: &[Vec<(usize, usize)>], removed: &[bool]) -> Vec<usize> {
    let n = adj.len();
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    let mut stack = Vec::new();
    for start in 0..n {
        if label[start] != usize::MAX {
            continue;
        }
        label[start] = next;
        stack.push(start);
        while let Some(v) = stack.pop() {
            for &(w, e) in &adj[v] {
                if !removed[e] && label[w] == usize::MAX {
                    label[w] = next;
                    stack.push(w);
                }
            }
        }
        next += 1;
    }
    label
}

/// Newman modularity `Σ_c [e_c/m − (d_c/2m)²]`.
pub fn modularity(graph: &Graph, partition: &BinPartition) -> Result<f64> {
    if partition.n() != graph.n() {
        return Err(Error::invalid(format!(
            "partition covers {} nodes, graph has {}",
            partition.n(),
            graph.n()
        )));
    }
    modularity_of_labels(graph, partition.assignments())
}

fn modularity_of_labels(graph: &Graph, labels: &[usize]) -> Result<f64> {
    let m = graph.edge_count();
    if m == 0 {
        return Err(Error::Undefined("modularity of a graph without edges".into()));
    }
    let k = labels.iter().copied().max().map_or(0, |x| x + 1);
    let mut within = vec![0usize; k];
    let mut degree = vec![0usize; k];
    for &(u, v) in graph.edges() {
        degree[labels[u]] += 1;
        degree[labels[v]] += 1;
        if labels[u] == labels[v] {
            within[labels[u]] += 1;
        }
    }
    let m = m as f64;
    Ok(within
        .iter()
        .zip(&degree)
        .map(|(&e, &d)| e as f64 / m - (d as f64 / (2.0 * m)).powi(2))
        .sum())
}

const BETWEENNESS_TIE_TOL: f64 = 1e-9;

/// Girvan–Newman community detection.
///
/// Edges are removed one at a time in order of maximal betweenness
/// (recomputed after each removal, ties to the lowest edge index). Among the
/// component partitions seen along the way the one with the highest
/// modularity on the original graph is kept. Communities with fewer than
/// `min_size` nodes are then merged into the largest one and bins are
/// relabeled by descending size.
pub fn detect_communities(graph: &Graph, min_size: usize) -> Result<BinPartition> {
    if graph.n() == 0 {
        return Err(Error::invalid("community detection on an empty graph"));
    }
    if min_size == 0 {
        return Err(Error::invalid("min_size must be >= 1"));
    }
    let adj = graph.indexed_adjacency();
    let m = graph.edge_count();
    let mut removed = vec![false; m];
    let mut labels = components_masked(&adj, &removed);
    let mut n_components = labels.iter().max().map_or(0, |x| x + 1);
    let mut best = labels.clone();

    if m > 0 {
        let mut best_q = modularity_of_labels(graph, &labels)?;
        for _ in 0..m {
            let scores = brandes_edges(&adj, &removed);
            let mut pick: Option<(usize, f64)> = None;
            for (e, &score) in scores.iter().enumerate() {
                if removed[e] {
                    continue;
                }
                match pick {
                    Some((_, top)) if score <= top + BETWEENNESS_TIE_TOL => {}
                    _ => pick = Some((e, score)),
                }
            }
            let Some((edge, _)) = pick else { break };
            removed[edge] = true;
            labels = components_masked(&adj, &removed);
            let count = labels.iter().max().map_or(0, |x| x + 1);
            if count > n_components {
                n_components = count;
                let q = modularity_of_labels(graph, &labels)?;
                if q > best_q + 1e-12 {
                    best_q = q;
                    best = labels.clone();
                }
            }
        }
    }

    let k = best.iter().max().map_or(0, |x| x + 1);
    let mut groups = vec![Vec::new(); k];
    for (v, &c) in best.iter().enumerate() {
        groups[c].push(v);
    }
    Ok(BinPartition::from_groups(graph.n(), merge_small(groups, min_size))?)
}

/// Folds every group smaller than `min_size` into the largest group
/// (ties: smallest member id).
fn merge_small(groups: Vec<Vec<usize>>, min_size: usize) -> Vec<Vec<usize>> {
    let largest = (0..groups.len())
        .min_by_key(|&g| (std::cmp::Reverse(groups[g].len()), groups[g][0]))
        .expect("at least one group");
    let mut absorbed = Vec::new();
    let mut kept = Vec::new();
    for (g, group) in groups.into_iter().enumerate() {
        if g != largest && group.len() < min_size {
            absorbed.extend(group);
        } else {
            kept.push((g == largest, group));
        }
    }
    kept.into_iter()
        .map(|(is_largest, mut group)| {
            if is_largest {
                group.append(&mut absorbed);
                group.sort_unstable();
            }
            group
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path3() -> Graph {
        Graph::new(3, [(0, 1), (1, 2)]).unwrap()
    }

    fn triangle() -> Graph {
        Graph::new(3, [(0, 1), (1, 2), (0, 2)]).unwrap()
    }

    fn complete(n: usize) -> Graph {
        let edges = (0..n).flat_map(|u| ((u + 1)..n).map(move |v| (u, v)));
        Graph::new(n, edges).unwrap()
    }

    pub(crate) fn two_cliques_bridge() -> Graph {
        let mut edges = Vec::new();
        for base in [0, 5] {
            for u in 0..5 {
                for v in (u + 1)..5 {
                    edges.push((base + u, base + v));
                }
            }
        }
        edges.push((4, 5));
        Graph::new(10, edges).unwrap()
    }

    #[test]
    fn sbm_edge_cases() {
        let (g, p) = gen_sbm(&[3], 1.0, 0.0, 1).unwrap();
        assert_eq!(g.edge_count(), 3);
        assert_eq!(p.k(), 1);
        let (g, p) = gen_sbm(&[2, 2], 0.0, 0.0, 1).unwrap();
        assert_eq!((g.n(), g.edge_count(), p.k()), (4, 0, 2));
        let (g, p) = gen_sbm(&[187, 187, 63, 63], 0.1, 0.01, 9).unwrap();
        assert_eq!(g.n(), 500);
        assert_eq!(p.sizes(), vec![187, 187, 63, 63]);
        assert!(gen_sbm(&[], 0.1, 0.0, 0).is_err());
        assert!(gen_sbm(&[2], 1.2, 0.0, 0).is_err());
        assert!(gen_sbm(&[2], 0.5, -0.1, 0).is_err());
    }

    #[test]
    fn sbm_is_seed_deterministic() {
        let a = gen_sbm(&[20, 10], 0.3, 0.05, 42).unwrap();
        let b = gen_sbm(&[20, 10], 0.3, 0.05, 42).unwrap();
        assert_eq!(a, b);
        let c = gen_sbm(&[20, 10], 0.3, 0.05, 43).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn sbm_density_is_plausible() {
        let (g, p) = gen_sbm(&[100, 100], 0.1, 0.01, 5).unwrap();
        let (mut inside, mut across) = (0, 0);
        for &(u, v) in g.edges() {
            if p.bin_of(u) == p.bin_of(v) {
                inside += 1;
            } else {
                across += 1;
            }
        }
        // expected 990 within, 100 across
        assert!((850..1130).contains(&inside), "{inside}");
        assert!((60..145).contains(&across), "{across}");
    }

    #[test]
    fn edge_list_parsing() {
        let el = load_edge_list("0,1\n1,0\n1,2".as_bytes()).unwrap();
        assert_eq!(el.graph.n(), 3);
        assert_eq!(el.graph.edges(), &[(0, 1), (1, 2)]);

        let el = load_edge_list("5,7".as_bytes()).unwrap();
        assert_eq!(el.graph.n(), 2);
        assert_eq!(el.original_ids, vec![5, 7]);
        assert_eq!(el.graph.edges(), &[(0, 1)]);

        let el = load_edge_list("0,0\n0,1".as_bytes()).unwrap();
        assert_eq!((el.graph.n(), el.graph.edge_count(), el.dropped_self_loops), (2, 1, 1));

        let el = load_edge_list("# header\n\n 3 , 4 \n".as_bytes()).unwrap();
        assert_eq!(el.graph.edge_count(), 1);

        match load_edge_list("0,1\n1;2\n".as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(load_edge_list("1,2,3".as_bytes()), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn edge_list_round_trip() {
        let text = "0,1\n1,2\n3,4\n0,3\n4,4\n9,0\n";
        let el = load_edge_list(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        el.write(&mut buf).unwrap();
        let back = load_edge_list(buf.as_slice()).unwrap();
        assert_eq!(el.labeled_edges(), back.labeled_edges());
    }

    #[test]
    fn betweenness_small_cases() {
        let bc = edge_betweenness_map(&path3());
        assert_eq!(bc[&(0, 1)], 2.0);
        assert_eq!(bc[&(1, 2)], 2.0);
        let single = Graph::new(2, [(0, 1)]).unwrap();
        assert_eq!(edge_betweenness(&single), vec![1.0]);
        for v in edge_betweenness(&triangle()) {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn betweenness_matches_brute_force_on_random_small_graphs() {
        for seed in 0..100u64 {
            let mut rng = rng_from_seed(seed);
            let n = rng.random_range(2..=8);
            let p: f64 = rng.random_range(0.2..0.8);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in (u + 1)..n {
                    if rng.random::<f64>() < p {
                        edges.push((u, v));
                    }
                }
            }
            let g = Graph::new(n, edges).unwrap();
            let fast = edge_betweenness_map(&g);
            let slow = crate::verify::brute_force_betweenness(&g);
            for (e, v) in &fast {
                assert!((v - slow[e]).abs() < 1e-9, "seed {seed} edge {e:?}: {v} vs {}", slow[e]);
            }
        }
    }

    #[test]
    fn modularity_examples() {
        let g = Graph::new(6, [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)]).unwrap();
        let p = BinPartition::new(vec![0, 0, 0, 1, 1, 1]).unwrap();
        assert!((modularity(&g, &p).unwrap() - 0.5).abs() < 1e-12);
        assert!(modularity(&g, &BinPartition::single(6).unwrap()).unwrap().abs() < 1e-12);
        let k4 = complete(4);
        let pairs = BinPartition::new(vec![0, 0, 1, 1]).unwrap();
        assert!((modularity(&k4, &pairs).unwrap() + 1.0 / 6.0).abs() < 1e-12);
        let empty = Graph::new(3, []).unwrap();
        assert!(matches!(
            modularity(&empty, &BinPartition::single(3).unwrap()),
            Err(Error::Undefined(_))
        ));
    }

    #[test]
    fn girvan_newman_examples() {
        let g = two_cliques_bridge();
        let p = detect_communities(&g, 1).unwrap();
        assert_eq!(p.k(), 2);
        assert_eq!(p.members(0), &[0, 1, 2, 3, 4]);
        assert_eq!(p.members(1), &[5, 6, 7, 8, 9]);

        assert_eq!(detect_communities(&complete(5), 1).unwrap().k(), 1);
        assert_eq!(detect_communities(&g, 6).unwrap().k(), 1);
        assert!(detect_communities(&Graph::new(0, []).unwrap(), 1).is_err());
    }

    /// Brute force over the removal sequence: the chosen level must attain the
    /// best modularity among all cut levels.
    #[test]
    fn girvan_newman_picks_best_level() {
        for seed in 0..20u64 {
            let (g, _) = gen_sbm(&[6, 6, 5], 0.7, 0.08, seed).unwrap();
            if g.edge_count() == 0 {
                continue;
            }
            let chosen = detect_communities(&g, 1).unwrap();
            let q = modularity(&g, &chosen).unwrap();
            // replay GN independently with a fresh betweenness each round
            let mut edges: Vec<(usize, usize)> = g.edges().to_vec();
            let mut best = modularity(&g, &BinPartition::new(g.components()).unwrap()).unwrap();
            while !edges.is_empty() {
                let h = Graph::new(g.n(), edges.clone()).unwrap();
                let bc = edge_betweenness(&h);
                let top = bc.iter().cloned().fold(f64::MIN, f64::max);
                let idx = bc.iter().position(|&v| v >= top - 1e-9).unwrap();
                edges.retain(|&e| e != h.edges()[idx]);
                let h = Graph::new(g.n(), edges.clone()).unwrap();
                let q_level = modularity(&g, &BinPartition::new(h.components()).unwrap()).unwrap();
                best = best.max(q_level);
            }
            assert!((q - best).abs() < 1e-9, "seed {seed}: {q} vs {best}");
        }
    }

    #[test]
    fn partition_relabeling_and_merge() {
        let p = BinPartition::from_groups(6, vec![vec![5], vec![0, 1], vec![2, 3, 4]]).unwrap();
        assert_eq!(p.sizes(), vec![3, 2, 1]);
        assert_eq!(p.members(2), &[5]);
        let merged = merge_small(vec![vec![0, 1, 2], vec![3], vec![4, 5]], 2);
        assert_eq!(merged, vec![vec![0, 1, 2, 3], vec![4, 5]]);
        assert!(BinPartition::new(vec![0, 2]).is_err());
    }

    #[test]
    fn partition_file_round_trip() {
        let p = BinPartition::new(vec![1, 0, 1, 2]).unwrap();
        let mut buf = Vec::new();
        p.write(&mut buf).unwrap();
        assert_eq!(BinPartition::read(buf.as_slice()).unwrap(), p);
    }

    #[test]
    fn degree_examples() {
        let star = Graph::new(5, (1..5).map(|v| (0, v))).unwrap();
        assert_eq!(star.degree(0).unwrap(), 4);
        assert_eq!(Graph::new(2, []).unwrap().degree(1).unwrap(), 0);
        assert_eq!(triangle().degree(2).unwrap(), 2);
        assert!(star.degree(5).is_err());
    }

    #[test]
    fn graph_rejects_bad_edges() {
        assert!(Graph::new(2, [(0, 0)]).is_err());
        assert!(Graph::new(2, [(0, 2)]).is_err());
        let g = Graph::new(3, [(0, 1), (1, 0), (0, 1)]).unwrap();
        assert_eq!(g.edge_count(), 1);
        assert!(g.clone().with_node_features(vec![vec![1.0]; 2]).is_err());
        assert!(g.with_node_features(vec![vec![1.0, 2.0]; 3]).unwrap().node_features().is_some());
    }
}
