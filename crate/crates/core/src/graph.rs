//! Co-occurrence graph over the similarity matrix and the structural
//! features it yields for the reranker: PageRank, degree/Katz/betweenness
//! centralities and outgoing-edge weight statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::itemcf::SimMatrix;

/// Directed weighted graph with index-based adjacency. Nodes are sorted by
/// item id so every traversal order is reproducible.
#[derive(Debug, Clone, Default)]
pub struct CoocGraph {
    nodes: Vec<String>,
    index: HashMap<String, usize>,
    out_edges: Vec<Vec<(usize, f64)>>,
    in_edges: Vec<Vec<(usize, f64)>>,
}

impl CoocGraph {
    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn edge_count(&self) -> usize {
        self.out_edges.iter().map(|e| e.len()).sum()
    }

    pub fn nodes(&self) -> &[String] {
        &self.nodes
    }

    pub fn node_index(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn out_weights(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        self.out_edges[idx].iter().map(|&(_, w)| w)
    }

    pub fn in_weights(&self, idx: usize) -> impl Iterator<Item = f64> + '_ {
        self.in_edges[idx].iter().map(|&(_, w)| w)
    }
}

/// Maps each positive off-diagonal matrix entry to one directed edge. The
/// node set covers every item appearing as a row or a column.
pub fn build_graph(matrix: &SimMatrix) -> CoocGraph {
    let mut node_set: BTreeMap<&str, ()> = BTreeMap::new();
    for (x, row) in &matrix.rows {
        node_set.insert(x.as_str(), ());
        for y in row.keys() {
            node_set.insert(y.as_str(), ());
        }
    }
    let nodes: Vec<String> = node_set.keys().map(|s| s.to_string()).collect();
    let index: HashMap<String, usize> = nodes
        .iter()
        .enumerate()
        .map(|(i, n)| (n.clone(), i))
        .collect();
    let mut out_edges = vec![Vec::new(); nodes.len()];
    let mut in_edges = vec![Vec::new(); nodes.len()];
    for (x, row) in &matrix.rows {
        let xi = index[x.as_str()];
        for (y, &w) in row {
            if x == y || !(w > 0.0) {
                continue;
            }
            let yi = index[y.as_str()];
            out_edges[xi].push((yi, w));
            in_edges[yi].push((xi, w));
        }
    }
    for adj in out_edges.iter_mut().chain(in_edges.iter_mut()) {
        adj.sort_by_key(|&(i, _)| i);
    }
    CoocGraph {
        nodes,
        index,
        out_edges,
        in_edges,
    }
}

/// Weighted-transition power iteration. Dangling nodes spread their mass
/// uniformly; the result sums to 1.
pub fn pagerank(
    graph: &CoocGraph,
    damping: f64,
    tol: f64,
    max_iter: usize,
) -> Result<BTreeMap<String, f64>> {
    if !(damping > 0.0 && damping < 1.0) {
        return Err(Error::InvalidArgument("damping must be in (0, 1)".into()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be > 0".into()));
    }
    let n = graph.node_count();
    if n == 0 {
        return Ok(BTreeMap::new());
    }
    let nf = n as f64;
    let out_weight: Vec<f64> = graph
        .out_edges
        .iter()
        .map(|adj| adj.iter().map(|&(_, w)| w).sum())
        .collect();
    let mut x = vec![1.0 / nf; n];
    let mut next = vec![0.0; n];
    for _ in 0..max_iter {
        let dangling: f64 = (0..n)
            .filter(|&u| out_weight[u] == 0.0)
            .map(|u| x[u])
            .sum();
        let base = (1.0 - damping) / nf + damping * dangling / nf;
        next.iter_mut().for_each(|v| *v = base);
        for u in 0..n {
            if out_weight[u] == 0.0 {
                continue;
            }
            let share = damping * x[u] / out_weight[u];
            for &(v, w) in &graph.out_edges[u] {
                next[v] += share * w;
            }
        }
        let l1: f64 = x.iter().zip(&next).map(|(a, b)| (a - b).abs()).sum();
        std::mem::swap(&mut x, &mut next);
        if l1 < tol {
            break;
        }
    }
    Ok(graph
        .nodes
        .iter()
        .cloned()
        .zip(x.iter().copied())
        .collect())
}

const KATZ_MAX_ITER: usize = 10_000;

/// Katz centrality by fixed-point iteration x <- alpha * A^T x + beta * 1.
pub fn katz(
    graph: &CoocGraph,
    alpha: f64,
    beta: f64,
    tol: f64,
) -> Result<BTreeMap<String, f64>> {
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("tol must be > 0".into()));
    }
    let n = graph.node_count();
    if n == 0 {
        return Ok(BTreeMap::new());
    }
    let mut x = vec![0.0; n];
    let mut next = vec![0.0; n];
    let mut converged = false;
    for _ in 0..KATZ_MAX_ITER {
        for v in 0..n {
            let mut acc = 0.0;
            for &(u, w) in &graph.in_edges[v] {
                acc += w * x[u];
            }
            next[v] = alpha * acc + beta;
        }
        let residual = x
            .iter()
            .zip(&next)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut next);
        if residual < tol {
            converged = true;
            break;
        }
        if !residual.is_finite() || residual > 1e12 {
            break;
        }
    }
    if !converged {
        return Err(Error::NonConvergence(format!(
            "katz iteration did not reach tol {tol} within {KATZ_MAX_ITER} steps (alpha {alpha} too large?)"
        )));
    }
    Ok(graph
        .nodes
        .iter()
        .cloned()
        .zip(x.iter().copied())
        .collect())
}

/// (in-degree + out-degree) / (2 (n - 1)); zero for a singleton graph.
pub fn degree_centrality(graph: &CoocGraph) -> BTreeMap<String, f64> {
    let n = graph.node_count();
    let denom = if n > 1 { 2.0 * (n as f64 - 1.0) } else { 0.0 };
    graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let deg = (graph.in_edges[i].len() + graph.out_edges[i].len()) as f64;
            let c = if n > 1 { deg / denom } else { 0.0 };
            (name.clone(), c)
        })
        .collect()
}

/// How betweenness interprets edges.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BetweennessMode {
    /// Shortest paths on the unweighted skeleton (edges present/absent).
    Skeleton,
    /// Shortest paths under 1/weight distances.
    InverseWeight,
}

/// Brandes betweenness, unnormalized, directed. Exact up to
/// `exact_threshold` nodes, then estimated from `pivots` seeded source
/// samples scaled by n/pivots.
pub fn betweenness(
    graph: &CoocGraph,
    mode: BetweennessMode,
    exact_threshold: usize,
    pivots: usize,
    seed: u64,
) -> BTreeMap<String, f64> {
    let n = graph.node_count();
    let mut centrality = vec![0.0; n];
    if n > 0 {
        let (sources, scale): (Vec<usize>, f64) = if n <= exact_threshold || pivots >= n {
            ((0..n).collect(), 1.0)
        } else {
            let mut all: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            all.shuffle(&mut rng);
            all.truncate(pivots);
            all.sort_unstable();
            (all, n as f64 / pivots as f64)
        };
        for &s in &sources {
            match mode {
                BetweennessMode::Skeleton => brandes_bfs(graph, s, scale, &mut centrality),
                BetweennessMode::InverseWeight => brandes_dijkstra(graph, s, scale, &mut centrality),
            }
        }
    }
    graph
        .nodes
        .iter()
        .cloned()
        .zip(centrality.iter().copied())
        .collect()
}

fn brandes_accumulate(
    s: usize,
    order: &[usize],
    preds: &[Vec<usize>],
    sigma: &[f64],
    scale: f64,
    centrality: &mut [f64],
) {
    let mut delta = vec![0.0; centrality.len()];
    for &w in order.iter().rev() {
        for &v in &preds[w] {
            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
        }
        if w != s {
            centrality[w] += scale * delta[w];
        }
    }
}

fn brandes_bfs(graph: &CoocGraph, s: usize, scale: f64, centrality: &mut [f64]) {
    let n = graph.node_count();
    let mut sigma = vec![0.0; n];
    let mut dist = vec![usize::MAX; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut order = Vec::new();
    sigma[s] = 1.0;
    dist[s] = 0;
    let mut queue = std::collections::VecDeque::new();
    queue.push_back(s);
    while let Some(v) = queue.pop_front() {
        order.push(v);
        for &(w, _) in &graph.out_edges[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
            if dist[w] == dist[v] + 1 {
                sigma[w] += sigma[v];
                preds[w].push(v);
            }
        }
    }
    brandes_accumulate(s, &order, &preds, &sigma, scale, centrality);
}

fn brandes_dijkstra(graph: &CoocGraph, s: usize, scale: f64, centrality: &mut [f64]) {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    #[derive(PartialEq)]
    struct HeapItem(f64, usize);
    impl Eq for HeapItem {}
    impl PartialOrd for HeapItem {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for HeapItem {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.0
                .partial_cmp(&other.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then_with(|| self.1.cmp(&other.1))
        }
    }

    let n = graph.node_count();
    let mut sigma = vec![0.0; n];
    let mut dist = vec![f64::INFINITY; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut settled = vec![false; n];
    let mut order = Vec::new();
    sigma[s] = 1.0;
    dist[s] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Reverse(HeapItem(0.0, s)));
    while let Some(Reverse(HeapItem(d, v))) = heap.pop() {
        if settled[v] {
            continue;
        }
        settled[v] = true;
        order.push(v);
        for &(w, weight) in &graph.out_edges[v] {
            let cand = d + 1.0 / weight;
            let eps = 1e-12 * (1.0 + cand.abs());
            if cand < dist[w] - eps {
                dist[w] = cand;
                sigma[w] = sigma[v];
                preds[w].clear();
                preds[w].push(v);
                heap.push(Reverse(HeapItem(cand, w)));
            } else if (cand - dist[w]).abs() <= eps && !settled[w] {
                sigma[w] += sigma[v];
                preds[w].push(v);
            }
        }
    }
    brandes_accumulate(s, &order, &preds, &sigma, scale, centrality);
}

/// Outgoing or incoming edge statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EdgeDirection {
    Outgoing,
    Incoming,
}

/// (mean, count, max, population std) over the item's edge weights in the
/// given direction; all zeros when there are none.
pub fn neighbor_edge_stats(
    graph: &CoocGraph,
    item: &str,
    direction: EdgeDirection,
) -> Result<(f64, usize, f64, f64)> {
    let idx = graph
        .node_index(item)
        .ok_or_else(|| Error::Lookup(format!("item {item} not in graph")))?;
    let weights: Vec<f64> = match direction {
        EdgeDirection::Outgoing => graph.out_weights(idx).collect(),
        EdgeDirection::Incoming => graph.in_weights(idx).collect(),
    };
    if weights.is_empty() {
        return Ok((0.0, 0, 0.0, 0.0));
    }
    let count = weights.len();
    let mean = weights.iter().sum::<f64>() / count as f64;
    let max = weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let var = weights.iter().map(|w| (w - mean) * (w - mean)).sum::<f64>() / count as f64;
    Ok((mean, count, max, var.max(0.0).sqrt()))
}

/// Tuning for the feature computation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GraphConfig {
    pub damping: f64,
    pub pagerank_tol: f64,
    pub pagerank_max_iter: usize,
    pub katz_alpha: f64,
    pub katz_beta: f64,
    pub katz_tol: f64,
    pub betweenness_mode: BetweennessMode,
    pub betweenness_exact_threshold: usize,
    pub betweenness_pivots: usize,
    pub edge_direction: EdgeDirection,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        GraphConfig {
            damping: 0.85,
            pagerank_tol: 1e-10,
            pagerank_max_iter: 1000,
            katz_alpha: 0.005,
            katz_beta: 1.0,
            katz_tol: 1e-10,
            betweenness_mode: BetweennessMode::Skeleton,
            betweenness_exact_threshold: 5000,
            betweenness_pivots: 256,
            edge_direction: EdgeDirection::Outgoing,
            seed: 0,
        }
    }
}

/// Per-item structural features in the fixed TSV column order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphFeatureRow {
    pub item_id: String,
    pub pagerank: f64,
    pub degree_centrality: f64,
    pub katz: f64,
    pub betweenness: f64,
    pub edge_mean: f64,
    pub edge_count: f64,
    pub edge_max: f64,
    pub edge_std: f64,
}

/// Computes every feature row, sorted by item id.
pub fn graph_features(graph: &CoocGraph, config: &GraphConfig) -> Result<Vec<GraphFeatureRow>> {
    let pr = pagerank(
        graph,
        config.damping,
        config.pagerank_tol,
        config.pagerank_max_iter,
    )?;
    let kz = katz(graph, config.katz_alpha, config.katz_beta, config.katz_tol)?;
    let dc = degree_centrality(graph);
    let bt = betweenness(
        graph,
        config.betweenness_mode,
        config.betweenness_exact_threshold,
        config.betweenness_pivots,
        config.seed,
    );
    let mut rows = Vec::with_capacity(graph.node_count());
    for name in graph.nodes() {
        let (mean, count, max, std) = neighbor_edge_stats(graph, name, config.edge_direction)?;
        rows.push(GraphFeatureRow {
            item_id: name.clone(),
            pagerank: pr[name],
            degree_centrality: dc[name],
            katz: kz[name],
            betweenness: bt[name],
            edge_mean: mean,
            edge_count: count as f64,
            edge_max: max,
            edge_std: std,
        });
    }
    Ok(rows)
}

const FEATURE_HEADER: &str =
    "item_id\tpagerank\tdegree_centrality\tkatz\tbetweenness\tedge_mean\tedge_count\tedge_max\tedge_std";

pub fn save_graph_features(path: &Path, rows: &[GraphFeatureRow]) -> Result<()> {
    let pstr = path.display().to_string();
    let f = std::fs::File::create(path).map_err(|e| Error::io(pstr.clone(), e))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{FEATURE_HEADER}").map_err(|e| Error::io(pstr.clone(), e))?;
    for r in rows {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.item_id,
            r.pagerank,
            r.degree_centrality,
            r.katz,
            r.betweenness,
            r.edge_mean,
            r.edge_count,
            r.edge_max,
            r.edge_std
        )
        .map_err(|e| Error::io(pstr.clone(), e))?;
    }
    w.flush().map_err(|e| Error::io(pstr, e))?;
    Ok(())
}

pub fn load_graph_features(path: &Path) -> Result<Vec<GraphFeatureRow>> {
    let pstr = path.display().to_string();
    let f = std::fs::File::open(path).map_err(|_| Error::MissingArtifact(path.to_path_buf()))?;
    let mut rows = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(pstr.clone(), e))?;
        if i == 0 {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 9 {
            return Err(Error::Parse {
                path: pstr.clone(),
                line: i as u64 + 1,
                msg: format!("expected 9 columns, got {}", cols.len()),
            });
        }
        let num = |j: usize| -> Result<f64> {
            cols[j].parse().map_err(|_| Error::Parse {
                path: pstr.clone(),
                line: i as u64 + 1,
                msg: format!("bad number {:?}", cols[j]),
            })
        };
        rows.push(GraphFeatureRow {
            item_id: cols[0].to_string(),
            pagerank: num(1)?,
            degree_centrality: num(2)?,
            katz: num(3)?,
            betweenness: num(4)?,
            edge_mean: num(5)?,
            edge_count: num(6)?,
            edge_max: num(7)?,
            edge_std: num(8)?,
        });
    }
    Ok(rows)
}
