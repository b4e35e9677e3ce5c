//! Client graph, spectral coarsening, and the derived multi-granularity
//! graphs used by the server model.
//!
//! The server sees three structures: the client graph built from sensor
//! distances, the cluster graph produced by spectral clustering, and a
//! bipartite cross-level graph sending each client node to its cluster.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

mod eigen;
mod spectral;

pub use eigen::eigensym;
pub use spectral::spectral_cluster;

/// Weighted undirected graph over client nodes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClientGraph {
    pub n: usize,
    /// N×N row-major weights; symmetric, zero diagonal, entries in [0,1].
    pub adj: Vec<f64>,
    pub node_ids: Vec<String>,
}

impl ClientGraph {
    pub fn new(node_ids: Vec<String>, adj: Vec<f64>) -> Result<ClientGraph> {
        let n = node_ids.len();
        let g = ClientGraph { n, adj, node_ids };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n;
        if n < 1 {
            return Err(Error::Graph("client graph needs at least one node".into()));
        }
        if self.node_ids.len() != n || self.adj.len() != n * n {
            return Err(Error::Graph("client graph field sizes disagree".into()));
        }
        for i in 0..n {
            if self.adj[i * n + i] != 0.0 {
                return Err(Error::Graph(format!("nonzero diagonal at node {i}")));
            }
            for j in 0..n {
                let w = self.adj[i * n + j];
                if !(0.0..=1.0).contains(&w) {
                    return Err(Error::Graph(format!("weight {w} at ({i},{j}) outside [0,1]")));
                }
                if (w - self.adj[j * n + i]).abs() > 1e-12 {
                    return Err(Error::Graph(format!("asymmetric weights at ({i},{j})")));
                }
            }
        }
        Ok(())
    }

    /// Undirected edges (i < j) with positive weight.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                if self.adj[i * self.n + j] > 0.0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Node-to-cluster labeling from spectral clustering.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub m: usize,
    /// label[i] ∈ [0, m); every cluster nonempty.
    pub label: Vec<usize>,
}

impl ClusterAssignment {
    pub fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.m];
        for &l in &self.label {
            if l >= self.m {
                return Err(Error::Graph(format!("label {l} out of range for m={}", self.m)));
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|&s| !s) {
            return Err(Error::Graph(format!("cluster {c} is empty")));
        }
        Ok(())
    }

    /// Member count per cluster.
    pub fn sizes(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.m];
        for &l in &self.label {
            counts[l] += 1;
        }
        counts
    }
}

/// Binary symmetric adjacency over clusters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClusterGraph {
    pub m: usize,
    /// M×M row-major 0/1 entries, zero diagonal.
    pub adj: Vec<u8>,
}

impl ClusterGraph {
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.m {
            for j in (i + 1)..self.m {
                if self.adj[i * self.m + j] != 0 {
                    out.push((i, j));
                }
            }
        }
        out
    }
}

/// Directed client-to-cluster edges; exactly one per client node.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossLevelGraph {
    /// (client node index, cluster index) pairs, one per node, in node order.
    pub edges: Vec<(usize, usize)>,
}

/// Gaussian-kernel client graph from pairwise sensor distances.
///
/// w_ij = exp(−d_ij² / σ²) where σ is the standard deviation of all listed
/// finite distances; weights below `kappa` are dropped, the diagonal is
/// zero, and conflicts between (i,j) and (j,i) rows resolve to the larger
/// weight (smaller distance).
pub fn build_client_graph(distances: &DistanceTable, kappa: f64) -> Result<ClientGraph> {
    if !(0.0..1.0).contains(&kappa) {
        return Err(Error::Graph(format!("kappa {kappa} outside [0,1)")));
    }
    let n = distances.ids.len();
    if n == 0 {
        return Err(Error::Graph("empty distance table".into()));
    }
    let listed: Vec<f64> = distances
        .pairs
        .values()
        .copied()
        .filter(|d| d.is_finite())
        .collect();
    if listed.is_empty() {
        return Err(Error::Graph("distance table lists no finite distances".into()));
    }
    let mean = listed.iter().sum::<f64>() / listed.len() as f64;
    let var = listed.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / listed.len() as f64;
    let sigma = var.sqrt();

    let mut adj = vec![0.0; n * n];
    for (&(i, j), &d) in &distances.pairs {
        if i == j {
            continue;
        }
        // All listed distances equal: treat every listed pair as maximally
        // similar rather than dividing by a zero spread.
        let w = if sigma > 0.0 { (-d * d / (sigma * sigma)).exp() } else { 1.0 };
        let w = if w < kappa { 0.0 } else { w };
        // Symmetrize by max: of a conflicting (i,j)/(j,i) pair, the shorter
        // distance wins.
        if w > adj[i * n + j] {
            adj[i * n + j] = w;
            adj[j * n + i] = w;
        }
    }
    ClientGraph::new(distances.ids.clone(), adj)
}

/// Pairwise sensor distances keyed by node index.
#[derive(Debug, Clone, Default)]
pub struct DistanceTable {
    pub ids: Vec<String>,
    /// Keyed (i, j) with i, j indices into `ids`; unordered duplicates kept
    /// as given, resolved at graph-build time.
    pub pairs: BTreeMap<(usize, usize), f64>,
}

impl DistanceTable {
    /// Assemble from (from, to, distance) records. Node ids are assigned in
    /// first-appearance order.
    pub fn from_records<S: AsRef<str>>(records: &[(S, S, f64)]) -> Result<DistanceTable> {
        let mut ids: Vec<String> = Vec::new();
        let mut index: BTreeMap<String, usize> = BTreeMap::new();
        let mut intern = |name: &str, ids: &mut Vec<String>| -> usize {
            *index.entry(name.to_string()).or_insert_with(|| {
                ids.push(name.to_string());
                ids.len() - 1
            })
        };
        let mut pairs = BTreeMap::new();
        for (from, to, d) in records {
            if *d < 0.0 || !d.is_finite() {
                return Err(Error::Data(format!(
                    "distance {d} between {} and {} must be finite and nonnegative",
                    from.as_ref(),
                    to.as_ref()
                )));
            }
            let i = intern(from.as_ref(), &mut ids);
            let j = intern(to.as_ref(), &mut ids);
            pairs.insert((i, j), *d);
        }
        Ok(DistanceTable { ids, pairs })
    }

    /// Parse `from,to,distance` CSV text (header required).
    pub fn parse_csv(text: &str) -> Result<DistanceTable> {
        let mut lines = text.lines().enumerate();
        let header = lines
            .next()
            .ok_or_else(|| Error::Data("distance csv is empty".into()))?
            .1;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols != ["from", "to", "distance"] {
            return Err(Error::Data(format!(
                "distance csv header must be from,to,distance, got {header:?}"
            )));
        }
        let mut records: Vec<(String, String, f64)> = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 3 {
                return Err(Error::Data(format!(
                    "distance csv line {}: expected 3 fields, got {}",
                    lineno + 1,
                    fields.len()
                )));
            }
            let d: f64 = fields[2].parse().map_err(|_| {
                Error::Data(format!("distance csv line {}: bad distance {:?}", lineno + 1, fields[2]))
            })?;
            records.push((fields[0].to_string(), fields[1].to_string(), d));
        }
        Self::from_records(&records)
    }

    /// Inverse of [`parse_csv`]: one `from,to,distance` row per stored pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("from,to,distance\n");
        for (&(i, j), d) in &self.pairs {
            out.push_str(&format!("{},{},{:?}\n", self.ids[i], self.ids[j], d));
        }
        out
    }
}

/// Cluster graph from the rule: clusters m, n are adjacent iff some client
/// edge crosses them.
pub fn build_cluster_graph(g: &ClientGraph, a: &ClusterAssignment) -> Result<ClusterGraph> {
    if a.label.len() != g.n {
        return Err(Error::Graph(format!(
            "{} labels for {} nodes",
            a.label.len(),
            g.n
        )));
    }
    a.validate()?;
    let m = a.m;
    let mut adj = vec![0u8; m * m];
    for (i, j) in g.edges() {
        let (ci, cj) = (a.label[i], a.label[j]);
        if ci != cj {
            adj[ci * m + cj] = 1;
            adj[cj * m + ci] = 1;
        }
    }
    Ok(ClusterGraph { m, adj })
}

/// Bipartite graph sending every client node to its own cluster.
pub fn build_cross_level(a: &ClusterAssignment) -> CrossLevelGraph {
    CrossLevelGraph {
        edges: a.label.iter().enumerate().map(|(i, &l)| (i, l)).collect(),
    }
}

/// The full graph stack the server trains on.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiGraph {
    pub client: ClientGraph,
    pub assignment: ClusterAssignment,
    pub cluster: ClusterGraph,
    pub cross: CrossLevelGraph,
}

impl MultiGraph {
    /// Cluster the client graph and derive the coarse structures.
    pub fn build(client: ClientGraph, m: usize, seed: u64) -> Result<MultiGraph> {
        let assignment = spectral_cluster(&client, m, seed)?;
        let cluster = build_cluster_graph(&client, &assignment)?;
        let cross = build_cross_level(&assignment);
        Ok(MultiGraph { client, assignment, cluster, cross })
    }

    pub fn n(&self) -> usize {
        self.client.n
    }

    pub fn m(&self) -> usize {
        self.assignment.m
    }

    pub fn validate(&self) -> Result<()> {
        self.client.validate()?;
        self.assignment.validate()?;
        if self.assignment.label.len() != self.client.n {
            return Err(Error::Graph("assignment length does not match node count".into()));
        }
        if self.cluster.m != self.assignment.m || self.cluster.adj.len() != self.cluster.m * self.cluster.m {
            return Err(Error::Graph("cluster graph sizes disagree with assignment".into()));
        }
        if self.cross.edges.len() != self.client.n {
            return Err(Error::Graph("cross-level graph must have one edge per node".into()));
        }
        for (i, &(src, dst)) in self.cross.edges.iter().enumerate() {
            if src != i || dst != self.assignment.label[i] {
                return Err(Error::Graph(format!("cross-level edge {i} does not target its cluster")));
            }
        }
        Ok(())
    }
}

/// Default cluster count: ceil(sqrt(N)).
pub fn default_cluster_count(n: usize) -> usize {
    (n as f64).sqrt().ceil() as usize
}
