//! Server-side graph model.
//!
//! Training input is the matrix of uploaded client embeddings. A mask layer
//! replaces a random subset of rows with one shared trainable vector so the
//! model learns to reconstruct good spatial context for absent clients; at
//! inference the same vector stands in for genuinely offline clients. Two
//! multi-granularity layers then propagate information client → cluster →
//! cluster → client, with a residual on the client stream.

use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{ClusterAssignment, MultiGraph};
use crate::tensor::init::{seeded_rng, xavier};
use crate::tensor::Tensor;

/// Replaces sampled rows of the embedding matrix with a shared trainable
/// vector during training, and stands in for offline clients at inference.
#[derive(Debug, Clone)]
pub struct NodeMaskLayer {
    /// Shared substitute embedding h_s, zero-initialized.
    pub h_s: Tensor,
    /// Fraction of nodes masked per training call, in [0,1].
    pub mask_rate: f64,
}

impl NodeMaskLayer {
    pub fn new(hidden_dim: usize, mask_rate: f64) -> Result<NodeMaskLayer> {
        if !(0.0..=1.0).contains(&mask_rate) {
            return Err(Error::Config(format!("mask rate {mask_rate} outside [0,1]")));
        }
        Ok(NodeMaskLayer { h_s: Tensor::zeros_param(&[hidden_dim]), mask_rate })
    }

    /// Uniform sample of floor(mask_rate · n) distinct node indices, sorted.
    pub fn sample_masked(&self, n: usize, seed: u64) -> Vec<usize> {
        let k = (self.mask_rate * n as f64).floor() as usize;
        let k = k.min(n);
        let mut rng = seeded_rng(seed);
        let mut picks = sample(&mut rng, n, k).into_vec();
        picks.sort_unstable();
        picks
    }

    /// Replace the given rows with h_s. Gradient of a replaced row flows
    /// into h_s; other rows pass through untouched.
    pub fn apply_mask(&self, h_all: &Tensor, rows: &[usize]) -> Result<Tensor> {
        h_all.mask_rows(&self.h_s, rows)
    }

    /// Training-mode masking: sample V_off and substitute. With `training`
    /// false this is the identity (inference substitutes real offline sets
    /// via [`NodeMaskLayer::substitute_offline`] instead).
    pub fn mask_nodes(
        &self,
        h_all: &Tensor,
        seed: u64,
        training: bool,
    ) -> Result<(Tensor, Vec<usize>)> {
        let shape = h_all.shape();
        if shape.len() != 2 || shape[0] == 0 {
            return Err(Error::Shape(format!("mask layer expects [N × H] with N ≥ 1, got {shape:?}")));
        }
        if !training {
            return Ok((h_all.clone(), Vec::new()));
        }
        let v_off = self.sample_masked(shape[0], seed);
        Ok((self.apply_mask(h_all, &v_off)?, v_off))
    }

    /// Assemble the full N×H input from online rows, with h_s in every
    /// offline row. Row sets must be disjoint and jointly cover 0..N.
    pub fn substitute_offline(
        &self,
        online_rows: &[(usize, Tensor)],
        offline: &[usize],
        n: usize,
    ) -> Result<Tensor> {
        let h = self.h_s.numel();
        let mut covered = vec![false; n];
        for &i in offline {
            if i >= n {
                return Err(Error::Shape(format!("offline index {i} out of range for {n} nodes")));
            }
            if covered[i] {
                return Err(Error::Shape(format!("offline index {i} listed twice")));
            }
            covered[i] = true;
        }
        let mut flat = vec![0.0; n * h];
        for (i, row) in online_rows {
            if *i >= n {
                return Err(Error::Shape(format!("online index {i} out of range for {n} nodes")));
            }
            if covered[*i] {
                return Err(Error::Shape(format!("node {i} is both online and offline")));
            }
            if row.shape() != [h] {
                return Err(Error::Shape(format!(
                    "online row {i} has shape {:?}, expected [{h}]",
                    row.shape()
                )));
            }
            covered[*i] = true;
            flat[*i * h..(*i + 1) * h].copy_from_slice(&row.data_vec());
        }
        if let Some(miss) = covered.iter().position(|&c| !c) {
            return Err(Error::Shape(format!("node {miss} is neither online nor offline")));
        }
        // Offline rows hold placeholder zeros here; the mask op overwrites
        // them with h_s through the same code path training uses, which
        // keeps train and infer forwards byte-identical for equal inputs.
        let assembled = Tensor::from_vec(&[n, h], flat)?;
        self.apply_mask(&assembled, offline)
    }
}

/// Eq. 3: cluster embeddings start as the mean of their members' rows.
pub fn cluster_init(z0: &Tensor, a: &ClusterAssignment) -> Result<Tensor> {
    z0.cluster_mean(&a.label, a.m)
}

/// One message-passing sublayer: separate self and neighbor transforms,
/// mean aggregation over in-neighbors, ReLU.
#[derive(Debug, Clone)]
pub struct GraphSublayer {
    pub w_self: Tensor,
    pub w_nbr: Tensor,
    pub bias: Tensor,
}

impl GraphSublayer {
    pub fn new(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> GraphSublayer {
        GraphSublayer {
            w_self: xavier(rng, out_dim, in_dim),
            w_nbr: xavier(rng, out_dim, in_dim),
            bias: Tensor::zeros_param(&[out_dim]),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> GraphSublayer {
        GraphSublayer {
            w_self: Tensor::zeros_param(&[out_dim, in_dim]),
            w_nbr: Tensor::zeros_param(&[out_dim, in_dim]),
            bias: Tensor::zeros_param(&[out_dim]),
        }
    }

    /// out_v = ReLU(W_self · x_dst[v] + W_nbr · mean_{u→v} x_src[u] + b).
    /// Destinations with no in-edges aggregate zero.
    pub fn forward(
        &self,
        x_src: &Tensor,
        x_dst: &Tensor,
        edges: &[(usize, usize)],
    ) -> Result<Tensor> {
        let n_dst = x_dst.shape()[0];
        let own = x_dst.matmul(&self.w_self.transpose()?)?;
        let agg = x_src.neighbor_mean(edges, n_dst)?.matmul(&self.w_nbr.transpose()?)?;
        own.add(&agg)?.add(&self.bias)?.relu()
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w_self.clone(), self.w_nbr.clone(), self.bias.clone()]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![
            (format!("{prefix}.w_self"), self.w_self.clone()),
            (format!("{prefix}.w_nbr"), self.w_nbr.clone()),
            (format!("{prefix}.bias"), self.bias.clone()),
        ]
    }
}

/// One multi-granularity layer: up to clusters, across clusters, back down
/// by concatenation (Eq. 4), then across the client graph.
#[derive(Debug, Clone)]
pub struct MultiGranularityLayer {
    pub sub_to_clu: GraphSublayer,
    pub sub_clu: GraphSublayer,
    pub sub_cli: GraphSublayer,
    /// W^l applied to the cluster row before concatenation, [H × H].
    pub w_cluster: Tensor,
    /// Projection of the widened row back to H, [H × 2H].
    pub w_proj: Tensor,
}

impl MultiGranularityLayer {
    pub fn new(rng: &mut ChaCha8Rng, hidden_dim: usize) -> MultiGranularityLayer {
        MultiGranularityLayer {
            sub_to_clu: GraphSublayer::new(rng, hidden_dim, hidden_dim),
            sub_clu: GraphSublayer::new(rng, hidden_dim, hidden_dim),
            sub_cli: GraphSublayer::new(rng, hidden_dim, hidden_dim),
            w_cluster: xavier(rng, hidden_dim, hidden_dim),
            w_proj: xavier(rng, hidden_dim, 2 * hidden_dim),
        }
    }

    pub fn zeros(hidden_dim: usize) -> MultiGranularityLayer {
        MultiGranularityLayer {
            sub_to_clu: GraphSublayer::zeros(hidden_dim, hidden_dim),
            sub_clu: GraphSublayer::zeros(hidden_dim, hidden_dim),
            sub_cli: GraphSublayer::zeros(hidden_dim, hidden_dim),
            w_cluster: Tensor::zeros_param(&[hidden_dim, hidden_dim]),
            w_proj: Tensor::zeros_param(&[hidden_dim, 2 * hidden_dim]),
        }
    }

    /// Full layer pass; returns the client-stream and cluster-stream
    /// outputs (residuals are the caller's concern).
    pub fn forward(
        &self,
        z_in: &Tensor,
        z_clu_in: &Tensor,
        g: &MultiGraph,
    ) -> Result<(Tensor, Tensor)> {
        let n = g.n();
        if z_in.shape()[0] != n || z_clu_in.shape()[0] != g.m() {
            return Err(Error::Shape(format!(
                "layer inputs {:?}/{:?} disagree with graph sizes {}/{}",
                z_in.shape(),
                z_clu_in.shape(),
                n,
                g.m()
            )));
        }
        // 1. Client → cluster over the bipartite graph.
        let z_clu_up = self.sub_to_clu.forward(z_in, z_clu_in, &g.cross.edges)?;
        // 2. Cluster ↔ cluster over the coarse graph.
        let clu_edges = bidirectional(&g.cluster.edges());
        let z_clu_out = self.sub_clu.forward(&z_clu_up, &z_clu_up, &clu_edges)?;
        // 3. Back down: widen each client row with its cluster's projected
        //    row, then project to H.
        let clu_proj = z_clu_out.matmul(&self.w_cluster.transpose()?)?;
        let per_client = clu_proj.gather_rows(&g.assignment.label)?;
        let widened = Tensor::concat_last(&[z_in, &per_client])?;
        let z_star = widened.matmul(&self.w_proj.transpose()?)?;
        // 4. Client ↔ client over the fine graph.
        let cli_edges = bidirectional(&g.client.edges());
        let z_out = self.sub_cli.forward(&z_star, &z_star, &cli_edges)?;
        Ok((z_out, z_clu_out))
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.sub_to_clu.params();
        p.extend(self.sub_clu.params());
        p.extend(self.sub_cli.params());
        p.push(self.w_cluster.clone());
        p.push(self.w_proj.clone());
        p
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut p = self.sub_to_clu.named_params(&format!("{prefix}.to_clu"));
        p.extend(self.sub_clu.named_params(&format!("{prefix}.clu")));
        p.extend(self.sub_cli.named_params(&format!("{prefix}.cli")));
        p.push((format!("{prefix}.w_cluster"), self.w_cluster.clone()));
        p.push((format!("{prefix}.w_proj"), self.w_proj.clone()));
        p
    }
}

fn bidirectional(undirected: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(undirected.len() * 2);
    for &(i, j) in undirected {
        out.push((i, j));
        out.push((j, i));
    }
    out
}

/// The server: mask layer plus two multi-granularity layers with a residual
/// on the client stream, producing one spatial embedding per client.
#[derive(Debug, Clone)]
pub struct ServerModel {
    pub hidden_dim: usize,
    pub mask: NodeMaskLayer,
    pub layers: [MultiGranularityLayer; 2],
    pub graphs: MultiGraph,
}

impl ServerModel {
    pub fn new(
        rng: &mut ChaCha8Rng,
        graphs: MultiGraph,
        hidden_dim: usize,
        mask_rate: f64,
    ) -> Result<ServerModel> {
        graphs.validate()?;
        Ok(ServerModel {
            hidden_dim,
            mask: NodeMaskLayer::new(hidden_dim, mask_rate)?,
            layers: [
                MultiGranularityLayer::new(rng, hidden_dim),
                MultiGranularityLayer::new(rng, hidden_dim),
            ],
            graphs,
        })
    }

    /// All-zero server (tests): the output reduces to the residual path.
    pub fn zeros(graphs: MultiGraph, hidden_dim: usize, mask_rate: f64) -> Result<ServerModel> {
        graphs.validate()?;
        Ok(ServerModel {
            hidden_dim,
            mask: NodeMaskLayer::new(hidden_dim, mask_rate)?,
            layers: [
                MultiGranularityLayer::zeros(hidden_dim),
                MultiGranularityLayer::zeros(hidden_dim),
            ],
            graphs,
        })
    }

    /// Shared trunk after masking: cluster init, two layers, client-stream
    /// residuals. Input Z⁰ is the (already masked or substituted) N×H matrix.
    pub fn forward_from_masked(&self, z0: &Tensor) -> Result<Tensor> {
        if z0.shape() != [self.graphs.n(), self.hidden_dim] {
            return Err(Error::Shape(format!(
                "server input {:?}, expected [{} × {}]",
                z0.shape(),
                self.graphs.n(),
                self.hidden_dim
            )));
        }
        let z_clu0 = cluster_init(z0, &self.graphs.assignment)?;
        let (z1_raw, z_clu1) = self.layers[0].forward(z0, &z_clu0, &self.graphs)?;
        let z1 = z1_raw.add(z0)?;
        let (z2_raw, _) = self.layers[1].forward(&z1, &z_clu1, &self.graphs)?;
        z2_raw.add(&z1)
    }

    /// Training forward over all N uploaded embeddings: sample and apply the
    /// mask, then run the trunk. Returns spatial embeddings and V_off.
    pub fn forward_train(&self, h_all: &Tensor, mask_seed: u64) -> Result<(Tensor, Vec<usize>)> {
        let (z0, v_off) = self.mask.mask_nodes(h_all, mask_seed, true)?;
        Ok((self.forward_from_masked(&z0)?, v_off))
    }

    /// Training forward with an explicitly chosen masked set (deterministic;
    /// also the reference path for inference equivalence).
    pub fn forward_with_mask(&self, h_all: &Tensor, v_off: &[usize]) -> Result<Tensor> {
        let z0 = self.mask.apply_mask(h_all, v_off)?;
        self.forward_from_masked(&z0)
    }

    /// Inference forward from partial uploads: offline rows take h_s.
    pub fn forward_infer(
        &self,
        online_rows: &[(usize, Tensor)],
        offline: &[usize],
    ) -> Result<Tensor> {
        let z0 = self.mask.substitute_offline(online_rows, offline, self.graphs.n())?;
        self.forward_from_masked(&z0)
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = vec![self.mask.h_s.clone()];
        p.extend(self.layers[0].params());
        p.extend(self.layers[1].params());
        p
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut p = vec![("mask.h_s".to_string(), self.mask.h_s.clone())];
        p.extend(self.layers[0].named_params("layer.0"));
        p.extend(self.layers[1].named_params("layer.1"));
        p
    }
}
