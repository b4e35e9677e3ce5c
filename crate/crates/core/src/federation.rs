//! Alternating split training: local client rounds, masked server rounds,
//! FedAvg synchronization, with exact communication accounting.
//!
//! One global round runs three phases. Step 1 trains every client alone for
//! a fixed number of local rounds while its spatial embedding stays
//! constant. Step 2 uploads one temporal embedding per client (recomputed
//! once at phase entry and held fixed), trains the server against frozen
//! decoder copies for a fixed number of rounds, then recomputes the spatial
//! embeddings without masking. Step 3 averages the client weights and
//! broadcasts the result together with each client's spatial embedding.
//! Only embeddings and parameters cross the transport, never raw windows.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::client::{loss_on, run_encoder, ClientDims, ClientModel, Decoder, GruCell, WindowSample};
use crate::data::{fit_train_scaler, make_windows, SplitSpec, Standardizer, TraceTable, WindowSet};
use crate::error::{Error, Result};
use crate::graph::{build_client_graph, default_cluster_count, DistanceTable, MultiGraph};
use crate::server::ServerModel;
use crate::tensor::adam::AdamState;
use crate::tensor::init::{derive_seed, seeded_rng};
use crate::tensor::Tensor;

/// Hyperparameters of one federated run.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FedConfig {
    /// Global rounds R_g (each runs all three steps once).
    pub rounds_global: usize,
    /// Local client rounds R_c per global round.
    pub rounds_client: usize,
    /// Server rounds R_s per global round.
    pub rounds_server: usize,
    /// Training-time node mask rate.
    pub mask_rate: f64,
    pub lr: f64,
    pub seed: u64,
    /// Mini-batch size for local client rounds.
    pub batch_size: usize,
    /// Client count N; must match the graphs and the window set.
    pub clients: usize,
    /// Embedding width H, shared by the temporal and spatial streams.
    pub hidden_dim: usize,
    /// Client encoder stack depth.
    pub encoder_layers: usize,
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds_global < 1 || self.rounds_client < 1 || self.rounds_server < 1 {
            return Err(Error::Config("all round counts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mask_rate) {
            return Err(Error::Config(format!("mask rate {} outside [0,1]", self.mask_rate)));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::Config(format!("learning rate {} must be ≥ 0", self.lr)));
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.clients < 1 {
            return Err(Error::Config("need at least one client".into()));
        }
        if self.hidden_dim < 1 || self.encoder_layers < 1 {
            return Err(Error::Config("hidden size and encoder depth must be at least 1".into()));
        }
        Ok(())
    }

    /// Client dimensions for `data_dim`-wide readings. The spatial width
    /// equals the hidden width: the server returns one embedding row per
    /// uploaded row, same layout.
    pub fn client_dims(&self, data_dim: usize) -> ClientDims {
        ClientDims {
            data_dim,
            hidden_dim: self.hidden_dim,
            spatial_dim: self.hidden_dim,
            encoder_layers: self.encoder_layers,
        }
    }
}

/// Data preparation knobs shared by every entry point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PrepareSpec {
    /// History window length S.
    pub s_len: usize,
    /// Forecast horizon T.
    pub horizon: usize,
    pub split: SplitSpec,
    /// Gaussian-kernel threshold for the client graph.
    pub kappa: f64,
    /// Cluster count; `None` picks ceil(√N).
    pub clusters: Option<usize>,
    pub cluster_seed: u64,
    /// Standardize each sensor separately instead of globally.
    pub per_sensor: bool,
}

/// Inputs a run consumes: standardized windows, the graph stack, and the
/// scaler that maps predictions back to the original scale.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub windows: WindowSet,
    pub graphs: MultiGraph,
    pub scaler: Standardizer,
}

/// Standardizes on the training split only, windows the table, and builds
/// the multi-granularity graphs, with the distance table permuted into the
/// trace's sensor order first.
pub fn prepare_run(
    table: &TraceTable,
    distances: &DistanceTable,
    spec: &PrepareSpec,
) -> Result<Prepared> {
    let scaler = fit_train_scaler(table, &spec.split, spec.per_sensor)?;
    let standardized = scaler.transform_table(table);
    let windows = make_windows(&standardized, spec.s_len, spec.horizon, &spec.split)?;
    let aligned = align_distances(distances, &table.sensor_ids)?;
    let graph = build_client_graph(&aligned, spec.kappa)?;
    let m = spec.clusters.unwrap_or_else(|| default_cluster_count(table.n_sensors()));
    let graphs = MultiGraph::build(graph, m, spec.cluster_seed)?;
    Ok(Prepared { windows, graphs, scaler })
}

/// Reindexes a distance table to the trace's sensor order. Sensors without
/// distance entries become isolated nodes; distance ids that name no sensor
/// are an error.
pub fn align_distances(distances: &DistanceTable, sensor_ids: &[String]) -> Result<DistanceTable> {
    if distances.ids == sensor_ids {
        return Ok(distances.clone());
    }
    let index: std::collections::BTreeMap<&str, usize> =
        sensor_ids.iter().enumerate().map(|(i, s)| (s.as_str(), i)).collect();
    let mut remap = Vec::with_capacity(distances.ids.len());
    for id in &distances.ids {
        let &to = index.get(id.as_str()).ok_or_else(|| {
            Error::Data(format!("distance table names unknown sensor {id:?}"))
        })?;
        remap.push(to);
    }
    let pairs = distances
        .pairs
        .iter()
        .map(|(&(a, b), &d)| ((remap[a], remap[b]), d))
        .collect();
    Ok(DistanceTable { ids: sensor_ids.to_vec(), pairs })
}

/// In-process loopback transport with exact float accounting. Every send is
/// all-or-nothing; payload fingerprints feed the "raw data never leaves a
/// client" probe.
#[derive(Debug, Clone)]
pub struct Transport {
    pub floats_up: u64,
    pub floats_down: u64,
    /// Fingerprint of every delivered payload, in send order.
    pub sent: Vec<u64>,
    drop_link: Vec<bool>,
}

impl Transport {
    pub fn new(clients: usize) -> Transport {
        Transport { floats_up: 0, floats_down: 0, sent: Vec::new(), drop_link: vec![false; clients] }
    }

    /// Marks a client's link down; subsequent sends to or from it vanish
    /// whole (never partially) and are not counted.
    pub fn set_drop(&mut self, client: usize, down: bool) {
        self.drop_link[client] = down;
    }

    pub fn is_down(&self, client: usize) -> bool {
        self.drop_link.get(client).copied().unwrap_or(false)
    }

    /// Client-to-server send. Returns whether the payload was delivered.
    pub fn send_up(&mut self, client: usize, payload: &[f64]) -> bool {
        if self.is_down(client) {
            return false;
        }
        self.floats_up += payload.len() as u64;
        self.sent.push(fingerprint(payload));
        true
    }

    /// Server-to-client send. Returns whether the payload was delivered.
    pub fn send_down(&mut self, client: usize, payload: &[f64]) -> bool {
        if self.is_down(client) {
            return false;
        }
        self.floats_down += payload.len() as u64;
        self.sent.push(fingerprint(payload));
        true
    }
}

/// FNV-1a over the little-endian bytes of a float sequence. Used to compare
/// transported payloads against raw data without storing either.
pub fn fingerprint(payload: &[f64]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for v in payload {
        for b in v.to_le_bytes() {
            hash ^= b as u64;
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    hash
}

/// One metrics record; the log is newline-delimited JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundMetrics {
    pub round: usize,
    /// "client", "server", or "sync".
    pub phase: String,
    pub loss_on: Option<f64>,
    pub loss_off: Option<f64>,
    /// Floats moved during this phase.
    pub floats_up: u64,
    pub floats_down: u64,
}

pub fn metrics_to_ndjson(records: &[RoundMetrics]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("metrics serialize"));
        out.push('\n');
    }
    out
}

/// Mutable state of a run between phases. `round` is the 1-based round in
/// progress; Step 3 advances it.
pub struct FedRunState {
    pub round: usize,
    pub clients: Vec<ClientModel>,
    pub server: ServerModel,
    /// Per-client spatial embeddings, constants on the client side. All
    /// zeros before the first server phase.
    pub spatial: Vec<Tensor>,
    pub opt_server: AdamState,
    pub transport: Transport,
    pub metrics: Vec<RoundMetrics>,
}

impl FedRunState {
    /// Fresh state: every client starts from identical weights, as if a
    /// common initialization had already been broadcast.
    pub fn init(graphs: MultiGraph, data_dim: usize, cfg: &FedConfig) -> Result<FedRunState> {
        cfg.validate()?;
        if graphs.n() != cfg.clients {
            return Err(Error::Config(format!(
                "config names {} clients but the graphs hold {}",
                cfg.clients,
                graphs.n()
            )));
        }
        let dims = cfg.client_dims(data_dim);
        let client_seed = derive_seed(cfg.seed, "fed.init.client");
        let clients: Vec<ClientModel> = (0..cfg.clients)
            .map(|_| ClientModel::new(&mut seeded_rng(client_seed), dims))
            .collect();
        let mut server_rng = seeded_rng(derive_seed(cfg.seed, "fed.init.server"));
        let server = ServerModel::new(&mut server_rng, graphs, cfg.hidden_dim, cfg.mask_rate)?;
        let opt_server = AdamState::new(cfg.lr, &server.params());
        let spatial =
            (0..cfg.clients).map(|_| Tensor::zeros(&[cfg.hidden_dim])).collect();
        Ok(FedRunState {
            round: 1,
            clients,
            server,
            spatial,
            opt_server,
            transport: Transport::new(cfg.clients),
            metrics: Vec::new(),
        })
    }

    fn check_data(&self, data: &WindowSet) -> Result<()> {
        if data.train.len() != self.clients.len() {
            return Err(Error::Data(format!(
                "window set covers {} clients, run has {}",
                data.train.len(),
                self.clients.len()
            )));
        }
        if let Some(i) = (0..data.train.len()).find(|&i| data.train[i].is_empty()) {
            return Err(Error::Data(format!("client {i} has no training windows")));
        }
        Ok(())
    }
}

/// Parameter-space mean across clients, per parameter. `sizes` switches to
/// sample-count weighting; omitted means uniform.
pub fn fedavg(sets: &[Vec<Tensor>], sizes: Option<&[usize]>) -> Result<Vec<Vec<f64>>> {
    if sets.is_empty() {
        return Err(Error::Config("fedavg over zero clients".into()));
    }
    let weights: Vec<f64> = match sizes {
        Some(s) => {
            if s.len() != sets.len() {
                return Err(Error::Config(format!(
                    "{} size weights for {} clients",
                    s.len(),
                    sets.len()
                )));
            }
            if s.iter().any(|&c| c == 0) {
                return Err(Error::Config("fedavg sample counts must be positive".into()));
            }
            let total: f64 = s.iter().map(|&c| c as f64).sum();
            s.iter().map(|&c| c as f64 / total).collect()
        }
        None => vec![1.0 / sets.len() as f64; sets.len()],
    };
    let first = &sets[0];
    // Mean as base + Σ wᵢ·(vᵢ − base): exact when all clients agree, so the
    // synchronized case is a true no-op.
    let mut avg: Vec<Vec<f64>> = first.iter().map(|p| p.data_vec()).collect();
    for (set, &w) in sets.iter().zip(&weights) {
        if set.len() != first.len() {
            return Err(Error::Shape(format!(
                "client holds {} parameters, expected {}",
                set.len(),
                first.len()
            )));
        }
        for (k, p) in set.iter().enumerate() {
            if p.shape() != first[k].shape() {
                return Err(Error::Shape(format!(
                    "parameter {k} shape {:?} differs from {:?}",
                    p.shape(),
                    first[k].shape()
                )));
            }
            let base = first[k].data_vec();
            for ((acc, v), b) in avg[k].iter_mut().zip(p.data_vec()).zip(base) {
                *acc += w * (v - b);
            }
        }
    }
    Ok(avg)
}

/// One client's Step 1 work, independent of every other client: fresh
/// optimizers, then `rounds_client` passes over its own windows in seeded
/// shuffled mini-batches. Returns per-round batch-mean losses (L_on, L_off),
/// measured before each update.
pub fn step1_one_client(
    model: &ClientModel,
    client: usize,
    windows: &[WindowSample],
    s_i: &Tensor,
    cfg: &FedConfig,
    round: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if windows.is_empty() {
        return Err(Error::Data(format!("client {client} has no training windows")));
    }
    let mut opt_on = AdamState::new(cfg.lr, &model.params_online());
    let mut opt_off = AdamState::new(cfg.lr, &model.params_offline());
    let phase_seed = derive_seed(cfg.seed, "fed.step1");
    let mut rng = seeded_rng(derive_seed(phase_seed, &format!("round.{round}.client.{client}")));

    let mut on_per_round = Vec::with_capacity(cfg.rounds_client);
    let mut off_per_round = Vec::with_capacity(cfg.rounds_client);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    for _ in 0..cfg.rounds_client {
        order.shuffle(&mut rng);
        let (mut on_sum, mut off_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<WindowSample> = chunk.iter().map(|&w| windows[w].clone()).collect();
            let (on, off) = model.local_train_round(&batch, s_i, &mut opt_on, &mut opt_off)?;
            on_sum += on;
            off_sum += off;
            batches += 1;
        }
        on_per_round.push(on_sum / batches as f64);
        off_per_round.push(off_sum / batches as f64);
    }
    Ok((on_per_round, off_per_round))
}

/// Step 1 over all clients. Logs the final local round's mean losses.
pub fn step1_client_phase(
    state: &mut FedRunState,
    data: &WindowSet,
    cfg: &FedConfig,
) -> Result<(f64, f64)> {
    state.check_data(data)?;
    let (up0, down0) = (state.transport.floats_up, state.transport.floats_down);
    let (mut on_sum, mut off_sum) = (0.0, 0.0);
    for i in 0..state.clients.len() {
        let (on, off) = step1_one_client(
            &state.clients[i],
            i,
            &data.train[i],
            &state.spatial[i],
            cfg,
            state.round,
        )?;
        on_sum += on.last().expect("at least one round");
        off_sum += off.last().expect("at least one round");
    }
    let n = state.clients.len() as f64;
    let (loss_on, loss_off) = (on_sum / n, off_sum / n);
    state.metrics.push(RoundMetrics {
        round: state.round,
        phase: "client".into(),
        loss_on: Some(loss_on),
        loss_off: Some(loss_off),
        floats_up: state.transport.floats_up - up0,
        floats_down: state.transport.floats_down - down0,
    });
    Ok((loss_on, loss_off))
}

/// Step 2: every client uploads the temporal embedding of one aligned
/// training window (drawn per round, fixed across the server rounds), the
/// server trains against frozen decoder copies on Σᵢ L_on, and the spatial
/// embeddings are recomputed once more, unmasked, from the settled weights.
/// Returns the per-round pre-update loss totals.
pub fn step2_server_phase(
    state: &mut FedRunState,
    data: &WindowSet,
    cfg: &FedConfig,
) -> Result<Vec<f64>> {
    state.check_data(data)?;
    let (up0, down0) = (state.transport.floats_up, state.transport.floats_down);
    let n = state.clients.len();
    let hid = cfg.hidden_dim;

    let window_count = data.train.iter().map(|w| w.len()).min().expect("checked nonempty");
    let mut wrng = seeded_rng(derive_seed(
        derive_seed(cfg.seed, "fed.step2.window"),
        &format!("round.{}", state.round),
    ));
    let w_idx = wrng.gen_range(0..window_count);

    // Frozen copies stand in for the clients: their parameters carry no
    // gradient, so the loss can only reach the server's weights.
    let frozen: Vec<ClientModel> = state.clients.iter().map(|c| c.frozen_copy()).collect();
    let mut flat = Vec::with_capacity(n * hid);
    for (i, model) in frozen.iter().enumerate() {
        let h = model.encode(&data.train[i][w_idx].x)?;
        let row = h.data_vec();
        state.transport.send_up(i, &row);
        flat.extend_from_slice(&row);
    }
    let h_all = Tensor::from_vec(&[n, hid], flat)?;

    let mask_base = derive_seed(
        derive_seed(cfg.seed, "fed.mask"),
        &format!("round.{}", state.round),
    );
    let mut totals = Vec::with_capacity(cfg.rounds_server);
    for k in 0..cfg.rounds_server {
        let (s_mat, _v_off) = state.server.forward_train(&h_all, mask_base.wrapping_add(k as u64))?;
        let mut total: Option<Tensor> = None;
        for i in 0..n {
            let w = &data.train[i][w_idx];
            let pred = frozen[i].decode_online(
                &h_all.row(i)?,
                &s_mat.row(i)?,
                &w.last_obs()?,
                w.horizon(),
            )?;
            let l = loss_on(&pred, &w.y)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let total = total.expect("at least one client");
        totals.push(total.value());
        total.backward()?;
        state.opt_server.step(&state.server.params())?;
    }

    // The embeddings handed to the next client phase come from the settled
    // weights with every node online.
    let s_final = state.server.forward_with_mask(&h_all, &[])?;
    for i in 0..n {
        state.spatial[i] = s_final.row(i)?.detach();
    }

    state.metrics.push(RoundMetrics {
        round: state.round,
        phase: "server".into(),
        loss_on: totals.last().copied(),
        loss_off: None,
        floats_up: state.transport.floats_up - up0,
        floats_down: state.transport.floats_down - down0,
    });
    Ok(totals)
}

/// Step 3: every client uploads its weights, FedAvg merges them, and the
/// aggregate plus each spatial embedding goes back down. Afterwards all
/// clients hold byte-identical parameters. Advances the round counter.
pub fn step3_aggregate_broadcast(
    state: &mut FedRunState,
    _cfg: &FedConfig,
    sizes: Option<&[usize]>,
) -> Result<()> {
    let (up0, down0) = (state.transport.floats_up, state.transport.floats_down);
    let param_sets: Vec<Vec<Tensor>> = state.clients.iter().map(|c| c.params()).collect();
    for (i, set) in param_sets.iter().enumerate() {
        let flat: Vec<f64> = set.iter().flat_map(|p| p.data_vec()).collect();
        state.transport.send_up(i, &flat);
    }
    let avg = fedavg(&param_sets, sizes)?;
    let avg_flat: Vec<f64> = avg.iter().flatten().copied().collect();
    for i in 0..state.clients.len() {
        state.transport.send_down(i, &avg_flat);
        for (p, vals) in state.clients[i].params().iter().zip(&avg) {
            p.set_data(vals)?;
        }
        let s_row = state.spatial[i].data_vec();
        state.transport.send_down(i, &s_row);
    }
    state.metrics.push(RoundMetrics {
        round: state.round,
        phase: "sync".into(),
        loss_on: None,
        loss_off: None,
        floats_up: state.transport.floats_up - up0,
        floats_down: state.transport.floats_down - down0,
    });
    state.round += 1;
    Ok(())
}

/// Full alternating run: Steps 1 to 3, `rounds_global` times. Deterministic
/// for a fixed config.
pub fn run_training(data: &WindowSet, graphs: MultiGraph, cfg: &FedConfig) -> Result<FedRunState> {
    let data_dim = data
        .train
        .iter()
        .flat_map(|w| w.first())
        .map(|w| w.x.shape()[1])
        .next()
        .ok_or_else(|| Error::Data("window set holds no training windows".into()))?;
    let mut state = FedRunState::init(graphs, data_dim, cfg)?;
    state.check_data(data)?;
    for _ in 0..cfg.rounds_global {
        step1_client_phase(&mut state, data, cfg)?;
        step2_server_phase(&mut state, data, cfg)?;
        step3_aggregate_broadcast(&mut state, cfg, None)?;
    }
    Ok(state)
}

/// Plain GRU forecaster, the reference point the split model is judged
/// against: the same encoder stack and autoregressive decoder, no server.
#[derive(Debug, Clone)]
pub struct GruForecaster {
    pub dims: ClientDims,
    pub encoder: Vec<GruCell>,
    pub dec: Decoder,
}

impl GruForecaster {
    pub fn new(rng: &mut rand_chacha::ChaCha8Rng, dims: ClientDims) -> GruForecaster {
        assert!(dims.encoder_layers >= 1, "encoder needs at least one layer");
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for layer in 0..dims.encoder_layers {
            let input = if layer == 0 { dims.data_dim } else { dims.hidden_dim };
            encoder.push(GruCell::new(rng, input, dims.hidden_dim));
        }
        GruForecaster { dims, encoder, dec: Decoder::new(rng, dims.data_dim, dims.hidden_dim) }
    }

    pub fn predict(&self, w: &WindowSample) -> Result<Tensor> {
        let h = run_encoder(&self.encoder, self.dims.hidden_dim, &w.x)?;
        self.dec.rollout(&h, &w.last_obs()?, w.horizon())
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.encoder.iter().flat_map(|c| c.params()).collect();
        p.extend(self.dec.params());
        p
    }

    /// One optimizer step on the batch-mean MSE; returns the pre-update loss.
    pub fn train_batch(&self, batch: &[WindowSample], opt: &mut AdamState) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Data("training batch is empty".into()));
        }
        let mut total: Option<Tensor> = None;
        for w in batch {
            let l = self.predict(w)?.mse(&w.y)?;
            total = Some(match total {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let mean = total.expect("nonempty batch").scale(1.0 / batch.len() as f64)?;
        let value = mean.value();
        mean.backward()?;
        opt.step(&self.params())?;
        Ok(value)
    }

    fn train_rounds(
        &self,
        windows: &[WindowSample],
        rounds: usize,
        batch_size: usize,
        opt: &mut AdamState,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> Result<f64> {
        let mut last = f64::NAN;
        let mut order: Vec<usize> = (0..windows.len()).collect();
        for _ in 0..rounds {
            order.shuffle(rng);
            let (mut sum, mut batches) = (0.0, 0usize);
            for chunk in order.chunks(batch_size) {
                let batch: Vec<WindowSample> = chunk.iter().map(|&w| windows[w].clone()).collect();
                sum += self.train_batch(&batch, opt)?;
                batches += 1;
            }
            last = sum / batches as f64;
        }
        Ok(last)
    }
}

/// Local-only baseline: one GRU per client trained on its own windows,
/// never communicating. Round counts mirror the split schedule so every
/// model sees the same number of passes over its data.
pub fn train_gru_local(
    data: &WindowSet,
    data_dim: usize,
    cfg: &FedConfig,
) -> Result<Vec<GruForecaster>> {
    cfg.validate()?;
    let dims = cfg.client_dims(data_dim);
    let init_seed = derive_seed(cfg.seed, "gru.init");
    let mut models = Vec::with_capacity(data.train.len());
    for (i, windows) in data.train.iter().enumerate() {
        if windows.is_empty() {
            return Err(Error::Data(format!("client {i} has no training windows")));
        }
        let model = GruForecaster::new(&mut seeded_rng(init_seed), dims);
        let mut opt = AdamState::new(cfg.lr, &model.params());
        let mut rng = seeded_rng(derive_seed(
            derive_seed(cfg.seed, "gru.local"),
            &format!("client.{i}"),
        ));
        model.train_rounds(
            windows,
            cfg.rounds_global * cfg.rounds_client,
            cfg.batch_size,
            &mut opt,
            &mut rng,
        )?;
        models.push(model);
    }
    Ok(models)
}

/// FedAvg baseline: per-client GRUs that average their weights after every
/// block of local rounds. Returns the synchronized per-client models.
pub fn train_gru_fedavg(
    data: &WindowSet,
    data_dim: usize,
    cfg: &FedConfig,
) -> Result<Vec<GruForecaster>> {
    cfg.validate()?;
    let dims = cfg.client_dims(data_dim);
    let init_seed = derive_seed(cfg.seed, "gru.init");
    let models: Vec<GruForecaster> = (0..data.train.len())
        .map(|_| GruForecaster::new(&mut seeded_rng(init_seed), dims))
        .collect();
    for round in 1..=cfg.rounds_global {
        for (i, model) in models.iter().enumerate() {
            if data.train[i].is_empty() {
                return Err(Error::Data(format!("client {i} has no training windows")));
            }
            let mut opt = AdamState::new(cfg.lr, &model.params());
            let mut rng = seeded_rng(derive_seed(
                derive_seed(cfg.seed, "gru.fedavg"),
                &format!("round.{round}.client.{i}"),
            ));
            model.train_rounds(&data.train[i], cfg.rounds_client, cfg.batch_size, &mut opt, &mut rng)?;
        }
        let sets: Vec<Vec<Tensor>> = models.iter().map(|m| m.params()).collect();
        let avg = fedavg(&sets, None)?;
        for model in &models {
            for (p, vals) in model.params().iter().zip(&avg) {
                p.set_data(vals)?;
            }
        }
    }
    Ok(models)
}
