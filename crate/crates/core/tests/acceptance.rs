//! Acceptance gate. One test per core guarantee, ordered:
//!
//! 1. analytic gradients match finite differences end to end
//! 2. graph message passing matches a dense-matrix oracle
//! 3. mask layer: exact masked-set sizes, train/infer path equivalence
//! 4. spectral clustering recovers planted partitions; eigensolver accuracy
//! 5. federation protocol invariants (sync, isolation, privacy, determinism)
//! 6. the split model beats local-only and FedAvg GRU baselines
//! 7. offline clients beat local GRU; training-time masking helps
//! 8. sweep grid degrades monotonically with the offline rate
//!
//! Each test prints one `PASS <name>: <measurements>` line (visible with
//! `--nocapture`); a failure message carries the measured numbers.

use std::collections::BTreeSet;
use std::time::Instant;

use fedcast_core::client::{loss_on, ClientDims, ClientModel, GruCell};
use fedcast_core::data::{synth_dataset, SplitSpec, SynthSpec};
use fedcast_core::eval::{destandardize, infer_gru, infer_split, rmse, sweep, sweep_to_csv, OfflineSchedule, TrainedSplit};
use fedcast_core::federation::{
    fingerprint, metrics_to_ndjson, prepare_run, run_training, step1_client_phase,
    step2_server_phase, step3_aggregate_broadcast, train_gru_fedavg, train_gru_local, FedConfig,
    FedRunState, Prepared, PrepareSpec,
};
use fedcast_core::graph::{
    build_cluster_graph, build_cross_level, eigensym, spectral_cluster, ClientGraph,
    ClusterAssignment, MultiGraph,
};
use fedcast_core::server::{GraphSublayer, MultiGranularityLayer, NodeMaskLayer, ServerModel};
use fedcast_core::tensor::init::seeded_rng;
use fedcast_core::Tensor;
use rand::Rng;

// Writes through the raw handle so the line survives the harness's output
// capture and `cargo test` shows one verdict per guarantee.
fn pass(name: &str, detail: String) {
    use std::io::Write;
    writeln!(std::io::stdout(), "PASS {name}: {detail}").unwrap();
}

// ---------------------------------------------------------------- shared --

fn graph_from_edges(n: usize, edges: &[(usize, usize)], w: f64) -> ClientGraph {
    let mut adj = vec![0.0; n * n];
    for &(i, j) in edges {
        adj[i * n + j] = w;
        adj[j * n + i] = w;
    }
    ClientGraph::new((0..n).map(|i| format!("s{i}")).collect(), adj).unwrap()
}

/// Two triangles joined by one bridge edge, planted 3+3 clustering.
fn barbell_multigraph() -> MultiGraph {
    let client = graph_from_edges(6, &[(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5), (2, 3)], 1.0);
    let assignment = ClusterAssignment { m: 2, label: vec![0, 0, 0, 1, 1, 1] };
    let cluster = build_cluster_graph(&client, &assignment).unwrap();
    let cross = build_cross_level(&assignment);
    let g = MultiGraph { client, assignment, cluster, cross };
    g.validate().unwrap();
    g
}

fn rand_vec(rng: &mut impl Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn all_param_bits(params: &[Tensor]) -> Vec<u64> {
    params.iter().flat_map(|p| p.data_vec()).map(f64::to_bits).collect()
}

// ------------------------------------------------- 1. gradient suite --

/// Central finite differences over every listed parameter, compared to the
/// already-collected analytic gradients. Relative error has an absolute
/// floor of 1 so near-zero gradients are compared absolutely.
fn max_fd_error(params: &[Tensor], analytic: &[Vec<f64>], loss: &dyn Fn() -> f64) -> f64 {
    let eps = 1e-5;
    let mut worst = 0.0f64;
    for (p, grads) in params.iter().zip(analytic) {
        let base = p.data_vec();
        assert_eq!(base.len(), grads.len(), "gradient length mismatch");
        for k in 0..base.len() {
            let mut bumped = base.clone();
            bumped[k] = base[k] + eps;
            p.set_data(&bumped).unwrap();
            let up = loss();
            bumped[k] = base[k] - eps;
            p.set_data(&bumped).unwrap();
            let down = loss();
            p.set_data(&base).unwrap();
            let fd = (up - down) / (2.0 * eps);
            let rel = (grads[k] - fd).abs() / grads[k].abs().max(fd.abs()).max(1.0);
            worst = worst.max(rel);
        }
    }
    worst
}

fn analytic_grads(params: &[Tensor], loss: &dyn Fn() -> Tensor) -> Vec<Vec<f64>> {
    for p in params {
        p.zero_grad();
    }
    loss().backward().unwrap();
    params.iter().map(|p| p.grad().expect("parameter missing from graph")).collect()
}

#[test]
fn gradients_match_finite_differences_end_to_end() {
    let start = Instant::now();
    let tol = 1e-4;
    let mut rng = seeded_rng(11);

    // One GRU cell step, squared-error loss against a fixed target.
    let cell = GruCell::new(&mut rng, 3, 4);
    let x = Tensor::param(&[3], rand_vec(&mut rng, 3, 1.0)).unwrap();
    let h = Tensor::param(&[4], rand_vec(&mut rng, 4, 1.0)).unwrap();
    let target = Tensor::from_vec(&[4], rand_vec(&mut rng, 4, 1.0)).unwrap();
    let mut params = cell.params();
    params.push(x.clone());
    params.push(h.clone());
    let loss = move || cell.step(&x, &h).unwrap().mse(&target).unwrap();
    let grads = analytic_grads(&params, &|| loss());
    let cell_err = max_fd_error(&params, &grads, &|| loss().value());
    assert!(cell_err <= tol, "GRU cell gradient error {cell_err:.3e} exceeds {tol:.0e}");

    // Full encoder + online decoder, the complete client-side online loss.
    let dims = ClientDims::new(2, 5, 5);
    let model = ClientModel::new(&mut rng, dims);
    let x = Tensor::param(&[4, 2], rand_vec(&mut rng, 8, 1.0)).unwrap();
    let s = Tensor::param(&[5], rand_vec(&mut rng, 5, 1.0)).unwrap();
    let y = Tensor::from_vec(&[3, 2], rand_vec(&mut rng, 6, 1.0)).unwrap();
    let mut params = model.params_online();
    params.push(x.clone());
    params.push(s.clone());
    let loss = move || {
        let h = model.encode(&x).unwrap();
        let last = x.row(3).unwrap();
        let pred = model.decode_online(&h, &s, &last, 3).unwrap();
        loss_on(&pred, &y).unwrap()
    };
    let grads = analytic_grads(&params, &|| loss());
    let client_err = max_fd_error(&params, &grads, &|| loss().value());
    assert!(client_err <= tol, "client loss gradient error {client_err:.3e} exceeds {tol:.0e}");

    // Server forward plus the summed online losses of all six clients on
    // the two-cluster toy, with a forced masked set. Covers the mask
    // substitute, both multi-granularity layers, and every decoder.
    let graphs = barbell_multigraph();
    let hid = 4;
    let server = ServerModel::new(&mut rng, graphs, hid, 0.25).unwrap();
    let cdims = ClientDims::new(2, hid, hid);
    let clients: Vec<ClientModel> = (0..6).map(|_| ClientModel::new(&mut rng, cdims)).collect();
    let h_all = Tensor::param(&[6, hid], rand_vec(&mut rng, 24, 1.0)).unwrap();
    let last: Vec<Tensor> =
        (0..6).map(|_| Tensor::from_vec(&[2], rand_vec(&mut rng, 2, 1.0)).unwrap()).collect();
    let ys: Vec<Tensor> =
        (0..6).map(|_| Tensor::from_vec(&[2, 2], rand_vec(&mut rng, 4, 1.0)).unwrap()).collect();
    let masked = vec![1usize, 4];
    // The loss consumes the uploaded matrix directly, so the encoders are
    // not part of this graph; the fuse layers and online decoders are.
    let mut params = server.params();
    params.push(h_all.clone());
    for c in &clients {
        params.extend(c.fuse.params());
        params.extend(c.dec_on.params());
    }
    let loss = {
        let (server, clients, h_all) = (server.clone(), clients.clone(), h_all.clone());
        let (last, ys, masked) = (last.clone(), ys.clone(), masked.clone());
        move || {
            let s_mat = server.forward_with_mask(&h_all, &masked).unwrap();
            let mut total = Tensor::scalar(0.0);
            for (i, c) in clients.iter().enumerate() {
                let pred = c
                    .decode_online(&h_all.row(i).unwrap(), &s_mat.row(i).unwrap(), &last[i], 2)
                    .unwrap();
                total = total.add(&loss_on(&pred, &ys[i]).unwrap()).unwrap();
            }
            total
        }
    };
    let grads = analytic_grads(&params, &|| loss());
    let server_err = max_fd_error(&params, &grads, &|| loss().value());
    assert!(server_err <= tol, "server loss gradient error {server_err:.3e} exceeds {tol:.0e}");

    let secs = start.elapsed().as_secs_f64();
    assert!(secs < 30.0, "gradient suite took {secs:.1}s, budget 30s");
    pass(
        "gradient suite",
        format!(
            "max rel err: cell {cell_err:.2e}, client {client_err:.2e}, server {server_err:.2e} in {secs:.1}s"
        ),
    );
}

// -------------------------------------------- 2. dense-matrix oracle --

/// Plain-vector reimplementation of one sublayer: mean over in-neighbors,
/// two linear maps, bias, ReLU. Kept free of library tensor ops on purpose.
fn oracle_sublayer(
    sub: &GraphSublayer,
    x_src: &[Vec<f64>],
    x_dst: &[Vec<f64>],
    edges: &[(usize, usize)],
) -> Vec<Vec<f64>> {
    let in_dim = if x_dst.is_empty() { 0 } else { x_dst[0].len() };
    let out_dim = sub.bias.numel();
    let (w_self, w_nbr, bias) = (sub.w_self.data_vec(), sub.w_nbr.data_vec(), sub.bias.data_vec());
    let n_dst = x_dst.len();
    let mut agg = vec![vec![0.0; in_dim]; n_dst];
    let mut deg = vec![0usize; n_dst];
    for &(u, v) in edges {
        for d in 0..in_dim {
            agg[v][d] += x_src[u][d];
        }
        deg[v] += 1;
    }
    for v in 0..n_dst {
        if deg[v] > 0 {
            for d in 0..in_dim {
                agg[v][d] /= deg[v] as f64;
            }
        }
    }
    (0..n_dst)
        .map(|v| {
            (0..out_dim)
                .map(|o| {
                    let mut acc = bias[o];
                    for d in 0..in_dim {
                        acc += w_self[o * in_dim + d] * x_dst[v][d]
                            + w_nbr[o * in_dim + d] * agg[v][d];
                    }
                    acc.max(0.0)
                })
                .collect()
        })
        .collect()
}

fn both_directions(undirected: &[(usize, usize)]) -> Vec<(usize, usize)> {
    undirected.iter().flat_map(|&(i, j)| [(i, j), (j, i)]).collect()
}

/// Dense oracle for one full multi-granularity layer.
fn oracle_mgmp(
    layer: &MultiGranularityLayer,
    z_in: &[Vec<f64>],
    z_clu: &[Vec<f64>],
    g: &MultiGraph,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let h = z_in[0].len();
    let z_clu_up = oracle_sublayer(&layer.sub_to_clu, z_in, z_clu, &g.cross.edges);
    let clu_edges = both_directions(&g.cluster.edges());
    let z_clu_out = oracle_sublayer(&layer.sub_clu, &z_clu_up, &z_clu_up, &clu_edges);
    let wc = layer.w_cluster.data_vec();
    let wp = layer.w_proj.data_vec();
    let clu_proj: Vec<Vec<f64>> = z_clu_out
        .iter()
        .map(|row| (0..h).map(|o| (0..h).map(|d| wc[o * h + d] * row[d]).sum()).collect())
        .collect();
    let z_star: Vec<Vec<f64>> = z_in
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let mut widened = row.clone();
            widened.extend(&clu_proj[g.assignment.label[i]]);
            (0..h).map(|o| (0..2 * h).map(|d| wp[o * 2 * h + d] * widened[d]).sum()).collect()
        })
        .collect();
    let cli_edges = both_directions(&g.client.edges());
    let z_out = oracle_sublayer(&layer.sub_cli, &z_star, &z_star, &cli_edges);
    (z_out, z_clu_out)
}

fn to_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let shape = t.shape().to_vec();
    t.data_vec().chunks(shape[1]).map(|r| r.to_vec()).collect()
}

fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn message_passing_matches_dense_matrix_oracle() {
    let tol = 1e-10;
    let mut rng = seeded_rng(23);
    let mut worst_layer = 0.0f64;
    let mut worst_sub = 0.0f64;

    for case in 0..50 {
        // Random weighted graph on 4..=8 nodes, clustered by the library so
        // the assignment is always consistent with the builders.
        let n = rng.gen_range(4..=8);
        let mut adj = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                if rng.gen_bool(0.6) {
                    let w = rng.gen_range(0.05..=1.0);
                    adj[i * n + j] = w;
                    adj[j * n + i] = w;
                }
            }
        }
        let client =
            ClientGraph::new((0..n).map(|i| format!("s{i}")).collect(), adj).unwrap();
        let m = rng.gen_range(2..=3.min(n));
        let assignment = spectral_cluster(&client, m, case as u64).unwrap();
        let cluster = build_cluster_graph(&client, &assignment).unwrap();
        let cross = build_cross_level(&assignment);
        let g = MultiGraph { client, assignment, cluster, cross };
        g.validate().unwrap();

        let h = rng.gen_range(3..=5);
        let layer = MultiGranularityLayer::new(&mut rng, h);
        let z_in = Tensor::from_vec(&[n, h], rand_vec(&mut rng, n * h, 2.0)).unwrap();
        let z_clu = Tensor::from_vec(&[m, h], rand_vec(&mut rng, m * h, 2.0)).unwrap();

        let (lib_out, lib_clu) = layer.forward(&z_in, &z_clu, &g).unwrap();
        let (ora_out, ora_clu) = oracle_mgmp(&layer, &to_rows(&z_in), &to_rows(&z_clu), &g);
        worst_layer = worst_layer
            .max(max_abs_diff(&to_rows(&lib_out), &ora_out))
            .max(max_abs_diff(&to_rows(&lib_clu), &ora_clu));
    }
    assert!(worst_layer < tol, "layer vs oracle max |Δ| = {worst_layer:.3e}, tolerance {tol:.0e}");

    for _ in 0..50 {
        // Standalone sublayer on arbitrary directed edges and distinct
        // source/destination node sets.
        let n_src = rng.gen_range(4..=8);
        let n_dst = rng.gen_range(4..=8);
        let (d_in, d_out) = (rng.gen_range(2..=5), rng.gen_range(2..=5));
        let mut edges = BTreeSet::new();
        for _ in 0..rng.gen_range(0..n_src * n_dst) {
            edges.insert((rng.gen_range(0..n_src), rng.gen_range(0..n_dst)));
        }
        let edges: Vec<(usize, usize)> = edges.into_iter().collect();
        let sub = GraphSublayer::new(&mut rng, d_out, d_in);
        let x_src = Tensor::from_vec(&[n_src, d_in], rand_vec(&mut rng, n_src * d_in, 2.0)).unwrap();
        let x_dst = Tensor::from_vec(&[n_dst, d_in], rand_vec(&mut rng, n_dst * d_in, 2.0)).unwrap();
        let lib = sub.forward(&x_src, &x_dst, &edges).unwrap();
        let ora = oracle_sublayer(&sub, &to_rows(&x_src), &to_rows(&x_dst), &edges);
        worst_sub = worst_sub.max(max_abs_diff(&to_rows(&lib), &ora));
    }
    assert!(worst_sub < tol, "sublayer vs oracle max |Δ| = {worst_sub:.3e}, tolerance {tol:.0e}");

    pass(
        "message passing oracle",
        format!("50+50 instances, max |Δ| layer {worst_layer:.1e}, sublayer {worst_sub:.1e}"),
    );
}

// ------------------------------------------------- 3. mask contract --

#[test]
fn mask_layer_sizes_and_inference_equivalence() {
    // Hand-computed floor(rate · n) table; not recomputed with the same
    // expression the library uses.
    let expected: &[(f64, [usize; 3])] = &[
        (0.0, [0, 0, 0]),
        (0.1, [0, 1, 20]),
        (0.25, [1, 2, 51]),
        (0.4, [1, 4, 82]),
        (1.0, [4, 10, 207]),
    ];
    let ns = [4usize, 10, 207];
    for &(rate, sizes) in expected {
        let layer = NodeMaskLayer::new(3, rate).unwrap();
        for (&n, &want) in ns.iter().zip(&sizes) {
            for seed in 0..20u64 {
                let v = layer.sample_masked(n, seed);
                assert_eq!(v.len(), want, "rate {rate}, n {n}: |V_off| = {}", v.len());
                assert!(v.windows(2).all(|w| w[0] < w[1]), "set must be sorted and distinct");
                assert!(v.iter().all(|&i| i < n), "indices must be in range");
            }
        }
    }

    // The inference substitution path must equal the training path with the
    // same forced masked set, bit for bit.
    let mut rng = seeded_rng(31);
    let graphs = barbell_multigraph();
    let server = ServerModel::new(&mut rng, graphs, 5, 0.25).unwrap();
    let h_all = Tensor::from_vec(&[6, 5], rand_vec(&mut rng, 30, 1.0)).unwrap();
    let mut checked = 0usize;
    for offline in [vec![], vec![1, 4], vec![0, 1, 2], vec![0, 1, 2, 3, 4, 5]] {
        let train_path = server.forward_with_mask(&h_all, &offline).unwrap();
        let online_rows: Vec<(usize, Tensor)> = (0..6)
            .filter(|i| !offline.contains(i))
            .map(|i| (i, h_all.row(i).unwrap()))
            .collect();
        let infer_path = server.forward_infer(&online_rows, &offline).unwrap();
        let a = train_path.data_vec();
        let b = infer_path.data_vec();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits(), "paths diverge for V_off = {offline:?}");
        }
        checked += 1;
    }
    // The sampled training draw agrees with the forced path for its own set.
    let (sampled, v_off) = server.forward_train(&h_all, 77).unwrap();
    let forced = server.forward_with_mask(&h_all, &v_off).unwrap();
    for (x, y) in sampled.data_vec().iter().zip(&forced.data_vec()) {
        assert_eq!(x.to_bits(), y.to_bits());
    }

    pass(
        "mask contract",
        format!("15 size cells x 20 seeds exact, {checked} forced sets byte-identical"),
    );
}

// ---------------------------------------------------- 4. clustering --

#[test]
fn spectral_clustering_recovers_planted_partitions() {
    // Two disconnected cliques of unequal size.
    let clique_edges = |offset: usize, k: usize| -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..k {
            for j in (i + 1)..k {
                e.push((offset + i, offset + j));
            }
        }
        e
    };
    let mut edges = clique_edges(0, 3);
    edges.extend(clique_edges(3, 4));
    let g = graph_from_edges(7, &edges, 1.0);
    for seed in [1, 7, 40] {
        let a = spectral_cluster(&g, 2, seed).unwrap();
        assert_eq!(a.label, vec![0, 0, 0, 1, 1, 1, 1], "disconnected split, seed {seed}");
    }

    // Barbell: two 4-cliques plus one bridge.
    let mut edges = clique_edges(0, 4);
    edges.extend(clique_edges(4, 4));
    edges.push((3, 4));
    let g = graph_from_edges(8, &edges, 1.0);
    for seed in [1, 7, 40] {
        let a = spectral_cluster(&g, 2, seed).unwrap();
        assert_eq!(a.label, vec![0, 0, 0, 0, 1, 1, 1, 1], "barbell split, seed {seed}");
    }

    // Eigensolver: V Λ Vᵀ must reproduce random symmetric matrices and the
    // eigenvectors must be orthonormal.
    let mut rng = seeded_rng(4);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let n = rng.gen_range(3..=12);
        let mut a = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = rng.gen_range(-2.0..2.0);
                a[i * n + j] = v;
                a[j * n + i] = v;
            }
        }
        let (vals, vecs) = eigensym(&a, n).unwrap();
        for i in 0..n {
            for j in 0..n {
                let recon: f64 = (0..n).map(|k| vecs[i * n + k] * vals[k] * vecs[j * n + k]).sum();
                worst = worst.max((recon - a[i * n + j]).abs());
                let dot: f64 = (0..n).map(|k| vecs[k * n + i] * vecs[k * n + j]).sum();
                let target = if i == j { 1.0 } else { 0.0 };
                worst = worst.max((dot - target).abs());
            }
        }
    }
    assert!(worst < 1e-8, "eigendecomposition error {worst:.3e} exceeds 1e-8");

    pass(
        "clustering",
        format!("planted partitions exact over 3 seeds each, eigensolver max err {worst:.1e}"),
    );
}

// --------------------------------------- 5. protocol invariants --

fn toy_prepared(seed: u64) -> Prepared {
    let (table, dist) = synth_dataset(&SynthSpec {
        n_clients: 4,
        length: 140,
        clusters: 2,
        noise: 0.2,
        seed,
    })
    .unwrap();
    prepare_run(
        &table,
        &dist,
        &PrepareSpec {
            s_len: 6,
            horizon: 3,
            split: SplitSpec::default(),
            kappa: 0.1,
            clusters: Some(2),
            cluster_seed: 1,
            per_sensor: false,
        },
    )
    .unwrap()
}

fn toy_fed(seed: u64) -> FedConfig {
    FedConfig {
        rounds_global: 3,
        rounds_client: 1,
        rounds_server: 2,
        mask_rate: 0.25,
        lr: 1e-3,
        seed,
        batch_size: 8,
        clients: 4,
        hidden_dim: 6,
        encoder_layers: 1,
    }
}

#[test]
fn federation_protocol_invariants_hold() {
    let prep = toy_prepared(3);
    let cfg = toy_fed(5);
    let mut state = FedRunState::init(prep.graphs.clone(), 1, &cfg).unwrap();

    for round in 0..cfg.rounds_global {
        let server_before = all_param_bits(&state.server.params());
        step1_client_phase(&mut state, &prep.windows, &cfg).unwrap();
        assert_eq!(
            server_before,
            all_param_bits(&state.server.params()),
            "round {round}: the client phase must not touch server weights"
        );

        let clients_before: Vec<Vec<u64>> =
            state.clients.iter().map(|c| all_param_bits(&c.params())).collect();
        let grads_before: Vec<Vec<f64>> = state
            .clients
            .iter()
            .flat_map(|c| c.params())
            .map(|p| p.grad_or_zeros())
            .collect();
        step2_server_phase(&mut state, &prep.windows, &cfg).unwrap();
        for (i, before) in clients_before.iter().enumerate() {
            assert_eq!(
                *before,
                all_param_bits(&state.clients[i].params()),
                "round {round}: the server phase must not touch client {i} weights"
            );
        }
        let grads_after: Vec<Vec<f64>> = state
            .clients
            .iter()
            .flat_map(|c| c.params())
            .map(|p| p.grad_or_zeros())
            .collect();
        assert_eq!(
            grads_before, grads_after,
            "round {round}: server backprop must not reach client gradients"
        );
        assert_ne!(
            server_before,
            all_param_bits(&state.server.params()),
            "round {round}: the server phase should update server weights"
        );

        step3_aggregate_broadcast(&mut state, &cfg, None).unwrap();
        let first = all_param_bits(&state.clients[0].params());
        for (i, c) in state.clients.iter().enumerate().skip(1) {
            assert_eq!(
                first,
                all_param_bits(&c.params()),
                "round {round}: client {i} out of sync after aggregation"
            );
        }
    }

    // Privacy probe: no transported payload may equal any raw window or any
    // client's raw trace column.
    let mut raw = BTreeSet::new();
    for split in [&prep.windows.train, &prep.windows.val, &prep.windows.test] {
        for per_client in split {
            for w in per_client {
                raw.insert(fingerprint(&w.x.data_vec()));
                raw.insert(fingerprint(&w.y.data_vec()));
            }
        }
    }
    assert!(!raw.is_empty() && !state.transport.sent.is_empty());
    for (k, sent) in state.transport.sent.iter().enumerate() {
        assert!(!raw.contains(sent), "payload {k} matches raw client data");
    }

    // Seed determinism: an identical rerun is byte-identical, a different
    // seed is not.
    let rerun = run_training(&prep.windows, prep.graphs.clone(), &cfg).unwrap();
    let base = run_training(&prep.windows, prep.graphs.clone(), &cfg).unwrap();
    assert_eq!(metrics_to_ndjson(&base.metrics), metrics_to_ndjson(&rerun.metrics));
    assert_eq!(
        all_param_bits(&base.clients[0].params()),
        all_param_bits(&rerun.clients[0].params())
    );
    assert_eq!(all_param_bits(&base.server.params()), all_param_bits(&rerun.server.params()));
    let other = run_training(&prep.windows, prep.graphs.clone(), &toy_fed(6)).unwrap();
    assert_ne!(
        all_param_bits(&base.clients[0].params()),
        all_param_bits(&other.clients[0].params()),
        "seeds must matter"
    );

    pass(
        "protocol invariants",
        format!(
            "3 rounds synced byte-exact, isolation both ways, {} payloads clean, reruns identical",
            state.transport.sent.len()
        ),
    );
}

// ------------------------------------- 6. directional comparison --

struct Bench {
    prep: Prepared,
    cfg: FedConfig,
}

/// Sixteen sensors in two planted clusters, heavy observation noise. The
/// noise makes cross-sensor pooling genuinely informative: a single
/// sensor's short history pins the shared cluster signal down much less
/// precisely than the neighborhood does, so the spatial stream has real
/// signal to carry and the baselines have none.
fn bench_setup(seed: u64, mask_rate: f64) -> Bench {
    let (table, dist) = synth_dataset(&SynthSpec {
        n_clients: 16,
        length: 140,
        clusters: 2,
        noise: 1.0,
        seed,
    })
    .unwrap();
    let prep = prepare_run(
        &table,
        &dist,
        &PrepareSpec {
            s_len: 8,
            horizon: 4,
            split: SplitSpec::default(),
            kappa: 0.1,
            clusters: Some(2),
            cluster_seed: 1,
            per_sensor: false,
        },
    )
    .unwrap();
    let cfg = FedConfig {
        rounds_global: 30,
        rounds_client: 1,
        rounds_server: 4,
        mask_rate,
        lr: 5e-3,
        seed,
        batch_size: 16,
        clients: 16,
        hidden_dim: 16,
        encoder_layers: 1,
    };
    Bench { prep, cfg }
}

fn split_model_rmse(b: &Bench) -> f64 {
    let state = run_training(&b.prep.windows, b.prep.graphs.clone(), &b.cfg).unwrap();
    let schedule = OfflineSchedule::all_online(b.cfg.clients);
    let mut p =
        infer_split(&state.clients, &state.server, &b.prep.windows.test, &schedule, None).unwrap();
    destandardize(&mut p, &b.prep.scaler);
    let all: Vec<usize> = (0..b.cfg.clients).collect();
    rmse(&p, &all).unwrap()
}

fn gru_rmse(b: &Bench, federated: bool) -> f64 {
    let models = if federated {
        train_gru_fedavg(&b.prep.windows, 1, &b.cfg).unwrap()
    } else {
        train_gru_local(&b.prep.windows, 1, &b.cfg).unwrap()
    };
    let mut p = infer_gru(&models, &b.prep.windows.test).unwrap();
    destandardize(&mut p, &b.prep.scaler);
    let all: Vec<usize> = (0..b.cfg.clients).collect();
    rmse(&p, &all).unwrap()
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[test]
fn split_model_beats_local_and_fedavg_baselines() {
    let start = Instant::now();
    let seeds = [1u64, 2, 3];
    let mut split = Vec::new();
    let mut local = Vec::new();
    let mut fedavg = Vec::new();
    for &seed in &seeds {
        let b = bench_setup(seed, 0.25);
        split.push(split_model_rmse(&b));
        local.push(gru_rmse(&b, false));
        fedavg.push(gru_rmse(&b, true));
    }
    let (m_split, s_split) = mean_std(&split);
    let (m_local, s_local) = mean_std(&local);
    let (m_fedavg, s_fedavg) = mean_std(&fedavg);
    let margin_local = m_local - m_split;
    let margin_fedavg = m_fedavg - m_split;
    let secs = start.elapsed().as_secs_f64();

    let detail = format!(
        "split {m_split:.4}±{s_split:.4}, local {m_local:.4}±{s_local:.4}, fedavg {m_fedavg:.4}±{s_fedavg:.4}, margins {margin_local:.4}/{margin_fedavg:.4}, {secs:.0}s"
    );
    assert!(
        margin_local > s_split.max(s_local),
        "split vs local margin too small: {detail}"
    );
    assert!(
        margin_fedavg > s_split.max(s_fedavg),
        "split vs fedavg margin too small: {detail}"
    );
    assert!(secs < 900.0, "budget exceeded: {detail}");
    pass("directional comparison", detail);
}

// ------------------------------------------ 7. offline robustness --

#[test]
fn offline_clients_beat_local_gru_and_masking_helps() {
    let seeds = [1u64, 2, 3];
    let mut split_off = Vec::new();
    let mut gru_off = Vec::new();
    let mut deg_masked = Vec::new();
    let mut deg_unmasked = Vec::new();

    for &seed in &seeds {
        let b = bench_setup(seed, 0.25);
        let n = b.cfg.clients;
        let schedule = OfflineSchedule::sampled(n, 0.25, seed).unwrap();
        let offline: Vec<usize> = schedule.offline.iter().copied().collect();
        let online: Vec<usize> = (0..n).filter(|i| !schedule.offline.contains(i)).collect();
        let everyone = OfflineSchedule::all_online(n);

        let masked = run_training(&b.prep.windows, b.prep.graphs.clone(), &b.cfg).unwrap();
        let mut p_off =
            infer_split(&masked.clients, &masked.server, &b.prep.windows.test, &schedule, None)
                .unwrap();
        destandardize(&mut p_off, &b.prep.scaler);
        let mut p_on =
            infer_split(&masked.clients, &masked.server, &b.prep.windows.test, &everyone, None)
                .unwrap();
        destandardize(&mut p_on, &b.prep.scaler);
        split_off.push(rmse(&p_off, &offline).unwrap());
        // Degradation measured on the same online subset in both
        // conditions, so it reflects the lost neighbors, not the subset.
        deg_masked.push(rmse(&p_off, &online).unwrap() - rmse(&p_on, &online).unwrap());

        let gru = train_gru_local(&b.prep.windows, 1, &b.cfg).unwrap();
        let mut p_gru = infer_gru(&gru, &b.prep.windows.test).unwrap();
        destandardize(&mut p_gru, &b.prep.scaler);
        gru_off.push(rmse(&p_gru, &offline).unwrap());

        let nomask = bench_setup(seed, 0.0);
        let plain = run_training(&nomask.prep.windows, nomask.prep.graphs.clone(), &nomask.cfg)
            .unwrap();
        let mut q_off =
            infer_split(&plain.clients, &plain.server, &nomask.prep.windows.test, &schedule, None)
                .unwrap();
        destandardize(&mut q_off, &nomask.prep.scaler);
        let mut q_on =
            infer_split(&plain.clients, &plain.server, &nomask.prep.windows.test, &everyone, None)
                .unwrap();
        destandardize(&mut q_on, &nomask.prep.scaler);
        deg_unmasked.push(rmse(&q_off, &online).unwrap() - rmse(&q_on, &online).unwrap());
    }

    let (m_split, _) = mean_std(&split_off);
    let (m_gru, _) = mean_std(&gru_off);
    let (m_deg_masked, _) = mean_std(&deg_masked);
    let (m_deg_unmasked, _) = mean_std(&deg_unmasked);
    let detail = format!(
        "offline rmse split {m_split:.4} vs local gru {m_gru:.4}; online degradation masked {m_deg_masked:.4} vs unmasked {m_deg_unmasked:.4}"
    );
    assert!(m_split <= m_gru, "offline clients should beat the local baseline: {detail}");
    assert!(
        m_deg_masked < m_deg_unmasked,
        "mask training should soften offline degradation: {detail}"
    );
    pass("offline robustness", detail);
}

// ------------------------------------------------- 8. sweep shape --

#[test]
fn sweep_grid_shows_monotone_offline_degradation() {
    let mask_rates = [0.1, 0.25, 0.4];
    let offline_rates = [0.0, 0.25, 0.35];
    let seeds = [1u64, 2, 3];

    let b = bench_setup(1, 0.25);
    let mut states = Vec::new();
    for &mr in &mask_rates {
        let mut cfg = b.cfg.clone();
        cfg.mask_rate = mr;
        states.push((mr, run_training(&b.prep.windows, b.prep.graphs.clone(), &cfg).unwrap()));
    }
    let models: Vec<TrainedSplit> = states
        .iter()
        .map(|(mr, s)| TrainedSplit { mask_rate: *mr, clients: &s.clients, server: &s.server })
        .collect();
    let rows =
        sweep(&models, &offline_rates, &seeds, &b.prep.windows.test, &b.prep.scaler).unwrap();
    assert_eq!(rows.len(), mask_rates.len() * offline_rates.len() * seeds.len());

    let csv = sweep_to_csv(&rows);
    let path = std::path::Path::new(env!("CARGO_TARGET_TMPDIR")).join("sweep_grid.csv");
    std::fs::write(&path, &csv).unwrap();
    assert!(path.exists());
    assert_eq!(csv.lines().count(), 1 + rows.len());

    // Mean online RMSE per cell must not improve as more clients go dark;
    // one seed-noise violation is tolerated across the grid.
    let mut violations = 0usize;
    let mut sequences = String::new();
    for &mr in &mask_rates {
        let cell = |rate: f64| -> f64 {
            let xs: Vec<f64> = rows
                .iter()
                .filter(|r| r.mask_rate == mr && r.offline_rate == rate)
                .map(|r| r.rmse_online.expect("online group present"))
                .collect();
            assert_eq!(xs.len(), seeds.len());
            xs.iter().sum::<f64>() / xs.len() as f64
        };
        let seq: Vec<f64> = offline_rates.iter().map(|&r| cell(r)).collect();
        for pair in seq.windows(2) {
            if pair[1] < pair[0] {
                violations += 1;
            }
        }
        sequences.push_str(&format!(" mr {mr}: {seq:.4?}"));
    }
    assert!(violations <= 1, "{violations} monotonicity violations:{sequences}");
    pass("sweep shape", format!("27 rows, {violations} violation(s);{sequences}"));
}
