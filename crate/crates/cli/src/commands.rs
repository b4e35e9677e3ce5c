//! The subcommands, each a thin serial wrapper over the library pipeline.
//! All artifacts land in the output directory; nothing here writes wall
//! clocks, so a rerun with the same config is byte-identical.

use std::fs;
use std::path::Path;

use fedcast_core::checkpoint;
use fedcast_core::client::ClientModel;
use fedcast_core::data::TraceTable;
use fedcast_core::eval::{
    destandardize, evaluate, infer_split, sweep, sweep_to_csv, OfflineSchedule, Predictions,
    TrainedSplit,
};
use fedcast_core::federation::{
    align_distances, metrics_to_ndjson, prepare_run, run_training, Prepared,
};
use fedcast_core::graph::{build_client_graph, default_cluster_count, DistanceTable, MultiGraph};
use fedcast_core::server::ServerModel;
use fedcast_core::{Error, Result};

use crate::config::RunConfig;

fn read_named(path: &Path, what: &str) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {what} {}: {e}", path.display())))
}

fn load_trace_table(cfg: &RunConfig) -> Result<TraceTable> {
    TraceTable::parse_csv(&read_named(&cfg.data.traces, "traces")?)
}

fn load_distance_table(cfg: &RunConfig) -> Result<DistanceTable> {
    DistanceTable::parse_csv(&read_named(&cfg.data.distances, "distance table")?)
}

fn prepared(cfg: &RunConfig) -> Result<(TraceTable, Prepared)> {
    if cfg.model.d != 1 {
        return Err(Error::Config(
            "model.D must be 1: trace tables carry one reading per sensor per step".into(),
        ));
    }
    let table = load_trace_table(cfg)?;
    let distances = load_distance_table(cfg)?;
    let prep = prepare_run(&table, &distances, &cfg.prepare_spec()?)?;
    Ok((table, prep))
}

fn out_dir(cfg: &RunConfig) -> Result<&Path> {
    fs::create_dir_all(&cfg.output.dir)?;
    Ok(&cfg.output.dir)
}

/// Generates the seeded synthetic dataset at the configured data paths, so
/// the later stages read it without any path edits.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let (table, distances) = fedcast_core::data::synth_dataset(&cfg.synth_spec())?;
    let traces = cfg.data.traces.clone();
    let dist = cfg.data.distances.clone();
    for p in [&traces, &dist] {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
    }
    fs::write(&traces, table.to_csv())?;
    fs::write(&dist, distances.to_csv())?;
    cfg.echo()?;
    println!(
        "wrote {} ({} steps, {} sensors) and {}",
        traces.display(),
        table.len(),
        table.n_sensors(),
        dist.display()
    );
    Ok(())
}

/// Builds the client/cluster graph stack and serializes it as JSON.
pub fn cmd_graph(cfg: &RunConfig) -> Result<()> {
    let distances = load_distance_table(cfg)?;
    // Align to the trace's sensor order when the trace file is available so
    // node indices match the training pipeline.
    let aligned = if cfg.data.traces.exists() {
        align_distances(&distances, &load_trace_table(cfg)?.sensor_ids)?
    } else {
        distances
    };
    let client = build_client_graph(&aligned, cfg.graph.kappa)?;
    let m = cfg.graph.m.unwrap_or_else(|| default_cluster_count(client.n));
    let graphs = MultiGraph::build(client, m, cfg.graph.seed)?;

    let dir = out_dir(cfg)?;
    let path = dir.join("graphs.json");
    fs::write(&path, serde_json::to_string_pretty(&graphs).expect("graphs serialize"))?;
    cfg.echo()?;
    println!(
        "wrote {} ({} clients, {} clusters, labels {:?})",
        path.display(),
        graphs.n(),
        graphs.m(),
        graphs.assignment.label
    );
    Ok(())
}

/// Runs the alternating training loop; writes both checkpoints, the metrics
/// log, and the config echo.
pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let (table, prep) = prepared(cfg)?;
    let fed = cfg.fed_config(table.n_sensors());
    let state = run_training(&prep.windows, prep.graphs.clone(), &fed)?;

    let dir = out_dir(cfg)?;
    checkpoint::save_client(&dir.join("client.ckpt"), &state.clients[0])?;
    checkpoint::save_server(&dir.join("server.ckpt"), &state.server)?;
    fs::write(dir.join("metrics.ndjson"), metrics_to_ndjson(&state.metrics))?;
    cfg.echo()?;

    for round in 1..=fed.rounds_global {
        let rows = state.metrics.iter().filter(|m| m.round == round);
        let (mut loss, mut up, mut down) = (f64::NAN, 0, 0);
        for m in rows {
            if m.phase == "server" {
                loss = m.loss_on.unwrap_or(f64::NAN);
            }
            up += m.floats_up;
            down += m.floats_down;
        }
        println!("round {round}: sum L_on {loss:.6}, up {up} floats, down {down} floats");
    }
    println!(
        "trained {} rounds; checkpoints and metrics in {}",
        fed.rounds_global,
        dir.display()
    );
    Ok(())
}

fn load_models(cfg: &RunConfig, n: usize) -> Result<(Vec<ClientModel>, ServerModel)> {
    let dir = &cfg.output.dir;
    let client = checkpoint::load_client(&dir.join("client.ckpt"))?;
    let server = checkpoint::load_server(&dir.join("server.ckpt"))?;
    if server.graphs.n() != n {
        return Err(Error::Config(format!(
            "checkpoint was trained for {} clients, traces hold {n}",
            server.graphs.n()
        )));
    }
    // Post-sync clients are identical, so the single stored model serves
    // every client (inference never mutates parameters).
    Ok((vec![client; n], server))
}

fn schedule(cfg: &RunConfig, n: usize) -> Result<OfflineSchedule> {
    match (&cfg.eval.offline_ids, cfg.eval.offline_rate) {
        (Some(ids), _) => OfflineSchedule::explicit(n, ids),
        (None, Some(rate)) => OfflineSchedule::sampled(n, rate, cfg.eval.seeds[0]),
        (None, None) => Ok(OfflineSchedule::all_online(n)),
    }
}

fn predictions_csv(p: &Predictions) -> String {
    let mut out = String::from("client,window,step,prediction,target\n");
    for (i, (preds, targets)) in p.preds.iter().zip(&p.targets).enumerate() {
        for (w, (pred, target)) in preds.iter().zip(targets).enumerate() {
            for (k, (a, b)) in pred.iter().zip(target).enumerate() {
                out.push_str(&format!("{i},{w},{k},{a:?},{b:?}\n"));
            }
        }
    }
    out
}

/// Predicts the test split under the configured schedule and writes the
/// de-standardized predictions next to their targets.
pub fn cmd_infer(cfg: &RunConfig) -> Result<()> {
    let (table, prep) = prepared(cfg)?;
    let n = table.n_sensors();
    let (clients, server) = load_models(cfg, n)?;
    let sched = schedule(cfg, n)?;

    let mut transport = fedcast_core::federation::Transport::new(n);
    let mut p =
        infer_split(&clients, &server, &prep.windows.test, &sched, Some(&mut transport))?;
    destandardize(&mut p, &prep.scaler);

    let dir = out_dir(cfg)?;
    let path = dir.join("predictions.csv");
    fs::write(&path, predictions_csv(&p))?;
    cfg.echo()?;
    println!(
        "wrote {} (offline clients {:?}; {} floats up, {} down)",
        path.display(),
        sched.offline,
        transport.floats_up,
        transport.floats_down
    );
    Ok(())
}

/// Grouped RMSE report over the test split, as JSON.
pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (table, prep) = prepared(cfg)?;
    let n = table.n_sensors();
    let (clients, server) = load_models(cfg, n)?;
    let sched = schedule(cfg, n)?;

    let mut p = infer_split(&clients, &server, &prep.windows.test, &sched, None)?;
    destandardize(&mut p, &prep.scaler);
    let report = evaluate(&p, &sched)?;

    let dir = out_dir(cfg)?;
    let path = dir.join("eval_report.json");
    fs::write(&path, serde_json::to_string_pretty(&report).expect("report serializes"))?;
    cfg.echo()?;
    println!(
        "wrote {} (rmse_all {:.4}, online {:?}, offline {:?})",
        path.display(),
        report.rmse_all,
        report.rmse_online,
        report.rmse_offline
    );
    Ok(())
}

/// Trains one model per configured mask rate and evaluates the whole
/// mask-rate by offline-rate by seed grid into a CSV.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    if cfg.sweep.mask_rates.is_empty() || cfg.sweep.offline_rates.is_empty() {
        return Err(Error::Config("sweep grids must be nonempty".into()));
    }
    let (table, prep) = prepared(cfg)?;
    let n = table.n_sensors();

    let mut runs = Vec::with_capacity(cfg.sweep.mask_rates.len());
    for &mr in &cfg.sweep.mask_rates {
        let mut fed = cfg.fed_config(n);
        fed.mask_rate = mr;
        println!("training mask rate {mr} ({} rounds)", fed.rounds_global);
        runs.push((mr, run_training(&prep.windows, prep.graphs.clone(), &fed)?));
    }
    let models: Vec<TrainedSplit> = runs
        .iter()
        .map(|(mr, state)| TrainedSplit {
            mask_rate: *mr,
            clients: &state.clients,
            server: &state.server,
        })
        .collect();
    let rows = sweep(
        &models,
        &cfg.sweep.offline_rates,
        &cfg.eval.seeds,
        &prep.windows.test,
        &prep.scaler,
    )?;

    let dir = out_dir(cfg)?;
    let path = dir.join("sweep.csv");
    fs::write(&path, sweep_to_csv(&rows))?;
    cfg.echo()?;
    println!("wrote {} ({} grid cells)", path.display(), rows.len());
    Ok(())
}
