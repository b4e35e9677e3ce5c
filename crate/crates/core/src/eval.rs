//! Inference-time evaluation: offline schedules, grouped RMSE on the
//! original data scale, and the mask-rate by offline-rate sweep grid.
//!
//! A schedule fixes which clients are unreachable for a whole test pass.
//! Online clients upload their temporal embeddings; the server fills the
//! offline rows with its trained substitute and returns spatial embeddings
//! for the online decoders. Offline clients never touch the transport and
//! predict through their offline decoder alone.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::client::{ClientModel, WindowSample};
use crate::data::Standardizer;
use crate::error::{Error, Result};
use crate::federation::{GruForecaster, Transport};
use crate::server::ServerModel;
use crate::tensor::init::seeded_rng;

/// Which clients are unreachable, fixed for one whole inference pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OfflineSchedule {
    pub clients: usize,
    pub offline: BTreeSet<usize>,
}

impl OfflineSchedule {
    /// Everyone reachable.
    pub fn all_online(clients: usize) -> OfflineSchedule {
        OfflineSchedule { clients, offline: BTreeSet::new() }
    }

    /// An explicit offline index set.
    pub fn explicit(clients: usize, offline: &[usize]) -> Result<OfflineSchedule> {
        let set: BTreeSet<usize> = offline.iter().copied().collect();
        if let Some(&bad) = set.iter().find(|&&i| i >= clients) {
            return Err(Error::Config(format!(
                "offline client {bad} out of range for {clients} clients"
            )));
        }
        Ok(OfflineSchedule { clients, offline: set })
    }

    /// floor(rate·N) clients drawn without replacement. For a fixed seed the
    /// draws nest: a higher rate's offline set contains a lower rate's.
    pub fn sampled(clients: usize, rate: f64, seed: u64) -> Result<OfflineSchedule> {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("offline rate {rate} outside [0,1]")));
        }
        let count = (rate * clients as f64).floor() as usize;
        let mut order: Vec<usize> = (0..clients).collect();
        order.shuffle(&mut seeded_rng(seed));
        Ok(OfflineSchedule { clients, offline: order.into_iter().take(count).collect() })
    }

    pub fn is_offline(&self, client: usize) -> bool {
        self.offline.contains(&client)
    }

    pub fn online(&self) -> Vec<usize> {
        (0..self.clients).filter(|i| !self.is_offline(*i)).collect()
    }
}

/// Predictions and targets for aligned per-client window lists, as flat
/// [T·D] vectors. Values are on whatever scale the model produced; call
/// [`destandardize`] before computing reportable errors.
#[derive(Debug, Clone)]
pub struct Predictions {
    /// Indexed [client][window].
    pub preds: Vec<Vec<Vec<f64>>>,
    pub targets: Vec<Vec<Vec<f64>>>,
    pub horizon: usize,
    pub data_dim: usize,
}

impl Predictions {
    fn empty(clients: usize, horizon: usize, data_dim: usize) -> Predictions {
        Predictions {
            preds: vec![Vec::new(); clients],
            targets: vec![Vec::new(); clients],
            horizon,
            data_dim,
        }
    }

    pub fn clients(&self) -> usize {
        self.preds.len()
    }

    pub fn window_count(&self, group: &[usize]) -> usize {
        group.iter().map(|&i| self.preds[i].len()).sum()
    }
}

fn check_aligned(windows: &[Vec<WindowSample>]) -> Result<(usize, usize)> {
    let first = windows
        .iter()
        .flat_map(|w| w.first())
        .next()
        .ok_or_else(|| Error::Data("no windows to evaluate".into()))?;
    let (horizon, dim) = (first.horizon(), first.x.shape()[1]);
    let count = windows[0].len();
    if windows.iter().any(|w| w.len() != count) {
        return Err(Error::Data("clients hold different window counts; cannot align".into()));
    }
    Ok((horizon, dim))
}

/// Test pass for the split model under a schedule. Online clients encode,
/// upload, and decode with the server's spatial row; offline clients decode
/// from their own embedding only. With every client offline the server is
/// never contacted. `transport`, when given, records the float traffic.
pub fn infer_split(
    clients: &[ClientModel],
    server: &ServerModel,
    windows: &[Vec<WindowSample>],
    schedule: &OfflineSchedule,
    mut transport: Option<&mut Transport>,
) -> Result<Predictions> {
    if clients.len() != windows.len() || schedule.clients != clients.len() {
        return Err(Error::Config(format!(
            "{} models, {} window lists, schedule for {}",
            clients.len(),
            windows.len(),
            schedule.clients
        )));
    }
    let (horizon, dim) = check_aligned(windows)?;
    let offline: Vec<usize> = schedule.offline.iter().copied().collect();
    let online = schedule.online();
    let mut out = Predictions::empty(clients.len(), horizon, dim);

    for w in 0..windows[0].len() {
        // Temporal embeddings for everyone; only online ones travel.
        let mut h = Vec::with_capacity(clients.len());
        for (i, model) in clients.iter().enumerate() {
            h.push(model.encode(&windows[i][w].x)?.detach());
        }
        let spatial = if online.is_empty() {
            None
        } else {
            let mut rows = Vec::with_capacity(online.len());
            for &i in &online {
                if let Some(t) = transport.as_deref_mut() {
                    t.send_up(i, &h[i].data_vec());
                }
                rows.push((i, h[i].clone()));
            }
            let s = server.forward_infer(&rows, &offline)?;
            if let Some(t) = transport.as_deref_mut() {
                for &i in &online {
                    t.send_down(i, &s.row(i)?.data_vec());
                }
            }
            Some(s)
        };
        for (i, model) in clients.iter().enumerate() {
            let sample = &windows[i][w];
            let pred = if schedule.is_offline(i) {
                model.decode_offline(&h[i], &sample.last_obs()?, sample.horizon())?
            } else {
                let s = spatial.as_ref().expect("online client implies a server pass");
                model.decode_online(&h[i], &s.row(i)?, &sample.last_obs()?, sample.horizon())?
            };
            out.preds[i].push(pred.data_vec());
            out.targets[i].push(sample.y.data_vec());
        }
    }
    Ok(out)
}

/// Test pass for the plain GRU baselines (no server, no schedule).
pub fn infer_gru(models: &[GruForecaster], windows: &[Vec<WindowSample>]) -> Result<Predictions> {
    if models.len() != windows.len() {
        return Err(Error::Config(format!(
            "{} models for {} window lists",
            models.len(),
            windows.len()
        )));
    }
    let (horizon, dim) = check_aligned(windows)?;
    let mut out = Predictions::empty(models.len(), horizon, dim);
    for (i, model) in models.iter().enumerate() {
        for sample in &windows[i] {
            out.preds[i].push(model.predict(sample)?.data_vec());
            out.targets[i].push(sample.y.data_vec());
        }
    }
    Ok(out)
}

/// Maps standardized predictions and targets back to the original scale,
/// using each client's sensor statistics.
pub fn destandardize(p: &mut Predictions, scaler: &Standardizer) {
    for (i, per_client) in p.preds.iter_mut().enumerate() {
        for window in per_client.iter_mut() {
            for v in window.iter_mut() {
                *v = scaler.invert(i, *v);
            }
        }
    }
    for (i, per_client) in p.targets.iter_mut().enumerate() {
        for window in per_client.iter_mut() {
            for v in window.iter_mut() {
                *v = scaler.invert(i, *v);
            }
        }
    }
}

/// RMSE over every (window, step, dim) entry of the listed clients.
pub fn rmse(p: &Predictions, group: &[usize]) -> Result<f64> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for &i in group {
        if i >= p.clients() {
            return Err(Error::Config(format!("client {i} out of range", i = i)));
        }
        for (pred, target) in p.preds[i].iter().zip(&p.targets[i]) {
            for (a, b) in pred.iter().zip(target) {
                sum += (a - b) * (a - b);
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::Data("RMSE over an empty group".into()));
    }
    Ok((sum / count as f64).sqrt())
}

/// Per-horizon-step RMSE over all clients, for diagnostics.
pub fn rmse_per_step(p: &Predictions) -> Vec<f64> {
    let mut sums = vec![0.0; p.horizon];
    let mut counts = vec![0usize; p.horizon];
    for (per_client, targets) in p.preds.iter().zip(&p.targets) {
        for (pred, target) in per_client.iter().zip(targets) {
            for (k, (a, b)) in pred.iter().zip(target).enumerate() {
                let step = k / p.data_dim;
                sums[step] += (a - b) * (a - b);
                counts[step] += 1;
            }
        }
    }
    sums.iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { f64::NAN } else { (s / c as f64).sqrt() })
        .collect()
}

/// Grouped error report. `rmse_all` pools every squared error; it is not an
/// average of the two group values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_online: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rmse_offline: Option<f64>,
    pub rmse_all: f64,
    pub windows_online: usize,
    pub windows_offline: usize,
    /// The schedule that produced the report.
    pub offline_clients: Vec<usize>,
    /// Per-horizon-step RMSE over all clients.
    pub per_step: Vec<f64>,
}

/// Builds the report for already de-standardized predictions.
pub fn evaluate(p: &Predictions, schedule: &OfflineSchedule) -> Result<EvalReport> {
    if schedule.clients != p.clients() {
        return Err(Error::Config(format!(
            "schedule covers {} clients, predictions {}",
            schedule.clients,
            p.clients()
        )));
    }
    let online = schedule.online();
    let offline: Vec<usize> = schedule.offline.iter().copied().collect();
    let all: Vec<usize> = (0..p.clients()).collect();
    Ok(EvalReport {
        rmse_online: if online.is_empty() { None } else { Some(rmse(p, &online)?) },
        rmse_offline: if offline.is_empty() { None } else { Some(rmse(p, &offline)?) },
        rmse_all: rmse(p, &all)?,
        windows_online: p.window_count(&online),
        windows_offline: p.window_count(&offline),
        offline_clients: offline,
        per_step: rmse_per_step(p),
    })
}

/// A trained split model, borrowed for sweeping.
pub struct TrainedSplit<'a> {
    pub mask_rate: f64,
    pub clients: &'a [ClientModel],
    pub server: &'a ServerModel,
}

/// One grid row of the robustness sweep.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepRow {
    pub mask_rate: f64,
    pub offline_rate: f64,
    pub seed: u64,
    pub rmse_online: Option<f64>,
    pub rmse_offline: Option<f64>,
    pub rmse_all: f64,
}

/// Evaluates every (model, offline rate, seed) cell. The schedule seed does
/// not depend on the rate, so one seed's offline sets nest as the rate
/// grows.
pub fn sweep(
    models: &[TrainedSplit],
    offline_rates: &[f64],
    seeds: &[u64],
    windows: &[Vec<WindowSample>],
    scaler: &Standardizer,
) -> Result<Vec<SweepRow>> {
    if models.is_empty() || offline_rates.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep grid must be nonempty".into()));
    }
    let mut rows = Vec::with_capacity(models.len() * offline_rates.len() * seeds.len());
    for m in models {
        for &rate in offline_rates {
            for &seed in seeds {
                let schedule = OfflineSchedule::sampled(m.clients.len(), rate, seed)?;
                let mut p = infer_split(m.clients, m.server, windows, &schedule, None)?;
                destandardize(&mut p, scaler);
                let report = evaluate(&p, &schedule)?;
                rows.push(SweepRow {
                    mask_rate: m.mask_rate,
                    offline_rate: rate,
                    seed,
                    rmse_online: report.rmse_online,
                    rmse_offline: report.rmse_offline,
                    rmse_all: report.rmse_all,
                });
            }
        }
    }
    Ok(rows)
}

/// CSV rendering of the sweep grid; absent groups render as empty cells.
pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("mr,offline_rate,seed,rmse_online,rmse_offline,rmse_all\n");
    let opt = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.mask_rate,
            r.offline_rate,
            r.seed,
            opt(r.rmse_online),
            opt(r.rmse_offline),
            r.rmse_all
        ));
    }
    out
}
