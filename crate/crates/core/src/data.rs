//! Trace ingestion, standardization, chronological splitting, windowing,
//! and a seeded synthetic dataset generator.
//!
//! Real datasets arrive as a wide CSV (one timestamp column, one column per
//! sensor). The synthetic generator plants cluster structure: each cluster
//! shares a sinusoidal base signal, nearby sensors get small distances, and
//! the whole pipeline (graph build, clustering, training) can recover the
//! plan from the generated files alone.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::client::WindowSample;
use crate::error::{Error, Result};
use crate::graph::DistanceTable;
use crate::tensor::init::{derive_seed, seeded_rng};
use crate::tensor::Tensor;

/// A complete multi-sensor trace: one row per timestamp, one column per
/// sensor. Column order defines client index order.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceTable {
    /// Raw timestamp strings, strictly increasing (numerically when every
    /// entry parses as a number, lexically otherwise).
    pub timestamps: Vec<String>,
    pub sensor_ids: Vec<String>,
    /// T_total × N row-major readings.
    pub values: Vec<f64>,
}

impl TraceTable {
    pub fn len(&self) -> usize {
        self.timestamps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timestamps.is_empty()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn value(&self, row: usize, sensor: usize) -> f64 {
        self.values[row * self.n_sensors() + sensor]
    }

    pub fn validate(&self) -> Result<()> {
        let (t, n) = (self.len(), self.n_sensors());
        if n == 0 || t == 0 {
            return Err(Error::Data("trace table must have sensors and rows".into()));
        }
        if self.values.len() != t * n {
            return Err(Error::Data("trace value count does not match dimensions".into()));
        }
        if self.values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("trace contains non-finite readings".into()));
        }
        let numeric: Option<Vec<f64>> =
            self.timestamps.iter().map(|s| s.parse::<f64>().ok()).collect();
        for i in 1..t {
            let increasing = match &numeric {
                Some(ns) => ns[i - 1] < ns[i],
                None => self.timestamps[i - 1] < self.timestamps[i],
            };
            if !increasing {
                return Err(Error::Data(format!(
                    "timestamps not strictly increasing at row {}",
                    i + 2 // +1 for the header, +1 for 1-based lines
                )));
            }
        }
        Ok(())
    }

    /// Parse `timestamp,<sensor>,...` CSV text.
    pub fn parse_csv(text: &str) -> Result<TraceTable> {
        let mut lines = text.lines().enumerate();
        let header = lines.next().ok_or_else(|| Error::Data("trace csv is empty".into()))?.1;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 || cols[0] != "timestamp" {
            return Err(Error::Data(format!(
                "trace csv header must start with `timestamp` and list sensors, got {header:?}"
            )));
        }
        let sensor_ids: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let n = sensor_ids.len();
        let mut timestamps = Vec::new();
        let mut values = Vec::new();
        for (lineno, line) in lines {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != n + 1 {
                return Err(Error::Data(format!(
                    "trace csv line {}: expected {} fields, got {}",
                    lineno + 1,
                    n + 1,
                    fields.len()
                )));
            }
            timestamps.push(fields[0].to_string());
            for f in &fields[1..] {
                let v: f64 = f.parse().map_err(|_| {
                    Error::Data(format!("trace csv line {}: bad reading {f:?}", lineno + 1))
                })?;
                values.push(v);
            }
        }
        let table = TraceTable { timestamps, sensor_ids, values };
        table.validate()?;
        Ok(table)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("timestamp");
        for id in &self.sensor_ids {
            out.push(',');
            out.push_str(id);
        }
        out.push('\n');
        let n = self.n_sensors();
        for (row, ts) in self.timestamps.iter().enumerate() {
            out.push_str(ts);
            for j in 0..n {
                out.push(',');
                // Shortest f64 round-trip form keeps read(write(t)) == t.
                out.push_str(&format!("{:?}", self.values[row * n + j]));
            }
            out.push('\n');
        }
        out
    }
}

/// Read and parse a trace CSV from disk.
pub fn load_traces(path: &Path) -> Result<TraceTable> {
    let text = std::fs::read_to_string(path)?;
    TraceTable::parse_csv(&text)
}

/// Mean/variance scaling. Global by default; per-sensor behind the flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub per_sensor: bool,
    /// One entry when global, one per sensor otherwise.
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    fn fit_slice(values: impl Iterator<Item = f64> + Clone, what: &str) -> Result<(f64, f64)> {
        let mut count = 0usize;
        let mut sum = 0.0;
        for v in values.clone() {
            sum += v;
            count += 1;
        }
        if count == 0 {
            return Err(Error::Data(format!("cannot fit a standardizer on empty {what}")));
        }
        let mean = sum / count as f64;
        let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let std = var.sqrt();
        if std <= 1e-12 {
            return Err(Error::Config(format!(
                "{what} has (near-)zero variance; standardization undefined"
            )));
        }
        Ok((mean, std))
    }

    /// One μ and σ over every reading in the slice.
    pub fn fit_global(values: &[f64]) -> Result<Standardizer> {
        let (mean, std) = Self::fit_slice(values.iter().copied(), "data")?;
        Ok(Standardizer { per_sensor: false, means: vec![mean], stds: vec![std] })
    }

    /// Independent μ, σ per sensor column of a T×N row-major slice.
    pub fn fit_per_sensor(values: &[f64], n_sensors: usize) -> Result<Standardizer> {
        if n_sensors == 0 || values.len() % n_sensors != 0 {
            return Err(Error::Data("per-sensor fit needs rows of uniform width".into()));
        }
        let rows = values.len() / n_sensors;
        let mut means = Vec::with_capacity(n_sensors);
        let mut stds = Vec::with_capacity(n_sensors);
        for s in 0..n_sensors {
            let col = (0..rows).map(|r| values[r * n_sensors + s]);
            let (mean, std) = Self::fit_slice(col, &format!("sensor column {s}"))?;
            means.push(mean);
            stds.push(std);
        }
        Ok(Standardizer { per_sensor: true, means, stds })
    }

    fn idx(&self, sensor: usize) -> usize {
        if self.per_sensor {
            sensor
        } else {
            0
        }
    }

    pub fn transform(&self, sensor: usize, x: f64) -> f64 {
        let i = self.idx(sensor);
        (x - self.means[i]) / self.stds[i]
    }

    pub fn invert(&self, sensor: usize, z: f64) -> f64 {
        let i = self.idx(sensor);
        z * self.stds[i] + self.means[i]
    }

    /// Standardized copy of a whole table.
    pub fn transform_table(&self, table: &TraceTable) -> TraceTable {
        let n = table.n_sensors();
        let values = table
            .values
            .iter()
            .enumerate()
            .map(|(i, &v)| self.transform(i % n, v))
            .collect();
        TraceTable {
            timestamps: table.timestamps.clone(),
            sensor_ids: table.sensor_ids.clone(),
            values,
        }
    }
}

/// Chronological train/validation/test fractions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train: 0.7, val: 0.1, test: 0.2 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for f in [self.train, self.val, self.test] {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Config(format!("split fraction {f} outside [0,1]")));
            }
        }
        if ((self.train + self.val + self.test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config("split fractions must sum to 1".into()));
        }
        if self.train <= 0.0 {
            return Err(Error::Config("training fraction must be positive".into()));
        }
        Ok(())
    }

    /// Row ranges (train_end, val_end): train = [0, a), val = [a, b),
    /// test = [b, len).
    pub fn boundaries(&self, len: usize) -> (usize, usize) {
        let a = (self.train * len as f64).floor() as usize;
        let b = a + (self.val * len as f64).floor() as usize;
        (a.min(len), b.min(len))
    }

    /// The training rows of `values` (T×N row-major).
    pub fn train_rows<'a>(&self, values: &'a [f64], len: usize, n: usize) -> &'a [f64] {
        let (a, _) = self.boundaries(len);
        &values[..a * n]
    }
}

/// Fit the standardizer strictly on the training split.
pub fn fit_train_scaler(
    table: &TraceTable,
    split: &SplitSpec,
    per_sensor: bool,
) -> Result<Standardizer> {
    split.validate()?;
    let train = split.train_rows(&table.values, table.len(), table.n_sensors());
    if per_sensor {
        Standardizer::fit_per_sensor(train, table.n_sensors())
    } else {
        Standardizer::fit_global(train)
    }
}

/// Stride-1 windows for every client in every split; a window belongs to a
/// split only when history and target both fit inside it.
#[derive(Debug, Clone)]
pub struct WindowSet {
    /// Indexed [client][window].
    pub train: Vec<Vec<WindowSample>>,
    pub val: Vec<Vec<WindowSample>>,
    pub test: Vec<Vec<WindowSample>>,
}

pub fn make_windows(
    table: &TraceTable,
    s_len: usize,
    horizon: usize,
    split: &SplitSpec,
) -> Result<WindowSet> {
    split.validate()?;
    if s_len < 1 || horizon < 1 {
        return Err(Error::Config("window needs S ≥ 1 and T ≥ 1".into()));
    }
    let len = table.len();
    let n = table.n_sensors();
    let (a, b) = split.boundaries(len);
    let ranges = [(0usize, a, split.train), (a, b, split.val), (b, len, split.test)];
    let names = ["train", "validation", "test"];
    let mut out: [Vec<Vec<WindowSample>>; 3] = Default::default();
    for (k, &(lo, hi, fraction)) in ranges.iter().enumerate() {
        let rows = hi - lo;
        if fraction > 0.0 && rows < s_len + horizon {
            return Err(Error::Data(format!(
                "{} split has {rows} rows; windows need at least {}",
                names[k],
                s_len + horizon
            )));
        }
        let mut per_client: Vec<Vec<WindowSample>> = vec![Vec::new(); n];
        if rows >= s_len + horizon {
            for start in lo..=(hi - s_len - horizon) {
                for (client, samples) in per_client.iter_mut().enumerate() {
                    let x: Vec<f64> =
                        (0..s_len).map(|r| table.value(start + r, client)).collect();
                    let y: Vec<f64> =
                        (0..horizon).map(|r| table.value(start + s_len + r, client)).collect();
                    samples.push(WindowSample::new(
                        Tensor::from_vec(&[s_len, 1], x)?,
                        Tensor::from_vec(&[horizon, 1], y)?,
                        client,
                        start + s_len,
                    )?);
                }
            }
        }
        out[k] = per_client;
    }
    let [train, val, test] = out;
    Ok(WindowSet { train, val, test })
}

/// Synthetic dataset plan. Clients split into contiguous blocks, one block
/// per planted cluster.
#[derive(Debug, Clone, Copy)]
pub struct SynthSpec {
    pub n_clients: usize,
    pub length: usize,
    pub clusters: usize,
    /// Gaussian noise amplitude as a fraction of the signal amplitude.
    pub noise: f64,
    pub seed: u64,
}

/// Planted cluster of client `i` under the block layout.
pub fn planted_label(i: usize, n_clients: usize, clusters: usize) -> usize {
    // Blocks differ in size by at most one.
    (i * clusters) / n_clients
}

/// Generate traces plus a matching distance table.
///
/// Each cluster owns a sinusoid with its own period and phase; members add
/// a small phase jitter and seeded Gaussian noise. Distances are short
/// inside a cluster (0.5–1.5) and long across (8–12), so the default graph
/// threshold disconnects clusters and spectral clustering recovers the
/// plan.
pub fn synth_dataset(spec: &SynthSpec) -> Result<(TraceTable, DistanceTable)> {
    let SynthSpec { n_clients, length, clusters, noise, seed } = *spec;
    if n_clients < 2 {
        return Err(Error::Config("synthetic dataset needs at least 2 clients".into()));
    }
    if clusters < 1 || clusters > n_clients {
        return Err(Error::Config(format!(
            "cluster count {clusters} not in 1..={n_clients}"
        )));
    }
    if length < 2 {
        return Err(Error::Config("synthetic trace needs at least 2 rows".into()));
    }

    const MEAN_LEVEL: f64 = 60.0;
    const AMPLITUDE: f64 = 10.0;
    let mut sig_rng = seeded_rng(derive_seed(seed, "synth.signal"));
    let normal = StandardNormal;

    let labels: Vec<usize> = (0..n_clients).map(|i| planted_label(i, n_clients, clusters)).collect();
    let jitter: Vec<f64> = (0..n_clients).map(|_| sig_rng.gen_range(-0.1..0.1)).collect();

    let mut values = vec![0.0; length * n_clients];
    for t in 0..length {
        for i in 0..n_clients {
            let c = labels[i];
            // Distinct period and phase per cluster keeps across-cluster
            // correlation low.
            let period = 24.0 + 8.0 * c as f64;
            let phase = 2.399_963 * c as f64; // golden-angle spacing
            let arg = 2.0 * std::f64::consts::PI * t as f64 / period + phase + jitter[i];
            let base = arg.sin() + 0.3 * (2.0 * arg + 0.9).sin();
            let eps: f64 = normal.sample(&mut sig_rng);
            values[t * n_clients + i] = MEAN_LEVEL + AMPLITUDE * (base + noise * eps);
        }
    }

    // Five-minute cadence as unix seconds; plain integers parse numerically.
    let t0: u64 = 1_700_000_000;
    let timestamps: Vec<String> = (0..length).map(|t| (t0 + 300 * t as u64).to_string()).collect();
    let sensor_ids: Vec<String> = (0..n_clients).map(|i| format!("s{i:03}")).collect();
    let table = TraceTable { timestamps, sensor_ids: sensor_ids.clone(), values };
    table.validate()?;

    let mut dist_rng = seeded_rng(derive_seed(seed, "synth.distance"));
    let mut records: Vec<(String, String, f64)> = Vec::new();
    for i in 0..n_clients {
        for j in (i + 1)..n_clients {
            let d = if labels[i] == labels[j] {
                dist_rng.gen_range(0.5..1.5)
            } else {
                dist_rng.gen_range(8.0..12.0)
            };
            records.push((sensor_ids[i].clone(), sensor_ids[j].clone(), d));
        }
    }
    let distances = DistanceTable::from_records(&records)?;
    Ok((table, distances))
}
