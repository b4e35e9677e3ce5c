//! Sectioned run configuration: TOML file, flag and environment overrides,
//! and the persisted post-merge echo.
//!
//! Every field has a default, so an absent file means "all defaults". The
//! parser rejects unknown keys anywhere. Precedence: command-line flag,
//! then `FEDCAST_OUTPUT_DIR` (output dir only), then config file, then the
//! built-in default.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use fedcast_core::data::{SplitSpec, SynthSpec};
use fedcast_core::federation::{FedConfig, PrepareSpec};
use fedcast_core::{Error, Result};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
    pub synth: SynthSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Sensor trace CSV: header `timestamp,<sensor>,...`.
    pub traces: PathBuf,
    /// Pairwise distance CSV: header `from,to,distance`.
    pub distances: PathBuf,
    /// History window length.
    #[serde(rename = "S")]
    pub s: usize,
    /// Forecast horizon.
    #[serde(rename = "T")]
    pub t: usize,
    /// Chronological train/validation/test fractions.
    pub split: [f64; 3],
    /// Standardize each sensor separately instead of one global scaler.
    pub per_sensor: bool,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            traces: "traces.csv".into(),
            distances: "distances.csv".into(),
            s: 12,
            t: 12,
            split: [0.7, 0.1, 0.2],
            per_sensor: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSection {
    /// Gaussian-kernel threshold; weights below it are dropped.
    pub kappa: f64,
    /// Cluster count; omit for ceil(√N).
    #[serde(rename = "M", skip_serializing_if = "Option::is_none")]
    pub m: Option<usize>,
    /// Seed for spectral clustering's k-means stage.
    pub seed: u64,
}

impl Default for GraphSection {
    fn default() -> Self {
        GraphSection { kappa: 0.1, m: None, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Temporal embedding width.
    #[serde(rename = "H")]
    pub h: usize,
    /// Spatial embedding width; must equal H.
    #[serde(rename = "H_s")]
    pub h_s: usize,
    /// Per-timestep feature count.
    #[serde(rename = "D")]
    pub d: usize,
    /// Client encoder stack depth.
    pub encoder_layers: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { h: 64, h_s: 64, d: 1, encoder_layers: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Global rounds.
    #[serde(rename = "R_g")]
    pub r_g: usize,
    /// Local client rounds per global round.
    #[serde(rename = "R_c")]
    pub r_c: usize,
    /// Server rounds per global round.
    #[serde(rename = "R_s")]
    pub r_s: usize,
    pub lr: f64,
    pub batch: usize,
    /// Training-time node mask rate.
    pub mr: f64,
    pub seed: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection { r_g: 30, r_c: 1, r_s: 2, lr: 1e-3, batch: 16, mr: 0.25, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    /// Fraction of clients offline during inference; exclusive with
    /// `offline_ids`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline_rate: Option<f64>,
    /// Explicit offline client indices.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub offline_ids: Option<Vec<usize>>,
    /// Schedule seeds; `infer` and `eval` use the first, `sweep` all.
    pub seeds: Vec<u64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { offline_rate: Some(0.25), offline_ids: None, seeds: vec![1] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    /// One model is trained per mask rate.
    pub mask_rates: Vec<f64>,
    pub offline_rates: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        SweepSection { mask_rates: vec![0.1, 0.25, 0.4], offline_rates: vec![0.0, 0.25, 0.35] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub clients: usize,
    /// Timesteps in the generated trace.
    pub length: usize,
    pub clusters: usize,
    /// Noise amplitude as a fraction of the signal amplitude.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SynthSection {
    fn default() -> Self {
        SynthSection { clients: 16, length: 400, clusters: 2, noise: 0.1, seed: 1 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

impl RunConfig {
    /// Loads `path` when given, otherwise `run.toml` when present, otherwise
    /// all defaults. A named file that cannot be read is an error.
    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        let chosen = match path {
            Some(p) => Some(p.to_path_buf()),
            None => {
                let fallback = PathBuf::from("run.toml");
                fallback.exists().then_some(fallback)
            }
        };
        let Some(file) = chosen else {
            return Ok(RunConfig::default());
        };
        let text = fs::read_to_string(&file).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", file.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| Error::Config(format!("config {}: {e}", file.display())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.h_s != self.model.h {
            return Err(Error::Config(format!(
                "model.H_s = {} must equal model.H = {}: the server returns spatial \
                 embeddings with the same width as the uploaded temporal embeddings",
                self.model.h_s, self.model.h
            )));
        }
        if self.model.d < 1 {
            return Err(Error::Config("model.D must be at least 1".into()));
        }
        self.split_spec()?.validate()?;
        if self.eval.offline_rate.is_some() && self.eval.offline_ids.is_some() {
            return Err(Error::Config(
                "eval.offline_rate and eval.offline_ids are mutually exclusive".into(),
            ));
        }
        if let Some(rate) = self.eval.offline_rate {
            if !(0.0..=1.0).contains(&rate) {
                return Err(Error::Config(format!("eval.offline_rate {rate} outside [0,1]")));
            }
        }
        if self.eval.seeds.is_empty() {
            return Err(Error::Config("eval.seeds must name at least one seed".into()));
        }
        Ok(())
    }

    pub fn split_spec(&self) -> Result<SplitSpec> {
        let [train, val, test] = self.data.split;
        let spec = SplitSpec { train, val, test };
        spec.validate()?;
        Ok(spec)
    }

    pub fn prepare_spec(&self) -> Result<PrepareSpec> {
        Ok(PrepareSpec {
            s_len: self.data.s,
            horizon: self.data.t,
            split: self.split_spec()?,
            kappa: self.graph.kappa,
            clusters: self.graph.m,
            cluster_seed: self.graph.seed,
            per_sensor: self.data.per_sensor,
        })
    }

    /// Training hyperparameters for an `n`-client dataset.
    pub fn fed_config(&self, n: usize) -> FedConfig {
        FedConfig {
            rounds_global: self.train.r_g,
            rounds_client: self.train.r_c,
            rounds_server: self.train.r_s,
            mask_rate: self.train.mr,
            lr: self.train.lr,
            seed: self.train.seed,
            batch_size: self.train.batch,
            clients: n,
            hidden_dim: self.model.h,
            encoder_layers: self.model.encoder_layers,
        }
    }

    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            n_clients: self.synth.clients,
            length: self.synth.length,
            clusters: self.synth.clusters,
            noise: self.synth.noise,
            seed: self.synth.seed,
        }
    }

    /// Writes the effective configuration into the output directory.
    pub fn echo(&self) -> Result<()> {
        let dir = &self.output.dir;
        fs::create_dir_all(dir)?;
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("cannot serialize config: {e}")))?;
        fs::write(dir.join("config.toml"), text)?;
        Ok(())
    }
}
