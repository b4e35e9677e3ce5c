//! Per-client forecasting model: GRU encoder plus dual decoders.
//!
//! The encoder folds a history window into a temporal embedding h. The
//! online decoder additionally consumes the server's spatial embedding s
//! (fused into its initial hidden state); the offline decoder runs from h
//! alone so the client can predict with the server unreachable. Both
//! decoders roll out autoregressively from the last observed value.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::adam::AdamState;
use crate::tensor::init::xavier;
use crate::tensor::Tensor;

/// Single GRU cell. Weights are [hidden × input] and [hidden × hidden].
#[derive(Debug, Clone)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_z: Tensor,
    pub u_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub u_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub u_h: Tensor,
    pub b_h: Tensor,
}

impl GruCell {
    pub fn new(rng: &mut ChaCha8Rng, input_dim: usize, hidden_dim: usize) -> GruCell {
        GruCell {
            input_dim,
            hidden_dim,
            w_z: xavier(rng, hidden_dim, input_dim),
            u_z: xavier(rng, hidden_dim, hidden_dim),
            b_z: Tensor::zeros_param(&[hidden_dim]),
            w_r: xavier(rng, hidden_dim, input_dim),
            u_r: xavier(rng, hidden_dim, hidden_dim),
            b_r: Tensor::zeros_param(&[hidden_dim]),
            w_h: xavier(rng, hidden_dim, input_dim),
            u_h: xavier(rng, hidden_dim, hidden_dim),
            b_h: Tensor::zeros_param(&[hidden_dim]),
        }
    }

    /// All-zero cell; useful as a fixed point in tests.
    pub fn zeros(input_dim: usize, hidden_dim: usize) -> GruCell {
        GruCell {
            input_dim,
            hidden_dim,
            w_z: Tensor::zeros_param(&[hidden_dim, input_dim]),
            u_z: Tensor::zeros_param(&[hidden_dim, hidden_dim]),
            b_z: Tensor::zeros_param(&[hidden_dim]),
            w_r: Tensor::zeros_param(&[hidden_dim, input_dim]),
            u_r: Tensor::zeros_param(&[hidden_dim, hidden_dim]),
            b_r: Tensor::zeros_param(&[hidden_dim]),
            w_h: Tensor::zeros_param(&[hidden_dim, input_dim]),
            u_h: Tensor::zeros_param(&[hidden_dim, hidden_dim]),
            b_h: Tensor::zeros_param(&[hidden_dim]),
        }
    }

    /// One recurrence: z = σ(W_z x + U_z h + b_z), r = σ(W_r x + U_r h + b_r),
    /// ĥ = tanh(W_h x + U_h (r⊙h) + b_h), h' = (1−z)⊙h + z⊙ĥ.
    pub fn step(&self, x: &Tensor, h: &Tensor) -> Result<Tensor> {
        if x.shape() != [self.input_dim] || h.shape() != [self.hidden_dim] {
            return Err(Error::Shape(format!(
                "gru step: x {:?}, h {:?} against dims ({}, {})",
                x.shape(),
                h.shape(),
                self.input_dim,
                self.hidden_dim
            )));
        }
        let z = self.w_z.matmul(x)?.add(&self.u_z.matmul(h)?)?.add(&self.b_z)?.sigmoid()?;
        let r = self.w_r.matmul(x)?.add(&self.u_r.matmul(h)?)?.add(&self.b_r)?.sigmoid()?;
        let cand = self
            .w_h
            .matmul(x)?
            .add(&self.u_h.matmul(&r.mul(h)?)?)?
            .add(&self.b_h)?
            .tanh()?;
        let one = Tensor::ones(&[self.hidden_dim]);
        one.sub(&z)?.mul(h)?.add(&z.mul(&cand)?)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![
            self.w_z.clone(),
            self.u_z.clone(),
            self.b_z.clone(),
            self.w_r.clone(),
            self.u_r.clone(),
            self.b_r.clone(),
            self.w_h.clone(),
            self.u_h.clone(),
            self.b_h.clone(),
        ]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let names = ["w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"];
        names
            .iter()
            .zip(self.params())
            .map(|(n, p)| (format!("{prefix}.{n}"), p))
            .collect()
    }
}

/// Affine map y = W x + b with W of shape [out × in].
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

impl Linear {
    pub fn new(rng: &mut ChaCha8Rng, out_dim: usize, in_dim: usize) -> Linear {
        Linear { w: xavier(rng, out_dim, in_dim), b: Tensor::zeros_param(&[out_dim]) }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Linear {
        Linear {
            w: Tensor::zeros_param(&[out_dim, in_dim]),
            b: Tensor::zeros_param(&[out_dim]),
        }
    }

    /// Apply to a single vector.
    pub fn apply_vec(&self, x: &Tensor) -> Result<Tensor> {
        self.w.matmul(x)?.add(&self.b)
    }

    /// Apply row-wise to a [rows × in] matrix.
    pub fn apply_rows(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(&self.w.transpose()?)?.add(&self.b)
    }

    pub fn params(&self) -> Vec<Tensor> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        vec![(format!("{prefix}.w"), self.w.clone()), (format!("{prefix}.b"), self.b.clone())]
    }
}

/// GRU decoder head: recurrence plus a hidden-to-output projection.
#[derive(Debug, Clone)]
pub struct Decoder {
    pub cell: GruCell,
    pub proj: Linear,
}

impl Decoder {
    pub fn new(rng: &mut ChaCha8Rng, data_dim: usize, hidden_dim: usize) -> Decoder {
        Decoder {
            cell: GruCell::new(rng, data_dim, hidden_dim),
            proj: Linear::new(rng, data_dim, hidden_dim),
        }
    }

    pub fn zeros(data_dim: usize, hidden_dim: usize) -> Decoder {
        Decoder {
            cell: GruCell::zeros(data_dim, hidden_dim),
            proj: Linear::zeros(data_dim, hidden_dim),
        }
    }

    /// Autoregressive rollout: feed `first_input`, then each prediction.
    pub fn rollout(&self, hidden: &Tensor, first_input: &Tensor, horizon: usize) -> Result<Tensor> {
        if horizon == 0 {
            return Err(Error::Shape("decoder horizon must be at least 1".into()));
        }
        let d = self.cell.input_dim;
        let mut h = hidden.clone();
        let mut input = first_input.clone();
        let mut steps: Vec<Tensor> = Vec::with_capacity(horizon);
        for _ in 0..horizon {
            h = self.cell.step(&input, &h)?;
            let pred = self.proj.apply_vec(&h)?;
            steps.push(pred.clone());
            input = pred;
        }
        let refs: Vec<&Tensor> = steps.iter().collect();
        Tensor::concat_last(&refs)?.reshape(&[horizon, d])
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.cell.params();
        p.extend(self.proj.params());
        p
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut p = self.cell.named_params(&format!("{prefix}.cell"));
        p.extend(self.proj.named_params(&format!("{prefix}.proj")));
        p
    }
}

/// Model dimensions shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientDims {
    /// Per-timestep feature count D.
    pub data_dim: usize,
    /// Temporal embedding width H.
    pub hidden_dim: usize,
    /// Spatial embedding width H_s.
    pub spatial_dim: usize,
    /// Encoder stack depth (layer 1 reads data, deeper layers read hidden).
    pub encoder_layers: usize,
}

impl ClientDims {
    pub fn new(data_dim: usize, hidden_dim: usize, spatial_dim: usize) -> ClientDims {
        ClientDims { data_dim, hidden_dim, spatial_dim, encoder_layers: 1 }
    }
}

/// One training/evaluation window for one client.
#[derive(Debug, Clone)]
pub struct WindowSample {
    /// History, [S × D].
    pub x: Tensor,
    /// Target horizon, [T × D].
    pub y: Tensor,
    pub client: usize,
    /// Index of the first target timestep in the source trace.
    pub t: usize,
}

impl WindowSample {
    pub fn new(x: Tensor, y: Tensor, client: usize, t: usize) -> Result<WindowSample> {
        let (sx, sy) = (x.shape(), y.shape());
        if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
            return Err(Error::Shape(format!(
                "window sample needs [S×D] and [T×D] with equal D, got {sx:?} and {sy:?}"
            )));
        }
        if sx[0] < 1 || sy[0] < 1 {
            return Err(Error::Shape("window sample needs S ≥ 1 and T ≥ 1".into()));
        }
        Ok(WindowSample { x, y, client, t })
    }

    pub fn history_len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn horizon(&self) -> usize {
        self.y.shape()[0]
    }

    /// Final observed value, the decoder's first input.
    pub fn last_obs(&self) -> Result<Tensor> {
        self.x.row(self.history_len() - 1)
    }
}

/// The client's trainable pieces: θ_enc, fuse, θ_dec_on, θ_dec_off.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub dims: ClientDims,
    pub encoder: Vec<GruCell>,
    /// Maps concat(h, s) of width H+H_s to the online decoder's initial H.
    pub fuse: Linear,
    pub dec_on: Decoder,
    pub dec_off: Decoder,
}

impl ClientModel {
    pub fn new(rng: &mut ChaCha8Rng, dims: ClientDims) -> ClientModel {
        assert!(dims.encoder_layers >= 1, "encoder needs at least one layer");
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for layer in 0..dims.encoder_layers {
            let input = if layer == 0 { dims.data_dim } else { dims.hidden_dim };
            encoder.push(GruCell::new(rng, input, dims.hidden_dim));
        }
        ClientModel {
            dims,
            encoder,
            fuse: Linear::new(rng, dims.hidden_dim, dims.hidden_dim + dims.spatial_dim),
            dec_on: Decoder::new(rng, dims.data_dim, dims.hidden_dim),
            dec_off: Decoder::new(rng, dims.data_dim, dims.hidden_dim),
        }
    }

    /// All-zero model of the given dimensions, the shell that checkpoint
    /// loading fills in.
    pub fn zeros(dims: ClientDims) -> ClientModel {
        assert!(dims.encoder_layers >= 1, "encoder needs at least one layer");
        let mut encoder = Vec::with_capacity(dims.encoder_layers);
        for layer in 0..dims.encoder_layers {
            let input = if layer == 0 { dims.data_dim } else { dims.hidden_dim };
            encoder.push(GruCell::zeros(input, dims.hidden_dim));
        }
        ClientModel {
            dims,
            encoder,
            fuse: Linear::zeros(dims.hidden_dim, dims.hidden_dim + dims.spatial_dim),
            dec_on: Decoder::zeros(dims.data_dim, dims.hidden_dim),
            dec_off: Decoder::zeros(dims.data_dim, dims.hidden_dim),
        }
    }

    /// Temporal embedding h from a [S × D] history (h₀ = 0).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.dims.data_dim {
            return Err(Error::Shape(format!(
                "encode expects [S × {}], got {shape:?}",
                self.dims.data_dim
            )));
        }
        run_encoder(&self.encoder, self.dims.hidden_dim, x)
    }

    /// Online prediction: decoder seeded with fuse(concat(h, s)).
    pub fn decode_online(
        &self,
        h: &Tensor,
        s: &Tensor,
        last_obs: &Tensor,
        horizon: usize,
    ) -> Result<Tensor> {
        if s.shape() != [self.dims.spatial_dim] {
            return Err(Error::Shape(format!(
                "spatial embedding shape {:?}, expected [{}]",
                s.shape(),
                self.dims.spatial_dim
            )));
        }
        let joint = Tensor::concat_last(&[h, s])?;
        let hidden = self.fuse.apply_vec(&joint)?;
        self.dec_on.rollout(&hidden, last_obs, horizon)
    }

    /// Offline prediction: decoder seeded with h directly.
    pub fn decode_offline(&self, h: &Tensor, last_obs: &Tensor, horizon: usize) -> Result<Tensor> {
        self.dec_off.rollout(h, last_obs, horizon)
    }

    /// Parameters updated in phase 1 (online path).
    pub fn params_online(&self) -> Vec<Tensor> {
        let mut p: Vec<Tensor> = self.encoder.iter().flat_map(|c| c.params()).collect();
        p.extend(self.fuse.params());
        p.extend(self.dec_on.params());
        p
    }

    /// Parameters updated in phase 2 (offline head).
    pub fn params_offline(&self) -> Vec<Tensor> {
        self.dec_off.params()
    }

    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.params_online();
        p.extend(self.params_offline());
        p
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (i, cell) in self.encoder.iter().enumerate() {
            out.extend(cell.named_params(&format!("encoder.{i}")));
        }
        out.extend(self.fuse.named_params("fuse"));
        out.extend(self.dec_on.named_params("dec_on"));
        out.extend(self.dec_off.named_params("dec_off"));
        out
    }

    /// Copy with identical values but no gradient tracking, for use as a
    /// fixed model inside another party's training graph.
    pub fn frozen_copy(&self) -> ClientModel {
        let freeze = |t: &Tensor| Tensor::from_vec(t.shape(), t.data_vec()).expect("finite params");
        let freeze_cell = |c: &GruCell| GruCell {
            input_dim: c.input_dim,
            hidden_dim: c.hidden_dim,
            w_z: freeze(&c.w_z),
            u_z: freeze(&c.u_z),
            b_z: freeze(&c.b_z),
            w_r: freeze(&c.w_r),
            u_r: freeze(&c.u_r),
            b_r: freeze(&c.b_r),
            w_h: freeze(&c.w_h),
            u_h: freeze(&c.u_h),
            b_h: freeze(&c.b_h),
        };
        ClientModel {
            dims: self.dims,
            encoder: self.encoder.iter().map(&freeze_cell).collect(),
            fuse: Linear { w: freeze(&self.fuse.w), b: freeze(&self.fuse.b) },
            dec_on: Decoder {
                cell: freeze_cell(&self.dec_on.cell),
                proj: Linear { w: freeze(&self.dec_on.proj.w), b: freeze(&self.dec_on.proj.b) },
            },
            dec_off: Decoder {
                cell: freeze_cell(&self.dec_off.cell),
                proj: Linear { w: freeze(&self.dec_off.proj.w), b: freeze(&self.dec_off.proj.b) },
            },
        }
    }

    /// Two-phase local round. Phase 1 fits the online path (encoder, fuse,
    /// online decoder) to ground truth; phase 2 fits the offline decoder to
    /// the online decoder's detached predictions. The spatial embedding and
    /// the untrained phase's parameters stay fixed. Returns the pre-update
    /// batch-mean losses (L_on, L_off).
    pub fn local_train_round(
        &self,
        batch: &[WindowSample],
        s_i: &Tensor,
        opt_on: &mut AdamState,
        opt_off: &mut AdamState,
    ) -> Result<(f64, f64)> {
        if batch.is_empty() {
            return Err(Error::Data("local training round over an empty batch".into()));
        }
        let s_fixed = s_i.detach();
        let inv_b = 1.0 / batch.len() as f64;

        let mut total_on: Option<Tensor> = None;
        for w in batch {
            let h = self.encode(&w.x)?;
            let pred = self.decode_online(&h, &s_fixed, &w.last_obs()?, w.horizon())?;
            let l = loss_on(&pred, &w.y)?;
            total_on = Some(match total_on {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let mean_on = total_on.expect("nonempty batch").scale(inv_b)?;
        let on_value = mean_on.value();
        mean_on.backward()?;
        opt_on.step(&self.params_online())?;

        // The offline head learns from the just-updated online path; h and
        // the online prediction enter as constants so no gradient can leak
        // back into the frozen parameters.
        let mut total_off: Option<Tensor> = None;
        for w in batch {
            let h = self.encode(&w.x)?.detach();
            let last = w.last_obs()?;
            let target = self.decode_online(&h, &s_fixed, &last, w.horizon())?.detach();
            let pred = self.decode_offline(&h, &last, w.horizon())?;
            let l = loss_off(&pred, &target)?;
            total_off = Some(match total_off {
                Some(acc) => acc.add(&l)?,
                None => l,
            });
        }
        let mean_off = total_off.expect("nonempty batch").scale(inv_b)?;
        let off_value = mean_off.value();
        mean_off.backward()?;
        opt_off.step(&self.params_offline())?;

        Ok((on_value, off_value))
    }
}

/// Folds a [S × D] history through a GRU stack (h₀ = 0 per layer) and
/// returns the top layer's final hidden state.
pub fn run_encoder(cells: &[GruCell], hidden_dim: usize, x: &Tensor) -> Result<Tensor> {
    let s_len = x.shape()[0];
    if s_len == 0 {
        return Err(Error::Shape("encode needs at least one timestep".into()));
    }
    let mut hidden: Vec<Tensor> = cells.iter().map(|_| Tensor::zeros(&[hidden_dim])).collect();
    for t in 0..s_len {
        let mut input = x.row(t)?;
        for (layer, cell) in cells.iter().enumerate() {
            hidden[layer] = cell.step(&input, &hidden[layer])?;
            input = hidden[layer].clone();
        }
    }
    Ok(hidden.last().expect("at least one layer").clone())
}

/// Online loss: MSE between the online prediction and ground truth.
pub fn loss_on(pred_on: &Tensor, y: &Tensor) -> Result<Tensor> {
    pred_on.mse(y)
}

/// Offline loss: MSE between the offline prediction and the online
/// prediction, which must enter as a constant (detached or otherwise
/// gradient-free) so only the offline decoder learns.
pub fn loss_off(pred_off: &Tensor, pred_on_detached: &Tensor) -> Result<Tensor> {
    if pred_on_detached.is_tracked() {
        return Err(Error::Grad(
            "offline loss target still carries gradient; detach the online prediction".into(),
        ));
    }
    pred_off.mse(pred_on_detached)
}
