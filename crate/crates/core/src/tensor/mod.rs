//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Every tensor is a node in an implicit tape: operations record their
//! inputs, and [`Tensor::backward`] walks the recorded graph once in
//! reverse creation order, accumulating gradients into the `requires_grad`
//! leaves. Layout is row-major; broadcasting is limited to leading-1 axes
//! so each backward rule stays auditable. A graph is single-threaded;
//! independent graphs may live on different threads.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

pub mod adam;
pub mod gradcheck;
pub mod init;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn next_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Operation recorded on a tape node, with whatever the backward rule needs.
#[derive(Debug, Clone)]
enum OpKind {
    Leaf,
    /// 2-D product with optional 1-D promotion of either side.
    Matmul { m: usize, k: usize, n: usize },
    Transpose,
    Add,
    Sub,
    Mul,
    Sigmoid,
    Tanh,
    Relu,
    /// Concatenation along the last axis; `widths` are the inputs' last extents.
    ConcatLast { widths: Vec<usize> },
    Reshape,
    Sum,
    Scale(f64),
    Mse,
    Row(usize),
    /// out[i] = x[labels[i]]; `src_rows` is x's row count.
    GatherRows { labels: Vec<usize> },
    /// Rows in `rows` replaced by the mask vector (second parent).
    MaskRows { rows: Vec<usize> },
    /// Per-cluster mean of member rows. counts[m] ≥ 1.
    ClusterMean { labels: Vec<usize>, counts: Vec<usize> },
    /// out[v] = mean of x[u] over edges (u → v); zero when v has no in-edge.
    NeighborMean { edges: Vec<(usize, usize)>, indeg: Vec<usize> },
}

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    requires_grad: bool,
    detached: bool,
    /// True when this node lies on a path to a `requires_grad` leaf.
    track: bool,
    grad: RefCell<Option<Vec<f64>>>,
    parents: Vec<Tensor>,
    op: OpKind,
}

/// A dense tensor handle. Cloning is cheap (shared node).
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

fn check_finite(data: &[f64], op: &str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn shape_str(s: &[usize]) -> String {
    format!("{s:?}")
}

impl Tensor {
    fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        detached: bool,
        parents: Vec<Tensor>,
        op: OpKind,
    ) -> Tensor {
        let track = !detached && (requires_grad || parents.iter().any(|p| p.inner.track));
        // Untracked nodes never run backward; dropping parents frees the graph early.
        let (parents, op) = if track { (parents, op) } else { (Vec::new(), OpKind::Leaf) };
        Tensor {
            inner: Rc::new(Inner {
                id: next_id(),
                shape,
                data: RefCell::new(data),
                requires_grad,
                detached,
                track,
                grad: RefCell::new(None),
                parents,
                op,
            }),
        }
    }

    /// Constant tensor (no gradient tracking).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {}", shape_str(shape))));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, got {}",
                shape_str(shape),
                numel,
                data.len()
            )));
        }
        check_finite(&data, "from_vec")?;
        Ok(Self::new_node(shape.to_vec(), data, false, false, Vec::new(), OpKind::Leaf))
    }

    /// Trainable leaf; gradients accumulate here during backward.
    pub fn param(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {}", shape_str(shape))));
        }
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {} implies {} elements, got {}",
                shape_str(shape),
                numel,
                data.len()
            )));
        }
        check_finite(&data, "param")?;
        Ok(Self::new_node(shape.to_vec(), data, true, false, Vec::new(), OpKind::Leaf))
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::from_vec(&[1], vec![v]).expect("finite scalar")
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![0.0; n]).expect("zeros")
    }

    pub fn ones(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::from_vec(shape, vec![1.0; n]).expect("ones")
    }

    pub fn zeros_param(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Self::param(shape, vec![0.0; n]).expect("zeros_param")
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_detached(&self) -> bool {
        self.inner.detached
    }

    /// Whether gradients flow through this node.
    pub fn is_tracked(&self) -> bool {
        self.inner.track
    }

    pub fn data_vec(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    /// Scalar value of a one-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() requires a single-element tensor");
        self.inner.data.borrow()[0]
    }

    /// In-place data mutation, for optimizers and weight sync on leaves.
    pub fn apply_update<F: FnOnce(&mut [f64])>(&self, f: F) {
        f(&mut self.inner.data.borrow_mut());
    }

    /// Replace the stored values. Lengths must match.
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        check_finite(values, "set_data")?;
        let mut d = self.inner.data.borrow_mut();
        if d.len() != values.len() {
            return Err(Error::Shape(format!(
                "set_data length {} on tensor of {} elements",
                values.len(),
                d.len()
            )));
        }
        d.copy_from_slice(values);
        Ok(())
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    /// Gradient as a vector; zeros when backward never reached this leaf.
    pub fn grad_or_zeros(&self) -> Vec<f64> {
        self.grad().unwrap_or_else(|| vec![0.0; self.numel()])
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Constant copy of the current values, flagged detached. Gradients never
    /// flow past it.
    pub fn detach(&self) -> Tensor {
        Self::new_node(
            self.inner.shape.clone(),
            self.data_vec(),
            false,
            true,
            Vec::new(),
            OpKind::Leaf,
        )
    }

    // ── Operations ──────────────────────────────────────────────────────

    /// Matrix product. Accepts 2-D×2-D, 2-D×1-D (column promotion) and
    /// 1-D×2-D (row promotion).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (sa, sb) = (self.shape(), other.shape());
        let (m, k, a_vec) = match sa {
            [m, k] => (*m, *k, false),
            [k] => (1, *k, true),
            _ => return Err(Error::Shape(format!("matmul lhs must be 1-D or 2-D, got {}", shape_str(sa)))),
        };
        let (k2, n, b_vec) = match sb {
            [k2, n] => (*k2, *n, false),
            [k2] => (*k2, 1, true),
            _ => return Err(Error::Shape(format!("matmul rhs must be 1-D or 2-D, got {}", shape_str(sb)))),
        };
        if a_vec && b_vec {
            return Err(Error::Shape("matmul needs at least one 2-D operand".into()));
        }
        if k != k2 {
            return Err(Error::Shape(format!(
                "matmul inner extents differ: {} vs {}",
                shape_str(sa),
                shape_str(sb)
            )));
        }
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = a[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &b[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += av * brow[j];
                }
            }
        }
        drop(a);
        drop(b);
        check_finite(&out, "matmul")?;
        let out_shape = match (a_vec, b_vec) {
            (false, false) => vec![m, n],
            (true, false) => vec![n],
            (false, true) => vec![m],
            (true, true) => unreachable!(),
        };
        Ok(Self::new_node(
            out_shape,
            out,
            false,
            false,
            vec![self.clone(), other.clone()],
            OpKind::Matmul { m, k, n },
        ))
    }

    /// 2-D transpose (copying).
    pub fn transpose(&self) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "transpose")?;
        let a = self.inner.data.borrow();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = a[i * c + j];
            }
        }
        drop(a);
        Ok(Self::new_node(
            vec![c, r],
            out,
            false,
            false,
            vec![self.clone()],
            OpKind::Transpose,
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, OpKind::Add, "add", |x, y| x + y)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, OpKind::Sub, "sub", |x, y| x - y)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, OpKind::Mul, "mul", |x, y| x * y)
    }

    fn binary(
        &self,
        other: &Tensor,
        op: OpKind,
        name: &str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let out_shape = broadcast_shape(self.shape(), other.shape(), name)?;
        let n: usize = out_shape.iter().product();
        let a = self.inner.data.borrow();
        let b = other.inner.data.borrow();
        let (na, nb) = (a.len(), b.len());
        let mut out = vec![0.0; n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = f(a[i % na], b[i % nb]);
        }
        drop(a);
        drop(b);
        check_finite(&out, name)?;
        Ok(Self::new_node(
            out_shape,
            out,
            false,
            false,
            vec![self.clone(), other.clone()],
            op,
        ))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        // Split form avoids overflow for large |x|.
        self.unary(OpKind::Sigmoid, "sigmoid", |x| {
            if x >= 0.0 {
                1.0 / (1.0 + (-x).exp())
            } else {
                let e = x.exp();
                e / (1.0 + e)
            }
        })
    }

    pub fn tanh(&self) -> Result<Tensor> {
        self.unary(OpKind::Tanh, "tanh", f64::tanh)
    }

    pub fn relu(&self) -> Result<Tensor> {
        self.unary(OpKind::Relu, "relu", |x| x.max(0.0))
    }

    fn unary(&self, op: OpKind, name: &str, f: impl Fn(f64) -> f64) -> Result<Tensor> {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|&x| f(x)).collect();
        check_finite(&out, name)?;
        Ok(Self::new_node(
            self.inner.shape.clone(),
            out,
            false,
            false,
            vec![self.clone()],
            op,
        ))
    }

    /// Concatenate along the last axis. All leading extents must agree.
    pub fn concat_last(parts: &[&Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Shape("concat of zero tensors".into()));
        }
        let first = parts[0].shape();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = p.shape();
            if s.len() != first.len() || &s[..s.len() - 1] != lead {
                return Err(Error::Shape(format!(
                    "concat leading extents differ: {} vs {}",
                    shape_str(first),
                    shape_str(s)
                )));
            }
            widths.push(s[s.len() - 1]);
        }
        let total_w: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total_w);
        for r in 0..rows {
            for (p, &w) in parts.iter().zip(&widths) {
                let d = p.inner.data.borrow();
                out.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total_w);
        Ok(Self::new_node(
            shape,
            out,
            false,
            false,
            parts.iter().map(|p| (*p).clone()).collect(),
            OpKind::ConcatLast { widths },
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "reshape {} to {} changes element count",
                shape_str(self.shape()),
                shape_str(shape)
            )));
        }
        Ok(Self::new_node(
            shape.to_vec(),
            self.data_vec(),
            false,
            false,
            vec![self.clone()],
            OpKind::Reshape,
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&self) -> Result<Tensor> {
        let s: f64 = self.inner.data.borrow().iter().sum();
        if !s.is_finite() {
            return Err(Error::NonFinite("sum".into()));
        }
        Ok(Self::new_node(vec![1], vec![s], false, false, vec![self.clone()], OpKind::Sum))
    }

    /// Multiply by a compile-time constant (not a tape value).
    pub fn scale(&self, c: f64) -> Result<Tensor> {
        let out: Vec<f64> = self.inner.data.borrow().iter().map(|&x| x * c).collect();
        check_finite(&out, "scale")?;
        Ok(Self::new_node(
            self.inner.shape.clone(),
            out,
            false,
            false,
            vec![self.clone()],
            OpKind::Scale(c),
        ))
    }

    /// Mean squared error against `target`, as a `[1]` tensor. A detached
    /// target contributes no gradient.
    pub fn mse(&self, target: &Tensor) -> Result<Tensor> {
        if self.shape() != target.shape() {
            return Err(Error::Shape(format!(
                "mse shapes differ: {} vs {}",
                shape_str(self.shape()),
                shape_str(target.shape())
            )));
        }
        if self.numel() == 0 {
            return Err(Error::Shape("mse over empty tensor".into()));
        }
        let a = self.inner.data.borrow();
        let b = target.inner.data.borrow();
        let n = a.len() as f64;
        let s: f64 = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum();
        drop(a);
        drop(b);
        let v = s / n;
        if !v.is_finite() {
            return Err(Error::NonFinite("mse".into()));
        }
        Ok(Self::new_node(
            vec![1],
            vec![v],
            false,
            false,
            vec![self.clone(), target.clone()],
            OpKind::Mse,
        ))
    }

    /// Row `i` of a 2-D tensor, as a 1-D tensor.
    pub fn row(&self, i: usize) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "row")?;
        if i >= r {
            return Err(Error::Shape(format!("row {i} out of range for {r} rows")));
        }
        let d = self.inner.data.borrow()[i * c..(i + 1) * c].to_vec();
        Ok(Self::new_node(vec![c], d, false, false, vec![self.clone()], OpKind::Row(i)))
    }

    /// Gather rows of a 2-D tensor: out[j] = self[labels[j]].
    pub fn gather_rows(&self, labels: &[usize]) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "gather_rows")?;
        if let Some(&bad) = labels.iter().find(|&&l| l >= r) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {r} rows")));
        }
        let d = self.inner.data.borrow();
        let mut out = Vec::with_capacity(labels.len() * c);
        for &l in labels {
            out.extend_from_slice(&d[l * c..(l + 1) * c]);
        }
        drop(d);
        Ok(Self::new_node(
            vec![labels.len(), c],
            out,
            false,
            false,
            vec![self.clone()],
            OpKind::GatherRows { labels: labels.to_vec() },
        ))
    }

    /// Replace the listed rows of a 2-D tensor with `mask_vec`. Gradient of a
    /// replaced row flows into `mask_vec`; unreplaced rows pass through.
    pub fn mask_rows(&self, mask_vec: &Tensor, rows: &[usize]) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "mask_rows")?;
        if mask_vec.shape() != [c] {
            return Err(Error::Shape(format!(
                "mask vector shape {} does not match row width {c}",
                shape_str(mask_vec.shape())
            )));
        }
        let mut seen = HashSet::new();
        for &i in rows {
            if i >= r {
                return Err(Error::Shape(format!("masked row {i} out of range for {r} rows")));
            }
            if !seen.insert(i) {
                return Err(Error::Shape(format!("masked row {i} listed twice")));
            }
        }
        let mut out = self.data_vec();
        let m = mask_vec.inner.data.borrow();
        for &i in rows {
            out[i * c..(i + 1) * c].copy_from_slice(&m);
        }
        drop(m);
        Ok(Self::new_node(
            vec![r, c],
            out,
            false,
            false,
            vec![self.clone(), mask_vec.clone()],
            OpKind::MaskRows { rows: rows.to_vec() },
        ))
    }

    /// Per-cluster mean of member rows: out[m] = mean over {i : labels[i] == m}.
    pub fn cluster_mean(&self, labels: &[usize], clusters: usize) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "cluster_mean")?;
        if labels.len() != r {
            return Err(Error::Shape(format!(
                "{} labels for {} rows",
                labels.len(),
                r
            )));
        }
        let mut counts = vec![0usize; clusters];
        for &l in labels {
            if l >= clusters {
                return Err(Error::Graph(format!("label {l} out of range for {clusters} clusters")));
            }
            counts[l] += 1;
        }
        if let Some(m) = counts.iter().position(|&k| k == 0) {
            return Err(Error::Graph(format!("cluster {m} is empty")));
        }
        let d = self.inner.data.borrow();
        let mut out = vec![0.0; clusters * c];
        for (i, &l) in labels.iter().enumerate() {
            for j in 0..c {
                out[l * c + j] += d[i * c + j];
            }
        }
        for (m, &k) in counts.iter().enumerate() {
            for j in 0..c {
                out[m * c + j] /= k as f64;
            }
        }
        drop(d);
        Ok(Self::new_node(
            vec![clusters, c],
            out,
            false,
            false,
            vec![self.clone()],
            OpKind::ClusterMean { labels: labels.to_vec(), counts },
        ))
    }

    /// Mean over in-neighbors along directed edges (u → v). Destinations with
    /// no in-edges aggregate to zero.
    pub fn neighbor_mean(&self, edges: &[(usize, usize)], n_dst: usize) -> Result<Tensor> {
        let [r, c] = *as_2d(self.shape(), "neighbor_mean")?;
        let mut indeg = vec![0usize; n_dst];
        for &(u, v) in edges {
            if u >= r || v >= n_dst {
                return Err(Error::Graph(format!(
                    "edge ({u} -> {v}) out of range for {r} sources, {n_dst} destinations"
                )));
            }
            indeg[v] += 1;
        }
        let d = self.inner.data.borrow();
        let mut out = vec![0.0; n_dst * c];
        for &(u, v) in edges {
            for j in 0..c {
                out[v * c + j] += d[u * c + j];
            }
        }
        for (v, &k) in indeg.iter().enumerate() {
            if k > 0 {
                for j in 0..c {
                    out[v * c + j] /= k as f64;
                }
            }
        }
        drop(d);
        Ok(Self::new_node(
            vec![n_dst, c],
            out,
            false,
            false,
            vec![self.clone()],
            OpKind::NeighborMean { edges: edges.to_vec(), indeg },
        ))
    }

    // ── Backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
    /// into every reachable `requires_grad` leaf; each node is visited once.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Grad(format!(
                "backward requires a scalar loss, got shape {}",
                shape_str(self.shape())
            )));
        }
        if !self.inner.track {
            return Ok(());
        }
        // Collect the tracked subgraph. Creation ids give a topological order:
        // inputs always precede outputs.
        let mut nodes: HashMap<u64, Tensor> = HashMap::new();
        let mut stack = vec![self.clone()];
        while let Some(t) = stack.pop() {
            if nodes.insert(t.inner.id, t.clone()).is_some() {
                continue;
            }
            for p in &t.inner.parents {
                if p.inner.track && !nodes.contains_key(&p.inner.id) {
                    stack.push(p.clone());
                }
            }
        }
        let mut order: Vec<u64> = nodes.keys().copied().collect();
        order.sort_unstable_by(|a, b| b.cmp(a));

        let mut grads: HashMap<u64, Vec<f64>> = HashMap::new();
        grads.insert(self.inner.id, vec![1.0]);

        for id in order {
            let node = &nodes[&id];
            let g = match grads.remove(&id) {
                Some(g) => g,
                None => continue,
            };
            if node.inner.parents.is_empty() {
                if node.inner.requires_grad {
                    let mut slot = node.inner.grad.borrow_mut();
                    match slot.as_mut() {
                        Some(acc) => {
                            for (a, gi) in acc.iter_mut().zip(&g) {
                                *a += gi;
                            }
                        }
                        None => *slot = Some(g),
                    }
                }
                continue;
            }
            node.backward_step(&g, &mut grads);
        }
        Ok(())
    }

    fn accumulate(grads: &mut HashMap<u64, Vec<f64>>, parent: &Tensor, contrib: Vec<f64>) {
        if !parent.inner.track {
            return;
        }
        match grads.entry(parent.inner.id) {
            std::collections::hash_map::Entry::Occupied(mut e) => {
                for (a, c) in e.get_mut().iter_mut().zip(&contrib) {
                    *a += c;
                }
            }
            std::collections::hash_map::Entry::Vacant(e) => {
                e.insert(contrib);
            }
        }
    }

    fn backward_step(&self, g: &[f64], grads: &mut HashMap<u64, Vec<f64>>) {
        let parents = &self.inner.parents;
        match &self.inner.op {
            OpKind::Leaf => {}
            OpKind::Matmul { m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let a = parents[0].inner.data.borrow().clone();
                let b = parents[1].inner.data.borrow().clone();
                // dA = dC · Bᵀ
                if parents[0].inner.track {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        for p in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * b[p * n + j];
                            }
                            da[i * k + p] = s;
                        }
                    }
                    Self::accumulate(grads, &parents[0], da);
                }
                // dB = Aᵀ · dC
                if parents[1].inner.track {
                    let mut db = vec![0.0; k * n];
                    for p in 0..k {
                        for i in 0..m {
                            let av = a[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                db[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                    Self::accumulate(grads, &parents[1], db);
                }
            }
            OpKind::Transpose => {
                let [c, r] = *as_2d(self.shape(), "transpose-backward").expect("2d");
                let mut dp = vec![0.0; r * c];
                for i in 0..c {
                    for j in 0..r {
                        dp[j * c + i] = g[i * r + j];
                    }
                }
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::Add => {
                Self::accumulate(grads, &parents[0], reduce_to(g, parents[0].numel()));
                Self::accumulate(grads, &parents[1], reduce_to(g, parents[1].numel()));
            }
            OpKind::Sub => {
                Self::accumulate(grads, &parents[0], reduce_to(g, parents[0].numel()));
                let neg: Vec<f64> = g.iter().map(|x| -x).collect();
                Self::accumulate(grads, &parents[1], reduce_to(&neg, parents[1].numel()));
            }
            OpKind::Mul => {
                let a = parents[0].inner.data.borrow();
                let b = parents[1].inner.data.borrow();
                let (na, nb) = (a.len(), b.len());
                let da: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * b[i % nb]).collect();
                let db: Vec<f64> = g.iter().enumerate().map(|(i, gi)| gi * a[i % na]).collect();
                drop(a);
                drop(b);
                Self::accumulate(grads, &parents[0], reduce_to(&da, na));
                Self::accumulate(grads, &parents[1], reduce_to(&db, nb));
            }
            OpKind::Sigmoid => {
                let y = self.inner.data.borrow();
                let dp: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| gi * yi * (1.0 - yi)).collect();
                drop(y);
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::Tanh => {
                let y = self.inner.data.borrow();
                let dp: Vec<f64> = g.iter().zip(y.iter()).map(|(gi, yi)| gi * (1.0 - yi * yi)).collect();
                drop(y);
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::Relu => {
                let x = parents[0].inner.data.borrow();
                let dp: Vec<f64> = g
                    .iter()
                    .zip(x.iter())
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                drop(x);
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::ConcatLast { widths } => {
                let total_w: usize = widths.iter().sum();
                let rows = self.numel() / total_w;
                let mut offset = 0;
                for (p, &w) in parents.iter().zip(widths) {
                    if p.inner.track {
                        let mut dp = vec![0.0; rows * w];
                        for r in 0..rows {
                            dp[r * w..(r + 1) * w]
                                .copy_from_slice(&g[r * total_w + offset..r * total_w + offset + w]);
                        }
                        Self::accumulate(grads, p, dp);
                    }
                    offset += w;
                }
            }
            OpKind::Reshape => {
                Self::accumulate(grads, &parents[0], g.to_vec());
            }
            OpKind::Sum => {
                let n = parents[0].numel();
                Self::accumulate(grads, &parents[0], vec![g[0]; n]);
            }
            OpKind::Scale(c) => {
                let dp: Vec<f64> = g.iter().map(|gi| gi * c).collect();
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::Mse => {
                let a = parents[0].inner.data.borrow();
                let b = parents[1].inner.data.borrow();
                let n = a.len() as f64;
                let scale = 2.0 * g[0] / n;
                if parents[0].inner.track {
                    let dp: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| scale * (x - y)).collect();
                    Self::accumulate(grads, &parents[0], dp);
                }
                if parents[1].inner.track {
                    let dt: Vec<f64> = a.iter().zip(b.iter()).map(|(x, y)| -scale * (x - y)).collect();
                    Self::accumulate(grads, &parents[1], dt);
                }
                drop(a);
                drop(b);
            }
            OpKind::Row(i) => {
                let [_, c] = *as_2d(parents[0].shape(), "row-backward").expect("2d");
                let mut dp = vec![0.0; parents[0].numel()];
                dp[i * c..(i + 1) * c].copy_from_slice(g);
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::GatherRows { labels } => {
                let [_, c] = *as_2d(parents[0].shape(), "gather-backward").expect("2d");
                let mut dp = vec![0.0; parents[0].numel()];
                for (j, &l) in labels.iter().enumerate() {
                    for t in 0..c {
                        dp[l * c + t] += g[j * c + t];
                    }
                }
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::MaskRows { rows } => {
                let [_, c] = *as_2d(self.shape(), "mask-backward").expect("2d");
                if parents[0].inner.track {
                    let mut dp = g.to_vec();
                    for &i in rows {
                        dp[i * c..(i + 1) * c].fill(0.0);
                    }
                    Self::accumulate(grads, &parents[0], dp);
                }
                if parents[1].inner.track {
                    let mut dm = vec![0.0; c];
                    for &i in rows {
                        for t in 0..c {
                            dm[t] += g[i * c + t];
                        }
                    }
                    Self::accumulate(grads, &parents[1], dm);
                }
            }
            OpKind::ClusterMean { labels, counts } => {
                let [_, c] = *as_2d(self.shape(), "cluster-mean-backward").expect("2d");
                let mut dp = vec![0.0; parents[0].numel()];
                for (i, &l) in labels.iter().enumerate() {
                    let k = counts[l] as f64;
                    for t in 0..c {
                        dp[i * c + t] = g[l * c + t] / k;
                    }
                }
                Self::accumulate(grads, &parents[0], dp);
            }
            OpKind::NeighborMean { edges, indeg } => {
                let [_, c] = *as_2d(self.shape(), "neighbor-mean-backward").expect("2d");
                let mut dp = vec![0.0; parents[0].numel()];
                for &(u, v) in edges {
                    let k = indeg[v] as f64;
                    for t in 0..c {
                        dp[u * c + t] += g[v * c + t] / k;
                    }
                }
                Self::accumulate(grads, &parents[0], dp);
            }
        }
    }
}

fn as_2d<'a>(shape: &'a [usize], op: &str) -> Result<&'a [usize; 2]> {
    shape
        .try_into()
        .map_err(|_| Error::Shape(format!("{op} requires a 2-D tensor, got {}", shape_str(shape))))
}

/// Fold a gradient computed at the broadcast output shape back to an operand
/// with `n` elements. Valid because broadcasting is leading-axis only: the
/// operand tiles the output with period `n`.
fn reduce_to(g: &[f64], n: usize) -> Vec<f64> {
    if g.len() == n {
        return g.to_vec();
    }
    let mut out = vec![0.0; n];
    for (i, gi) in g.iter().enumerate() {
        out[i % n] += gi;
    }
    out
}

/// Broadcast-compatible output shape under the leading-1 rule: each operand,
/// after stripping leading 1-axes, must be a suffix of the output shape. Then
/// its flat data tiles the output with period `numel`, so modular indexing in
/// the forward pass and modular reduction in the backward pass are both
/// exact. `[H]` with `[B, H]` is fine; `[B, 1]` with `[B, H]` is not.
fn broadcast_shape(a: &[usize], b: &[usize], op: &str) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let at = |s: &[usize], i: usize| -> usize {
        let pad = rank - s.len();
        if i < pad {
            1
        } else {
            s[i - pad]
        }
    };
    let out: Vec<usize> = (0..rank).map(|i| at(a, i).max(at(b, i))).collect();
    for s in [a, b] {
        let lead = s.iter().take_while(|&&e| e == 1).count();
        let core = &s[lead..];
        if core != &out[rank - core.len()..] {
            return Err(Error::Shape(format!(
                "{op}: shapes {} and {} are not broadcast-compatible",
                shape_str(a),
                shape_str(b)
            )));
        }
    }
    Ok(out)
}
