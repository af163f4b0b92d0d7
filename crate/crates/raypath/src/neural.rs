//! Minimal dense-network kernel: parameter containers, forward passes, exact
//! reverse-mode gradients, and the Adam optimizer.
//!
//! Everything runs in f64 on vectors and matrices small enough that a plain
//! Wengert tape over vector-valued operations is both fast enough and easy to
//! verify against finite differences. The tape records the handful of
//! operations the sampler model needs (dense layers, relu/tanh, exp, clamp,
//! log, concatenation, mean pooling, sums, squares) and nothing else.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite gradient in parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("backward requires a scalar loss node (got length {len})")]
    NonScalarLoss { len: usize },
    #[error("unknown parameter {0} in checkpoint")]
    UnknownParam(String),
    #[error("checkpoint missing parameter {0}")]
    MissingParam(String),
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint parse error: {0}")]
    Parse(#[from] serde_json::Error),
}

/// Dense row-major matrix. Bias vectors are stored as `rows x 1` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    /// y = A x
    fn matvec(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (r, out) in y.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            *out = row.iter().zip(x.iter()).map(|(a, b)| a * b).sum();
        }
    }

    /// y += A^T x
    fn matvec_transpose_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.rows);
        debug_assert_eq!(y.len(), self.cols);
        for (r, &xr) in x.iter().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (yc, &a) in y.iter_mut().zip(row.iter()) {
                *yc += a * xr;
            }
        }
    }

    /// self += a b^T (outer product accumulate)
    fn outer_acc(&mut self, a: &[f64], b: &[f64]) {
        debug_assert_eq!(a.len(), self.rows);
        debug_assert_eq!(b.len(), self.cols);
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b.iter()) {
                *w += ar * bc;
            }
        }
    }
}

/// Handle into a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

/// Named, ordered collection of learnable matrices.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    names: Vec<String>,
    mats: Vec<Matrix>,
}

impl ParamSet {
    pub fn len(&self) -> usize {
        self.mats.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mats.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.mats[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(|s| s.as_str()).zip(self.mats.iter())
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.mats.len()).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.mats.iter().map(|m| m.data.len()).sum()
    }

    /// Parameters as name -> nested row arrays, for checkpoints.
    pub fn to_nested(&self) -> BTreeMap<String, Vec<Vec<f64>>> {
        self.iter()
            .map(|(name, m)| {
                let rows = m
                    .data
                    .chunks(m.cols)
                    .map(|row| row.to_vec())
                    .collect::<Vec<_>>();
                (name.to_string(), rows)
            })
            .collect()
    }

    /// Overwrites every parameter from the nested map, checking names and
    /// shapes both ways.
    pub fn fill_from_nested(
        &mut self,
        map: &BTreeMap<String, Vec<Vec<f64>>>,
    ) -> Result<(), NeuralError> {
        for name in map.keys() {
            if !self.names.iter().any(|n| n == name) {
                return Err(NeuralError::UnknownParam(name.clone()));
            }
        }
        for (name, mat) in self.names.iter().zip(self.mats.iter_mut()) {
            let rows = map
                .get(name)
                .ok_or_else(|| NeuralError::MissingParam(name.clone()))?;
            if rows.len() != mat.rows || rows.iter().any(|r| r.len() != mat.cols) {
                return Err(NeuralError::ShapeMismatch(format!(
                    "parameter {name}: expected {}x{}",
                    mat.rows, mat.cols
                )));
            }
            for (r, row) in rows.iter().enumerate() {
                mat.data[r * mat.cols..(r + 1) * mat.cols].copy_from_slice(row);
            }
        }
        Ok(())
    }
}

/// Per-parameter gradients, shapes mirroring a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub mats: Vec<Matrix>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Grads {
            mats: params
                .mats
                .iter()
                .map(|m| Matrix::zeros(m.rows, m.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.mats[id.0]
    }

    pub fn is_finite(&self) -> bool {
        self.mats
            .iter()
            .all(|m| m.data.iter().all(|v| v.is_finite()))
    }
}

/// Weight initialization schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// U(+-sqrt(6 / fan_in)); variance 2 / fan_in. For relu layers.
    HeUniform,
    /// U(+-sqrt(6 / (fan_in + fan_out))). For tanh layers.
    GlorotUniform,
    Zero,
}

/// Registers parameters in a fixed order, drawing initial values from a
/// seeded stream so the same seed reproduces the same parameters.
pub struct ParamBuilder {
    rng: rand_chacha::ChaCha8Rng,
    set: ParamSet,
}

impl ParamBuilder {
    pub fn new(seed: u64) -> Self {
        use rand::SeedableRng;
        ParamBuilder {
            rng: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
            set: ParamSet::default(),
        }
    }

    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize, init: Init) -> ParamId {
        use rand::Rng;
        debug_assert!(
            !self.set.names.iter().any(|n| n == name),
            "duplicate parameter name {name}"
        );
        let mut m = Matrix::zeros(rows, cols);
        let fan_in = cols as f64;
        let fan_out = rows as f64;
        let limit = match init {
            Init::HeUniform => (6.0 / fan_in).sqrt(),
            Init::GlorotUniform => (6.0 / (fan_in + fan_out)).sqrt(),
            Init::Zero => 0.0,
        };
        if limit > 0.0 {
            for v in m.data.iter_mut() {
                *v = self.rng.gen_range(-limit..limit);
            }
        }
        self.set.names.push(name.to_string());
        self.set.mats.push(m);
        ParamId(self.set.mats.len() - 1)
    }

    pub fn finish(self) -> ParamSet {
        self.set
    }
}

/// Activation applied between (not after) MLP layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

/// One dense layer: references into a [`ParamSet`].
#[derive(Debug, Clone, Copy)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

/// A feed-forward stack of dense layers with a fixed hidden activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub activation: Activation,
}

impl Mlp {
    /// Registers an MLP's parameters: `dims` = [in, hidden.., out].
    pub fn build(
        builder: &mut ParamBuilder,
        prefix: &str,
        dims: &[usize],
        activation: Activation,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let init = match activation {
            Activation::Relu => Init::HeUniform,
            Activation::Tanh => Init::GlorotUniform,
        };
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| DenseLayer {
                weight: builder.matrix(&format!("{prefix}.l{i}.w"), w[1], w[0], init),
                bias: builder.matrix(&format!("{prefix}.l{i}.b"), w[1], 1, Init::Zero),
            })
            .collect();
        Mlp { layers, activation }
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        params.get(self.layers[0].weight).cols
    }

    /// Plain forward pass (no gradient recording).
    pub fn forward(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>, NeuralError> {
        if x.len() != self.input_dim(params) {
            return Err(NeuralError::ShapeMismatch(format!(
                "mlp input length {} != {}",
                x.len(),
                self.input_dim(params)
            )));
        }
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let w = params.get(layer.weight);
            let b = params.get(layer.bias);
            let mut next = vec![0.0; w.rows];
            w.matvec(&cur, &mut next);
            for (n, bv) in next.iter_mut().zip(b.data.iter()) {
                *n += bv;
            }
            if i < last {
                match self.activation {
                    Activation::Relu => next.iter_mut().for_each(|v| *v = v.max(0.0)),
                    Activation::Tanh => next.iter_mut().for_each(|v| *v = v.tanh()),
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Forward pass recorded on a tape.
    pub fn forward_tape(&self, tape: &mut Tape, params: &ParamSet, x: NodeId) -> NodeId {
        let last = self.layers.len() - 1;
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = tape.affine(params, layer.weight, Some(layer.bias), cur);
            if i < last {
                cur = match self.activation {
                    Activation::Relu => tape.relu(cur),
                    Activation::Tanh => tape.tanh(cur),
                };
            }
        }
        cur
    }
}

/// Node handle on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Affine {
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    },
    AddN(Vec<NodeId>),
    Sub(NodeId, NodeId),
    Relu(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Clamp {
        x: NodeId,
        lo: f64,
        hi: f64,
    },
    /// ln(x + shift)
    Log {
        x: NodeId,
        shift: f64,
    },
    Concat(Vec<NodeId>),
    MeanPool(Vec<NodeId>),
    SumEntries(NodeId),
    Square(NodeId),
    Scale {
        x: NodeId,
        c: f64,
    },
}

struct Node {
    op: Op,
    value: Vec<f64>,
}

/// Records vector-valued operations eagerly and replays them in reverse to
/// produce exact gradients of a scalar loss with respect to every parameter.
///
/// Nodes are topologically ordered by construction; parameters referenced by
/// `affine` must not change between the forward pass and `backward`.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    /// Value of a length-1 node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[0]
    }

    fn push(&mut self, op: Op, value: Vec<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, v: Vec<f64>) -> NodeId {
        self.push(Op::Input, v)
    }

    pub fn input_scalar(&mut self, v: f64) -> NodeId {
        self.push(Op::Input, vec![v])
    }

    pub fn affine(
        &mut self,
        params: &ParamSet,
        w: ParamId,
        b: Option<ParamId>,
        x: NodeId,
    ) -> NodeId {
        let wm = params.get(w);
        let xv = &self.nodes[x.0].value;
        assert_eq!(
            wm.cols,
            xv.len(),
            "affine: weight cols {} != input length {}",
            wm.cols,
            xv.len()
        );
        let mut y = vec![0.0; wm.rows];
        wm.matvec(xv, &mut y);
        if let Some(b) = b {
            let bm = params.get(b);
            assert_eq!(bm.rows, wm.rows, "affine: bias length mismatch");
            for (yv, bv) in y.iter_mut().zip(bm.data.iter()) {
                *yv += bv;
            }
        }
        self.push(Op::Affine { w, b, x }, y)
    }

    pub fn add_n(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "add_n of nothing");
        let len = self.nodes[xs[0].0].value.len();
        let mut y = vec![0.0; len];
        for &x in xs {
            let xv = &self.nodes[x.0].value;
            assert_eq!(xv.len(), len, "add_n: length mismatch");
            for (a, b) in y.iter_mut().zip(xv.iter()) {
                *a += b;
            }
        }
        self.push(Op::AddN(xs.to_vec()), y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        assert_eq!(av.len(), bv.len(), "sub: length mismatch");
        let y = av.iter().zip(bv.iter()).map(|(x, y)| x - y).collect();
        self.push(Op::Sub(a, b), y)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v.max(0.0)).collect();
        self.push(Op::Relu(x), y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v.tanh()).collect();
        self.push(Op::Tanh(x), y)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v.exp()).collect();
        self.push(Op::Exp(x), y)
    }

    pub fn clamp(&mut self, x: NodeId, lo: f64, hi: f64) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v.clamp(lo, hi)).collect();
        self.push(Op::Clamp { x, lo, hi }, y)
    }

    pub fn log_shift(&mut self, x: NodeId, shift: f64) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| (v + shift).ln()).collect();
        self.push(Op::Log { x, shift }, y)
    }

    pub fn concat(&mut self, xs: &[NodeId]) -> NodeId {
        let mut y = Vec::new();
        for &x in xs {
            y.extend_from_slice(&self.nodes[x.0].value);
        }
        self.push(Op::Concat(xs.to_vec()), y)
    }

    /// Elementwise mean of same-length vectors. Each entry is summed in a
    /// canonical (sorted) order, so permuting the inputs leaves the pooled
    /// value bitwise unchanged; set pooling is where permutation
    /// equivariance would otherwise leak through round-off.
    pub fn mean_pool(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty(), "mean_pool of nothing");
        let len = self.nodes[xs[0].0].value.len();
        for &x in xs {
            assert_eq!(self.nodes[x.0].value.len(), len, "mean_pool: length mismatch");
        }
        let inv = 1.0 / xs.len() as f64;
        let mut column = Vec::with_capacity(xs.len());
        let y = (0..len)
            .map(|j| {
                column.clear();
                column.extend(xs.iter().map(|&x| self.nodes[x.0].value[j]));
                column.sort_unstable_by(f64::total_cmp);
                column.iter().sum::<f64>() * inv
            })
            .collect();
        self.push(Op::MeanPool(xs.to_vec()), y)
    }

    pub fn sum_entries(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        self.push(Op::SumEntries(x), vec![s])
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v * v).collect();
        self.push(Op::Square(x), y)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let y = self.nodes[x.0].value.iter().map(|v| v * c).collect();
        self.push(Op::Scale { x, c }, y)
    }

    /// Reverse pass from a scalar loss node. Returns gradients for every
    /// parameter reachable from the loss; unreachable ones get exact zeros.
    pub fn backward(&self, loss: NodeId, params: &ParamSet) -> Result<Grads, NeuralError> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(NeuralError::NonScalarLoss {
                len: self.nodes[loss.0].value.len(),
            });
        }
        let mut grads = Grads::zeros_like(params);
        let mut adjoint: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        adjoint[loss.0] = Some(vec![1.0]);

        // Lazily allocate an adjoint buffer and add into it.
        fn add_into(slot: &mut Option<Vec<f64>>, len: usize, f: impl Fn(&mut [f64])) {
            let buf = slot.get_or_insert_with(|| vec![0.0; len]);
            f(buf);
        }

        for id in (0..=loss.0).rev() {
            let Some(dy) = adjoint[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            match &node.op {
                Op::Input => {}
                Op::Affine { w, b, x } => {
                    let xv = &self.nodes[x.0].value;
                    grads.mats[w.0].outer_acc(&dy, xv);
                    if let Some(b) = b {
                        for (g, d) in grads.mats[b.0].data.iter_mut().zip(dy.iter()) {
                            *g += d;
                        }
                    }
                    let wm = params.get(*w);
                    add_into(&mut adjoint[x.0], xv.len(), |buf| {
                        wm.matvec_transpose_acc(&dy, buf);
                    });
                }
                Op::AddN(xs) => {
                    for &x in xs {
                        add_into(&mut adjoint[x.0], dy.len(), |buf| {
                            for (a, d) in buf.iter_mut().zip(dy.iter()) {
                                *a += d;
                            }
                        });
                    }
                }
                Op::Sub(a, b) => {
                    add_into(&mut adjoint[a.0], dy.len(), |buf| {
                        for (v, d) in buf.iter_mut().zip(dy.iter()) {
                            *v += d;
                        }
                    });
                    add_into(&mut adjoint[b.0], dy.len(), |buf| {
                        for (v, d) in buf.iter_mut().zip(dy.iter()) {
                            *v -= d;
                        }
                    });
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut adjoint[x.0], xv.len(), |buf| {
                        for ((v, d), xi) in buf.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            if *xi > 0.0 {
                                *v += d;
                            }
                        }
                    });
                }
                Op::Tanh(x) => {
                    let yv = &node.value;
                    add_into(&mut adjoint[x.0], yv.len(), |buf| {
                        for ((v, d), yi) in buf.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *v += d * (1.0 - yi * yi);
                        }
                    });
                }
                Op::Exp(x) => {
                    let yv = &node.value;
                    add_into(&mut adjoint[x.0], yv.len(), |buf| {
                        for ((v, d), yi) in buf.iter_mut().zip(dy.iter()).zip(yv.iter()) {
                            *v += d * yi;
                        }
                    });
                }
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut adjoint[x.0], xv.len(), |buf| {
                        for ((v, d), xi) in buf.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            if *xi >= *lo && *xi <= *hi {
                                *v += d;
                            }
                        }
                    });
                }
                Op::Log { x, shift } => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut adjoint[x.0], xv.len(), |buf| {
                        for ((v, d), xi) in buf.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            *v += d / (xi + shift);
                        }
                    });
                }
                Op::Concat(xs) => {
                    let mut offset = 0;
                    for &x in xs {
                        let len = self.nodes[x.0].value.len();
                        let piece = &dy[offset..offset + len];
                        add_into(&mut adjoint[x.0], len, |buf| {
                            for (v, d) in buf.iter_mut().zip(piece.iter()) {
                                *v += d;
                            }
                        });
                        offset += len;
                    }
                }
                Op::MeanPool(xs) => {
                    let inv = 1.0 / xs.len() as f64;
                    for &x in xs {
                        add_into(&mut adjoint[x.0], dy.len(), |buf| {
                            for (v, d) in buf.iter_mut().zip(dy.iter()) {
                                *v += d * inv;
                            }
                        });
                    }
                }
                Op::SumEntries(x) => {
                    let len = self.nodes[x.0].value.len();
                    let d = dy[0];
                    add_into(&mut adjoint[x.0], len, |buf| {
                        for v in buf.iter_mut() {
                            *v += d;
                        }
                    });
                }
                Op::Square(x) => {
                    let xv = &self.nodes[x.0].value;
                    add_into(&mut adjoint[x.0], xv.len(), |buf| {
                        for ((v, d), xi) in buf.iter_mut().zip(dy.iter()).zip(xv.iter()) {
                            *v += 2.0 * d * xi;
                        }
                    });
                }
                Op::Scale { x, c } => {
                    add_into(&mut adjoint[x.0], dy.len(), |buf| {
                        for (v, d) in buf.iter_mut().zip(dy.iter()) {
                            *v += d * c;
                        }
                    });
                }
            }
        }
        Ok(grads)
    }
}

/// Adam optimizer state: one first/second moment buffer per parameter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(lr: f64, params: &ParamSet) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params
                .mats
                .iter()
                .map(|p| Matrix::zeros(p.rows, p.cols))
                .collect(),
            v: params
                .mats
                .iter()
                .map(|p| Matrix::zeros(p.rows, p.cols))
                .collect(),
        }
    }

    /// One bias-corrected Adam update. A non-finite gradient aborts the step
    /// before touching any state, so the caller can checkpoint and report.
    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<(), NeuralError> {
        for (idx, g) in grads.mats.iter().enumerate() {
            if !g.data.iter().all(|v| v.is_finite()) {
                return Err(NeuralError::NonFiniteGradient {
                    name: params.names[idx].clone(),
                });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .mats
            .iter_mut()
            .zip(grads.mats.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                m.data[i] = self.beta1 * m.data[i] + (1.0 - self.beta1) * gi;
                v.data[i] = self.beta2 * v.data[i] + (1.0 - self.beta2) * gi * gi;
                let m_hat = m.data[i] / bc1;
                let v_hat = v.data[i] / bc2;
                p.data[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamCheckpoint {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: BTreeMap<String, Vec<Vec<f64>>>,
    pub v: BTreeMap<String, Vec<Vec<f64>>>,
}

/// On-disk training state: `{"config": .., "params": .., "adam": .., "step": n}`.
///
/// Parameter names are stable identifiers (`<block>.l<i>.w`, `.b`, and the
/// recurrent-cell names); matrices are nested row arrays of f64. The map is
/// ordered, so serialization is byte-deterministic.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub params: BTreeMap<String, Vec<Vec<f64>>>,
    pub adam: Option<AdamCheckpoint>,
    pub step: u64,
}

impl Checkpoint {
    pub fn new(
        config: serde_json::Value,
        params: &ParamSet,
        adam: Option<&AdamState>,
        step: u64,
    ) -> Self {
        let to_nested = |mats: &[Matrix]| -> BTreeMap<String, Vec<Vec<f64>>> {
            params
                .names
                .iter()
                .zip(mats.iter())
                .map(|(n, m)| {
                    (
                        n.clone(),
                        m.data.chunks(m.cols).map(|r| r.to_vec()).collect(),
                    )
                })
                .collect()
        };
        Checkpoint {
            config,
            params: params.to_nested(),
            adam: adam.map(|a| AdamCheckpoint {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                m: to_nested(&a.m),
                v: to_nested(&a.v),
            }),
            step,
        }
    }

    /// Restores Adam state onto a freshly built optimizer for `params`.
    pub fn restore_adam(&self, params: &ParamSet) -> Result<Option<AdamState>, NeuralError> {
        let Some(ac) = &self.adam else {
            return Ok(None);
        };
        let mut state = AdamState::new(ac.lr, params);
        state.beta1 = ac.beta1;
        state.beta2 = ac.beta2;
        state.eps = ac.eps;
        state.step = ac.step;
        let fill = |mats: &mut [Matrix],
                    src: &BTreeMap<String, Vec<Vec<f64>>>|
         -> Result<(), NeuralError> {
            for (name, m) in params.names.iter().zip(mats.iter_mut()) {
                let rows = src
                    .get(name)
                    .ok_or_else(|| NeuralError::MissingParam(name.clone()))?;
                if rows.len() != m.rows || rows.iter().any(|r| r.len() != m.cols) {
                    return Err(NeuralError::ShapeMismatch(format!("adam moment {name}")));
                }
                for (r, row) in rows.iter().enumerate() {
                    m.data[r * m.cols..(r + 1) * m.cols].copy_from_slice(row);
                }
            }
            Ok(())
        };
        fill(&mut state.m, &ac.m)?;
        fill(&mut state.v, &ac.v)?;
        Ok(Some(state))
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<(), NeuralError> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self, NeuralError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn build_single_layer(w: &[[f64; 2]; 2], b: &[f64; 2]) -> (ParamSet, Mlp) {
        let mut builder = ParamBuilder::new(0);
        let mlp = Mlp::build(&mut builder, "net", &[2, 2], Activation::Relu);
        let mut params = builder.finish();
        for (r, row) in w.iter().enumerate() {
            for (c, v) in row.iter().enumerate() {
                params.get_mut(mlp.layers[0].weight).set(r, c, *v);
            }
        }
        for (r, v) in b.iter().enumerate() {
            params.get_mut(mlp.layers[0].bias).set(r, 0, *v);
        }
        (params, mlp)
    }

    #[test]
    fn mlp_identity_layer_has_no_final_activation() {
        let (params, mlp) = build_single_layer(&[[1.0, 0.0], [0.0, 1.0]], &[0.0, 0.0]);
        let y = mlp.forward(&params, &[1.0, -1.0]).unwrap();
        assert_eq!(y, vec![1.0, -1.0]);
    }

    #[test]
    fn mlp_zero_weights_yield_bias() {
        let (params, mlp) = build_single_layer(&[[0.0, 0.0], [0.0, 0.0]], &[0.5, -2.0]);
        let y = mlp.forward(&params, &[3.0, 4.0]).unwrap();
        assert_eq!(y, vec![0.5, -2.0]);
    }

    #[test]
    fn mlp_two_layer_hand_computed() {
        // W1 = [[1,2],[0,1]], b1 = (0.5,-0.5), relu between layers,
        // W2 = [[1,-1]], b2 = (0.25). x = (1,1):
        // h = (1+2+0.5, 1-0.5) = (3.5, 0.5); relu unchanged;
        // y = 3.5 - 0.5 + 0.25 = 3.25.
        let mut builder = ParamBuilder::new(0);
        let mlp = Mlp::build(&mut builder, "net", &[2, 2, 1], Activation::Relu);
        let mut params = builder.finish();
        let w1 = mlp.layers[0].weight;
        params.get_mut(w1).set(0, 0, 1.0);
        params.get_mut(w1).set(0, 1, 2.0);
        params.get_mut(w1).set(1, 0, 0.0);
        params.get_mut(w1).set(1, 1, 1.0);
        params.get_mut(mlp.layers[0].bias).set(0, 0, 0.5);
        params.get_mut(mlp.layers[0].bias).set(1, 0, -0.5);
        let w2 = mlp.layers[1].weight;
        params.get_mut(w2).set(0, 0, 1.0);
        params.get_mut(w2).set(0, 1, -1.0);
        params.get_mut(mlp.layers[1].bias).set(0, 0, 0.25);
        let y = mlp.forward(&params, &[1.0, 1.0]).unwrap();
        assert!((y[0] - 3.25).abs() < 1e-15);
    }

    #[test]
    fn mlp_rejects_wrong_input_length() {
        let (params, mlp) = build_single_layer(&[[1.0, 0.0], [0.0, 1.0]], &[0.0, 0.0]);
        assert!(matches!(
            mlp.forward(&params, &[1.0]),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn forward_tape_matches_plain_forward_bitwise() {
        let mut builder = ParamBuilder::new(42);
        let mlp = Mlp::build(&mut builder, "net", &[3, 5, 5, 2], Activation::Relu);
        let params = builder.finish();
        let x = vec![0.3, -1.2, 0.7];
        let plain = mlp.forward(&params, &x).unwrap();
        let mut tape = Tape::new();
        let xn = tape.input(x);
        let yn = mlp.forward_tape(&mut tape, &params, xn);
        assert_eq!(tape.value(yn), plain.as_slice());
    }

    /// Gradient of sum(square(W x + b)) is 2 y x^T for W, 2 y for b.
    #[test]
    fn backward_single_layer_symbolic() {
        let (params, mlp) = build_single_layer(&[[1.0, 2.0], [-0.5, 0.25]], &[0.1, -0.2]);
        let x = vec![0.7, -1.3];
        let mut tape = Tape::new();
        let xn = tape.input(x.clone());
        let yn = tape.affine(&params, mlp.layers[0].weight, Some(mlp.layers[0].bias), xn);
        let sq = tape.square(yn);
        let loss = tape.sum_entries(sq);
        let grads = tape.backward(loss, &params).unwrap();

        let y = tape.value(yn).to_vec();
        let gw = grads.get(mlp.layers[0].weight);
        let gb = grads.get(mlp.layers[0].bias);
        for r in 0..2 {
            for c in 0..2 {
                let expected = 2.0 * y[r] * x[c];
                assert!((gw.get(r, c) - expected).abs() < 1e-12);
            }
            assert!((gb.get(r, 0) - 2.0 * y[r]).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_gives_zero_for_unused_params() {
        let mut builder = ParamBuilder::new(1);
        let used = Mlp::build(&mut builder, "used", &[2, 1], Activation::Relu);
        let unused = Mlp::build(&mut builder, "unused", &[2, 1], Activation::Relu);
        let params = builder.finish();
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0]);
        let y = used.forward_tape(&mut tape, &params, x);
        let loss = tape.sum_entries(y);
        let grads = tape.backward(loss, &params).unwrap();
        assert!(grads.get(unused.layers[0].weight).data.iter().all(|&v| v == 0.0));
        assert!(grads.get(unused.layers[0].bias).data.iter().all(|&v| v == 0.0));
        assert!(grads.get(used.layers[0].weight).data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn backward_rejects_vector_loss() {
        let mut tape = Tape::new();
        let x = tape.input(vec![1.0, 2.0]);
        let y = tape.square(x);
        let params = ParamSet::default();
        assert!(matches!(
            tape.backward(y, &params),
            Err(NeuralError::NonScalarLoss { len: 2 })
        ));
    }

    /// Central finite differences against the tape over a composite using
    /// every recorded op.
    #[test]
    fn gradients_match_finite_differences() {
        use rand::{Rng, SeedableRng};
        let build = |params: &ParamSet, mlp: &Mlp, cell_w: ParamId| -> (Tape, NodeId) {
            let mut tape = Tape::new();
            let x1 = tape.input(vec![0.3, -0.8, 1.4]);
            let x2 = tape.input(vec![-0.6, 0.9, 0.2]);
            let h1 = mlp.forward_tape(&mut tape, params, x1);
            let h2 = mlp.forward_tape(&mut tape, params, x2);
            let pooled = tape.mean_pool(&[h1, h2]);
            let extra = tape.affine(params, cell_w, None, pooled);
            let t = tape.tanh(extra);
            let cat = tape.concat(&[pooled, t]);
            let clamped = tape.clamp(cat, -2.0, 2.0);
            let e = tape.exp(clamped);
            let lg = tape.log_shift(e, 1e-3);
            let summed = tape.add_n(&[e, lg]);
            let target = tape.input(vec![0.5; 8]);
            let diff = tape.sub(summed, target);
            let sq = tape.square(diff);
            let total = tape.sum_entries(sq);
            let loss = tape.scale(total, 0.25);
            (tape, loss)
        };

        let mut builder = ParamBuilder::new(7);
        let mlp = Mlp::build(&mut builder, "enc", &[3, 6, 4], Activation::Relu);
        let cell_w = builder.matrix("cell.w", 4, 4, Init::GlorotUniform);
        let mut params = builder.finish();

        let (tape, loss) = build(&params, &mlp, cell_w);
        let grads = tape.backward(loss, &params).unwrap();

        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for _ in 0..100 {
            let pid = rng.gen_range(0..params.len());
            let i = rng.gen_range(0..params.mats[pid].data.len());
            let orig = params.mats[pid].data[i];

            params.mats[pid].data[i] = orig + h;
            let (tp, lp) = build(&params, &mlp, cell_w);
            let fp = tp.scalar(lp);
            params.mats[pid].data[i] = orig - h;
            let (tm, lm) = build(&params, &mlp, cell_w);
            let fm = tm.scalar(lm);
            params.mats[pid].data[i] = orig;

            let fd = (fp - fm) / (2.0 * h);
            let an = grads.mats[pid].data[i];
            let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-6);
            max_rel = max_rel.max(rel);
        }
        assert!(max_rel < 1e-4, "max relative error {max_rel}");
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut builder = ParamBuilder::new(3);
        let _ = Mlp::build(&mut builder, "net", &[4, 4], Activation::Relu);
        let mut params = builder.finish();
        let before = params.clone();
        let grads = Grads::zeros_like(&params);
        let mut adam = AdamState::new(1e-3, &params);
        adam.step(&mut params, &grads).unwrap();
        assert_eq!(adam.step, 1);
        for (a, b) in params.mats.iter().zip(before.mats.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn adam_first_step_magnitude_is_lr() {
        let mut builder = ParamBuilder::new(4);
        let w = builder.matrix("w", 1, 3, Init::Zero);
        let mut params = builder.finish();
        let mut grads = Grads::zeros_like(&params);
        grads.mats[w.0].data.copy_from_slice(&[0.3, -7.0, 1e-3]);
        let lr = 1e-2;
        let mut adam = AdamState::new(lr, &params);
        adam.step(&mut params, &grads).unwrap();
        for (&p, &g) in params.get(w).data.iter().zip([0.3f64, -7.0, 1e-3].iter()) {
            // First step: m_hat = g, v_hat = g^2, update = -lr * g/(|g|+eps),
            // so the magnitude is lr up to eps/|g| relative slack.
            assert!((p.abs() - lr).abs() < 1e-4 * lr, "p={p}");
            assert!(p.signum() == -g.signum());
        }
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut builder = ParamBuilder::new(4);
        let w = builder.matrix("w", 1, 1, Init::Zero);
        let mut params = builder.finish();
        let before = params.clone();
        let mut grads = Grads::zeros_like(&params);
        grads.mats[w.0].data[0] = f64::NAN;
        let mut adam = AdamState::new(1e-3, &params);
        assert!(matches!(
            adam.step(&mut params, &grads),
            Err(NeuralError::NonFiniteGradient { .. })
        ));
        assert_eq!(adam.step, 0);
        assert_eq!(params.get(w).data, before.get(w).data);
    }

    #[test]
    fn adam_converges_on_convex_quadratic() {
        // f(t) = 0.5 (t0 - a0)^2 + 2 (t1 - a1)^2, minimizer a.
        let a = [0.3, -0.5];
        let mut builder = ParamBuilder::new(5);
        let w = builder.matrix("theta", 1, 2, Init::Zero);
        let mut params = builder.finish();
        let mut adam = AdamState::new(1e-2, &params);
        for _ in 0..200 {
            let t = params.get(w).data.clone();
            let mut grads = Grads::zeros_like(&params);
            grads.mats[w.0].data[0] = t[0] - a[0];
            grads.mats[w.0].data[1] = 4.0 * (t[1] - a[1]);
            adam.step(&mut params, &grads).unwrap();
        }
        let t = params.get(w).data.clone();
        let dist = ((t[0] - a[0]).powi(2) + (t[1] - a[1]).powi(2)).sqrt();
        assert!(dist < 1e-3, "distance to minimizer {dist}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let make = |seed| {
            let mut b = ParamBuilder::new(seed);
            let _ = Mlp::build(&mut b, "net", &[8, 8, 8], Activation::Relu);
            b.finish()
        };
        let a = make(11);
        let b = make(11);
        let c = make(12);
        for (x, y) in a.mats.iter().zip(b.mats.iter()) {
            assert_eq!(x.data, y.data);
        }
        assert!(a.mats[0].data != c.mats[0].data);
    }

    #[test]
    fn he_init_variance_near_target() {
        let mut b = ParamBuilder::new(123);
        let w = b.matrix("w", 500, 500, Init::HeUniform);
        let params = b.finish();
        let data = &params.get(w).data;
        let mean: f64 = data.iter().sum::<f64>() / data.len() as f64;
        let var: f64 = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
            / data.len() as f64;
        let target = 2.0 / 500.0;
        assert!((var - target).abs() < 0.2 * target, "var {var} target {target}");
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let mut b = ParamBuilder::new(77);
        let _ = Mlp::build(&mut b, "net", &[3, 4, 2], Activation::Relu);
        let params = b.finish();
        let adam = AdamState::new(3e-5, &params);
        let ckpt = Checkpoint::new(serde_json::json!({"d": 4}), &params, Some(&adam), 17);
        let text = serde_json::to_string(&ckpt).unwrap();
        let reparsed: Checkpoint = serde_json::from_str(&text).unwrap();
        assert_eq!(serde_json::to_string(&reparsed).unwrap(), text);

        // And the parameters survive exactly.
        let mut restored = {
            let mut b = ParamBuilder::new(0);
            let _ = Mlp::build(&mut b, "net", &[3, 4, 2], Activation::Relu);
            b.finish()
        };
        restored.fill_from_nested(&reparsed.params).unwrap();
        for (a, b) in params.mats.iter().zip(restored.mats.iter()) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn checkpoint_restores_adam_state() {
        let mut b = ParamBuilder::new(8);
        let w = b.matrix("w", 2, 2, Init::HeUniform);
        let mut params = b.finish();
        let mut adam = AdamState::new(1e-3, &params);
        let mut grads = Grads::zeros_like(&params);
        grads.mats[w.0].data.copy_from_slice(&[0.1, -0.2, 0.3, -0.4]);
        for _ in 0..3 {
            adam.step(&mut params, &grads).unwrap();
        }
        let ckpt = Checkpoint::new(serde_json::Value::Null, &params, Some(&adam), 3);
        let restored = ckpt.restore_adam(&params).unwrap().unwrap();
        assert_eq!(restored.step, 3);
        assert_eq!(restored.lr, adam.lr);

        // Continuing from the restored state matches continuing in place.
        let mut p1 = params.clone();
        let mut p2 = params.clone();
        let mut a1 = adam;
        let mut a2 = restored;
        a1.step(&mut p1, &grads).unwrap();
        a2.step(&mut p2, &grads).unwrap();
        for (x, y) in p1.mats.iter().zip(p2.mats.iter()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn checkpoint_rejects_shape_mismatch() {
        let mut b = ParamBuilder::new(0);
        let _ = Mlp::build(&mut b, "net", &[3, 2], Activation::Relu);
        let params = b.finish();
        let mut nested = params.to_nested();
        nested.get_mut("net.l0.w").unwrap().pop();
        let mut target = {
            let mut b = ParamBuilder::new(0);
            let _ = Mlp::build(&mut b, "net", &[3, 2], Activation::Relu);
            b.finish()
        };
        assert!(matches!(
            target.fill_from_nested(&nested),
            Err(NeuralError::ShapeMismatch(_))
        ));
    }
}
