//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every value is a dense `[rows × cols]` matrix of `f64`; scalars are `1×1`
//! and (row) vectors are `1×n`. Nodes are appended in evaluation order, so a
//! node's parents always precede it and a single reverse sweep computes exact
//! gradients. The op set is deliberately small: what the encoders, the VQ
//! bottleneck, the contrastive heads, and the decoder actually need, plus the
//! gradient-routing primitives (`stop_gradient`, `straight_through`) whose
//! backward behaviour is part of the model's contract.

use ndarray::{concatenate, s, Array2, Axis};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `a · b`
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulNT(NodeId, NodeId),
    /// `[n×m] + [1×m]`, broadcast over rows.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Neg(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Abs(NodeId),
    Clamp(NodeId, f64, f64),
    /// Forward identity, backward zero.
    StopGradient,
    /// Forward value of the quantized side; the incoming gradient is
    /// delivered to `grad_to` unchanged and the quantized side receives none.
    StraightThrough { grad_to: NodeId },
    SumAll(NodeId),
    /// Row-wise softmax.
    SoftmaxRows(NodeId),
    /// Row-wise softmax over columns `j ≤ i` only; entries with `j > i` are
    /// exactly zero (the causal attention mask).
    CausalSoftmaxRows(NodeId),
    /// `[1×n] → [1×1]`, numerically stable.
    LogSumExpRow(NodeId),
    /// Row-wise layer norm with learned scale/shift (`[1×m]` each). Rows of
    /// width 1 are passed through the affine map only: normalizing a single
    /// feature would erase the value.
    LayerNormRows { x: NodeId, scale: NodeId, shift: NodeId },
    SliceRows(NodeId, usize, usize),
    SliceCols(NodeId, usize, usize),
    ConcatRows(Vec<NodeId>),
    ConcatCols(Vec<NodeId>),
    /// Select rows of the parent by index; backward scatter-adds.
    GatherRows(NodeId, Vec<usize>),
    /// Move rows down by `s`, zero-filling the top (the causal padding shift).
    ShiftRowsDown(NodeId, usize),
    Reshape(NodeId),
}

/// Frozen state of one gradient-routing node, captured in creation order.
///
/// `stop_gradient` and `straight_through` have backward rules that are not
/// the true derivative of their forward value (that is their purpose). The
/// function those backward rules *do* differentiate is the linearization in
/// which every stop-gradient value and every quantization offset `ẑ − z` is
/// frozen at the base point. Gradient-check suites capture that state here
/// and replay it, so finite differences probe exactly the function the
/// backward pass claims to differentiate; all other paths are unaffected.
#[derive(Debug, Clone)]
pub enum RoutingPin {
    /// Frozen `stop_gradient` output.
    Stop(Array2<f64>),
    /// Frozen quantization offset `ẑ − z`.
    Straight(Array2<f64>),
}

/// Tape of nodes; cleared and refilled once per mini-batch.
pub struct Graph {
    values: Vec<Array2<f64>>,
    ops: Vec<Op>,
    requires: Vec<bool>,
    grads: Vec<Option<Array2<f64>>>,
    recording_routing: bool,
    routing_record: Vec<RoutingPin>,
    routing_pins: Option<std::collections::VecDeque<RoutingPin>>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            values: Vec::new(),
            ops: Vec::new(),
            requires: Vec::new(),
            grads: Vec::new(),
            recording_routing: false,
            routing_record: Vec::new(),
            routing_pins: None,
        }
    }

    /// Drop all nodes but keep allocation capacity.
    pub fn clear(&mut self) {
        self.values.clear();
        self.ops.clear();
        self.requires.clear();
        self.grads.clear();
        self.routing_record.clear();
        self.routing_pins = None;
    }

    /// Record the state of every routing node built from now on.
    pub fn record_routing(&mut self, on: bool) {
        self.recording_routing = on;
    }

    /// The routing states recorded by the last build.
    pub fn take_routing_record(&mut self) -> Vec<RoutingPin> {
        std::mem::take(&mut self.routing_record)
    }

    /// Replay frozen routing states, consumed in node-creation order.
    pub fn set_routing_pins(&mut self, pins: Vec<RoutingPin>) {
        self.routing_pins = Some(pins.into());
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, requires: bool) -> NodeId {
        self.values.push(value);
        self.ops.push(op);
        self.requires.push(requires);
        self.grads.push(None);
        NodeId(self.ops.len() - 1)
    }

    fn req(&self, id: NodeId) -> bool {
        self.requires[id.0]
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        &self.values[id.0]
    }

    /// Scalar value of a `1×1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.values[id.0].dim(), (1, 1));
        self.values[id.0][(0, 0)]
    }

    /// Gradient accumulated at `id` by the last `backward` call, if any.
    pub fn grad(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.grads[id.0].as_ref()
    }

    // ---- leaves ----

    /// Differentiable leaf (parameters, and inputs under test).
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable leaf (data, covariates, noise draws).
    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn constant_scalar(&mut self, v: f64) -> NodeId {
        self.constant(Array2::from_elem((1, 1), v))
    }

    // ---- elementwise / arithmetic ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] + &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Add(a, b), r)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] - &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Sub(a, b), r)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.values[a.0] * &self.values[b.0];
        let r = self.req(a) || self.req(b);
        self.push(v, Op::Mul(a, b), r)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].dot(&self.values[b.0]);
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MatMul(a, b), r)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.values[a.0].dot(&self.values[b.0].t());
        let r = self.req(a) || self.req(b);
        self.push(v, Op::MatMulNT(a, b), r)
    }

    /// Row-broadcast add: `x [n×m] + b [1×m]`.
    pub fn add_row(&mut self, x: NodeId, b: NodeId) -> NodeId {
        let bv = self.values[b.0].row(0).to_owned();
        let v = &self.values[x.0] + &bv;
        let r = self.req(x) || self.req(b);
        self.push(v, Op::AddRow(x, b), r)
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.values[a.0] * c;
        let r = self.req(a);
        self.push(v, Op::Scale(a, c), r)
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let v = &self.values[a.0] + c;
        let r = self.req(a);
        self.push(v, Op::AddScalar(a), r)
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        let v = -&self.values[a.0];
        let r = self.req(a);
        self.push(v, Op::Neg(a), r)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| x.max(0.0));
        let r = self.req(a);
        self.push(v, Op::Relu(a), r)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let r = self.req(a);
        self.push(v, Op::Sigmoid(a), r)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(f64::tanh);
        let r = self.req(a);
        self.push(v, Op::Tanh(a), r)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(f64::exp);
        let r = self.req(a);
        self.push(v, Op::Exp(a), r)
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        let v = self.values[a.0].mapv(f64::abs);
        let r = self.req(a);
        self.push(v, Op::Abs(a), r)
    }

    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.values[a.0].mapv(|x| x.clamp(lo, hi));
        let r = self.req(a);
        self.push(v, Op::Clamp(a, lo, hi), r)
    }

    // ---- gradient routing ----

    fn next_pin(&mut self) -> Option<RoutingPin> {
        self.routing_pins.as_mut().and_then(|q| q.pop_front())
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        let v = match self.next_pin() {
            Some(RoutingPin::Stop(frozen)) => frozen,
            Some(RoutingPin::Straight(_)) => panic!("routing pin order mismatch"),
            None => self.values[a.0].clone(),
        };
        if self.recording_routing {
            self.routing_record.push(RoutingPin::Stop(v.clone()));
        }
        self.push(v, Op::StopGradient, false)
    }

    /// Quantization pass-through: the node's value is `value_of` (the
    /// quantized rows) while the backward gradient is delivered to `grad_to`
    /// (the pre-quantization encoder output) unchanged, element for element.
    pub fn straight_through(&mut self, grad_to: NodeId, value_of: NodeId) -> NodeId {
        assert_eq!(
            self.values[grad_to.0].dim(),
            self.values[value_of.0].dim(),
            "straight_through: shape mismatch"
        );
        let v = match self.next_pin() {
            Some(RoutingPin::Straight(offset)) => &self.values[grad_to.0] + &offset,
            Some(RoutingPin::Stop(_)) => panic!("routing pin order mismatch"),
            None => self.values[value_of.0].clone(),
        };
        if self.recording_routing {
            let offset = &self.values[value_of.0] - &self.values[grad_to.0];
            self.routing_record.push(RoutingPin::Straight(offset));
        }
        let r = self.req(grad_to);
        self.push(v, Op::StraightThrough { grad_to }, r)
    }

    // ---- reductions / normalizations ----

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Array2::from_elem((1, 1), self.values[a.0].sum());
        let r = self.req(a);
        self.push(v, Op::SumAll(a), r)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.values[a.0].len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = softmax_rows_value(&self.values[a.0]);
        let r = self.req(a);
        self.push(v, Op::SoftmaxRows(a), r)
    }

    pub fn causal_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        assert_eq!(x.nrows(), x.ncols(), "causal softmax expects square scores");
        let mut v = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            let mut m = f64::NEG_INFINITY;
            for j in 0..=i {
                m = m.max(x[(i, j)]);
            }
            let mut z = 0.0;
            for j in 0..=i {
                let e = (x[(i, j)] - m).exp();
                v[(i, j)] = e;
                z += e;
            }
            for j in 0..=i {
                v[(i, j)] /= z;
            }
        }
        let r = self.req(a);
        self.push(v, Op::CausalSoftmaxRows(a), r)
    }

    pub fn logsumexp_row(&mut self, a: NodeId) -> NodeId {
        let x = &self.values[a.0];
        assert_eq!(x.nrows(), 1, "logsumexp_row expects a 1×n row");
        let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
        let v = Array2::from_elem((1, 1), m + s.ln());
        let r = self.req(a);
        self.push(v, Op::LogSumExpRow(a), r)
    }

    pub fn layer_norm_rows(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> NodeId {
        let xv = &self.values[x.0];
        let sc = &self.values[scale.0];
        let sh = &self.values[shift.0];
        assert_eq!(sc.dim(), (1, xv.ncols()));
        assert_eq!(sh.dim(), (1, xv.ncols()));
        let v = if xv.ncols() == 1 {
            xv * sc[(0, 0)] + sh[(0, 0)]
        } else {
            let mut out = Array2::zeros(xv.dim());
            for (i, row) in xv.rows().into_iter().enumerate() {
                let (mu, sigma) = row_stats(row.as_slice().unwrap());
                for j in 0..xv.ncols() {
                    out[(i, j)] = (row[j] - mu) / sigma * sc[(0, j)] + sh[(0, j)];
                }
            }
            out
        };
        let r = self.req(x) || self.req(scale) || self.req(shift);
        self.push(v, Op::LayerNormRows { x, scale, shift }, r)
    }

    // ---- structure ----

    pub fn slice_rows(&mut self, a: NodeId, r0: usize, r1: usize) -> NodeId {
        let v = self.values[a.0].slice(s![r0..r1, ..]).to_owned();
        let r = self.req(a);
        self.push(v, Op::SliceRows(a, r0, r1), r)
    }

    pub fn slice_cols(&mut self, a: NodeId, c0: usize, c1: usize) -> NodeId {
        let v = self.values[a.0].slice(s![.., c0..c1]).to_owned();
        let r = self.req(a);
        self.push(v, Op::SliceCols(a, c0, c1), r)
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        let r = parts.iter().any(|p| self.req(*p));
        self.push(v, Op::ConcatRows(parts.to_vec()), r)
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let views: Vec<_> = parts.iter().map(|p| self.values[p.0].view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row mismatch");
        let r = parts.iter().any(|p| self.req(*p));
        self.push(v, Op::ConcatCols(parts.to_vec()), r)
    }

    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let src = &self.values[a.0];
        let mut v = Array2::zeros((indices.len(), src.ncols()));
        for (i, &ix) in indices.iter().enumerate() {
            v.row_mut(i).assign(&src.row(ix));
        }
        let r = self.req(a);
        self.push(v, Op::GatherRows(a, indices.to_vec()), r)
    }

    pub fn shift_rows_down(&mut self, a: NodeId, shift: usize) -> NodeId {
        let src = &self.values[a.0];
        let n = src.nrows();
        let mut v = Array2::zeros(src.dim());
        if shift < n {
            v.slice_mut(s![shift.., ..]).assign(&src.slice(s![..n - shift, ..]));
        }
        let r = self.req(a);
        self.push(v, Op::ShiftRowsDown(a, shift), r)
    }

    pub fn reshape(&mut self, a: NodeId, rows: usize, cols: usize) -> NodeId {
        let src = &self.values[a.0];
        assert_eq!(src.len(), rows * cols, "reshape: element count mismatch");
        let v = Array2::from_shape_vec((rows, cols), src.iter().cloned().collect())
            .expect("reshape");
        let r = self.req(a);
        self.push(v, Op::Reshape(a), r)
    }

    // ---- backward ----

    /// Reverse sweep from a `1×1` loss node. Gradients of earlier sweeps are
    /// discarded first.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.values[loss.0].dim(), (1, 1), "backward expects a scalar loss");
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..self.ops.len()).rev() {
            if !self.requires[i] || self.grads[i].is_none() {
                continue;
            }
            let op = self.ops[i].clone();
            // Parents always precede node i, so split at i to borrow the
            // node's grad immutably and parents' grads mutably.
            let (head_grads, tail) = self.grads.split_at_mut(i);
            let g = tail[0].as_ref().unwrap();
            let values = &self.values;
            let requires = &self.requires;

            let mut acc = |id: NodeId, delta: Array2<f64>| {
                if !requires[id.0] {
                    return;
                }
                match &mut head_grads[id.0] {
                    Some(existing) => *existing += &delta,
                    slot @ None => *slot = Some(delta),
                }
            };

            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(a, g.clone());
                    acc(b, g.clone());
                }
                Op::Sub(a, b) => {
                    acc(a, g.clone());
                    acc(b, -g);
                }
                Op::Mul(a, b) => {
                    acc(a, g * &values[b.0]);
                    acc(b, g * &values[a.0]);
                }
                Op::MatMul(a, b) => {
                    acc(a, g.dot(&values[b.0].t()));
                    acc(b, values[a.0].t().dot(g));
                }
                Op::MatMulNT(a, b) => {
                    acc(a, g.dot(&values[b.0]));
                    acc(b, g.t().dot(&values[a.0]));
                }
                Op::AddRow(x, b) => {
                    acc(x, g.clone());
                    let col_sum = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(b, col_sum);
                }
                Op::Scale(a, c) => acc(a, g * c),
                Op::AddScalar(a) => acc(a, g.clone()),
                Op::Neg(a) => acc(a, -g),
                Op::Relu(a) => {
                    let mask = values[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(a, g * &mask);
                }
                Op::Sigmoid(a) => {
                    let y = &values[i];
                    acc(a, g * &(y * &(1.0 - y)));
                }
                Op::Tanh(a) => {
                    let y = &values[i];
                    acc(a, g * &(1.0 - y * y));
                }
                Op::Exp(a) => {
                    let y = &values[i];
                    acc(a, g * y);
                }
                Op::Abs(a) => {
                    let sign = values[a.0].mapv(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(a, g * &sign);
                }
                Op::Clamp(a, lo, hi) => {
                    let mask = values[a.0].mapv(|x| if x >= lo && x <= hi { 1.0 } else { 0.0 });
                    acc(a, g * &mask);
                }
                Op::StopGradient => {}
                Op::StraightThrough { grad_to, .. } => {
                    // Delivered unchanged; the quantized side gets nothing.
                    acc(grad_to, g.clone());
                }
                Op::SumAll(a) => {
                    let gv = g[(0, 0)];
                    acc(a, Array2::from_elem(values[a.0].dim(), gv));
                }
                Op::SoftmaxRows(a) => {
                    let y = &values[i];
                    let gy = g * y;
                    let row_dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(a, &gy - &(y * &row_dots));
                }
                Op::CausalSoftmaxRows(a) => {
                    // Same Jacobian as softmax; masked entries have y = 0 and
                    // therefore receive exactly zero gradient.
                    let y = &values[i];
                    let gy = g * y;
                    let row_dots = gy.sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(a, &gy - &(y * &row_dots));
                }
                Op::LogSumExpRow(a) => {
                    let sm = softmax_rows_value(&values[a.0]);
                    acc(a, sm * g[(0, 0)]);
                }
                Op::LayerNormRows { x, scale, shift } => {
                    let xv = &values[x.0];
                    let sc = &values[scale.0];
                    let m = xv.ncols();
                    if m == 1 {
                        acc(x, g * sc[(0, 0)]);
                        let gs = (g * xv).sum();
                        acc(scale, Array2::from_elem((1, 1), gs));
                        acc(shift, Array2::from_elem((1, 1), g.sum()));
                    } else {
                        let mut gx = Array2::zeros(xv.dim());
                        let mut gscale = Array2::zeros((1, m));
                        let mut gshift = Array2::zeros((1, m));
                        for r in 0..xv.nrows() {
                            let row = xv.row(r);
                            let (mu, sigma) = row_stats(row.as_slice().unwrap());
                            let xhat: Vec<f64> = row.iter().map(|&v| (v - mu) / sigma).collect();
                            // d/dxhat then project out mean / xhat components.
                            let gh: Vec<f64> =
                                (0..m).map(|j| g[(r, j)] * sc[(0, j)]).collect();
                            let mean_gh: f64 = gh.iter().sum::<f64>() / m as f64;
                            let mean_gh_xhat: f64 =
                                gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                            for j in 0..m {
                                gx[(r, j)] =
                                    (gh[j] - mean_gh - xhat[j] * mean_gh_xhat) / sigma;
                                gscale[(0, j)] += g[(r, j)] * xhat[j];
                                gshift[(0, j)] += g[(r, j)];
                            }
                        }
                        acc(x, gx);
                        acc(scale, gscale);
                        acc(shift, gshift);
                    }
                }
                Op::SliceRows(a, r0, _r1) => {
                    let mut da = Array2::zeros(values[a.0].dim());
                    da.slice_mut(s![r0..r0 + g.nrows(), ..]).assign(g);
                    acc(a, da);
                }
                Op::SliceCols(a, c0, _c1) => {
                    let mut da = Array2::zeros(values[a.0].dim());
                    da.slice_mut(s![.., c0..c0 + g.ncols()]).assign(g);
                    acc(a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let n = values[p.0].nrows();
                        acc(p, g.slice(s![r0..r0 + n, ..]).to_owned());
                        r0 += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let n = values[p.0].ncols();
                        acc(p, g.slice(s![.., c0..c0 + n]).to_owned());
                        c0 += n;
                    }
                }
                Op::GatherRows(a, indices) => {
                    let mut da = Array2::zeros(values[a.0].dim());
                    for (i_row, &ix) in indices.iter().enumerate() {
                        let mut dst = da.row_mut(ix);
                        dst += &g.row(i_row);
                    }
                    acc(a, da);
                }
                Op::ShiftRowsDown(a, shift) => {
                    let n = values[a.0].nrows();
                    let mut da = Array2::zeros(values[a.0].dim());
                    if shift < n {
                        da.slice_mut(s![..n - shift, ..]).assign(&g.slice(s![shift.., ..]));
                    }
                    acc(a, da);
                }
                Op::Reshape(a) => {
                    let src_dim = values[a.0].dim();
                    let da = Array2::from_shape_vec(src_dim, g.iter().cloned().collect())
                        .expect("reshape backward");
                    acc(a, da);
                }
            }
        }
    }
}

fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut v = Array2::zeros(x.dim());
    for (i, row) in x.rows().into_iter().enumerate() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (j, &val) in row.iter().enumerate() {
            let e = (val - m).exp();
            v[(i, j)] = e;
            z += e;
        }
        for j in 0..x.ncols() {
            v[(i, j)] /= z;
        }
    }
    v
}

fn row_stats(row: &[f64]) -> (f64, f64) {
    let m = row.len() as f64;
    let mu = row.iter().sum::<f64>() / m;
    let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<f64>() / m;
    (mu, (var + LAYER_NORM_EPS).sqrt())
}
