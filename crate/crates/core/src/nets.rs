//! Neural building blocks: causal convolution stacks and (optionally masked,
//! optionally cross-attending) multi-head attention blocks, together with the
//! named-parameter bookkeeping they run on.
//!
//! Each block exists in two forms: a graph builder (`build_*`) used inside
//! larger models, and a forward-only wrapper matching the block's
//! input/output contract. Gradients come from [`crate::graph`], so every
//! builder is differentiable w.r.t. both its inputs and its parameters.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::graph::{Graph, NodeId};

/// A `[time × feature]` slab of real values.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceTensor(pub Array2<f64>);

impl SequenceTensor {
    pub fn length(&self) -> usize {
        self.0.nrows()
    }

    pub fn width(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Error)]
pub enum NetsError {
    #[error("input width {found} does not match expected width {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("missing parameter {name:?}")]
    MissingParameter { name: String },
    #[error("cross-attention block requires a context sequence")]
    MissingContext,
    #[error("context supplied to a non-cross block")]
    UnexpectedContext,
    #[error("invalid config: {reason}")]
    BadConfig { reason: String },
}

/// Named map from parameter name to its array. Iteration order is the sorted
/// name order, which fixes the checkpoint layout and all checksums.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParameterSet {
    entries: BTreeMap<String, Array2<f64>>,
}

impl ParameterSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        let name = name.into();
        assert!(value.iter().all(|v| v.is_finite()), "non-finite parameter {name}");
        let prev = self.entries.insert(name.clone(), value);
        assert!(prev.is_none(), "duplicate parameter {name}");
    }

    pub fn get(&self, name: &str) -> Option<&Array2<f64>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<f64>> {
        self.entries.get_mut(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array2<f64>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar elements.
    pub fn total_count(&self) -> usize {
        self.entries.values().map(|v| v.len()).sum()
    }

    /// SHA-256 over names, shapes, and little-endian payloads in name order.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for (name, arr) in &self.entries {
            h.update(name.as_bytes());
            h.update((arr.nrows() as u64).to_le_bytes());
            h.update((arr.ncols() as u64).to_le_bytes());
            for v in arr.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Bindings of a [`ParameterSet`] onto a graph, one leaf per parameter.
pub struct ParamNodes {
    nodes: BTreeMap<String, NodeId>,
}

impl ParamNodes {
    pub fn bind(g: &mut Graph, params: &ParameterSet) -> Self {
        let mut nodes = BTreeMap::new();
        for (name, value) in params.iter() {
            nodes.insert(name.to_string(), g.leaf(value.clone()));
        }
        ParamNodes { nodes }
    }

    pub fn node(&self, name: &str) -> NodeId {
        *self
            .nodes
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    pub fn try_node(&self, name: &str) -> Option<NodeId> {
        self.nodes.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.nodes.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

// ---- initialization ----

/// Fan-in-scaled uniform init, `U(−1/√fan_in, 1/√fan_in)`.
pub fn init_weight(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let bound = 1.0 / (rows as f64).sqrt();
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound))
}

/// Insert a linear layer `prefix.w [in×out]`, `prefix.b [1×out]`.
pub fn init_linear(
    ps: &mut ParameterSet,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    ps.insert(format!("{prefix}.w"), init_weight(rng, in_dim, out_dim));
    ps.insert(format!("{prefix}.b"), Array2::zeros((1, out_dim)));
}

fn init_layer_norm(ps: &mut ParameterSet, prefix: &str, dim: usize) {
    ps.insert(format!("{prefix}.scale"), Array2::ones((1, dim)));
    ps.insert(format!("{prefix}.shift"), Array2::zeros((1, dim)));
}

// ---- causal convolution stack ----

/// Stack of causal 1-D convolution blocks (stride fixed at 1). Each block is
/// conv → layer norm → ReLU; left-only zero padding keeps the output length
/// equal to the input length for any kernel size.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvStackConfig {
    pub kernel_sizes: Vec<usize>,
    pub channels: Vec<usize>,
    /// Test hook: turn off the per-block layer norm.
    pub normalize: bool,
}

impl ConvStackConfig {
    pub fn new(kernel_sizes: Vec<usize>, channels: Vec<usize>) -> Self {
        ConvStackConfig { kernel_sizes, channels, normalize: true }
    }

    pub fn validate(&self) -> Result<(), NetsError> {
        if self.kernel_sizes.len() != self.channels.len() || self.kernel_sizes.is_empty() {
            return Err(NetsError::BadConfig {
                reason: "kernel and channel lists must be equal-length and non-empty".into(),
            });
        }
        if self.kernel_sizes.iter().any(|&k| k == 0) || self.channels.iter().any(|&c| c == 0) {
            return Err(NetsError::BadConfig { reason: "kernels and channels must be > 0".into() });
        }
        Ok(())
    }

    pub fn output_width(&self) -> usize {
        *self.channels.last().unwrap()
    }
}

/// Parameters for `build_conv_stack` under `prefix`: per layer `i`, a weight
/// `[k·c_in × c_out]` stacking the kernel taps row-wise, a bias, and a layer
/// norm.
pub fn init_conv_stack(
    ps: &mut ParameterSet,
    prefix: &str,
    input_width: usize,
    cfg: &ConvStackConfig,
    rng: &mut ChaCha8Rng,
) {
    let mut c_in = input_width;
    for (i, (&k, &c_out)) in cfg.kernel_sizes.iter().zip(&cfg.channels).enumerate() {
        ps.insert(format!("{prefix}.conv{i}.w"), init_weight(rng, k * c_in, c_out));
        ps.insert(format!("{prefix}.conv{i}.b"), Array2::zeros((1, c_out)));
        init_layer_norm(ps, &format!("{prefix}.conv{i}.ln"), c_out);
        c_in = c_out;
    }
}

/// Graph builder for the causal convolution stack.
pub fn build_conv_stack(
    g: &mut Graph,
    x: NodeId,
    pn: &ParamNodes,
    prefix: &str,
    cfg: &ConvStackConfig,
) -> NodeId {
    let mut h = x;
    let mut c_in = g.value(x).ncols();
    for (i, (&k, &c_out)) in cfg.kernel_sizes.iter().zip(&cfg.channels).enumerate() {
        let w = pn.node(&format!("{prefix}.conv{i}.w"));
        let b = pn.node(&format!("{prefix}.conv{i}.b"));
        // Tap j sees the input shifted down by (k-1-j) rows, so output step t
        // only reads input steps ≤ t.
        let mut acc: Option<NodeId> = None;
        for j in 0..k {
            let shifted = if k - 1 - j > 0 { g.shift_rows_down(h, k - 1 - j) } else { h };
            let w_j = g.slice_rows(w, j * c_in, (j + 1) * c_in);
            let term = g.matmul(shifted, w_j);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        let mut out = g.add_row(acc.unwrap(), b);
        if cfg.normalize {
            let sc = pn.node(&format!("{prefix}.conv{i}.ln.scale"));
            let sh = pn.node(&format!("{prefix}.conv{i}.ln.shift"));
            out = g.layer_norm_rows(out, sc, sh);
        }
        h = g.relu(out);
        c_in = c_out;
    }
    h
}

/// Forward-only convenience: run the stack on a sequence.
pub fn causal_conv_stack(
    x: &SequenceTensor,
    params: &ParameterSet,
    prefix: &str,
    cfg: &ConvStackConfig,
) -> Result<SequenceTensor, NetsError> {
    cfg.validate()?;
    let first_w = params
        .get(&format!("{prefix}.conv0.w"))
        .ok_or_else(|| NetsError::MissingParameter { name: format!("{prefix}.conv0.w") })?;
    let expected = first_w.nrows() / cfg.kernel_sizes[0];
    if x.width() != expected {
        return Err(NetsError::WidthMismatch { expected, found: x.width() });
    }
    let mut g = Graph::new();
    let input = g.constant(x.0.clone());
    let pn = ParamNodes::bind(&mut g, params);
    let out = build_conv_stack(&mut g, input, &pn, prefix, cfg);
    Ok(SequenceTensor(g.value(out).clone()))
}

// ---- attention block ----

/// One Transformer block: (masked) multi-head self-attention, optional
/// cross-attention over a context sequence, and a two-layer ReLU
/// feed-forward, each with residual connection and post-norm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionBlockConfig {
    pub model_dim: usize,
    pub n_heads: usize,
    pub ffn_hidden: usize,
    pub masked: bool,
    pub cross: bool,
}

impl AttentionBlockConfig {
    pub fn validate(&self) -> Result<(), NetsError> {
        if self.model_dim == 0 || self.n_heads == 0 {
            return Err(NetsError::BadConfig { reason: "zero model_dim or n_heads".into() });
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(NetsError::BadConfig {
                reason: format!(
                    "model_dim {} not divisible by n_heads {}",
                    self.model_dim, self.n_heads
                ),
            });
        }
        if self.ffn_hidden < self.model_dim {
            return Err(NetsError::BadConfig {
                reason: format!(
                    "ffn_hidden {} below model_dim {}",
                    self.ffn_hidden, self.model_dim
                ),
            });
        }
        Ok(())
    }
}

/// Exact trainable-parameter count of a non-cross attention block:
/// `4·(d²+d)` for the Q/K/V/output projections, `d·f+f` and `f·d+d` for the
/// feed-forward pair, and `2·2d` for the two layer norms.
pub fn param_count(cfg: &AttentionBlockConfig) -> usize {
    assert!(!cfg.cross, "param_count covers self-attention blocks");
    let d = cfg.model_dim;
    let f = cfg.ffn_hidden;
    4 * (d * d + d) + (d * f + f) + (f * d + d) + 4 * d
}

/// Node handles for one attention block; either bound from a
/// [`ParameterSet`] or assembled from hypernetwork output slices.
#[derive(Debug, Clone)]
pub struct AttnBlockNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln1_scale: NodeId,
    pub ln1_shift: NodeId,
    /// Cross-attention projections and their post-norm, present iff the
    /// block cross-attends.
    pub cross: Option<CrossAttnNodes>,
    pub ffn_w1: NodeId,
    pub ffn_b1: NodeId,
    pub ffn_w2: NodeId,
    pub ffn_b2: NodeId,
    pub ln2_scale: NodeId,
    pub ln2_shift: NodeId,
}

#[derive(Debug, Clone)]
pub struct CrossAttnNodes {
    pub wq: NodeId,
    pub bq: NodeId,
    pub wk: NodeId,
    pub bk: NodeId,
    pub wv: NodeId,
    pub bv: NodeId,
    pub wo: NodeId,
    pub bo: NodeId,
    pub ln_scale: NodeId,
    pub ln_shift: NodeId,
}

/// Initialize one attention block under `prefix`. For cross blocks,
/// `context_width` sizes the cross key/value projections.
pub fn init_attention_block(
    ps: &mut ParameterSet,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    context_width: Option<usize>,
    rng: &mut ChaCha8Rng,
) {
    let d = cfg.model_dim;
    for name in ["wq", "wk", "wv", "wo"] {
        ps.insert(format!("{prefix}.{name}"), init_weight(rng, d, d));
        ps.insert(format!("{prefix}.{}", name.replace('w', "b")), Array2::zeros((1, d)));
    }
    init_layer_norm(ps, &format!("{prefix}.ln1"), d);
    if cfg.cross {
        let w = context_width.expect("cross block needs a context width");
        ps.insert(format!("{prefix}.cross.wq"), init_weight(rng, d, d));
        ps.insert(format!("{prefix}.cross.bq"), Array2::zeros((1, d)));
        ps.insert(format!("{prefix}.cross.wk"), init_weight(rng, w, d));
        ps.insert(format!("{prefix}.cross.bk"), Array2::zeros((1, d)));
        ps.insert(format!("{prefix}.cross.wv"), init_weight(rng, w, d));
        ps.insert(format!("{prefix}.cross.bv"), Array2::zeros((1, d)));
        ps.insert(format!("{prefix}.cross.wo"), init_weight(rng, d, d));
        ps.insert(format!("{prefix}.cross.bo"), Array2::zeros((1, d)));
        init_layer_norm(ps, &format!("{prefix}.cross.ln"), d);
    }
    ps.insert(format!("{prefix}.ffn.w1"), init_weight(rng, d, cfg.ffn_hidden));
    ps.insert(format!("{prefix}.ffn.b1"), Array2::zeros((1, cfg.ffn_hidden)));
    ps.insert(format!("{prefix}.ffn.w2"), init_weight(rng, cfg.ffn_hidden, d));
    ps.insert(format!("{prefix}.ffn.b2"), Array2::zeros((1, d)));
    init_layer_norm(ps, &format!("{prefix}.ln2"), d);
}

impl AttnBlockNodes {
    pub fn bind(pn: &ParamNodes, prefix: &str, cross: bool) -> Self {
        let n = |suffix: &str| pn.node(&format!("{prefix}.{suffix}"));
        AttnBlockNodes {
            wq: n("wq"),
            bq: n("bq"),
            wk: n("wk"),
            bk: n("bk"),
            wv: n("wv"),
            bv: n("bv"),
            wo: n("wo"),
            bo: n("bo"),
            ln1_scale: n("ln1.scale"),
            ln1_shift: n("ln1.shift"),
            cross: cross.then(|| CrossAttnNodes {
                wq: n("cross.wq"),
                bq: n("cross.bq"),
                wk: n("cross.wk"),
                bk: n("cross.bk"),
                wv: n("cross.wv"),
                bv: n("cross.bv"),
                wo: n("cross.wo"),
                bo: n("cross.bo"),
                ln_scale: n("cross.ln.scale"),
                ln_shift: n("cross.ln.shift"),
            }),
            ffn_w1: n("ffn.w1"),
            ffn_b1: n("ffn.b1"),
            ffn_w2: n("ffn.w2"),
            ffn_b2: n("ffn.b2"),
            ln2_scale: n("ln2.scale"),
            ln2_shift: n("ln2.shift"),
        }
    }
}

/// Multi-head attention of `q_src` over `kv_src`. Returns the output and the
/// per-head attention-weight nodes.
pub(crate) fn multi_head(
    g: &mut Graph,
    q_src: NodeId,
    kv_src: NodeId,
    wq: NodeId,
    bq: NodeId,
    wk: NodeId,
    bk: NodeId,
    wv: NodeId,
    bv: NodeId,
    wo: NodeId,
    bo: NodeId,
    n_heads: usize,
    masked: bool,
) -> (NodeId, Vec<NodeId>) {
    let d = g.value(wq).ncols();
    let dh = d / n_heads;
    let q = g.matmul(q_src, wq);
    let q = g.add_row(q, bq);
    let k = g.matmul(kv_src, wk);
    let k = g.add_row(k, bk);
    let v = g.matmul(kv_src, wv);
    let v = g.add_row(v, bv);

    let mut head_outs = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = g.slice_cols(q, h * dh, (h + 1) * dh);
        let kh = g.slice_cols(k, h * dh, (h + 1) * dh);
        let vh = g.slice_cols(v, h * dh, (h + 1) * dh);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = if masked { g.causal_softmax_rows(scores) } else { g.softmax_rows(scores) };
        weights.push(attn);
        head_outs.push(g.matmul(attn, vh));
    }
    let concat = if head_outs.len() == 1 { head_outs[0] } else { g.concat_cols(&head_outs) };
    let out = g.matmul(concat, wo);
    (g.add_row(out, bo), weights)
}

/// Graph builder for one attention block.
pub fn build_attention_block(
    g: &mut Graph,
    h: NodeId,
    nodes: &AttnBlockNodes,
    cfg: &AttentionBlockConfig,
    context: Option<NodeId>,
) -> NodeId {
    assert_eq!(
        g.value(h).ncols(),
        cfg.model_dim,
        "attention block input width must equal model_dim"
    );
    let (attn, _) = multi_head(
        g, h, h, nodes.wq, nodes.bq, nodes.wk, nodes.bk, nodes.wv, nodes.bv, nodes.wo, nodes.bo,
        cfg.n_heads, cfg.masked,
    );
    let res = g.add(h, attn);
    let mut x = g.layer_norm_rows(res, nodes.ln1_scale, nodes.ln1_shift);

    if let Some(cross) = &nodes.cross {
        let ctx = context.expect("cross block requires context");
        let (c_out, _) = multi_head(
            g, x, ctx, cross.wq, cross.bq, cross.wk, cross.bk, cross.wv, cross.bv, cross.wo,
            cross.bo, cfg.n_heads, false,
        );
        let res = g.add(x, c_out);
        x = g.layer_norm_rows(res, cross.ln_scale, cross.ln_shift);
    }

    let f1 = g.matmul(x, nodes.ffn_w1);
    let f1 = g.add_row(f1, nodes.ffn_b1);
    let f1 = g.relu(f1);
    let f2 = g.matmul(f1, nodes.ffn_w2);
    let f2 = g.add_row(f2, nodes.ffn_b2);
    let res = g.add(x, f2);
    g.layer_norm_rows(res, nodes.ln2_scale, nodes.ln2_shift)
}

/// Forward-only convenience: run one block on a sequence.
pub fn attention_block(
    h: &SequenceTensor,
    params: &ParameterSet,
    prefix: &str,
    cfg: &AttentionBlockConfig,
    context: Option<&SequenceTensor>,
) -> Result<SequenceTensor, NetsError> {
    cfg.validate()?;
    if h.width() != cfg.model_dim {
        return Err(NetsError::WidthMismatch { expected: cfg.model_dim, found: h.width() });
    }
    match (cfg.cross, context.is_some()) {
        (true, false) => return Err(NetsError::MissingContext),
        (false, true) => return Err(NetsError::UnexpectedContext),
        _ => {}
    }
    if params.get(&format!("{prefix}.wq")).is_none() {
        return Err(NetsError::MissingParameter { name: format!("{prefix}.wq") });
    }
    let mut g = Graph::new();
    let input = g.constant(h.0.clone());
    let ctx = context.map(|c| g.constant(c.0.clone()));
    let pn = ParamNodes::bind(&mut g, params);
    let nodes = AttnBlockNodes::bind(&pn, prefix, cfg.cross);
    let out = build_attention_block(&mut g, input, &nodes, cfg, ctx);
    Ok(SequenceTensor(g.value(out).clone()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::Array2;

    fn seq(t: usize, w: usize, scale: f64) -> SequenceTensor {
        SequenceTensor(Array2::from_shape_fn((t, w), |(i, j)| {
            scale * (0.3 + ((i * w + j) as f64 * 0.711).sin().abs())
        }))
    }

    #[test]
    fn param_count_matches_hand_counts() {
        let cfg = AttentionBlockConfig {
            model_dim: 32,
            n_heads: 4,
            ffn_hidden: 128,
            masked: false,
            cross: false,
        };
        assert_eq!(param_count(&cfg), 12_704);
        let tiny = AttentionBlockConfig { model_dim: 1, n_heads: 1, ffn_hidden: 1, ..cfg };
        assert_eq!(param_count(&tiny), 16);
    }

    #[test]
    fn param_count_is_linear_in_ffn_width() {
        let base = AttentionBlockConfig {
            model_dim: 8,
            n_heads: 2,
            ffn_hidden: 16,
            masked: false,
            cross: false,
        };
        let wider = AttentionBlockConfig { ffn_hidden: 24, ..base };
        let extra = 24 - 16;
        assert_eq!(param_count(&wider) - param_count(&base), 2 * 8 * extra + extra);
    }

    #[test]
    fn param_count_matches_initialized_set() {
        let cfg = AttentionBlockConfig {
            model_dim: 6,
            n_heads: 3,
            ffn_hidden: 12,
            masked: true,
            cross: false,
        };
        let mut ps = ParameterSet::new();
        init_attention_block(&mut ps, "blk", &cfg, None, &mut stream(0, "t", 0));
        assert_eq!(ps.total_count(), param_count(&cfg));
    }

    #[test]
    fn identity_conv_is_identity_on_positive_input() {
        let mut cfg = ConvStackConfig::new(vec![1], vec![1]);
        cfg.normalize = false;
        let mut ps = ParameterSet::new();
        init_conv_stack(&mut ps, "c", 1, &cfg, &mut stream(0, "t", 1));
        *ps.get_mut("c.conv0.w").unwrap() = Array2::from_elem((1, 1), 1.0);
        let x = seq(6, 1, 1.0);
        let y = causal_conv_stack(&x, &ps, "c", &cfg).unwrap();
        assert_eq!(y.0, x.0);
    }

    #[test]
    fn conv_stack_preserves_length_with_paper_kernels() {
        let cfg = ConvStackConfig::new(vec![5, 3, 3, 3], vec![8, 8, 8, 8]);
        let mut ps = ParameterSet::new();
        init_conv_stack(&mut ps, "c", 1, &cfg, &mut stream(0, "t", 2));
        let y = causal_conv_stack(&seq(72, 1, 1.0), &ps, "c", &cfg).unwrap();
        assert_eq!(y.length(), 72);
        assert_eq!(y.width(), 8);
    }

    #[test]
    fn conv_stack_is_causal_in_values() {
        let cfg = ConvStackConfig::new(vec![5, 3], vec![4, 4]);
        let mut ps = ParameterSet::new();
        init_conv_stack(&mut ps, "c", 2, &cfg, &mut stream(0, "t", 3));
        let x = seq(60, 2, 1.0);
        let y0 = causal_conv_stack(&x, &ps, "c", &cfg).unwrap();
        let mut perturbed = x.clone();
        perturbed.0[(40, 0)] += 10.0;
        perturbed.0[(40, 1)] -= 3.0;
        let y1 = causal_conv_stack(&perturbed, &ps, "c", &cfg).unwrap();
        for t in 0..40 {
            for j in 0..4 {
                assert_eq!(y0.0[(t, j)], y1.0[(t, j)], "step {t} changed");
            }
        }
        assert_ne!(y0.0.row(40), y1.0.row(40));
    }

    #[test]
    fn conv_stack_rejects_width_mismatch() {
        let cfg = ConvStackConfig::new(vec![3], vec![4]);
        let mut ps = ParameterSet::new();
        init_conv_stack(&mut ps, "c", 2, &cfg, &mut stream(0, "t", 4));
        let err = causal_conv_stack(&seq(10, 3, 1.0), &ps, "c", &cfg).unwrap_err();
        assert!(matches!(err, NetsError::WidthMismatch { expected: 2, found: 3 }));
    }

    #[test]
    fn zeroed_value_and_ffn_paths_reduce_to_normalized_residual() {
        let cfg = AttentionBlockConfig {
            model_dim: 4,
            n_heads: 2,
            ffn_hidden: 8,
            masked: false,
            cross: false,
        };
        let mut ps = ParameterSet::new();
        init_attention_block(&mut ps, "blk", &cfg, None, &mut stream(0, "t", 5));
        for name in ["blk.wv", "blk.bv", "blk.wo", "blk.bo", "blk.ffn.w2", "blk.ffn.b2"] {
            ps.get_mut(name).unwrap().fill(0.0);
        }
        let x = seq(7, 4, 1.3);
        let y = attention_block(&x, &ps, "blk", &cfg, None).unwrap();

        // Expected: LN(LN(x)) with unit scale and zero shift.
        let mut g = Graph::new();
        let xin = g.constant(x.0.clone());
        let ones = g.constant(Array2::ones((1, 4)));
        let zeros = g.constant(Array2::zeros((1, 4)));
        let n1 = g.layer_norm_rows(xin, ones, zeros);
        let n2 = g.layer_norm_rows(n1, ones, zeros);
        let expect = g.value(n2).clone();
        for (a, b) in y.0.iter().zip(expect.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn masked_block_ignores_future_steps() {
        let cfg = AttentionBlockConfig {
            model_dim: 4,
            n_heads: 2,
            ffn_hidden: 8,
            masked: true,
            cross: false,
        };
        let mut ps = ParameterSet::new();
        init_attention_block(&mut ps, "blk", &cfg, None, &mut stream(0, "t", 6));
        let x = seq(9, 4, 1.0);
        let y0 = attention_block(&x, &ps, "blk", &cfg, None).unwrap();
        let mut perturbed = x.clone();
        for j in 0..4 {
            perturbed.0[(5, j)] += 2.0 + j as f64;
        }
        let y1 = attention_block(&perturbed, &ps, "blk", &cfg, None).unwrap();
        for t in 0..5 {
            for j in 0..4 {
                assert_eq!(y0.0[(t, j)], y1.0[(t, j)]);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one_per_head_and_query() {
        let mut g = Graph::new();
        let mut rng = stream(0, "t", 7);
        let h = g.constant(Array2::from_shape_fn((6, 4), |_| rng.gen_range(-1.0..1.0)));
        let mut ps = ParameterSet::new();
        let cfg = AttentionBlockConfig {
            model_dim: 4,
            n_heads: 2,
            ffn_hidden: 8,
            masked: false,
            cross: false,
        };
        init_attention_block(&mut ps, "blk", &cfg, None, &mut rng);
        let pn = ParamNodes::bind(&mut g, &ps);
        let nodes = AttnBlockNodes::bind(&pn, "blk", false);
        let (_, weights) = multi_head(
            &mut g, h, h, nodes.wq, nodes.bq, nodes.wk, nodes.bk, nodes.wv, nodes.bv, nodes.wo,
            nodes.bo, 2, false,
        );
        assert_eq!(weights.len(), 2);
        for w in weights {
            for row in g.value(w).rows() {
                assert!((row.sum() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cross_block_requires_context() {
        let cfg = AttentionBlockConfig {
            model_dim: 4,
            n_heads: 2,
            ffn_hidden: 8,
            masked: false,
            cross: true,
        };
        let mut ps = ParameterSet::new();
        init_attention_block(&mut ps, "blk", &cfg, Some(6), &mut stream(0, "t", 8));
        let x = seq(5, 4, 1.0);
        assert!(matches!(
            attention_block(&x, &ps, "blk", &cfg, None),
            Err(NetsError::MissingContext)
        ));
        let ctx = seq(5, 6, 1.0);
        let y = attention_block(&x, &ps, "blk", &cfg, Some(&ctx)).unwrap();
        assert_eq!(y.length(), 5);
        assert_eq!(y.width(), 4);
    }

    #[test]
    fn config_validation_catches_bad_shapes() {
        let bad_heads = AttentionBlockConfig {
            model_dim: 6,
            n_heads: 4,
            ffn_hidden: 8,
            masked: false,
            cross: false,
        };
        assert!(bad_heads.validate().is_err());
        let bad_ffn = AttentionBlockConfig { n_heads: 2, ffn_hidden: 2, ..bad_heads };
        assert!(bad_ffn.validate().is_err());
        assert!(ConvStackConfig::new(vec![3, 3], vec![4]).validate().is_err());
    }
}
