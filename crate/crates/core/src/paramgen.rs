//! Adaptive parameter generation: a two-layer ReLU hypernetwork maps the
//! context variable to the flat parameter vector of the local encoder's last
//! attention block, plus the layout bookkeeping that reshapes and loads
//! those parameters.

use ndarray::{s, Array2};
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, NodeId};
use crate::nets::{
    build_attention_block, init_attention_block, init_weight, param_count, AttentionBlockConfig,
    AttnBlockNodes, ParamNodes, ParameterSet, SequenceTensor,
};

/// Ordered (name, shape) entries of one self-attention block's parameters.
/// The order is fixed: the four attention projections with their biases, the
/// feed-forward pair, then the two layer norms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub entries: Vec<(String, (usize, usize))>,
    pub total_size: usize,
}

/// Deterministic layout for a (non-cross) attention block; `total_size`
/// always equals [`param_count`].
pub fn layout_for(cfg: &AttentionBlockConfig) -> BlockLayout {
    assert!(!cfg.cross, "only self-attention blocks are generated");
    let d = cfg.model_dim;
    let f = cfg.ffn_hidden;
    let entries: Vec<(String, (usize, usize))> = vec![
        ("wq".into(), (d, d)),
        ("bq".into(), (1, d)),
        ("wk".into(), (d, d)),
        ("bk".into(), (1, d)),
        ("wv".into(), (d, d)),
        ("bv".into(), (1, d)),
        ("wo".into(), (d, d)),
        ("bo".into(), (1, d)),
        ("ffn.w1".into(), (d, f)),
        ("ffn.b1".into(), (1, f)),
        ("ffn.w2".into(), (f, d)),
        ("ffn.b2".into(), (1, d)),
        ("ln1.scale".into(), (1, d)),
        ("ln1.shift".into(), (1, d)),
        ("ln2.scale".into(), (1, d)),
        ("ln2.shift".into(), (1, d)),
    ];
    let total_size = entries.iter().map(|(_, (r, c))| r * c).sum();
    debug_assert_eq!(total_size, param_count(cfg));
    BlockLayout { entries, total_size }
}

/// A generated flat parameter vector plus the layout to reshape it.
#[derive(Debug, Clone)]
pub struct GeneratedBlockParams {
    /// `[1 × total_size]`.
    pub flat: Array2<f64>,
    pub layout: BlockLayout,
}

/// Flatten a stored block (parameters under `prefix`) into layout order,
/// row-major within each entry.
pub fn flatten_block(params: &ParameterSet, prefix: &str, layout: &BlockLayout) -> Array2<f64> {
    let mut flat = Vec::with_capacity(layout.total_size);
    for (name, (r, c)) in &layout.entries {
        let arr = params
            .get(&format!("{prefix}.{name}"))
            .unwrap_or_else(|| panic!("missing block parameter {prefix}.{name}"));
        assert_eq!(arr.dim(), (*r, *c), "layout shape mismatch for {name}");
        flat.extend(arr.iter().cloned());
    }
    Array2::from_shape_vec((1, layout.total_size), flat).unwrap()
}

/// Reshape a flat vector back into named arrays in layout order.
pub fn unflatten_block(flat: &Array2<f64>, layout: &BlockLayout) -> Vec<(String, Array2<f64>)> {
    assert_eq!(flat.dim(), (1, layout.total_size));
    let mut out = Vec::with_capacity(layout.entries.len());
    let mut offset = 0;
    for (name, (r, c)) in &layout.entries {
        let n = r * c;
        let slice: Vec<f64> = flat.slice(s![0, offset..offset + n]).to_vec();
        out.push((name.clone(), Array2::from_shape_vec((*r, *c), slice).unwrap()));
        offset += n;
    }
    out
}

/// Hypernetwork geometry: context width in, hidden layer, fixed output gain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HyperConfig {
    pub d_context: usize,
    pub hidden: usize,
    pub gain: f64,
}

/// Initialize the hypernetwork under `prefix`. The second layer starts at
/// zero and the output bias at (standard block init) / gain, so the
/// generated block initially equals an ordinarily initialized one and the
/// context only learns deviations from it.
pub fn init_hypernetwork(
    ps: &mut ParameterSet,
    prefix: &str,
    cfg: &HyperConfig,
    block_cfg: &AttentionBlockConfig,
    rng: &mut ChaCha8Rng,
) {
    let layout = layout_for(block_cfg);
    ps.insert(format!("{prefix}.w1"), init_weight(rng, cfg.d_context, cfg.hidden));
    ps.insert(format!("{prefix}.b1"), Array2::zeros((1, cfg.hidden)));
    ps.insert(format!("{prefix}.w2"), Array2::zeros((cfg.hidden, layout.total_size)));
    let mut base = ParameterSet::new();
    init_attention_block(&mut base, "base", block_cfg, None, rng);
    let b2 = flatten_block(&base, "base", &layout) / cfg.gain;
    ps.insert(format!("{prefix}.b2"), b2);
}

/// Build the generated flat vector on the tape:
/// `gain · (W₂·ReLU(W₁·D + b₁) + b₂)`.
pub fn build_generate(
    g: &mut Graph,
    d: NodeId,
    pn: &ParamNodes,
    prefix: &str,
    gain: f64,
) -> NodeId {
    let w1 = pn.node(&format!("{prefix}.w1"));
    let b1 = pn.node(&format!("{prefix}.b1"));
    let w2 = pn.node(&format!("{prefix}.w2"));
    let b2 = pn.node(&format!("{prefix}.b2"));
    let h = g.matmul(d, w1);
    let h = g.add_row(h, b1);
    let h = g.relu(h);
    let out = g.matmul(h, w2);
    let out = g.add_row(out, b2);
    g.scale(out, gain)
}

/// Forward-only generation from a plain context vector.
pub fn generate(
    d: &Array2<f64>,
    params: &ParameterSet,
    prefix: &str,
    gain: f64,
    layout: &BlockLayout,
) -> GeneratedBlockParams {
    let mut g = Graph::new();
    let dn = g.constant(d.clone());
    let pn = ParamNodes::bind(&mut g, params);
    let flat = build_generate(&mut g, dn, &pn, prefix, gain);
    assert_eq!(g.value(flat).ncols(), layout.total_size, "layout/hypernetwork mismatch");
    GeneratedBlockParams { flat: g.value(flat).clone(), layout: layout.clone() }
}

/// Assemble attention-block node handles from a flat vector on the tape;
/// gradients flow through the slices back to the vector's producers.
pub fn block_nodes_from_flat(g: &mut Graph, flat: NodeId, layout: &BlockLayout) -> AttnBlockNodes {
    let mut offset = 0;
    let mut pick = |g: &mut Graph, want: &str| -> NodeId {
        // Entries are consumed in layout order, which matches field order.
        let (name, (r, c)) = layout
            .entries
            .iter()
            .find(|(n, _)| n == want)
            .expect("entry in layout");
        let _ = name;
        let n = r * c;
        let sl = g.slice_cols(flat, offset, offset + n);
        offset += n;
        g.reshape(sl, *r, *c)
    };
    AttnBlockNodes {
        wq: pick(g, "wq"),
        bq: pick(g, "bq"),
        wk: pick(g, "wk"),
        bk: pick(g, "bk"),
        wv: pick(g, "wv"),
        bv: pick(g, "bv"),
        wo: pick(g, "wo"),
        bo: pick(g, "bo"),
        ffn_w1: pick(g, "ffn.w1"),
        ffn_b1: pick(g, "ffn.b1"),
        ffn_w2: pick(g, "ffn.w2"),
        ffn_b2: pick(g, "ffn.b2"),
        ln1_scale: pick(g, "ln1.scale"),
        ln1_shift: pick(g, "ln1.shift"),
        ln2_scale: pick(g, "ln2.scale"),
        ln2_shift: pick(g, "ln2.shift"),
        cross: None,
    }
}

/// Run an attention block with generated parameters on the tape.
pub fn build_apply_generated(
    g: &mut Graph,
    h: NodeId,
    flat: NodeId,
    layout: &BlockLayout,
    cfg: &AttentionBlockConfig,
) -> NodeId {
    assert!(!cfg.cross);
    assert_eq!(layout.total_size, param_count(cfg), "layout does not match block config");
    let nodes = block_nodes_from_flat(g, flat, layout);
    build_attention_block(g, h, &nodes, cfg, None)
}

/// Forward-only application of generated parameters to a sequence.
pub fn apply_generated(
    h: &SequenceTensor,
    gen: &GeneratedBlockParams,
    cfg: &AttentionBlockConfig,
) -> SequenceTensor {
    let mut g = Graph::new();
    let input = g.constant(h.0.clone());
    let flat = g.constant(gen.flat.clone());
    let out = build_apply_generated(&mut g, input, flat, &gen.layout, cfg);
    SequenceTensor(g.value(out).clone())
}
