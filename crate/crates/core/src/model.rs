//! Full model assembly: the shared convolutional trunk, the vector-quantized
//! global encoder, the context-conditioned local encoder with generated last
//! block, the masked/cross-attention decoder, the combined training loss,
//! ablation variants, and autoregressive forecasting.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::context::{
    build_cmc_loss, build_context_net, build_sample_context, init_context_net,
    init_discriminator, sample_cmc_batch, ContextError, ContextNetConfig, ContextNetOut,
    DiscriminatorNodes,
};
use crate::data::WindowSample;
use crate::graph::{Graph, NodeId};
use crate::nets::{
    build_attention_block, build_conv_stack, init_attention_block, init_conv_stack, init_linear,
    AttentionBlockConfig, AttnBlockNodes, ConvStackConfig, ParamNodes, ParameterSet,
};
use crate::paramgen::{
    build_apply_generated, build_generate, init_hypernetwork, layout_for, BlockLayout,
    HyperConfig,
};
use crate::rng::stream;
use crate::vq::{build_quantize, build_vq_loss, Codebook};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Context(#[from] ContextError),
    #[error("window carries {found} covariate channels, model expects {expected}")]
    CovariateMismatch { expected: usize, found: usize },
    #[error("window length {found} does not match configured input length {expected}")]
    InputLenMismatch { expected: usize, found: usize },
    #[error("horizon {found} does not match configured horizon {expected}")]
    HorizonMismatch { expected: usize, found: usize },
    #[error("empty mini-batch")]
    EmptyBatch,
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("invalid model config: {reason}")]
    BadConfig { reason: String },
}

/// Which sub-systems are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Both encoders, VQ, and the contrastive context objective.
    Full,
    /// Plain convolutional-Transformer encoder-decoder; no VQ, no context.
    ConvTransformer,
    /// Parameter generation from the posterior mean without the contrastive
    /// objective.
    NoCmc,
    /// Global (quantized) encoder only.
    GlobalOnly,
    /// Local (generated) encoder only; no VQ.
    LocalOnly,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::ConvTransformer,
        Variant::NoCmc,
        Variant::GlobalOnly,
        Variant::LocalOnly,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ConvTransformer => "conv_transformer",
            Variant::NoCmc => "no_cmc",
            Variant::GlobalOnly => "global_only",
            Variant::LocalOnly => "local_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self, ModelError> {
        Variant::ALL
            .iter()
            .find(|v| v.as_str() == s)
            .copied()
            .ok_or_else(|| ModelError::UnknownVariant(s.to_string()))
    }

    /// The VQ bottleneck sits in the encoder.
    pub fn uses_vq(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoCmc | Variant::GlobalOnly)
    }

    /// An encoder runs through the shared trunk into the stored last block.
    pub fn uses_global(&self) -> bool {
        !matches!(self, Variant::LocalOnly)
    }

    /// An encoder runs through the shared trunk into a generated last block.
    pub fn uses_local(&self) -> bool {
        matches!(self, Variant::Full | Variant::NoCmc | Variant::LocalOnly)
    }

    /// The context recognition network produces the posterior.
    pub fn uses_context(&self) -> bool {
        self.uses_local()
    }

    /// The contrastive objective (and its KL term) is part of the loss.
    pub fn uses_cmc(&self) -> bool {
        matches!(self, Variant::Full | Variant::LocalOnly)
    }
}

/// Complete architecture and loss configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub n_covariates: usize,
    pub conv_kernels: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub enc_attn_dims: Vec<usize>,
    pub enc_attn_heads: Vec<usize>,
    pub dec_conv_kernels: Vec<usize>,
    pub dec_conv_channels: Vec<usize>,
    pub dec_attn_dims: Vec<usize>,
    pub dec_attn_heads: Vec<usize>,
    pub ffn_ratio: usize,
    pub codebook_size: usize,
    pub d_context: usize,
    pub ctx_conv_kernels: Vec<usize>,
    pub ctx_conv_channels: Vec<usize>,
    pub ctx_attn_dims: Vec<usize>,
    pub ctx_attn_heads: Vec<usize>,
    pub lstm_hidden: usize,
    pub disc_hidden: usize,
    pub hyper_hidden: usize,
    pub hyper_gain: f64,
    pub alpha: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub positives_per_sample: usize,
    pub negatives_per_positive: usize,
    pub variant: Variant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_len: 72,
            horizon: 24,
            n_covariates: 2,
            conv_kernels: vec![5, 3, 3, 3],
            conv_channels: vec![64, 64, 64, 64],
            enc_attn_dims: vec![32, 32, 32],
            enc_attn_heads: vec![4, 4, 4],
            dec_conv_kernels: vec![5, 3, 3, 3],
            dec_conv_channels: vec![64, 64, 64, 64],
            dec_attn_dims: vec![32, 32, 32, 1],
            dec_attn_heads: vec![4, 4, 4, 1],
            ffn_ratio: 4,
            codebook_size: 64,
            d_context: 16,
            ctx_conv_kernels: vec![5, 3, 3, 3],
            ctx_conv_channels: vec![64, 64, 64, 64],
            ctx_attn_dims: vec![32, 32, 32],
            ctx_attn_heads: vec![4, 4, 4],
            lstm_hidden: 64,
            disc_hidden: 64,
            hyper_hidden: 64,
            hyper_gain: 0.05,
            alpha: 0.7,
            gamma: 0.2,
            temperature: 0.1,
            positives_per_sample: 8,
            negatives_per_positive: 32,
            variant: Variant::Full,
        }
    }
}

impl ModelConfig {
    /// Smallest config that exercises every path; used by the gradient
    /// suites.
    pub fn tiny() -> Self {
        ModelConfig {
            input_len: 8,
            horizon: 3,
            n_covariates: 2,
            conv_kernels: vec![3],
            conv_channels: vec![4],
            enc_attn_dims: vec![4, 4],
            enc_attn_heads: vec![2, 2],
            dec_conv_kernels: vec![3],
            dec_conv_channels: vec![4],
            dec_attn_dims: vec![4, 1],
            dec_attn_heads: vec![2, 1],
            ffn_ratio: 2,
            codebook_size: 3,
            d_context: 2,
            ctx_conv_kernels: vec![3],
            ctx_conv_channels: vec![4],
            ctx_attn_dims: vec![4],
            ctx_attn_heads: vec![2],
            lstm_hidden: 4,
            disc_hidden: 8,
            hyper_hidden: 8,
            hyper_gain: 0.05,
            alpha: 0.7,
            gamma: 0.2,
            temperature: 0.1,
            positives_per_sample: 1,
            negatives_per_positive: 2,
            variant: Variant::Full,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |reason: &str| Err(ModelError::BadConfig { reason: reason.to_string() });
        if self.input_len == 0 || self.horizon == 0 {
            return bad("input_len and horizon must be positive");
        }
        if self.conv_kernels.len() != self.conv_channels.len() || self.conv_kernels.is_empty() {
            return bad("encoder conv kernels/channels must be equal-length and non-empty");
        }
        if self.dec_conv_kernels.len() != self.dec_conv_channels.len()
            || self.dec_conv_kernels.is_empty()
        {
            return bad("decoder conv kernels/channels must be equal-length and non-empty");
        }
        if self.ctx_conv_kernels.len() != self.ctx_conv_channels.len()
            || self.ctx_conv_kernels.is_empty()
        {
            return bad("context conv kernels/channels must be equal-length and non-empty");
        }
        for (dims, heads, what) in [
            (&self.enc_attn_dims, &self.enc_attn_heads, "encoder"),
            (&self.dec_attn_dims, &self.dec_attn_heads, "decoder"),
            (&self.ctx_attn_dims, &self.ctx_attn_heads, "context"),
        ] {
            if dims.len() != heads.len() || dims.is_empty() {
                return bad(&format!("{what} attention dims/heads must be equal-length"));
            }
            for (&d, &h) in dims.iter().zip(heads.iter()) {
                if d == 0 || h == 0 || d % h != 0 {
                    return bad(&format!("{what} attention dim {d} not divisible by heads {h}"));
                }
            }
        }
        if *self.dec_attn_dims.last().unwrap() != 1 {
            return bad("decoder's final attention width must be 1 (the prediction channel)");
        }
        if self.ffn_ratio == 0 {
            return bad("ffn_ratio must be at least 1");
        }
        if self.codebook_size == 0 || self.d_context == 0 {
            return bad("codebook_size and d_context must be positive");
        }
        if self.temperature <= 0.0 {
            return bad("temperature must be positive");
        }
        if self.alpha < 0.0 || self.gamma < 0.0 {
            return bad("alpha and gamma must be non-negative");
        }
        if self.positives_per_sample == 0 || self.negatives_per_positive == 0 {
            return bad("positives and negatives per sample must be at least 1");
        }
        Ok(())
    }

    pub fn encoder_conv_config(&self) -> ConvStackConfig {
        ConvStackConfig::new(self.conv_kernels.clone(), self.conv_channels.clone())
    }

    pub fn decoder_conv_config(&self) -> ConvStackConfig {
        ConvStackConfig::new(self.dec_conv_kernels.clone(), self.dec_conv_channels.clone())
    }

    fn enc_block_cfg(&self, i: usize) -> AttentionBlockConfig {
        AttentionBlockConfig {
            model_dim: self.enc_attn_dims[i],
            n_heads: self.enc_attn_heads[i],
            ffn_hidden: self.ffn_ratio * self.enc_attn_dims[i],
            masked: false,
            cross: false,
        }
    }

    fn dec_block_cfg(&self, i: usize) -> AttentionBlockConfig {
        AttentionBlockConfig {
            model_dim: self.dec_attn_dims[i],
            n_heads: self.dec_attn_heads[i],
            ffn_hidden: self.ffn_ratio * self.dec_attn_dims[i],
            masked: true,
            cross: true,
        }
    }

    pub(crate) fn ctx_net_config(&self) -> ContextNetConfig {
        ContextNetConfig {
            conv: ConvStackConfig::new(self.ctx_conv_kernels.clone(), self.ctx_conv_channels.clone()),
            attn_dims: self.ctx_attn_dims.clone(),
            attn_heads: self.ctx_attn_heads.clone(),
            ffn_ratio: self.ffn_ratio,
            lstm_hidden: self.lstm_hidden,
            d_context: self.d_context,
        }
    }

    /// Config of the encoder's last attention block (the generated one).
    pub fn last_enc_block_cfg(&self) -> AttentionBlockConfig {
        self.enc_block_cfg(self.enc_attn_dims.len() - 1)
    }

    /// Layout of the generated last block's parameters.
    pub fn generated_layout(&self) -> BlockLayout {
        layout_for(&self.last_enc_block_cfg())
    }

    /// Encoder output width (one path).
    pub fn encoder_width(&self) -> usize {
        *self.enc_attn_dims.last().unwrap()
    }

    /// Width of the decoder's cross-attention context under this variant.
    pub fn cross_context_width(&self) -> usize {
        let w = self.encoder_width();
        match (self.variant.uses_global(), self.variant.uses_local()) {
            (true, true) => 2 * w,
            _ => w,
        }
    }

    fn enc_attn_input_width(&self) -> usize {
        self.conv_channels.last().unwrap() + self.n_covariates
    }

    fn dec_attn_input_width(&self) -> usize {
        self.dec_conv_channels.last().unwrap() + self.n_covariates
    }
}

/// Initialize every component's parameters, deterministically from `seed`.
/// All components exist regardless of the variant; unused ones simply never
/// receive gradient.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ParameterSet {
    let mut ps = ParameterSet::new();

    let mut rng = stream(seed, "init-trunk", 0);
    init_conv_stack(&mut ps, "trunk", 1, &cfg.encoder_conv_config(), &mut rng);
    let mut width = cfg.enc_attn_input_width();
    for (i, &dim) in cfg.enc_attn_dims.iter().enumerate() {
        if width != dim {
            init_linear(&mut ps, &format!("trunk.proj{i}"), width, dim, &mut rng);
        }
        if i + 1 < cfg.enc_attn_dims.len() {
            init_attention_block(&mut ps, &format!("trunk.attn{i}"), &cfg.enc_block_cfg(i), None, &mut rng);
        }
        width = dim;
    }

    let mut rng = stream(seed, "init-global", 0);
    init_attention_block(&mut ps, "glob.last", &cfg.last_enc_block_cfg(), None, &mut rng);

    let mut rng = stream(seed, "init-vq", 0);
    let book = Codebook::init(cfg.codebook_size, *cfg.conv_channels.last().unwrap(), &mut rng);
    ps.insert("vq.codebook", book.vectors);

    let mut rng = stream(seed, "init-context", 0);
    init_context_net(&mut ps, "ctx", cfg.n_covariates, &cfg.ctx_net_config(), &mut rng);

    let mut rng = stream(seed, "init-disc", 0);
    let short_width = *cfg.ctx_conv_channels.last().unwrap();
    let long_width = *cfg.ctx_attn_dims.last().unwrap();
    init_discriminator(&mut ps, "disc.sh", cfg.d_context, short_width, cfg.disc_hidden, &mut rng);
    init_discriminator(&mut ps, "disc.lo", cfg.d_context, long_width, cfg.disc_hidden, &mut rng);

    let mut rng = stream(seed, "init-hyper", 0);
    let hyper = HyperConfig { d_context: cfg.d_context, hidden: cfg.hyper_hidden, gain: cfg.hyper_gain };
    init_hypernetwork(&mut ps, "hyper", &hyper, &cfg.last_enc_block_cfg(), &mut rng);

    let mut rng = stream(seed, "init-decoder", 0);
    init_conv_stack(&mut ps, "dec", 1, &cfg.decoder_conv_config(), &mut rng);
    let ctx_width = cfg.cross_context_width();
    let mut width = cfg.dec_attn_input_width();
    for (i, &dim) in cfg.dec_attn_dims.iter().enumerate() {
        if width != dim {
            init_linear(&mut ps, &format!("dec.proj{i}"), width, dim, &mut rng);
        }
        init_attention_block(&mut ps, &format!("dec.attn{i}"), &cfg.dec_block_cfg(i), Some(ctx_width), &mut rng);
        width = dim;
    }

    ps
}

fn resize_to(g: &mut Graph, h: NodeId, pn: &ParamNodes, name: &str, target: usize) -> NodeId {
    if g.value(h).ncols() == target {
        return h;
    }
    let w = pn.node(&format!("{name}.w"));
    let b = pn.node(&format!("{name}.b"));
    let p = g.matmul(h, w);
    g.add_row(p, b)
}

enum LastBlock<'a> {
    Stored(&'a str),
    Generated(NodeId, &'a BlockLayout),
}

/// Run the encoder attention column: shared blocks `0..L−1`, then the
/// path-specific last block.
fn build_encoder_attention(
    g: &mut Graph,
    h0: NodeId,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    last: LastBlock,
) -> NodeId {
    let l = cfg.enc_attn_dims.len();
    let mut h = h0;
    for i in 0..l {
        h = resize_to(g, h, pn, &format!("trunk.proj{i}"), cfg.enc_attn_dims[i]);
        let block_cfg = cfg.enc_block_cfg(i);
        if i + 1 < l {
            let nodes = AttnBlockNodes::bind(pn, &format!("trunk.attn{i}"), false);
            h = build_attention_block(g, h, &nodes, &block_cfg, None);
        } else {
            h = match &last {
                LastBlock::Stored(prefix) => {
                    let nodes = AttnBlockNodes::bind(pn, prefix, false);
                    build_attention_block(g, h, &nodes, &block_cfg, None)
                }
                LastBlock::Generated(flat, layout) => {
                    build_apply_generated(g, h, *flat, layout, &block_cfg)
                }
            };
        }
    }
    h
}

/// How the context variable is obtained for one window.
pub enum ContextDraw<'a> {
    /// Reparameterized draw with the given standard-normal noise.
    Reparam(&'a Array2<f64>),
    /// The posterior mean (inference, and the no-CMC variant).
    Mean,
}

/// Tape handles for everything one window produces on the encoder side.
pub struct SampleEncodings {
    /// `[T × cross_context_width]` sequence the decoder attends over.
    pub enc_context: NodeId,
    /// Pre-quantization conv features (when VQ is active).
    pub z: Option<NodeId>,
    /// Selected codebook rows (when VQ is active).
    pub zhat: Option<NodeId>,
    /// The straight-through pass-through node (when VQ is active).
    pub quantized: Option<NodeId>,
    pub vq_indices: Vec<usize>,
    pub ctx: Option<ContextNetOut>,
    pub d: Option<NodeId>,
}

/// Build both encoder paths (as the variant dictates) for one window.
pub fn build_sample_encodings(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    input: NodeId,
    covariates: NodeId,
    draw: ContextDraw,
) -> SampleEncodings {
    let variant = cfg.variant;

    let (ctx, d) = if variant.uses_context() {
        let out = build_context_net(g, input, Some(covariates), pn, "ctx", &cfg.ctx_net_config());
        let d = match draw {
            ContextDraw::Reparam(eps) => build_sample_context(g, out.mean, out.log_var, eps),
            ContextDraw::Mean => out.mean,
        };
        (Some(out), Some(d))
    } else {
        (None, None)
    };

    let conv_out = build_conv_stack(g, input, pn, "trunk", &cfg.encoder_conv_config());

    let (global, z, zhat, quantized, vq_indices) = if variant.uses_global() {
        let (h, z, zhat, st, idx) = if variant.uses_vq() {
            let book = pn.node("vq.codebook");
            let (st, zhat, idx) = build_quantize(g, conv_out, book);
            (st, Some(conv_out), Some(zhat), Some(st), idx)
        } else {
            (conv_out, None, None, None, Vec::new())
        };
        let h = g.concat_cols(&[h, covariates]);
        let enc = build_encoder_attention(g, h, pn, cfg, LastBlock::Stored("glob.last"));
        (Some(enc), z, zhat, st, idx)
    } else {
        (None, None, None, None, Vec::new())
    };

    let local = if variant.uses_local() {
        let flat = build_generate(g, d.expect("local path needs a context"), pn, "hyper", cfg.hyper_gain);
        let h = g.concat_cols(&[conv_out, covariates]);
        let layout = cfg.generated_layout();
        Some(build_encoder_attention(g, h, pn, cfg, LastBlock::Generated(flat, &layout)))
    } else {
        None
    };

    let enc_context = match (global, local) {
        (Some(a), Some(b)) => g.concat_cols(&[a, b]),
        (Some(a), None) => a,
        (None, Some(b)) => b,
        (None, None) => unreachable!("at least one encoder path is always active"),
    };
    debug_assert_eq!(g.value(enc_context).ncols(), cfg.cross_context_width());

    SampleEncodings { enc_context, z, zhat, quantized, vq_indices, ctx, d }
}

/// Run the decoder on a (possibly partial) teacher/autoregressive input
/// sequence. `dec_values` is `[len × 1]`, `future_covariates` `[len × n_cov]`
/// where row `k` carries the covariates of the step being predicted.
pub fn build_decoder(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    dec_values: NodeId,
    future_covariates: NodeId,
    enc_context: NodeId,
) -> NodeId {
    let conv = build_conv_stack(g, dec_values, pn, "dec", &cfg.decoder_conv_config());
    let mut h = g.concat_cols(&[conv, future_covariates]);
    for i in 0..cfg.dec_attn_dims.len() {
        h = resize_to(g, h, pn, &format!("dec.proj{i}"), cfg.dec_attn_dims[i]);
        let nodes = AttnBlockNodes::bind(pn, &format!("dec.attn{i}"), true);
        h = build_attention_block(g, h, &nodes, &cfg.dec_block_cfg(i), Some(enc_context));
    }
    h
}

/// Per-batch loss components; `total` is exactly `pred + cmc + vq` in that
/// summation order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub pred: f64,
    pub cmc: f64,
    pub vq: f64,
    pub total: f64,
}

/// Everything a training step needs from one mini-batch forward pass.
pub struct ForwardTrain {
    pub breakdown: LossBreakdown,
    /// Node to backpropagate from.
    pub total_node: NodeId,
    /// Normalized per-sample predictions, `[τ]` each.
    pub predictions: Vec<Vec<f64>>,
    /// Every codebook row selected in this batch.
    pub vq_selected: Vec<usize>,
    /// Stacked pre-quantization encoder rows, for dead-code resets.
    pub encoder_rows: Array2<f64>,
}

fn check_sample(cfg: &ModelConfig, s: &WindowSample) -> Result<(), ModelError> {
    if s.input.len() != cfg.input_len {
        return Err(ModelError::InputLenMismatch { expected: cfg.input_len, found: s.input.len() });
    }
    if s.target.len() != cfg.horizon {
        return Err(ModelError::HorizonMismatch { expected: cfg.horizon, found: s.target.len() });
    }
    if s.input_covariates.ncols() != cfg.n_covariates
        || s.target_covariates.ncols() != cfg.n_covariates
    {
        return Err(ModelError::CovariateMismatch {
            expected: cfg.n_covariates,
            found: s.input_covariates.ncols(),
        });
    }
    Ok(())
}

fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((values.len(), 1), values.to_vec()).unwrap()
}

/// Teacher-forced decoder input: the last observed value, then the targets
/// shifted right by one.
fn teacher_inputs(sample: &WindowSample) -> Array2<f64> {
    let mut v = Vec::with_capacity(sample.target.len());
    v.push(*sample.input.last().unwrap());
    v.extend_from_slice(&sample.target[..sample.target.len() - 1]);
    column(&v)
}

/// Mean absolute error between two equal-length vectors.
pub fn prediction_loss(pred: &[f64], target: &[f64]) -> f64 {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    pred.iter().zip(target).map(|(p, t)| (t - p).abs()).sum::<f64>() / pred.len() as f64
}

/// Build the teacher-forced training pass for one mini-batch on an existing
/// tape. The caller owns the bindings so it can read parameter gradients
/// back out after `backward`.
pub fn build_forward_train(
    g: &mut Graph,
    pn: &ParamNodes,
    cfg: &ModelConfig,
    batch: &[WindowSample],
    rng: &mut ChaCha8Rng,
) -> Result<ForwardTrain, ModelError> {
    if batch.is_empty() {
        return Err(ModelError::EmptyBatch);
    }
    for s in batch {
        check_sample(cfg, s)?;
    }
    let variant = cfg.variant;
    let b = batch.len() as f64;

    // Reparameterization noise is drawn up front, one block per sample, so
    // the draw order never depends on graph construction details.
    let eps: Vec<Array2<f64>> = batch
        .iter()
        .map(|_| Array2::from_shape_fn((1, cfg.d_context), |_| StandardNormal.sample(rng)))
        .collect();

    let mut pred_sum: Option<NodeId> = None;
    let mut vq_sum: Option<NodeId> = None;
    let mut views = Vec::new();
    let mut d_samples = Vec::new();
    let mut posteriors = Vec::new();
    let mut predictions = Vec::with_capacity(batch.len());
    let mut pred_nodes = Vec::with_capacity(batch.len());
    let mut vq_selected = Vec::new();
    let mut encoder_rows: Vec<f64> = Vec::new();
    let mut enc_width = 0usize;

    for (i, sample) in batch.iter().enumerate() {
        let input = g.constant(column(&sample.input));
        let cov = g.constant(sample.input_covariates.clone());
        let draw = if variant.uses_cmc() {
            ContextDraw::Reparam(&eps[i])
        } else {
            ContextDraw::Mean
        };
        let enc = build_sample_encodings(g, pn, cfg, input, cov, draw);

        if let (Some(z), Some(zhat)) = (enc.z, enc.zhat) {
            let vq = build_vq_loss(g, z, zhat, cfg.gamma);
            vq_sum = Some(match vq_sum {
                Some(t) => g.add(t, vq),
                None => vq,
            });
            vq_selected.extend_from_slice(&enc.vq_indices);
            let zv = g.value(z);
            enc_width = zv.ncols();
            encoder_rows.extend(zv.iter().cloned());
        }
        if let Some(ctx) = &enc.ctx {
            views.push((ctx.v_short, ctx.v_long));
            posteriors.push((ctx.mean, ctx.log_var));
        }
        if let Some(d) = enc.d {
            d_samples.push(d);
        }

        let dec_in = g.constant(teacher_inputs(sample));
        let fcov = g.constant(sample.target_covariates.clone());
        let out = build_decoder(g, pn, cfg, dec_in, fcov, enc.enc_context);
        predictions.push(g.value(out).column(0).to_vec());
        pred_nodes.push(out);

        let target = g.constant(column(&sample.target));
        let err = g.sub(target, out);
        let err = g.abs(err);
        let mae = g.mean_all(err);
        pred_sum = Some(match pred_sum {
            Some(t) => g.add(t, mae),
            None => mae,
        });
    }

    let pred = pred_sum.expect("non-empty batch");
    let pred = g.scale(pred, 1.0 / b);

    let cmc = if variant.uses_cmc() {
        let series: Vec<usize> = batch.iter().map(|s| s.series_index).collect();
        let cmc_batch = sample_cmc_batch(
            &series,
            cfg.input_len,
            cfg.positives_per_sample,
            cfg.negatives_per_positive,
            rng,
        )?;
        let f_short = DiscriminatorNodes::bind(pn, "disc.sh");
        let f_long = DiscriminatorNodes::bind(pn, "disc.lo");
        build_cmc_loss(
            g,
            &cmc_batch,
            &views,
            &d_samples,
            &posteriors,
            &f_short,
            &f_long,
            cfg.alpha,
            cfg.temperature,
        )
    } else {
        g.constant_scalar(0.0)
    };

    let vq = match vq_sum {
        Some(t) => g.scale(t, 1.0 / b),
        None => g.constant_scalar(0.0),
    };

    let pc = g.add(pred, cmc);
    let total_node = g.add(pc, vq);

    let breakdown = LossBreakdown {
        pred: g.scalar(pred),
        cmc: g.scalar(cmc),
        vq: g.scalar(vq),
        total: g.scalar(total_node),
    };
    let encoder_rows = if enc_width == 0 {
        Array2::zeros((0, 0))
    } else {
        Array2::from_shape_vec((encoder_rows.len() / enc_width, enc_width), encoder_rows).unwrap()
    };

    Ok(ForwardTrain {
        breakdown,
        total_node,
        predictions,
        vq_selected,
        encoder_rows,
    })
}

/// One teacher-forced training pass on a fresh tape, returning the
/// predictions and the loss components.
pub fn forward_train(
    params: &ParameterSet,
    cfg: &ModelConfig,
    batch: &[WindowSample],
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<Vec<f64>>, LossBreakdown), ModelError> {
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let out = build_forward_train(&mut g, &pn, cfg, batch, rng)?;
    Ok((out.predictions, out.breakdown))
}

/// Global encoder as a standalone operation: quantized conv features through
/// the shared trunk into the stored last block. Returns the encoding and the
/// selected codebook indices (empty when the variant disables VQ).
pub fn encode_global(
    sample: &WindowSample,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<(crate::nets::SequenceTensor, Vec<usize>), ModelError> {
    check_sample(cfg, sample)?;
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let input = g.constant(column(&sample.input));
    let cov = g.constant(sample.input_covariates.clone());
    let conv_out = build_conv_stack(&mut g, input, &pn, "trunk", &cfg.encoder_conv_config());
    let (h, indices) = if cfg.variant.uses_vq() {
        let book = pn.node("vq.codebook");
        let (st, _, idx) = build_quantize(&mut g, conv_out, book);
        (st, idx)
    } else {
        (conv_out, Vec::new())
    };
    let h = g.concat_cols(&[h, cov]);
    let enc = build_encoder_attention(&mut g, h, &pn, cfg, LastBlock::Stored("glob.last"));
    Ok((crate::nets::SequenceTensor(g.value(enc).clone()), indices))
}

/// Local encoder as a standalone operation: the shared trunk (no VQ) into a
/// block generated from the given context vector.
pub fn encode_local(
    sample: &WindowSample,
    d: &Array2<f64>,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<crate::nets::SequenceTensor, ModelError> {
    check_sample(cfg, sample)?;
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let input = g.constant(column(&sample.input));
    let cov = g.constant(sample.input_covariates.clone());
    let conv_out = build_conv_stack(&mut g, input, &pn, "trunk", &cfg.encoder_conv_config());
    let dn = g.constant(d.clone());
    let flat = build_generate(&mut g, dn, &pn, "hyper", cfg.hyper_gain);
    let h = g.concat_cols(&[conv_out, cov]);
    let layout = cfg.generated_layout();
    let enc = build_encoder_attention(&mut g, h, &pn, cfg, LastBlock::Generated(flat, &layout));
    Ok(crate::nets::SequenceTensor(g.value(enc).clone()))
}

/// De-normalize a normalized prediction vector with the window's stats.
pub fn denormalize_forecast(sample: &WindowSample, normalized: &[f64]) -> Vec<f64> {
    normalized.iter().map(|&v| sample.denormalize(v)).collect()
}

/// Autoregressive multi-step forecast in original units. The context enters
/// through its posterior mean; no parameters are mutated, so the identical
/// code path serves series never seen in training.
pub fn forecast(
    sample: &WindowSample,
    params: &ParameterSet,
    cfg: &ModelConfig,
) -> Result<Vec<f64>, ModelError> {
    check_sample(cfg, sample)?;
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let input = g.constant(column(&sample.input));
    let cov = g.constant(sample.input_covariates.clone());
    let enc = build_sample_encodings(&mut g, &pn, cfg, input, cov, ContextDraw::Mean);

    let mut values = vec![*sample.input.last().unwrap()];
    for step in 0..cfg.horizon {
        let dec_in = g.constant(column(&values));
        let fcov = g.constant(
            sample
                .target_covariates
                .slice(ndarray::s![..step + 1, ..])
                .to_owned(),
        );
        let out = build_decoder(&mut g, &pn, cfg, dec_in, fcov, enc.enc_context);
        values.push(g.value(out)[(step, 0)]);
    }
    Ok(denormalize_forecast(sample, &values[1..]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, make_windows, SyntheticSpec, WindowConfig};
    use crate::nets::ParameterSet;

    fn tiny_setup(variant: Variant) -> (ModelConfig, ParameterSet, Vec<WindowSample>) {
        let mut cfg = ModelConfig::tiny();
        cfg.variant = variant;
        cfg.validate().unwrap();
        let params = init_params(&cfg, 7);
        let spec = SyntheticSpec {
            n_series: 3,
            n_steps: 30,
            n_global_prototypes: 2,
            period: 6,
            local_amplitude: 0.4,
            trend_scale: 1e-3,
            noise_std: 0.01,
            seed: 11,
        };
        let (collection, _) = generate_synthetic(&spec).unwrap();
        let wcfg = WindowConfig::new(cfg.input_len, cfg.horizon, 19);
        let windows = make_windows(&collection, &wcfg).unwrap();
        assert!(windows.len() >= 3);
        (cfg, params, windows)
    }

    /// Randomize every parameter so degenerate initializations (zero
    /// hypernetwork output layer) do not hide paths from tests.
    pub(crate) fn randomize(params: &mut ParameterSet, seed: u64, scale: f64) {
        use rand::Rng;
        let mut rng = crate::rng::stream(seed, "randomize", 0);
        for (_, arr) in params.iter_mut() {
            for v in arr.iter_mut() {
                *v = rng.gen_range(-scale..scale);
            }
        }
    }

    #[test]
    fn variant_flags_are_consistent() {
        for v in Variant::ALL {
            assert!(v.uses_global() || v.uses_local());
            assert_eq!(v.uses_context(), v.uses_local());
            assert_eq!(Variant::parse(v.as_str()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
        assert!(!Variant::ConvTransformer.uses_vq());
        assert!(!Variant::LocalOnly.uses_vq());
        assert!(Variant::GlobalOnly.uses_vq());
    }

    #[test]
    fn paper_default_config_is_loadable() {
        let cfg = ModelConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.conv_kernels, vec![5, 3, 3, 3]);
        assert_eq!(cfg.conv_channels, vec![64, 64, 64, 64]);
        assert_eq!(cfg.enc_attn_heads, vec![4, 4, 4]);
        assert_eq!(cfg.enc_attn_dims, vec![32, 32, 32]);
        assert_eq!(cfg.dec_attn_dims, vec![32, 32, 32, 1]);
        assert_eq!(cfg.dec_attn_heads, vec![4, 4, 4, 1]);
        assert_eq!((cfg.input_len, cfg.horizon), (72, 24));
        assert_eq!(cfg.codebook_size, 64);
        assert_eq!((cfg.alpha, cfg.gamma), (0.7, 0.2));
        assert_eq!(cfg.positives_per_sample, 8);
        assert_eq!(cfg.negatives_per_positive, 32);
    }

    #[test]
    fn global_encoding_has_contract_shape_and_valid_indices() {
        let (cfg, mut params, windows) = tiny_setup(Variant::Full);
        randomize(&mut params, 1, 0.4);
        let (enc, idx) = encode_global(&windows[0], &params, &cfg).unwrap();
        assert_eq!(enc.length(), cfg.input_len);
        assert_eq!(enc.width(), cfg.encoder_width());
        assert_eq!(idx.len(), cfg.input_len);
        assert!(idx.iter().all(|&i| i < cfg.codebook_size));
    }

    #[test]
    fn single_code_codebook_freezes_attention_input() {
        let (mut cfg, params, windows) = tiny_setup(Variant::Full);
        cfg.codebook_size = 1;
        let params = {
            let _ = params;
            init_params(&cfg, 3)
        };
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &params);
        let input = g.constant(column(&windows[0].input));
        let conv =
            build_conv_stack(&mut g, input, &pn, "trunk", &cfg.encoder_conv_config());
        let book = pn.node("vq.codebook");
        let (st, _, idx) = build_quantize(&mut g, conv, book);
        assert!(idx.iter().all(|&i| i == 0));
        let v = g.value(st);
        for t in 1..v.nrows() {
            assert_eq!(v.row(t), v.row(0));
        }
    }

    #[test]
    fn local_encoding_specializes_on_context() {
        let (cfg, mut params, windows) = tiny_setup(Variant::Full);
        randomize(&mut params, 2, 0.4);
        let d1 = Array2::from_shape_vec((1, 2), vec![0.5, -1.0]).unwrap();
        let d2 = Array2::from_shape_vec((1, 2), vec![-0.7, 0.9]).unwrap();
        let e1 = encode_local(&windows[0], &d1, &params, &cfg).unwrap();
        let e2 = encode_local(&windows[0], &d2, &params, &cfg).unwrap();
        assert_eq!(e1.length(), cfg.input_len);
        assert_ne!(e1.0, e2.0);

        // Zero second layer: every context generates the same block.
        let mut frozen = params.clone();
        frozen.get_mut("hyper.w2").unwrap().fill(0.0);
        let f1 = encode_local(&windows[0], &d1, &frozen, &cfg).unwrap();
        let f2 = encode_local(&windows[0], &d2, &frozen, &cfg).unwrap();
        assert_eq!(f1.0, f2.0);
    }

    #[test]
    fn decoder_is_causal_in_its_inputs() {
        let (cfg, mut params, windows) = tiny_setup(Variant::Full);
        randomize(&mut params, 3, 0.4);
        let sample = &windows[0];
        let run = |teacher: &Array2<f64>| {
            let mut g = Graph::new();
            let pn = ParamNodes::bind(&mut g, &params);
            let input = g.constant(column(&sample.input));
            let cov = g.constant(sample.input_covariates.clone());
            let enc =
                build_sample_encodings(&mut g, &pn, &cfg, input, cov, ContextDraw::Mean);
            let dec_in = g.constant(teacher.clone());
            let fcov = g.constant(sample.target_covariates.clone());
            let out = build_decoder(&mut g, &pn, &cfg, dec_in, fcov, enc.enc_context);
            g.value(out).clone()
        };
        let teacher = teacher_inputs(sample);
        let base = run(&teacher);
        let mut bumped = teacher.clone();
        bumped[(1, 0)] += 3.0;
        let moved = run(&bumped);
        // Step 0 precedes the perturbed input; steps ≥ 1 see it.
        assert_eq!(base[(0, 0)], moved[(0, 0)]);
        assert_ne!(base[(1, 0)], moved[(1, 0)]);
    }

    #[test]
    fn prediction_loss_examples() {
        assert_eq!(prediction_loss(&[1.0, 2.0], &[1.0, 2.0]), 0.0);
        assert_eq!(prediction_loss(&[2.0, 2.0], &[1.0, 2.0]), 0.5);
        let a = prediction_loss(&[2.0, 2.0], &[1.0, 2.0]);
        let b = prediction_loss(&[12.0, 12.0], &[11.0, 12.0]);
        assert_eq!(a, b);
    }

    #[test]
    fn breakdown_components_sum_exactly() {
        let (cfg, mut params, windows) = tiny_setup(Variant::Full);
        randomize(&mut params, 4, 0.3);
        let mut rng = crate::rng::stream(0, "fwd", 0);
        let (preds, b) = forward_train(&params, &cfg, &windows[..3], &mut rng).unwrap();
        assert_eq!(preds.len(), 3);
        assert_eq!(preds[0].len(), cfg.horizon);
        assert!(b.pred > 0.0);
        assert!(b.vq > 0.0);
        assert_eq!(b.total, (b.pred + b.cmc) + b.vq);
    }

    #[test]
    fn conv_transformer_breakdown_has_no_cmc_or_vq() {
        let (cfg, params, windows) = tiny_setup(Variant::ConvTransformer);
        let mut rng = crate::rng::stream(0, "fwd", 1);
        let (_, b) = forward_train(&params, &cfg, &windows[..3], &mut rng).unwrap();
        assert_eq!(b.cmc, 0.0);
        assert_eq!(b.vq, 0.0);
        assert_eq!(b.total, b.pred);
    }

    #[test]
    fn single_series_batch_fails_when_cmc_active() {
        let (cfg, params, windows) = tiny_setup(Variant::Full);
        let same: Vec<WindowSample> =
            windows.iter().filter(|w| w.series_index == 0).take(2).cloned().collect();
        assert_eq!(same.len(), 2);
        let mut rng = crate::rng::stream(0, "fwd", 2);
        match forward_train(&params, &cfg, &same, &mut rng) {
            Err(ModelError::Context(ContextError::SingleSeriesBatch)) => {}
            other => panic!("expected single-series error, got {other:?}"),
        }
    }

    #[test]
    fn variant_gradient_isolation() {
        let (mut cfg, mut params, windows) = tiny_setup(Variant::GlobalOnly);
        randomize(&mut params, 5, 0.3);
        let mut rng = crate::rng::stream(0, "fwd", 3);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &params);
        let out = build_forward_train(&mut g, &pn, &cfg, &windows[..3], &mut rng).unwrap();
        g.backward(out.total_node);
        for (name, id) in pn.iter() {
            let grad_norm = g
                .grad(id)
                .map(|a| a.iter().map(|v| v * v).sum::<f64>())
                .unwrap_or(0.0);
            if name.starts_with("hyper.") || name.starts_with("ctx.") || name.starts_with("disc.")
            {
                assert_eq!(grad_norm, 0.0, "{name} should be disconnected under global_only");
            }
        }

        cfg.variant = Variant::LocalOnly;
        let params2 = init_params(&cfg, 9);
        let mut params2 = params2;
        randomize(&mut params2, 6, 0.3);
        let mut g = Graph::new();
        let pn = ParamNodes::bind(&mut g, &params2);
        let out = build_forward_train(&mut g, &pn, &cfg, &windows[..3], &mut rng).unwrap();
        g.backward(out.total_node);
        let cb = pn.node("vq.codebook");
        assert!(g.grad(cb).is_none() || g.grad(cb).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn forecast_is_deterministic_and_finite() {
        let (cfg, mut params, windows) = tiny_setup(Variant::Full);
        randomize(&mut params, 7, 0.3);
        let a = forecast(&windows[0], &params, &cfg).unwrap();
        let b = forecast(&windows[0], &params, &cfg).unwrap();
        assert_eq!(a.len(), cfg.horizon);
        assert!(a.iter().all(|v| v.is_finite()));
        assert_eq!(a, b);
    }

    #[test]
    fn echoed_targets_denormalize_to_raw_targets() {
        let (_, _, windows) = tiny_setup(Variant::Full);
        let w = &windows[0];
        let echoed = denormalize_forecast(w, &w.target);
        for (a, b) in echoed.iter().zip(w.raw_target()) {
            assert!((a - b).abs() <= 1e-8 * b.abs().max(1.0));
        }
    }

    #[test]
    fn forecast_leaves_parameters_untouched() {
        let (cfg, params, windows) = tiny_setup(Variant::Full);
        let before = params.checksum();
        let _ = forecast(&windows[0], &params, &cfg).unwrap();
        assert_eq!(params.checksum(), before);
    }
}
