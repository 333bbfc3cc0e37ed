//! Context recognition: a convolutional-Transformer encoder plus an LSTM
//! aggregator producing the per-window stochastic context variable, the KL
//! regularizer toward the standard-normal prior, and the contrastive
//! multi-horizon coding objective over short- and long-term views.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::nets::{
    build_attention_block, build_conv_stack, init_attention_block, init_conv_stack, init_linear,
    AttentionBlockConfig, AttnBlockNodes, ConvStackConfig, ParamNodes, ParameterSet,
};

/// Clamp range for the posterior log-variance.
pub const LOG_VAR_RANGE: (f64, f64) = (-20.0, 20.0);

#[derive(Debug, Error)]
pub enum ContextError {
    #[error("contrastive sampling needs at least two distinct series in the batch")]
    SingleSeriesBatch,
    #[error("contrastive loss needs at least one negative")]
    EmptyNegatives,
    #[error("temperature must be positive, got {0}")]
    BadTemperature(f64),
}

/// Diagonal-Gaussian posterior over the context variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextPosterior {
    /// `[1 × d_D]`.
    pub mean: Array2<f64>,
    /// `[1 × d_D]`, clamped to [`LOG_VAR_RANGE`].
    pub log_var: Array2<f64>,
}

impl ContextPosterior {
    pub fn dim(&self) -> usize {
        self.mean.ncols()
    }
}

/// Short- and long-term views of one window inside the context recognition
/// network: the convolution output and the Transformer output.
#[derive(Debug, Clone)]
pub struct ContextViews {
    pub short: Array2<f64>,
    pub long: Array2<f64>,
}

/// Tape handles produced by [`build_context_net`].
#[derive(Debug, Clone, Copy)]
pub struct ContextNetOut {
    pub v_short: NodeId,
    pub v_long: NodeId,
    pub mean: NodeId,
    pub log_var: NodeId,
}

/// Architecture of the context recognition network. Its parameters are its
/// own, separate from the feature encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextNetConfig {
    pub conv: ConvStackConfig,
    pub attn_dims: Vec<usize>,
    pub attn_heads: Vec<usize>,
    pub ffn_ratio: usize,
    pub lstm_hidden: usize,
    pub d_context: usize,
}

impl ContextNetConfig {
    fn block_cfg(&self, i: usize) -> AttentionBlockConfig {
        AttentionBlockConfig {
            model_dim: self.attn_dims[i],
            n_heads: self.attn_heads[i],
            ffn_hidden: self.ffn_ratio * self.attn_dims[i],
            masked: false,
            cross: false,
        }
    }
}

/// Initialize all context-network parameters under `prefix` (conv stack,
/// attention blocks, LSTM aggregator, posterior heads). The log-variance
/// head is zero-initialized so every initial posterior has unit variance.
pub fn init_context_net(
    ps: &mut ParameterSet,
    prefix: &str,
    n_covariates: usize,
    cfg: &ContextNetConfig,
    rng: &mut ChaCha8Rng,
) {
    init_conv_stack(ps, prefix, 1, &cfg.conv, rng);
    let mut width = cfg.conv.output_width() + n_covariates;
    for (i, &dim) in cfg.attn_dims.iter().enumerate() {
        if width != dim {
            init_linear(ps, &format!("{prefix}.resize{i}"), width, dim, rng);
        }
        init_attention_block(ps, &format!("{prefix}.attn{i}"), &cfg.block_cfg(i), None, rng);
        width = dim;
    }
    let h = cfg.lstm_hidden;
    ps.insert(format!("{prefix}.lstm.w_ih"), crate::nets::init_weight(rng, width, 4 * h));
    ps.insert(format!("{prefix}.lstm.w_hh"), crate::nets::init_weight(rng, h, 4 * h));
    ps.insert(format!("{prefix}.lstm.b"), Array2::zeros((1, 4 * h)));
    init_linear(ps, &format!("{prefix}.mean"), h, cfg.d_context, rng);
    ps.insert(format!("{prefix}.logvar.w"), Array2::zeros((h, cfg.d_context)));
    ps.insert(format!("{prefix}.logvar.b"), Array2::zeros((1, cfg.d_context)));
}

/// Single-layer LSTM over the rows of `x`, returning the final hidden state
/// (`[1 × hidden]`). Gate order inside the stacked weights is i, f, g, o.
fn build_lstm_final(
    g: &mut Graph,
    x: NodeId,
    w_ih: NodeId,
    w_hh: NodeId,
    b: NodeId,
    hidden: usize,
) -> NodeId {
    let steps = g.value(x).nrows();
    let mut h = g.constant(Array2::zeros((1, hidden)));
    let mut c = g.constant(Array2::zeros((1, hidden)));
    for t in 0..steps {
        let x_t = g.slice_rows(x, t, t + 1);
        let gx = g.matmul(x_t, w_ih);
        let gh = g.matmul(h, w_hh);
        let gates = g.add(gx, gh);
        let gates = g.add_row(gates, b);
        let i_g = g.slice_cols(gates, 0, hidden);
        let f_g = g.slice_cols(gates, hidden, 2 * hidden);
        let g_g = g.slice_cols(gates, 2 * hidden, 3 * hidden);
        let o_g = g.slice_cols(gates, 3 * hidden, 4 * hidden);
        let i_g = g.sigmoid(i_g);
        let f_g = g.sigmoid(f_g);
        let g_g = g.tanh(g_g);
        let o_g = g.sigmoid(o_g);
        let keep = g.mul(f_g, c);
        let write = g.mul(i_g, g_g);
        c = g.add(keep, write);
        let c_act = g.tanh(c);
        h = g.mul(o_g, c_act);
    }
    h
}

/// Build the context recognition network on the tape: conv stack → short
/// view; covariate concat + attention blocks → long view; LSTM over the long
/// view → posterior heads.
pub fn build_context_net(
    g: &mut Graph,
    window: NodeId,
    covariates: Option<NodeId>,
    pn: &ParamNodes,
    prefix: &str,
    cfg: &ContextNetConfig,
) -> ContextNetOut {
    let v_short = build_conv_stack(g, window, pn, prefix, &cfg.conv);
    let mut h = match covariates {
        Some(cov) => g.concat_cols(&[v_short, cov]),
        None => v_short,
    };
    for (i, &dim) in cfg.attn_dims.iter().enumerate() {
        if g.value(h).ncols() != dim {
            let w = pn.node(&format!("{prefix}.resize{i}.w"));
            let b = pn.node(&format!("{prefix}.resize{i}.b"));
            let proj = g.matmul(h, w);
            h = g.add_row(proj, b);
        }
        let nodes = AttnBlockNodes::bind(pn, &format!("{prefix}.attn{i}"), false);
        h = build_attention_block(g, h, &nodes, &cfg.block_cfg(i), None);
    }
    let v_long = h;
    let final_h = build_lstm_final(
        g,
        v_long,
        pn.node(&format!("{prefix}.lstm.w_ih")),
        pn.node(&format!("{prefix}.lstm.w_hh")),
        pn.node(&format!("{prefix}.lstm.b")),
        cfg.lstm_hidden,
    );
    let mw = pn.node(&format!("{prefix}.mean.w"));
    let mb = pn.node(&format!("{prefix}.mean.b"));
    let mean = g.matmul(final_h, mw);
    let mean = g.add_row(mean, mb);
    let vw = pn.node(&format!("{prefix}.logvar.w"));
    let vb = pn.node(&format!("{prefix}.logvar.b"));
    let log_var = g.matmul(final_h, vw);
    let log_var = g.add_row(log_var, vb);
    let log_var = g.clamp(log_var, LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
    ContextNetOut { v_short, v_long, mean, log_var }
}

/// How the context variable is drawn from its posterior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    /// Reparameterized draw `mean + exp(log_var/2) ⊙ ε`.
    Train,
    /// The posterior mean.
    Infer,
}

/// Draw the context variable from a posterior (plain arrays).
pub fn sample_context(
    post: &ContextPosterior,
    mode: SampleMode,
    rng: &mut ChaCha8Rng,
) -> Array2<f64> {
    match mode {
        SampleMode::Infer => post.mean.clone(),
        SampleMode::Train => {
            let eps: Array2<f64> =
                Array2::from_shape_fn(post.mean.dim(), |_| StandardNormal.sample(rng));
            &post.mean + &(post.log_var.mapv(|lv| (0.5 * lv).exp()) * &eps)
        }
    }
}

/// Reparameterized draw on the tape; gradients flow to both heads. `eps` is
/// a fixed standard-normal draw supplied by the caller's rng stream.
pub fn build_sample_context(
    g: &mut Graph,
    mean: NodeId,
    log_var: NodeId,
    eps: &Array2<f64>,
) -> NodeId {
    let half = g.scale(log_var, 0.5);
    let std = g.exp(half);
    let e = g.constant(eps.clone());
    let noise = g.mul(std, e);
    g.add(mean, noise)
}

/// Closed-form KL divergence from the posterior to the standard-normal
/// prior: `½·Σ(μ² + exp(lv) − lv − 1)`.
pub fn kl_closed_form(post: &ContextPosterior) -> f64 {
    post.mean
        .iter()
        .zip(post.log_var.iter())
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
        * 0.5
}

/// The same KL divergence on the tape.
pub fn build_kl_loss(g: &mut Graph, mean: NodeId, log_var: NodeId) -> NodeId {
    let m2 = g.mul(mean, mean);
    let ev = g.exp(log_var);
    let s = g.add(m2, ev);
    let s = g.sub(s, log_var);
    let s = g.add_scalar(s, -1.0);
    let s = g.sum_all(s);
    g.scale(s, 0.5)
}

/// Discrimination head: a 2-layer ReLU MLP scoring a (context, view) pair.
/// Parameters live under `prefix.{w1,b1,w2,b2}` with input width
/// `d_context + view_width`.
pub fn init_discriminator(
    ps: &mut ParameterSet,
    prefix: &str,
    d_context: usize,
    view_width: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    init_linear(ps, &format!("{prefix}.l1"), d_context + view_width, hidden, rng);
    init_linear(ps, &format!("{prefix}.l2"), hidden, 1, rng);
}

#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl DiscriminatorNodes {
    pub fn bind(pn: &ParamNodes, prefix: &str) -> Self {
        DiscriminatorNodes {
            w1: pn.node(&format!("{prefix}.l1.w")),
            b1: pn.node(&format!("{prefix}.l1.b")),
            w2: pn.node(&format!("{prefix}.l2.w")),
            b2: pn.node(&format!("{prefix}.l2.b")),
        }
    }
}

fn build_score(g: &mut Graph, disc: &DiscriminatorNodes, d: NodeId, v: NodeId) -> NodeId {
    let input = g.concat_cols(&[d, v]);
    let h = g.matmul(input, disc.w1);
    let h = g.add_row(h, disc.b1);
    let h = g.relu(h);
    let out = g.matmul(h, disc.w2);
    g.add_row(out, disc.b2)
}

/// Cross-entropy of selecting the positive among `1 + K` candidates scored
/// by `f(D, v)/temperature`; built on the tape.
pub fn build_contrastive_loss(
    g: &mut Graph,
    disc: &DiscriminatorNodes,
    d: NodeId,
    positive: NodeId,
    negatives: &[NodeId],
    temperature: f64,
) -> NodeId {
    assert!(!negatives.is_empty(), "contrastive loss needs negatives");
    assert!(temperature > 0.0);
    let mut scores = Vec::with_capacity(1 + negatives.len());
    scores.push(build_score(g, disc, d, positive));
    for &n in negatives {
        scores.push(build_score(g, disc, d, n));
    }
    let row = g.concat_cols(&scores);
    let row = g.scale(row, 1.0 / temperature);
    let lse = g.logsumexp_row(row);
    let pos = g.slice_cols(row, 0, 1);
    g.sub(lse, pos)
}

/// Forward-only contrastive loss over plain vectors, with discriminator
/// parameters under `prefix`.
pub fn contrastive_loss(
    d: &Array2<f64>,
    positive: &Array2<f64>,
    negatives: &[Array2<f64>],
    params: &ParameterSet,
    prefix: &str,
    temperature: f64,
) -> Result<f64, ContextError> {
    if negatives.is_empty() {
        return Err(ContextError::EmptyNegatives);
    }
    if temperature <= 0.0 {
        return Err(ContextError::BadTemperature(temperature));
    }
    let mut g = Graph::new();
    let pn = ParamNodes::bind(&mut g, params);
    let disc = DiscriminatorNodes::bind(&pn, prefix);
    let dn = g.constant(d.clone());
    let pos = g.constant(positive.clone());
    let negs: Vec<NodeId> = negatives.iter().map(|n| g.constant(n.clone())).collect();
    let loss = build_contrastive_loss(&mut g, &disc, dn, pos, &negs, temperature);
    Ok(g.scalar(loss))
}

/// One contrastive group: a positive time step of one sample plus `K`
/// negative (sample, step) pairs drawn from other series in the batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmcGroup {
    pub sample: usize,
    pub step: usize,
    pub negatives: Vec<(usize, usize)>,
}

/// Sampled positives/negatives for both views of a mini-batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CmcBatch {
    pub short: Vec<CmcGroup>,
    pub long: Vec<CmcGroup>,
}

/// Draw `positives_per_sample` positive steps per sample and view, each with
/// `k` negatives sampled uniformly from the same view's steps of other
/// series in the batch.
pub fn sample_cmc_batch(
    series_of_sample: &[usize],
    seq_len: usize,
    positives_per_sample: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<CmcBatch, ContextError> {
    assert!(positives_per_sample >= 1 && k >= 1 && seq_len >= 1);
    let n = series_of_sample.len();
    // Candidate negative samples per sample: any window of another series.
    let candidates: Vec<Vec<usize>> = (0..n)
        .map(|s| {
            (0..n).filter(|&o| series_of_sample[o] != series_of_sample[s]).collect::<Vec<_>>()
        })
        .collect();
    if candidates.iter().any(|c| c.is_empty()) {
        return Err(ContextError::SingleSeriesBatch);
    }

    let draw_view = |rng: &mut ChaCha8Rng| -> Vec<CmcGroup> {
        let mut groups = Vec::with_capacity(n * positives_per_sample);
        for sample in 0..n {
            for _ in 0..positives_per_sample {
                let step = rng.gen_range(0..seq_len);
                let negatives = (0..k)
                    .map(|_| {
                        let other = candidates[sample][rng.gen_range(0..candidates[sample].len())];
                        (other, rng.gen_range(0..seq_len))
                    })
                    .collect();
                groups.push(CmcGroup { sample, step, negatives });
            }
        }
        groups
    };
    let short = draw_view(rng);
    let long = draw_view(rng);
    Ok(CmcBatch { short, long })
}

/// Combined contrastive-multi-horizon objective on the tape: the mean
/// short-view and long-view cross-entropies plus `α ·` the mean posterior KL.
/// `views` are per-sample (short, long) nodes, `d_samples` the per-sample
/// context draws, `posteriors` the per-sample (mean, log_var) nodes.
#[allow(clippy::too_many_arguments)]
pub fn build_cmc_loss(
    g: &mut Graph,
    batch: &CmcBatch,
    views: &[(NodeId, NodeId)],
    d_samples: &[NodeId],
    posteriors: &[(NodeId, NodeId)],
    f_short: &DiscriminatorNodes,
    f_long: &DiscriminatorNodes,
    alpha: f64,
    temperature: f64,
) -> NodeId {
    let view_loss = |g: &mut Graph,
                         groups: &[CmcGroup],
                         disc: &DiscriminatorNodes,
                         pick: &dyn Fn(usize) -> NodeId|
     -> NodeId {
        let mut total: Option<NodeId> = None;
        for group in groups {
            let seq = pick(group.sample);
            let pos = g.slice_rows(seq, group.step, group.step + 1);
            let negs: Vec<NodeId> = group
                .negatives
                .iter()
                .map(|&(s, t)| {
                    let seq = pick(s);
                    g.slice_rows(seq, t, t + 1)
                })
                .collect();
            let loss =
                build_contrastive_loss(g, disc, d_samples[group.sample], pos, &negs, temperature);
            total = Some(match total {
                Some(t) => g.add(t, loss),
                None => loss,
            });
        }
        let t = total.expect("at least one contrastive group");
        g.scale(t, 1.0 / groups.len() as f64)
    };

    let short = view_loss(g, &batch.short, f_short, &|s| views[s].0);
    let long = view_loss(g, &batch.long, f_long, &|s| views[s].1);
    let mut loss = g.add(short, long);

    if alpha != 0.0 {
        let mut kl_total: Option<NodeId> = None;
        for &(mean, log_var) in posteriors {
            let kl = build_kl_loss(g, mean, log_var);
            kl_total = Some(match kl_total {
                Some(t) => g.add(t, kl),
                None => kl,
            });
        }
        let kl = kl_total.expect("at least one posterior");
        let kl = g.scale(kl, alpha / posteriors.len() as f64);
        loss = g.add(loss, kl);
    }
    loss
}
