//! Mini-batch training: horizontal blocks over window offsets crossed with
//! random vertical blocks over series, Adam updates with global-norm
//! clipping, stepped learning-rate decay, dead-code maintenance, and the
//! transductive/inductive evaluation protocols.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use thiserror::Error;

use crate::checkpoint::{manifest_from_model, rng_digest, Checkpoint, CheckpointError};
use crate::data::{materialize_window, DataError, DatasetSplits, SeriesCollection, WindowRef};
use crate::graph::Graph;
use crate::metrics::{metrics, MetricsError, MetricsReport};
use crate::model::{
    build_forward_train, forecast, init_params, LossBreakdown, ModelConfig, ModelError,
};
use crate::nets::{ParamNodes, ParameterSet};
use crate::rng::stream;
use crate::vq::{record_batch_usage, reset_dead_rows, VqError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: pred={pred} cmc={cmc} vq={vq}")]
    NonFiniteLoss { epoch: usize, batch: usize, pred: f64, cmc: f64, vq: f64 },
    #[error("no training windows in the split")]
    NoTrainingWindows,
    #[error("inductive series overlap the transductive training series")]
    InductiveOverlap,
}

/// Optimization schedule and batching geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_factor: f64,
    /// Halve (by `decay_factor`) every this many epochs.
    pub decay_every: usize,
    pub epochs: usize,
    /// Horizontal batch size: consecutive window offsets per block.
    pub b_h: usize,
    /// Vertical batch size: series per block.
    pub b_v: usize,
    pub seed: u64,
    pub clip_norm: f64,
    pub dead_code_patience: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            decay_factor: 0.5,
            decay_every: 10,
            epochs: 60,
            b_h: 32,
            b_v: 64,
            seed: 0,
            clip_norm: 5.0,
            dead_code_patience: 100,
        }
    }
}

/// Stepped learning rate for a 0-based epoch index.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_factor.powi((epoch / cfg.decay_every) as i32)
}

/// Adam moment state over a named parameter set.
pub struct Adam {
    m: BTreeMap<String, Array2<f64>>,
    v: BTreeMap<String, Array2<f64>>,
    t: i32,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }

    /// One update step from per-parameter gradients.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &BTreeMap<String, Array2<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (name, grad) in grads {
            let p = params.get_mut(name).expect("gradient for unknown parameter");
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(grad.dim()));
            for ((pv, gv), (mv, vv)) in
                p.iter_mut().zip(grad.iter()).zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

/// Scale all gradients so their global L2 norm is at most `clip`.
pub fn clip_global_norm(grads: &mut BTreeMap<String, Array2<f64>>, clip: f64) -> f64 {
    let norm: f64 = grads
        .values()
        .map(|g| g.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > clip && norm > 0.0 {
        let s = clip / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
    norm
}

/// Per-epoch summary recorded into the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub pred: f64,
    pub cmc: f64,
    pub vq: f64,
    pub total: f64,
    pub val_wape: f64,
    pub n_batches: usize,
}

/// Training curve plus codebook-health diagnostics.
#[derive(Debug, Clone, Default)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochStats>,
    /// Largest idle-step count any codebook row ever reached.
    pub codebook_max_idle: u64,
    pub codebook_resets: usize,
}

/// Outcome of a training run: the best-validation checkpoint and the curve.
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: TrainingHistory,
    pub best_val_wape: f64,
    pub best_epoch: usize,
}

fn materialize_batch(
    collection: &SeriesCollection,
    splits: &DatasetSplits,
    offsets: &[usize],
    series: &[usize],
) -> Vec<crate::data::WindowSample> {
    let mut batch = Vec::with_capacity(offsets.len() * series.len());
    for &start in offsets {
        for &s in series {
            batch.push(materialize_window(collection, &splits.window, s, start));
        }
    }
    batch
}

/// Train on the transductive split per the mini-batch protocol, returning
/// the checkpoint with the best transductive-validation WAPE.
pub fn train(
    collection: &SeriesCollection,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    model_cfg.validate()?;
    if splits.train_windows.is_empty() {
        return Err(TrainError::NoTrainingWindows);
    }
    let mut offsets: Vec<usize> = splits.train_windows.iter().map(|w| w.start).collect();
    offsets.sort_unstable();
    offsets.dedup();
    let transductive = &splits.transductive_series;

    let mut params = init_params(model_cfg, train_cfg.seed);
    let mut adam = Adam::new();
    let mut forward_rng = stream(train_cfg.seed, "train-forward", 0);
    let mut series_rng = stream(train_cfg.seed, "train-vertical", 0);
    let mut reset_rng = stream(train_cfg.seed, "train-resets", 0);

    let f = model_cfg.codebook_size;
    let mut usage = vec![0u64; f];
    let mut idle = vec![0u64; f];
    let mut history = TrainingHistory::default();

    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_params = params.clone();

    let v_blocks = transductive.len().div_ceil(train_cfg.b_v);
    let mut g = Graph::new();

    for epoch in 0..train_cfg.epochs {
        let lr = lr_at(train_cfg, epoch);
        let mut sums = LossBreakdown { pred: 0.0, cmc: 0.0, vq: 0.0, total: 0.0 };
        let mut n_batches = 0usize;

        for h_block in offsets.chunks(train_cfg.b_h) {
            for _ in 0..v_blocks {
                // Random vertical indices: b_v distinct series (all of them
                // when the split is smaller than b_v).
                let series: Vec<usize> = if transductive.len() <= train_cfg.b_v {
                    transductive.clone()
                } else {
                    let mut pool = transductive.clone();
                    for i in 0..train_cfg.b_v {
                        let j = series_rng.gen_range(i..pool.len());
                        pool.swap(i, j);
                    }
                    pool.truncate(train_cfg.b_v);
                    pool
                };
                let batch = materialize_batch(collection, splits, h_block, &series);

                g.clear();
                let pn = ParamNodes::bind(&mut g, &params);
                let out = build_forward_train(&mut g, &pn, model_cfg, &batch, &mut forward_rng)?;
                let b = out.breakdown;
                if !b.total.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        epoch,
                        batch: n_batches,
                        pred: b.pred,
                        cmc: b.cmc,
                        vq: b.vq,
                    });
                }
                g.backward(out.total_node);
                let mut grads: BTreeMap<String, Array2<f64>> = pn
                    .iter()
                    .map(|(name, id)| {
                        let grad = g
                            .grad(id)
                            .cloned()
                            .unwrap_or_else(|| Array2::zeros(g.value(id).dim()));
                        (name.to_string(), grad)
                    })
                    .collect();
                clip_global_norm(&mut grads, train_cfg.clip_norm);
                adam.step(&mut params, &grads, lr);

                if model_cfg.variant.uses_vq() {
                    record_batch_usage(&mut usage, &mut idle, &out.vq_selected);
                    history.codebook_max_idle =
                        history.codebook_max_idle.max(idle.iter().copied().max().unwrap_or(0));
                    let book = params.get_mut("vq.codebook").expect("codebook present");
                    let reset = reset_dead_rows(
                        book,
                        &mut usage,
                        &mut idle,
                        &out.encoder_rows,
                        train_cfg.dead_code_patience,
                        &mut reset_rng,
                    )?;
                    history.codebook_resets += reset.len();
                }

                sums.pred += b.pred;
                sums.cmc += b.cmc;
                sums.vq += b.vq;
                sums.total += b.total;
                n_batches += 1;
            }
        }

        let val_wape = if splits.val_windows.is_empty() {
            f64::NAN
        } else {
            evaluate_windows(collection, splits, &splits.val_windows, &params, model_cfg)?.wape
        };
        if val_wape.is_finite() && val_wape < best_val {
            best_val = val_wape;
            best_epoch = epoch;
            best_params = params.clone();
        }
        let n = n_batches as f64;
        history.epochs.push(EpochStats {
            epoch,
            lr,
            pred: sums.pred / n,
            cmc: sums.cmc / n,
            vq: sums.vq / n,
            total: sums.total / n,
            val_wape,
            n_batches,
        });
    }

    if !best_val.is_finite() {
        best_params = params;
        best_epoch = train_cfg.epochs.saturating_sub(1);
    }
    let mut manifest = vec![
        ("format_version".to_string(), "1".to_string()),
        ("variant".to_string(), model_cfg.variant.as_str().to_string()),
        ("epoch".to_string(), best_epoch.to_string()),
        ("seed".to_string(), train_cfg.seed.to_string()),
        ("best_val_wape".to_string(), best_val.to_string()),
        ("rng_digest".to_string(), rng_digest(train_cfg.seed, best_epoch)),
    ];
    manifest.extend(manifest_from_model(model_cfg));
    let checkpoint = Checkpoint { manifest, params: best_params };
    Ok(TrainOutcome { checkpoint, history, best_val_wape: best_val, best_epoch })
}

/// Forecast every referenced window and aggregate the error metrics.
pub fn evaluate_windows(
    collection: &SeriesCollection,
    splits: &DatasetSplits,
    windows: &[WindowRef],
    params: &ParameterSet,
    model_cfg: &ModelConfig,
) -> Result<MetricsReport, TrainError> {
    let horizon = splits.window.horizon;
    let mut targets = Array2::zeros((windows.len(), horizon));
    let mut preds = Array2::zeros((windows.len(), horizon));
    for (i, w) in windows.iter().enumerate() {
        let sample = materialize_window(collection, &splits.window, w.series_index, w.start);
        let fc = forecast(&sample, params, model_cfg)?;
        for (k, (&t, &p)) in sample.raw_target().iter().zip(&fc).enumerate() {
            targets[(i, k)] = t;
            preds[(i, k)] = p;
        }
    }
    Ok(metrics(&targets, &preds)?)
}

/// Score the transductive test windows. Parameters are never mutated.
pub fn evaluate_transductive(
    ckpt: &Checkpoint,
    collection: &SeriesCollection,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
) -> Result<MetricsReport, TrainError> {
    evaluate_windows(collection, splits, &splits.test_windows, &ckpt.params, model_cfg)
}

/// Which inductive group to score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InductiveGroup {
    Validation,
    Test,
}

/// Score held-out series through the identical forecast path, asserting that
/// no parameter changes in the process.
pub fn evaluate_inductive(
    ckpt: &Checkpoint,
    collection: &SeriesCollection,
    splits: &DatasetSplits,
    model_cfg: &ModelConfig,
    group: InductiveGroup,
) -> Result<MetricsReport, TrainError> {
    let series = match group {
        InductiveGroup::Validation => &splits.inductive_val_series,
        InductiveGroup::Test => &splits.inductive_test_series,
    };
    if series.iter().any(|s| splits.transductive_series.contains(s)) {
        return Err(TrainError::InductiveOverlap);
    }
    let before = ckpt.checksum();
    let windows = splits.inductive_windows(collection, series)?;
    let report = evaluate_windows(collection, splits, &windows, &ckpt.params, model_cfg)?;
    assert_eq!(ckpt.checksum(), before, "inductive evaluation mutated parameters");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, split, SyntheticSpec, WindowConfig};
    use crate::model::Variant;

    #[test]
    fn learning_rate_schedule_matches_decay_rule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 1e-3);
        assert_eq!(lr_at(&cfg, 9), 1e-3);
        assert_eq!(lr_at(&cfg, 10), 5e-4);
        assert_eq!(lr_at(&cfg, 25), 2.5e-4);
    }

    #[test]
    fn horizontal_blocks_keep_partial_tails() {
        let offsets: Vec<usize> = (0..100).collect();
        let sizes: Vec<usize> = offsets.chunks(32).map(|c| c.len()).collect();
        assert_eq!(sizes, vec![32, 32, 32, 4]);
    }

    #[test]
    fn adam_step_descends_a_quadratic_bowl() {
        // f(θ) = ½‖θ − θ*‖², gradient θ − θ*.
        let target = Array2::from_shape_vec((1, 3), vec![1.0, -2.0, 0.5]).unwrap();
        let mut params = ParameterSet::new();
        params.insert("theta", Array2::zeros((1, 3)));
        let mut adam = Adam::new();
        let grad = {
            let mut m = BTreeMap::new();
            m.insert("theta".to_string(), params.get("theta").unwrap() - &target);
            m
        };
        let before: f64 = (params.get("theta").unwrap() - &target)
            .iter()
            .map(|v| v * v)
            .sum();
        adam.step(&mut params, &grad, 0.1);
        let after: f64 = (params.get("theta").unwrap() - &target)
            .iter()
            .map(|v| v * v)
            .sum();
        assert!(after < before);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = BTreeMap::new();
        grads.insert("a".to_string(), Array2::from_elem((2, 2), 3.0));
        grads.insert("b".to_string(), Array2::from_elem((1, 2), 4.0));
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!(norm > 5.0);
        let after: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        assert!((after - 5.0).abs() < 1e-12);

        let mut small = BTreeMap::new();
        small.insert("a".to_string(), Array2::from_elem((1, 1), 0.5));
        clip_global_norm(&mut small, 5.0);
        assert_eq!(small["a"][(0, 0)], 0.5);
    }

    fn smoke_setup() -> (crate::data::SeriesCollection, DatasetSplits, ModelConfig, TrainConfig) {
        let spec = SyntheticSpec {
            n_series: 12,
            n_steps: 90,
            n_global_prototypes: 3,
            period: 8,
            local_amplitude: 0.4,
            trend_scale: 0.0,
            noise_std: 0.01,
            seed: 5,
        };
        let (collection, _) = generate_synthetic(&spec).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.negatives_per_positive = 2;
        let wcfg = WindowConfig::new(cfg.input_len, cfg.horizon, 13);
        let splits = split(&collection, &wcfg, 3).unwrap();
        let tcfg = TrainConfig {
            epochs: 2,
            b_h: 2,
            b_v: 4,
            seed: 1,
            ..TrainConfig::default()
        };
        (collection, splits, cfg, tcfg)
    }

    #[test]
    fn training_runs_and_is_deterministic() {
        let (collection, splits, cfg, tcfg) = smoke_setup();
        let a = train(&collection, &splits, &cfg, &tcfg).unwrap();
        let b = train(&collection, &splits, &cfg, &tcfg).unwrap();
        assert_eq!(a.checkpoint.checksum(), b.checkpoint.checksum());
        assert_eq!(a.history.epochs.len(), 2);
        assert!(a.history.epochs[0].total.is_finite());
        assert!(a.best_val_wape.is_finite());

        let mut other = tcfg.clone();
        other.seed = 2;
        let c = train(&collection, &splits, &cfg, &other).unwrap();
        assert_ne!(a.checkpoint.checksum(), c.checkpoint.checksum());
    }

    #[test]
    fn evaluation_is_pure_and_repeatable() {
        let (collection, splits, cfg, tcfg) = smoke_setup();
        let out = train(&collection, &splits, &cfg, &tcfg).unwrap();
        let r1 = evaluate_transductive(&out.checkpoint, &collection, &splits, &cfg).unwrap();
        let r2 = evaluate_transductive(&out.checkpoint, &collection, &splits, &cfg).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.n_windows, splits.test_windows.len());
        assert_eq!(r1.per_step_mae.len(), cfg.horizon);

        let before = out.checkpoint.checksum();
        let ri = evaluate_inductive(
            &out.checkpoint,
            &collection,
            &splits,
            &cfg,
            InductiveGroup::Test,
        )
        .unwrap();
        assert_eq!(out.checkpoint.checksum(), before);
        assert!(ri.n_windows > 0);

        let rv = evaluate_inductive(
            &out.checkpoint,
            &collection,
            &splits,
            &cfg,
            InductiveGroup::Validation,
        )
        .unwrap();
        // Swapping groups only changes which series are scored.
        assert_ne!(ri.n_windows, 0);
        assert_ne!(rv, ri);
    }

    #[test]
    fn conv_transformer_variant_trains_too() {
        let (collection, splits, mut cfg, mut tcfg) = smoke_setup();
        cfg.variant = Variant::ConvTransformer;
        tcfg.epochs = 1;
        let out = train(&collection, &splits, &cfg, &tcfg).unwrap();
        assert_eq!(out.history.epochs[0].cmc, 0.0);
        assert_eq!(out.history.epochs[0].vq, 0.0);
        assert_eq!(out.history.codebook_resets, 0);
    }
}
