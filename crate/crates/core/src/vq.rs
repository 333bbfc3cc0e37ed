//! Vector quantization: a shared `[F × d]` codebook, nearest-neighbor lookup
//! with deterministic tie-breaking, the straight-through gradient contract,
//! the codebook/commitment loss, and dead-code maintenance.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::graph::{Graph, NodeId};
use crate::nets::SequenceTensor;

#[derive(Debug, Error)]
pub enum VqError {
    #[error("input width {found} does not match codebook dim {expected}")]
    WidthMismatch { expected: usize, found: usize },
    #[error("dead-code reset due but no recent encoder outputs were provided")]
    NoRecentOutputs,
}

/// The table of global-pattern vectors, plus usage bookkeeping maintained by
/// the training loop (one "step" = one mini-batch).
#[derive(Debug, Clone)]
pub struct Codebook {
    /// `[F × d]`.
    pub vectors: Array2<f64>,
    pub usage_counts: Vec<u64>,
    pub steps_since_use: Vec<u64>,
}

impl Codebook {
    /// Rows drawn from `Normal(0, 1/√d)`.
    pub fn init(size: usize, dim: usize, rng: &mut ChaCha8Rng) -> Self {
        assert!(size >= 1 && dim >= 1);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let vectors = Array2::from_shape_fn((size, dim), |_| normal.sample(rng));
        Codebook { vectors, usage_counts: vec![0; size], steps_since_use: vec![0; size] }
    }

    pub fn from_vectors(vectors: Array2<f64>) -> Self {
        let size = vectors.nrows();
        Codebook { vectors, usage_counts: vec![0; size], steps_since_use: vec![0; size] }
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.ncols()
    }

    /// Record one mini-batch of selections: selected rows get their usage
    /// bumped and idle clock cleared, unselected rows age by one step.
    pub fn record_batch(&mut self, selected: &[usize]) {
        record_batch_usage(&mut self.usage_counts, &mut self.steps_since_use, selected);
    }
}

/// Counter-level form of [`Codebook::record_batch`], for callers that keep
/// the codebook vectors inside a larger parameter set.
pub fn record_batch_usage(usage_counts: &mut [u64], steps_since_use: &mut [u64], selected: &[usize]) {
    let mut hit = vec![false; usage_counts.len()];
    for &ix in selected {
        usage_counts[ix] += 1;
        hit[ix] = true;
    }
    for (row, was_hit) in hit.iter().enumerate() {
        if *was_hit {
            steps_since_use[row] = 0;
        } else {
            steps_since_use[row] += 1;
        }
    }
}

/// Nearest codebook row (Euclidean) per time step; ties go to the lowest
/// index. Returns the quantized rows and the selected indices.
pub fn quantize(
    z_seq: &SequenceTensor,
    book: &Codebook,
) -> Result<(SequenceTensor, Vec<usize>), VqError> {
    if z_seq.width() != book.dim() {
        return Err(VqError::WidthMismatch { expected: book.dim(), found: z_seq.width() });
    }
    let indices = nearest_rows(&z_seq.0, &book.vectors);
    let mut zhat = Array2::zeros(z_seq.0.dim());
    for (t, &ix) in indices.iter().enumerate() {
        zhat.row_mut(t).assign(&book.vectors.row(ix));
    }
    Ok((SequenceTensor(zhat), indices))
}

/// Per-row gap between the best and second-best squared distances to the
/// codebook. Small margins mean a perturbation could flip the selection;
/// finite-difference suites check this before trusting their probes.
pub fn nearest_margins(z: &Array2<f64>, book: &Array2<f64>) -> Vec<f64> {
    z.rows()
        .into_iter()
        .map(|zr| {
            let mut best = f64::INFINITY;
            let mut second = f64::INFINITY;
            for br in book.rows() {
                let d: f64 = zr.iter().zip(br.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best {
                    second = best;
                    best = d;
                } else if d < second {
                    second = d;
                }
            }
            second - best
        })
        .collect()
}

pub(crate) fn nearest_rows(z: &Array2<f64>, book: &Array2<f64>) -> Vec<usize> {
    let mut out = Vec::with_capacity(z.nrows());
    for zr in z.rows() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (j, br) in book.rows().into_iter().enumerate() {
            let d: f64 = zr.iter().zip(br.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        out.push(best);
    }
    out
}

/// Quantize on the tape: select indices from the current values, gather the
/// codebook rows, and route gradients straight through to `z`.
///
/// Returns `(pass_through, zhat, indices)`: downstream layers consume
/// `pass_through`, the loss consumes `z` and `zhat`.
pub fn build_quantize(
    g: &mut Graph,
    z: NodeId,
    codebook: NodeId,
) -> (NodeId, NodeId, Vec<usize>) {
    let indices = nearest_rows(g.value(z), g.value(codebook));
    let zhat = g.gather_rows(codebook, &indices);
    let st = g.straight_through(z, zhat);
    (st, zhat, indices)
}

/// Two-term quantization loss on the tape, averaged over time steps:
/// `‖sg(z) − ẑ‖² + γ·‖z − sg(ẑ)‖²` per step, mean over the sequence. The
/// first term reaches only the codebook rows, the second only the encoder
/// output. The per-step mean keeps the term on the same scale as the
/// prediction loss for any input length.
pub fn build_vq_loss(g: &mut Graph, z: NodeId, zhat: NodeId, gamma: f64) -> NodeId {
    let steps = g.value(z).nrows() as f64;
    let sg_z = g.stop_gradient(z);
    let d1 = g.sub(sg_z, zhat);
    let sq1 = g.mul(d1, d1);
    let t1 = g.sum_all(sq1);

    let sg_zhat = g.stop_gradient(zhat);
    let d2 = g.sub(z, sg_zhat);
    let sq2 = g.mul(d2, d2);
    let t2 = g.sum_all(sq2);

    let t2 = g.scale(t2, gamma);
    let total = g.add(t1, t2);
    g.scale(total, 1.0 / steps)
}

/// Forward-only loss value for an already-quantized pair:
/// `(1+γ) ·` mean over time steps of the squared distance.
pub fn vq_loss(z_seq: &SequenceTensor, zhat_seq: &SequenceTensor, gamma: f64) -> f64 {
    assert_eq!(z_seq.0.dim(), zhat_seq.0.dim(), "vq_loss: shape mismatch");
    let sq: f64 =
        z_seq.0.iter().zip(zhat_seq.0.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
    (1.0 + gamma) * sq / z_seq.0.nrows() as f64
}

/// Replace every row idle for at least `patience` steps with a uniformly
/// sampled recent encoder output. Returns the indices of the reset rows.
pub fn reset_dead_codes(
    book: &mut Codebook,
    recent_outputs: &Array2<f64>,
    patience: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, VqError> {
    reset_dead_rows(
        &mut book.vectors,
        &mut book.usage_counts,
        &mut book.steps_since_use,
        recent_outputs,
        patience,
        rng,
    )
}

/// Array-level form of [`reset_dead_codes`].
pub fn reset_dead_rows(
    vectors: &mut Array2<f64>,
    usage_counts: &mut [u64],
    steps_since_use: &mut [u64],
    recent_outputs: &Array2<f64>,
    patience: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>, VqError> {
    assert!(patience >= 1);
    let due: Vec<usize> =
        (0..vectors.nrows()).filter(|&r| steps_since_use[r] >= patience).collect();
    if due.is_empty() {
        return Ok(due);
    }
    if recent_outputs.nrows() == 0 {
        return Err(VqError::NoRecentOutputs);
    }
    assert_eq!(recent_outputs.ncols(), vectors.ncols(), "recent outputs width mismatch");
    for &row in &due {
        let pick = rng.gen_range(0..recent_outputs.nrows());
        vectors.row_mut(row).assign(&recent_outputs.row(pick));
        steps_since_use[row] = 0;
        usage_counts[row] = 0;
    }
    Ok(due)
}
