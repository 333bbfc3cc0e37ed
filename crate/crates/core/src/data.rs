//! Panels of correlated series: CSV ingestion, sliding-window construction
//! with per-window normalization, transductive/inductive splitting, and a
//! synthetic generator with known global/local structure.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::rng::stream;

/// Floor applied to the per-window standard deviation so constant input
/// segments normalize to zeros instead of dividing by zero.
pub const NORM_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected {expected} columns, found {found}")]
    RaggedRow { line: usize, expected: usize, found: usize },
    #[error("line {line}: cell {column} is not a finite number: {cell:?}")]
    NonNumeric { line: usize, column: usize, cell: String },
    #[error("line {line}: duplicate series id {id:?}")]
    DuplicateSeriesId { line: usize, id: String },
    #[error("covariate file has {found} time rows but the panel has {expected} steps")]
    CovariateRowMismatch { expected: usize, found: usize },
    #[error("line {line}: time index must increase from 0, found {cell:?}")]
    BadTimeIndex { line: usize, cell: String },
    #[error("{path}: missing or malformed header line")]
    BadHeader { path: String },
    #[error("series have {n_steps} steps, too short for input {input_len} + horizon {horizon}")]
    EmptyWindow { n_steps: usize, input_len: usize, horizon: usize },
    #[error("need at least 10 series to populate all split groups, found {n_series}")]
    TooFewSeries { n_series: usize },
    #[error("split groups must partition the series indices exactly")]
    BadPartition,
    #[error("invalid synthetic spec: {reason}")]
    BadSyntheticSpec { reason: String },
}

/// A panel of `n_series` aligned real-valued series with optional shared
/// time-based covariates.
#[derive(Debug, Clone)]
pub struct SeriesCollection {
    /// `[n_series × n_steps]`.
    pub values: Array2<f64>,
    pub series_ids: Vec<String>,
    pub granularity: String,
    /// `[n_steps × n_cov]` when present.
    pub covariates: Option<Array2<f64>>,
}

impl SeriesCollection {
    pub fn new(
        values: Array2<f64>,
        series_ids: Vec<String>,
        granularity: impl Into<String>,
        covariates: Option<Array2<f64>>,
    ) -> Result<Self, DataError> {
        assert!(values.nrows() >= 1 && values.ncols() >= 1, "empty panel");
        assert_eq!(values.nrows(), series_ids.len(), "one id per series");
        assert!(values.iter().all(|v| v.is_finite()), "non-finite panel entry");
        if let Some(cov) = &covariates {
            if cov.nrows() != values.ncols() {
                return Err(DataError::CovariateRowMismatch {
                    expected: values.ncols(),
                    found: cov.nrows(),
                });
            }
        }
        Ok(SeriesCollection { values, series_ids, granularity: granularity.into(), covariates })
    }

    pub fn n_series(&self) -> usize {
        self.values.nrows()
    }

    pub fn n_steps(&self) -> usize {
        self.values.ncols()
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.as_ref().map_or(0, |c| c.ncols())
    }
}

/// One normalized (input, target) window.
///
/// `input` and `target` are consecutive in the source series and both stored
/// in normalized units; de-normalizing with (`norm_mean`, `norm_std`)
/// recovers the raw segment.
#[derive(Debug, Clone)]
pub struct WindowSample {
    pub series_index: usize,
    /// Absolute step index of the first input value.
    pub start: usize,
    /// Normalized, length `T`.
    pub input: Vec<f64>,
    /// Normalized, length `τ`.
    pub target: Vec<f64>,
    /// `[T × n_cov]`.
    pub input_covariates: Array2<f64>,
    /// `[τ × n_cov]`.
    pub target_covariates: Array2<f64>,
    pub norm_mean: f64,
    pub norm_std: f64,
}

impl WindowSample {
    /// Map a normalized value back to original units.
    pub fn denormalize(&self, v: f64) -> f64 {
        v * self.norm_std + self.norm_mean
    }

    /// Raw (de-normalized) target segment.
    pub fn raw_target(&self) -> Vec<f64> {
        self.target.iter().map(|&v| self.denormalize(v)).collect()
    }
}

/// Window geometry shared by every window-producing routine.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowConfig {
    pub input_len: usize,
    pub horizon: usize,
    pub stride: usize,
    /// Wavelength (in steps) of the synthesized sin/cos phase pair attached
    /// when the collection carries no covariates of its own.
    pub covariate_period: usize,
}

impl WindowConfig {
    pub fn new(input_len: usize, horizon: usize, stride: usize) -> Self {
        WindowConfig { input_len, horizon, stride, covariate_period: 24 }
    }

    pub fn window_len(&self) -> usize {
        self.input_len + self.horizon
    }
}

/// Mean and population standard deviation of a segment, with the std floored
/// for constant segments.
pub fn segment_stats(segment: &[f64]) -> (f64, f64) {
    let n = segment.len() as f64;
    let mean = segment.iter().sum::<f64>() / n;
    let var = segment.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt().max(NORM_STD_FLOOR))
}

/// Covariate rows for steps `[start, start+len)`: the collection's own
/// covariates when present, otherwise a sin/cos pair over the absolute step
/// index with wavelength `cfg.covariate_period`.
pub fn covariate_rows(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
    start: usize,
    len: usize,
) -> Array2<f64> {
    match &collection.covariates {
        Some(cov) => cov.slice(s![start..start + len, ..]).to_owned(),
        None => {
            let p = cfg.covariate_period as f64;
            Array2::from_shape_fn((len, 2), |(i, j)| {
                let phase = TAU * ((start + i) % cfg.covariate_period) as f64 / p;
                if j == 0 {
                    phase.sin()
                } else {
                    phase.cos()
                }
            })
        }
    }
}

/// Materialize the window of `series` starting at absolute step `start`.
pub fn materialize_window(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
    series: usize,
    start: usize,
) -> WindowSample {
    let t = cfg.input_len;
    let h = cfg.horizon;
    let row = collection.values.row(series);
    let input_raw: Vec<f64> = row.slice(s![start..start + t]).to_vec();
    let target_raw: Vec<f64> = row.slice(s![start + t..start + t + h]).to_vec();
    let (mean, std) = segment_stats(&input_raw);
    WindowSample {
        series_index: series,
        start,
        input: input_raw.iter().map(|&v| (v - mean) / std).collect(),
        target: target_raw.iter().map(|&v| (v - mean) / std).collect(),
        input_covariates: covariate_rows(collection, cfg, start, t),
        target_covariates: covariate_rows(collection, cfg, start + t, h),
        norm_mean: mean,
        norm_std: std,
    }
}

/// All full windows of every series, one per valid start offset.
pub fn make_windows(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
) -> Result<Vec<WindowSample>, DataError> {
    assert!(cfg.input_len >= 1 && cfg.horizon >= 1 && cfg.stride >= 1);
    let offsets = window_offsets(collection.n_steps(), cfg)?;
    let mut out = Vec::with_capacity(offsets.len() * collection.n_series());
    for series in 0..collection.n_series() {
        for &start in &offsets {
            out.push(materialize_window(collection, cfg, series, start));
        }
    }
    Ok(out)
}

/// Valid window start offsets for a series of `n_steps` steps.
pub fn window_offsets(n_steps: usize, cfg: &WindowConfig) -> Result<Vec<usize>, DataError> {
    let len = cfg.window_len();
    if n_steps < len {
        return Err(DataError::EmptyWindow {
            n_steps,
            input_len: cfg.input_len,
            horizon: cfg.horizon,
        });
    }
    Ok((0..=n_steps - len).step_by(cfg.stride).collect())
}

/// A (series, start offset) window reference; materialized on demand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub series_index: usize,
    pub start: usize,
}

/// Series-level and window-level split of a panel.
///
/// Series are partitioned 70/10/20 into transductive, inductive-validation,
/// and inductive-test groups; the transductive windows are split 60/20/20 in
/// chronological order. Inductive windows whose time range intersects the
/// transductive training time range are excluded.
#[derive(Debug, Clone)]
pub struct DatasetSplits {
    pub window: WindowConfig,
    pub transductive_series: Vec<usize>,
    pub inductive_val_series: Vec<usize>,
    pub inductive_test_series: Vec<usize>,
    pub train_windows: Vec<WindowRef>,
    pub val_windows: Vec<WindowRef>,
    pub test_windows: Vec<WindowRef>,
    /// First step index no training window touches; inductive windows start
    /// at or after it.
    pub train_time_end: usize,
}

/// Partition series 70/10/20 (remainder to the transductive group) and split
/// transductive windows 60/20/20 chronologically. Deterministic given `seed`.
pub fn split(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
    seed: u64,
) -> Result<DatasetSplits, DataError> {
    let n = collection.n_series();
    if n < 10 {
        return Err(DataError::TooFewSeries { n_series: n });
    }
    let n_val = n / 10;
    let n_test = n * 2 / 10;
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = stream(seed, "series-split", 0);
    // Fisher-Yates.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let transductive: Vec<usize> = order[..n - n_val - n_test].to_vec();
    let inductive_val: Vec<usize> = order[n - n_val - n_test..n - n_test].to_vec();
    let inductive_test: Vec<usize> = order[n - n_test..].to_vec();
    build_splits(collection, cfg, transductive, inductive_val, inductive_test)
}

/// Build splits from an explicit series partition (validated).
pub fn split_from_parts(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
    transductive: Vec<usize>,
    inductive_val: Vec<usize>,
    inductive_test: Vec<usize>,
) -> Result<DatasetSplits, DataError> {
    let n = collection.n_series();
    let mut seen = vec![false; n];
    for &i in transductive.iter().chain(&inductive_val).chain(&inductive_test) {
        if i >= n || seen[i] {
            return Err(DataError::BadPartition);
        }
        seen[i] = true;
    }
    if !seen.iter().all(|&s| s) {
        return Err(DataError::BadPartition);
    }
    build_splits(collection, cfg, transductive, inductive_val, inductive_test)
}

fn build_splits(
    collection: &SeriesCollection,
    cfg: &WindowConfig,
    mut transductive: Vec<usize>,
    mut inductive_val: Vec<usize>,
    mut inductive_test: Vec<usize>,
) -> Result<DatasetSplits, DataError> {
    transductive.sort_unstable();
    inductive_val.sort_unstable();
    inductive_test.sort_unstable();

    let offsets = window_offsets(collection.n_steps(), cfg)?;
    let n_off = offsets.len();
    let train_end = n_off * 6 / 10;
    let val_end = n_off * 8 / 10;

    let windows_for = |range: &[usize]| -> Vec<WindowRef> {
        let mut v = Vec::with_capacity(range.len() * transductive.len());
        for &start in range {
            for &series_index in &transductive {
                v.push(WindowRef { series_index, start });
            }
        }
        v
    };
    let train_windows = windows_for(&offsets[..train_end]);
    let val_windows = windows_for(&offsets[train_end..val_end]);
    let test_windows = windows_for(&offsets[val_end..]);
    let train_time_end = offsets[..train_end]
        .last()
        .map(|&s| s + cfg.window_len())
        .unwrap_or(0);

    Ok(DatasetSplits {
        window: *cfg,
        transductive_series: transductive,
        inductive_val_series: inductive_val,
        inductive_test_series: inductive_test,
        train_windows,
        val_windows,
        test_windows,
        train_time_end,
    })
}

impl DatasetSplits {
    /// Evaluation windows for one inductive group, excluding any window whose
    /// time range intersects the transductive training time range.
    pub fn inductive_windows(
        &self,
        collection: &SeriesCollection,
        series: &[usize],
    ) -> Result<Vec<WindowRef>, DataError> {
        let offsets = window_offsets(collection.n_steps(), &self.window)?;
        let mut out = Vec::new();
        for &start in offsets.iter().filter(|&&s| s >= self.train_time_end) {
            for &series_index in series {
                out.push(WindowRef { series_index, start });
            }
        }
        Ok(out)
    }
}

/// Configuration of the synthetic panel generator.
///
/// Series `i` is `prototype_{i mod P}(t) · (1 + a_i·s_i(t)) + b_i·t + ε_t`:
/// one of `n_global_prototypes` shared periodic shapes, modulated by a
/// series-specific smooth wave of amplitude `a_i ≤ local_amplitude`, plus a
/// per-series linear trend and Gaussian noise. Per-series randomness is keyed
/// by (seed, series index), so growing `n_series` leaves existing series
/// bitwise unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_series: usize,
    pub n_steps: usize,
    pub n_global_prototypes: usize,
    pub period: usize,
    pub local_amplitude: f64,
    pub trend_scale: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_series: 20,
            n_steps: 400,
            n_global_prototypes: 4,
            period: 24,
            local_amplitude: 0.5,
            trend_scale: 0.0,
            noise_std: 0.02,
            seed: 0,
        }
    }
}

struct Prototype {
    offset: f64,
    amps: Vec<f64>,
    phases: Vec<f64>,
}

impl Prototype {
    fn sample(seed: u64, index: u64) -> Self {
        let mut rng = stream(seed, "synthetic-prototype", index);
        let offset = rng.gen_range(8.0..12.0);
        let mut amps = Vec::new();
        let mut phases = Vec::new();
        for h in 1..=3usize {
            amps.push(rng.gen_range(0.4..1.4) / h as f64);
            phases.push(rng.gen_range(0.0..TAU));
        }
        Prototype { offset, amps, phases }
    }

    fn eval(&self, t: usize, period: usize) -> f64 {
        // Phase computed from t mod period so periodicity is exact in floats.
        let frac = (t % period) as f64 / period as f64;
        let mut v = self.offset;
        for (h, (&a, &p)) in self.amps.iter().zip(&self.phases).enumerate() {
            v += a * (TAU * (h + 1) as f64 * frac + p).sin();
        }
        v
    }
}

/// Generate a synthetic panel plus the ground-truth prototype assignment of
/// each series.
pub fn generate_synthetic(
    spec: &SyntheticSpec,
) -> Result<(SeriesCollection, Vec<usize>), DataError> {
    if spec.n_global_prototypes < 1 {
        return Err(DataError::BadSyntheticSpec { reason: "need at least one prototype".into() });
    }
    if spec.period < 2 {
        return Err(DataError::BadSyntheticSpec { reason: "period must be at least 2".into() });
    }
    if spec.n_series < 1 || spec.n_steps < 1 {
        return Err(DataError::BadSyntheticSpec { reason: "panel must be non-empty".into() });
    }
    if spec.local_amplitude < 0.0 || spec.trend_scale < 0.0 || spec.noise_std < 0.0 {
        return Err(DataError::BadSyntheticSpec { reason: "scales must be non-negative".into() });
    }

    let prototypes: Vec<Prototype> = (0..spec.n_global_prototypes)
        .map(|p| Prototype::sample(spec.seed, p as u64))
        .collect();

    let mut values = Array2::zeros((spec.n_series, spec.n_steps));
    let mut assignments = Vec::with_capacity(spec.n_series);
    for i in 0..spec.n_series {
        let proto_ix = i % spec.n_global_prototypes;
        assignments.push(proto_ix);
        let proto = &prototypes[proto_ix];

        let mut local_rng = stream(spec.seed, "synthetic-series", i as u64);
        let amp = local_rng.gen_range(0.0..=1.0) * spec.local_amplitude;
        let wavelength = local_rng.gen_range(1.5..4.0) * spec.period as f64;
        let phase = local_rng.gen_range(0.0..TAU);
        let trend = if spec.trend_scale > 0.0 {
            local_rng.gen_range(-spec.trend_scale..=spec.trend_scale)
        } else {
            0.0
        };

        let mut noise_rng = stream(spec.seed, "synthetic-noise", i as u64);
        let noise = if spec.noise_std > 0.0 {
            Some(Normal::new(0.0, spec.noise_std).expect("valid noise std"))
        } else {
            None
        };

        for t in 0..spec.n_steps {
            let modulation = 1.0 + amp * (TAU * t as f64 / wavelength + phase).sin();
            let eps = noise.map_or(0.0, |n| n.sample(&mut noise_rng));
            values[(i, t)] = proto.eval(t, spec.period) * modulation + trend * t as f64 + eps;
        }
    }

    let covariates = Array2::from_shape_fn((spec.n_steps, 2), |(t, j)| {
        let phase = TAU * (t % spec.period) as f64 / spec.period as f64;
        if j == 0 {
            phase.sin()
        } else {
            phase.cos()
        }
    });
    let ids = (0..spec.n_series).map(|i| format!("s{i}")).collect();
    let collection = SeriesCollection::new(values, ids, "step", Some(covariates))?;
    Ok((collection, assignments))
}

// ---- CSV formats ----
//
// Values:      header `series_id,v0,v1,...,v{n_steps-1}`, one row per series.
// Covariates:  header `t,c0,c1,...`, one row per step, `t` increasing from 0.
// Assignments: header `series_id,prototype_index`.

/// Load a panel, and optionally its covariates, from CSV.
pub fn load_csv(
    values_path: &Path,
    covariates_path: Option<&Path>,
) -> Result<SeriesCollection, DataError> {
    let text = read_text(values_path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::BadHeader { path: values_path.display().to_string() })?;
    let n_cols = header.split(',').count();
    if n_cols < 2 || !header.starts_with("series_id") {
        return Err(DataError::BadHeader { path: values_path.display().to_string() });
    }
    let n_steps = n_cols - 1;

    let mut ids: Vec<String> = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    for (ix, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = ix + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(DataError::RaggedRow {
                line: line_no,
                expected: n_cols,
                found: cells.len(),
            });
        }
        let id = cells[0].to_string();
        if ids.contains(&id) {
            return Err(DataError::DuplicateSeriesId { line: line_no, id });
        }
        ids.push(id);
        for (col, cell) in cells[1..].iter().enumerate() {
            rows.push(parse_cell(cell, line_no, col + 2)?);
        }
    }
    if ids.is_empty() {
        return Err(DataError::BadHeader { path: values_path.display().to_string() });
    }
    let values =
        Array2::from_shape_vec((ids.len(), n_steps), rows).expect("validated row lengths");

    let covariates = match covariates_path {
        Some(path) => Some(load_covariates_csv(path, n_steps)?),
        None => None,
    };
    SeriesCollection::new(values, ids, "unknown", covariates)
}

fn load_covariates_csv(path: &Path, n_steps: usize) -> Result<Array2<f64>, DataError> {
    let text = read_text(path)?;
    let mut lines = text.lines().enumerate();
    let (_, header) =
        lines.next().ok_or_else(|| DataError::BadHeader { path: path.display().to_string() })?;
    let n_cols = header.split(',').count();
    if n_cols < 2 || !header.starts_with('t') {
        return Err(DataError::BadHeader { path: path.display().to_string() });
    }
    let n_cov = n_cols - 1;
    let mut cells_flat: Vec<f64> = Vec::new();
    let mut n_rows = 0usize;
    for (ix, line) in lines {
        if line.is_empty() {
            continue;
        }
        let line_no = ix + 1;
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != n_cols {
            return Err(DataError::RaggedRow {
                line: line_no,
                expected: n_cols,
                found: cells.len(),
            });
        }
        let t: usize = cells[0]
            .trim()
            .parse()
            .map_err(|_| DataError::BadTimeIndex { line: line_no, cell: cells[0].to_string() })?;
        if t != n_rows {
            return Err(DataError::BadTimeIndex { line: line_no, cell: cells[0].to_string() });
        }
        for (col, cell) in cells[1..].iter().enumerate() {
            cells_flat.push(parse_cell(cell, line_no, col + 2)?);
        }
        n_rows += 1;
    }
    if n_rows != n_steps {
        return Err(DataError::CovariateRowMismatch { expected: n_steps, found: n_rows });
    }
    Ok(Array2::from_shape_vec((n_rows, n_cov), cells_flat).expect("validated row lengths"))
}

fn parse_cell(cell: &str, line: usize, column: usize) -> Result<f64, DataError> {
    let v: f64 = cell.trim().parse().map_err(|_| DataError::NonNumeric {
        line,
        column,
        cell: cell.to_string(),
    })?;
    if !v.is_finite() {
        return Err(DataError::NonNumeric { line, column, cell: cell.to_string() });
    }
    Ok(v)
}

fn read_text(path: &Path) -> Result<String, DataError> {
    fs::read_to_string(path)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

fn write_text(path: &Path, text: &str) -> Result<(), DataError> {
    fs::write(path, text)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

/// Write a panel's values in the loadable CSV format.
pub fn write_values_csv(collection: &SeriesCollection, path: &Path) -> Result<(), DataError> {
    let mut out = String::from("series_id");
    for t in 0..collection.n_steps() {
        let _ = write!(out, ",v{t}");
    }
    out.push('\n');
    for (i, id) in collection.series_ids.iter().enumerate() {
        out.push_str(id);
        for v in collection.values.row(i) {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Write a panel's covariates, if any.
pub fn write_covariates_csv(collection: &SeriesCollection, path: &Path) -> Result<(), DataError> {
    let cov = collection.covariates.as_ref().expect("no covariates to write");
    let mut out = String::from("t");
    for c in 0..cov.ncols() {
        let _ = write!(out, ",c{c}");
    }
    out.push('\n');
    for (t, row) in cov.rows().into_iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    write_text(path, &out)
}

/// Write the ground-truth prototype assignment sidecar.
pub fn write_assignments_csv(
    collection: &SeriesCollection,
    assignments: &[usize],
    path: &Path,
) -> Result<(), DataError> {
    let mut out = String::from("series_id,prototype_index\n");
    for (id, p) in collection.series_ids.iter().zip(assignments) {
        let _ = writeln!(out, "{id},{p}");
    }
    write_text(path, &out)
}
