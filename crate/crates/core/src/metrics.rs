//! Forecast error metrics over a set of evaluation windows, all computed in
//! original (de-normalized) units: MAPE, WAPE, and SMAPE per window and then
//! averaged, plus a per-horizon-step MAE breakdown.

use ndarray::Array2;
use thiserror::Error;

/// Denominator guard for the percentage metrics.
pub const METRIC_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("target shape {targets:?} does not match prediction shape {preds:?}")]
    ShapeMismatch { targets: (usize, usize), preds: (usize, usize) },
    #[error("metrics need at least one window")]
    Empty,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub mape: f64,
    pub wape: f64,
    pub smape: f64,
    pub n_windows: usize,
    /// Mean absolute error at each horizon step, length τ.
    pub per_step_mae: Vec<f64>,
}

/// Compute the three percentage metrics and the per-step MAE for
/// `[windows × τ]` matrices of actuals and forecasts.
pub fn metrics(targets: &Array2<f64>, preds: &Array2<f64>) -> Result<MetricsReport, MetricsError> {
    if targets.dim() != preds.dim() {
        return Err(MetricsError::ShapeMismatch { targets: targets.dim(), preds: preds.dim() });
    }
    let (n, horizon) = targets.dim();
    if n == 0 || horizon == 0 {
        return Err(MetricsError::Empty);
    }

    let mut mape_sum = 0.0;
    let mut wape_sum = 0.0;
    let mut smape_sum = 0.0;
    let mut per_step_mae = vec![0.0; horizon];
    for (t_row, p_row) in targets.rows().into_iter().zip(preds.rows()) {
        let mut mape = 0.0;
        let mut smape = 0.0;
        let mut abs_err = 0.0;
        let mut abs_actual = 0.0;
        for (k, (&y, &yhat)) in t_row.iter().zip(p_row.iter()).enumerate() {
            let e = (y - yhat).abs();
            mape += e / y.abs().max(METRIC_EPS);
            smape += 2.0 * e / (y + yhat).abs().max(METRIC_EPS);
            abs_err += e;
            abs_actual += y.abs();
            per_step_mae[k] += e;
        }
        mape_sum += mape / horizon as f64;
        smape_sum += smape / horizon as f64;
        wape_sum += abs_err / abs_actual.max(METRIC_EPS);
    }
    for v in per_step_mae.iter_mut() {
        *v /= n as f64;
    }
    Ok(MetricsReport {
        mape: mape_sum / n as f64,
        wape: wape_sum / n as f64,
        smape: smape_sum / n as f64,
        n_windows: n,
        per_step_mae,
    })
}
