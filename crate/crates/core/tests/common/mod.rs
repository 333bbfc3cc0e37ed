//! Shared finite-difference machinery for the gradient suites.

use std::collections::BTreeMap;

use deepdgl_core::data::{generate_synthetic, make_windows, SyntheticSpec, WindowConfig};
use deepdgl_core::graph::Graph;
use deepdgl_core::model::{build_forward_train, init_params, ModelConfig};
use deepdgl_core::nets::{ParamNodes, ParameterSet};
use deepdgl_core::vq::nearest_margins;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;
/// Floor below which finite differences are dominated by f64 cancellation
/// noise (~1e-11 for unit-scale losses); gradients this small are compared
/// absolutely.
pub const ABS_TOL: f64 = 1e-7;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

/// Overwrite every parameter with uniform noise so zero-initialized layers
/// (hypernetwork output, log-variance head) still exercise their paths.
/// Layer-norm scales stay near one and shifts near zero, otherwise random
/// affine norms kill entire ReLU channels and the check degenerates.
pub fn randomize_params(params: &mut ParameterSet, seed: u64, scale: f64) {
    let mut r = rng(seed);
    for (name, arr) in params.iter_mut() {
        if name.ends_with(".scale") {
            for v in arr.iter_mut() {
                *v = r.gen_range(0.8..1.2);
            }
        } else if name.ends_with(".shift") {
            for v in arr.iter_mut() {
                *v = r.gen_range(-0.05..0.05);
            }
        } else {
            for v in arr.iter_mut() {
                *v = r.gen_range(-scale..scale);
            }
        }
    }
}

/// Check the analytic gradient of one parameter array against central
/// finite differences of `loss`. Returns the number of entries checked.
pub fn check_param_gradient(
    loss: &dyn Fn(&ParameterSet) -> f64,
    params: &ParameterSet,
    name: &str,
    analytic: &Array2<f64>,
) -> usize {
    let base = params.get(name).expect("parameter exists").clone();
    let mut checked = 0;
    for r in 0..base.nrows() {
        for c in 0..base.ncols() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap()[(r, c)] = base[(r, c)] + FD_STEP;
            let fp = loss(&plus);
            let mut minus = params.clone();
            minus.get_mut(name).unwrap()[(r, c)] = base[(r, c)] - FD_STEP;
            let fm = loss(&minus);
            let fd = (fp - fm) / (2.0 * FD_STEP);
            let an = analytic[(r, c)];
            let err = (an - fd).abs();
            assert!(
                err <= REL_TOL * an.abs().max(fd.abs()) || err <= ABS_TOL,
                "{name}[{r},{c}]: analytic {an} vs finite-difference {fd}"
            );
            checked += 1;
        }
    }
    checked
}

/// Check every parameter of the set against finite differences.
pub fn check_all_gradients(
    loss: &dyn Fn(&ParameterSet) -> f64,
    params: &ParameterSet,
    analytic: &BTreeMap<String, Array2<f64>>,
) -> usize {
    let mut checked = 0;
    for (name, _) in params.iter() {
        let grad = analytic
            .get(name)
            .unwrap_or_else(|| panic!("no gradient recorded for {name}"));
        checked += check_param_gradient(loss, params, name, grad);
    }
    checked
}

/// Outcome of the full-model gradient sweep.
pub struct GradientSweep {
    pub checked: usize,
    pub nonzero: usize,
    pub elapsed: std::time::Duration,
}

/// Batch of three windows from three distinct series under the tiny config.
pub fn tiny_batch(cfg: &ModelConfig) -> Vec<deepdgl_core::data::WindowSample> {
    let spec = SyntheticSpec {
        n_series: 3,
        n_steps: cfg.input_len + cfg.horizon + 2,
        n_global_prototypes: 2,
        period: 5,
        local_amplitude: 0.6,
        trend_scale: 2e-3,
        noise_std: 0.05,
        seed: 21,
    };
    let (collection, _) = generate_synthetic(&spec).unwrap();
    let wcfg = WindowConfig::new(cfg.input_len, cfg.horizon, cfg.input_len + cfg.horizon + 2);
    let windows = make_windows(&collection, &wcfg).unwrap();
    assert_eq!(windows.len(), 3);
    windows
}

/// Check analytic gradients of the full training loss against central
/// finite differences for 100% of parameter elements on the tiny config.
///
/// Finite differences probe the model's gradient-routing linearization:
/// stop-gradient values and the quantization offset are frozen at the base
/// point (`Graph` routing pins), which is exactly the function the
/// straight-through backward differentiates, and is identical to the real
/// loss on every path that does not cross a routing op.
pub fn run_full_gradient_sweep() -> GradientSweep {
    let started = std::time::Instant::now();
    let cfg = ModelConfig::tiny();
    let mut params = init_params(&cfg, 1);
    randomize_params(&mut params, 22, 0.3);
    let batch = tiny_batch(&cfg);

    let mut g = Graph::new();
    g.record_routing(true);
    let pn = ParamNodes::bind(&mut g, &params);
    let out = build_forward_train(&mut g, &pn, &cfg, &batch, &mut rng(105)).unwrap();
    let pins = g.take_routing_record();

    // Guard: index selection must be stable under the probe step.
    let book = params.get("vq.codebook").unwrap();
    let margins = nearest_margins(&out.encoder_rows, book);
    let min_margin = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!(
        min_margin > 1e-3,
        "quantization margin {min_margin} too small for finite differences"
    );

    let cfg_ref = &cfg;
    let batch_ref = &batch;
    let loss = move |ps: &ParameterSet| -> f64 {
        let mut g = Graph::new();
        g.set_routing_pins(pins.clone());
        let pn = ParamNodes::bind(&mut g, ps);
        let out = build_forward_train(&mut g, &pn, cfg_ref, batch_ref, &mut rng(105)).unwrap();
        out.breakdown.total
    };

    g.backward(out.total_node);
    let grads: BTreeMap<String, Array2<f64>> = pn
        .iter()
        .map(|(name, id)| {
            let grad = g
                .grad(id)
                .cloned()
                .unwrap_or_else(|| Array2::zeros(g.value(id).dim()));
            (name.to_string(), grad)
        })
        .collect();
    let total_params: usize = params.iter().map(|(_, a)| a.len()).sum();
    let checked = check_all_gradients(&loss, &params, &grads);
    assert_eq!(checked, total_params, "every parameter element must be checked");

    let nonzero: usize = grads
        .values()
        .map(|a| a.iter().filter(|v| v.abs() > 1e-10).count())
        .sum();
    assert!(
        nonzero * 2 > total_params,
        "only {nonzero}/{total_params} gradient entries are non-zero"
    );
    GradientSweep { checked, nonzero, elapsed: started.elapsed() }
}
