//! Training smoke: on a small synthetic panel, every variant's training
//! loss trends down — the median over the last five epochs is below the
//! median over the first five.

use deepdgl_core::data::{generate_synthetic, split, SyntheticSpec, WindowConfig};
use deepdgl_core::model::{ModelConfig, Variant};
use deepdgl_core::training::{train, TrainConfig};

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

#[test]
fn every_variant_reduces_training_loss_on_the_smoke_panel() {
    let spec = SyntheticSpec {
        n_series: 20,
        n_steps: 400,
        n_global_prototypes: 4,
        period: 8,
        local_amplitude: 0.5,
        trend_scale: 5e-4,
        noise_std: 0.02,
        seed: 17,
    };
    let (collection, _) = generate_synthetic(&spec).unwrap();
    let base = ModelConfig::tiny();
    let wcfg = WindowConfig::new(base.input_len, base.horizon, 16);

    for variant in Variant::ALL {
        let mut cfg = base.clone();
        cfg.variant = variant;
        let splits = split(&collection, &wcfg, 7).unwrap();
        let tcfg = TrainConfig {
            epochs: 10,
            b_h: 5,
            b_v: 10,
            seed: 23,
            ..TrainConfig::default()
        };
        let outcome = train(&collection, &splits, &cfg, &tcfg).unwrap();
        let totals: Vec<f64> = outcome.history.epochs.iter().map(|e| e.total).collect();
        assert_eq!(totals.len(), 10);
        let first = median(&totals[..5]);
        let last = median(&totals[5..]);
        assert!(
            last < first,
            "{}: loss did not trend down ({first:.4} -> {last:.4}; {totals:?})",
            variant.as_str()
        );
    }
}
