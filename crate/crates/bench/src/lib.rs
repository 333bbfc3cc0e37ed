//! Shared fixtures for the pipeline benchmarks.

use deepdgl_core::data::{
    generate_synthetic, make_windows, SyntheticSpec, WindowConfig, WindowSample,
};
use deepdgl_core::model::{init_params, ModelConfig};
use deepdgl_core::nets::ParameterSet;

/// A small-but-not-trivial config: paper layer structure at reduced widths.
pub fn bench_model_config() -> ModelConfig {
    ModelConfig {
        input_len: 48,
        horizon: 12,
        n_covariates: 2,
        conv_kernels: vec![5, 3],
        conv_channels: vec![16, 16],
        enc_attn_dims: vec![16, 16],
        enc_attn_heads: vec![2, 2],
        dec_conv_kernels: vec![5, 3],
        dec_conv_channels: vec![16, 16],
        dec_attn_dims: vec![16, 1],
        dec_attn_heads: vec![2, 1],
        ffn_ratio: 2,
        codebook_size: 16,
        d_context: 8,
        ctx_conv_kernels: vec![5, 3],
        ctx_conv_channels: vec![16, 16],
        ctx_attn_dims: vec![16],
        ctx_attn_heads: vec![2],
        lstm_hidden: 16,
        disc_hidden: 16,
        hyper_hidden: 16,
        ..ModelConfig::default()
    }
}

/// Model parameters plus one mini-batch of windows from distinct series.
pub fn bench_fixture(batch: usize) -> (ModelConfig, ParameterSet, Vec<WindowSample>) {
    let cfg = bench_model_config();
    let params = init_params(&cfg, 11);
    let spec = SyntheticSpec {
        n_series: batch,
        n_steps: cfg.input_len + cfg.horizon,
        n_global_prototypes: 4.min(batch),
        period: 24,
        local_amplitude: 0.5,
        trend_scale: 1e-3,
        noise_std: 0.05,
        seed: 9,
    };
    let (collection, _) = generate_synthetic(&spec).unwrap();
    let wcfg = WindowConfig::new(cfg.input_len, cfg.horizon, 1);
    let windows = make_windows(&collection, &wcfg).unwrap();
    assert_eq!(windows.len(), batch);
    (cfg, params, windows)
}
