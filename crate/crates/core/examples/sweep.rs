//! Calibration harness for the ablation sweep (temporary dev tool).
//! Usage: sweep <seed> [noise_std] [epochs] [lr] [codebook] [dim] [local_amplitude] [stride]

use std::time::Instant;

use deepdgl_core::data::{generate_synthetic, split_from_parts, SyntheticSpec, WindowConfig};
use deepdgl_core::model::{ModelConfig, Variant};
use deepdgl_core::training::{
    evaluate_inductive, evaluate_transductive, train, InductiveGroup, TrainConfig,
};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(101);
    let noise: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.05);
    let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(30);
    let lr: f64 = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(2e-3);
    let codebook: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(12);
    let dim: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(12);
    let amp: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let stride: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(64);

    let spec = SyntheticSpec {
        n_series: 50,
        n_steps: 2000,
        n_global_prototypes: 4,
        period: 12,
        local_amplitude: amp,
        trend_scale: 1e-3,
        noise_std: noise,
        seed: 4242,
    };
    let (collection, _) = generate_synthetic(&spec).unwrap();

    for variant in [
        Variant::Full,
        Variant::ConvTransformer,
        Variant::GlobalOnly,
        Variant::LocalOnly,
    ] {
        let ch = dim - 2;
        let model_cfg = ModelConfig {
            input_len: 36,
            horizon: 12,
            n_covariates: 2,
            conv_kernels: vec![3, 3],
            conv_channels: vec![ch, ch],
            enc_attn_dims: vec![dim, dim],
            enc_attn_heads: vec![2, 2],
            dec_conv_kernels: vec![3, 3],
            dec_conv_channels: vec![ch, ch],
            dec_attn_dims: vec![dim, 1],
            dec_attn_heads: vec![2, 1],
            ffn_ratio: 2,
            codebook_size: codebook,
            d_context: 6,
            ctx_conv_kernels: vec![3, 3],
            ctx_conv_channels: vec![ch, ch],
            ctx_attn_dims: vec![dim],
            ctx_attn_heads: vec![2],
            lstm_hidden: 10,
            disc_hidden: 16,
            hyper_hidden: 24,
            hyper_gain: 0.05,
            alpha: 0.7,
            gamma: 0.2,
            temperature: 0.1,
            positives_per_sample: 4,
            negatives_per_positive: 8,
            variant,
        };
        let wcfg = WindowConfig {
            input_len: model_cfg.input_len,
            horizon: model_cfg.horizon,
            stride,
            covariate_period: 12,
        };
        let splits =
            split_from_parts(&collection, &wcfg, (0..40).collect(), Vec::new(), (40..50).collect())
                .unwrap();
        let tcfg = TrainConfig {
            learning_rate: lr,
            epochs,
            b_h: 6,
            b_v: 10,
            seed,
            ..TrainConfig::default()
        };
        let t0 = Instant::now();
        let outcome = train(&collection, &splits, &model_cfg, &tcfg).unwrap();
        let secs = t0.elapsed().as_secs_f64();
        let trans = evaluate_transductive(&outcome.checkpoint, &collection, &splits, &model_cfg)
            .unwrap();
        let ind = evaluate_inductive(
            &outcome.checkpoint,
            &collection,
            &splits,
            &model_cfg,
            InductiveGroup::Test,
        )
        .unwrap();
        let first = &outcome.history.epochs[0];
        let last = outcome.history.epochs.last().unwrap();
        println!(
            "{:>16} seed {seed}: trans {:.4} ind {:.4} | loss {:.3}->{:.3} (pred {:.3}->{:.3}, vq {:.3}->{:.3}) | idle_max {} resets {} | {secs:.0}s",
            variant.as_str(),
            trans.wape,
            ind.wape,
            first.total,
            last.total,
            first.pred,
            last.pred,
            first.vq,
            last.vq,
            outcome.history.codebook_max_idle,
            outcome.history.codebook_resets,
            secs = secs,
        );
    }
}
