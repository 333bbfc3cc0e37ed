//! Run configuration: flat dotted keys resolved from built-in defaults, an
//! optional `key = value` config file (`#` comments), the `DEEPDGL_SEED`
//! environment variable (seed only, last resort), and command-line
//! overrides, in that precedence order (flags strongest). Every key is
//! validated and its provenance tracked.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use deepdgl_core::data::SyntheticSpec;
use deepdgl_core::model::{ModelConfig, Variant};
use deepdgl_core::training::TrainConfig;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    MalformedLine { line: usize, text: String },
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key}: {reason}")]
    BadValue { line: usize, key: String, reason: String },
}

/// Where a key's current value came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Env,
    Flag,
}

impl Provenance {
    fn as_str(&self) -> &'static str {
        match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Env => "env",
            Provenance::Flag => "flag",
        }
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Sliding-window step when building windows from a panel.
    pub stride: usize,
    /// Wavelength of synthesized covariates for panels without their own.
    pub covariate_period: usize,
    pub synth: SyntheticSpec,
    provenance: BTreeMap<&'static str, Provenance>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            stride: 1,
            covariate_period: 24,
            synth: SyntheticSpec::default(),
            provenance: BTreeMap::new(),
        }
    }
}

/// All recognized keys, in documentation order.
pub const KEYS: &[&str] = &[
    "alpha",
    "gamma",
    "temperature",
    "lr",
    "epochs",
    "seed",
    "b_h",
    "b_v",
    "clip_norm",
    "decay_every",
    "decay_factor",
    "model.T",
    "model.tau",
    "model.conv_kernels",
    "model.conv_channels",
    "model.enc_attn_dims",
    "model.enc_attn_heads",
    "model.dec_conv_kernels",
    "model.dec_conv_channels",
    "model.dec_attn_dims",
    "model.dec_attn_heads",
    "model.ffn_ratio",
    "model.codebook_size",
    "model.d_context",
    "model.ctx_conv_kernels",
    "model.ctx_conv_channels",
    "model.ctx_attn_dims",
    "model.ctx_attn_heads",
    "model.lstm_hidden",
    "model.disc_hidden",
    "model.hyper_hidden",
    "model.hyper_gain",
    "model.positives",
    "model.negatives",
    "model.variant",
    "data.stride",
    "data.covariate_period",
    "synth.n_series",
    "synth.n_steps",
    "synth.prototypes",
    "synth.period",
    "synth.local_amplitude",
    "synth.trend_scale",
    "synth.noise_std",
    "synth.seed",
];

fn canonical_key(key: &str) -> Option<&'static str> {
    KEYS.iter().find(|k| **k == key).copied()
}

impl RunConfig {
    pub fn provenance_of(&self, key: &str) -> Provenance {
        canonical_key(key)
            .and_then(|k| self.provenance.get(k).copied())
            .unwrap_or(Provenance::Default)
    }

    /// Apply one key/value pair. `line` is only used in error messages.
    pub fn set(
        &mut self,
        key: &str,
        value: &str,
        source: Provenance,
        line: usize,
    ) -> Result<(), ConfigError> {
        let canon = canonical_key(key)
            .ok_or_else(|| ConfigError::UnknownKey { line, key: key.to_string() })?;
        let bad = |reason: String| ConfigError::BadValue { line, key: key.to_string(), reason };
        let value = value.trim();

        macro_rules! num {
            ($ty:ty) => {
                value
                    .parse::<$ty>()
                    .map_err(|_| bad(format!("expected a number, found {value:?}")))?
            };
        }
        let positive_usize = || -> Result<usize, ConfigError> {
            let v: usize = value
                .parse()
                .map_err(|_| bad(format!("expected a positive integer, found {value:?}")))?;
            if v == 0 {
                return Err(bad("must be at least 1".into()));
            }
            Ok(v)
        };
        let list = || -> Result<Vec<usize>, ConfigError> {
            let parsed: Option<Vec<usize>> =
                value.split(',').map(|p| p.trim().parse().ok()).collect();
            match parsed {
                Some(v) if !v.is_empty() && v.iter().all(|&x| x > 0) => Ok(v),
                _ => Err(bad(format!("expected a comma list of positive integers, found {value:?}"))),
            }
        };
        let nonneg_real = || -> Result<f64, ConfigError> {
            let v: f64 = value
                .parse()
                .map_err(|_| bad(format!("expected a number, found {value:?}")))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad("must be a finite non-negative number".into()));
            }
            Ok(v)
        };
        let positive_real = || -> Result<f64, ConfigError> {
            let v = nonneg_real()?;
            if v == 0.0 {
                return Err(bad("must be positive".into()));
            }
            Ok(v)
        };

        match canon {
            "alpha" => self.model.alpha = nonneg_real()?,
            "gamma" => self.model.gamma = nonneg_real()?,
            "temperature" => self.model.temperature = positive_real()?,
            "lr" => self.train.learning_rate = positive_real()?,
            "epochs" => self.train.epochs = positive_usize()?,
            "seed" => self.train.seed = num!(u64),
            "b_h" => self.train.b_h = positive_usize()?,
            "b_v" => self.train.b_v = positive_usize()?,
            "clip_norm" => self.train.clip_norm = positive_real()?,
            "decay_every" => self.train.decay_every = positive_usize()?,
            "decay_factor" => self.train.decay_factor = positive_real()?,
            "model.T" => self.model.input_len = positive_usize()?,
            "model.tau" => self.model.horizon = positive_usize()?,
            "model.conv_kernels" => self.model.conv_kernels = list()?,
            "model.conv_channels" => self.model.conv_channels = list()?,
            "model.enc_attn_dims" => self.model.enc_attn_dims = list()?,
            "model.enc_attn_heads" => self.model.enc_attn_heads = list()?,
            "model.dec_conv_kernels" => self.model.dec_conv_kernels = list()?,
            "model.dec_conv_channels" => self.model.dec_conv_channels = list()?,
            "model.dec_attn_dims" => self.model.dec_attn_dims = list()?,
            "model.dec_attn_heads" => self.model.dec_attn_heads = list()?,
            "model.ffn_ratio" => self.model.ffn_ratio = positive_usize()?,
            "model.codebook_size" => self.model.codebook_size = positive_usize()?,
            "model.d_context" => self.model.d_context = positive_usize()?,
            "model.ctx_conv_kernels" => self.model.ctx_conv_kernels = list()?,
            "model.ctx_conv_channels" => self.model.ctx_conv_channels = list()?,
            "model.ctx_attn_dims" => self.model.ctx_attn_dims = list()?,
            "model.ctx_attn_heads" => self.model.ctx_attn_heads = list()?,
            "model.lstm_hidden" => self.model.lstm_hidden = positive_usize()?,
            "model.disc_hidden" => self.model.disc_hidden = positive_usize()?,
            "model.hyper_hidden" => self.model.hyper_hidden = positive_usize()?,
            "model.hyper_gain" => self.model.hyper_gain = positive_real()?,
            "model.positives" => self.model.positives_per_sample = positive_usize()?,
            "model.negatives" => self.model.negatives_per_positive = positive_usize()?,
            "model.variant" => {
                self.model.variant = Variant::parse(value)
                    .map_err(|_| bad(format!("unknown variant {value:?}")))?;
            }
            "data.stride" => self.stride = positive_usize()?,
            "data.covariate_period" => {
                let v = positive_usize()?;
                if v < 2 {
                    return Err(bad("must be at least 2".into()));
                }
                self.covariate_period = v;
            }
            "synth.n_series" => self.synth.n_series = positive_usize()?,
            "synth.n_steps" => self.synth.n_steps = positive_usize()?,
            "synth.prototypes" => self.synth.n_global_prototypes = positive_usize()?,
            "synth.period" => {
                let v = positive_usize()?;
                if v < 2 {
                    return Err(bad("must be at least 2".into()));
                }
                self.synth.period = v;
            }
            "synth.local_amplitude" => self.synth.local_amplitude = nonneg_real()?,
            "synth.trend_scale" => self.synth.trend_scale = nonneg_real()?,
            "synth.noise_std" => self.synth.noise_std = nonneg_real()?,
            "synth.seed" => self.synth.seed = num!(u64),
            _ => unreachable!("canonical key {canon} not handled"),
        }
        self.provenance.insert(canon, source);
        Ok(())
    }

    fn get(&self, key: &str) -> String {
        fn join(vs: &[usize]) -> String {
            vs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
        }
        match key {
            "alpha" => self.model.alpha.to_string(),
            "gamma" => self.model.gamma.to_string(),
            "temperature" => self.model.temperature.to_string(),
            "lr" => self.train.learning_rate.to_string(),
            "epochs" => self.train.epochs.to_string(),
            "seed" => self.train.seed.to_string(),
            "b_h" => self.train.b_h.to_string(),
            "b_v" => self.train.b_v.to_string(),
            "clip_norm" => self.train.clip_norm.to_string(),
            "decay_every" => self.train.decay_every.to_string(),
            "decay_factor" => self.train.decay_factor.to_string(),
            "model.T" => self.model.input_len.to_string(),
            "model.tau" => self.model.horizon.to_string(),
            "model.conv_kernels" => join(&self.model.conv_kernels),
            "model.conv_channels" => join(&self.model.conv_channels),
            "model.enc_attn_dims" => join(&self.model.enc_attn_dims),
            "model.enc_attn_heads" => join(&self.model.enc_attn_heads),
            "model.dec_conv_kernels" => join(&self.model.dec_conv_kernels),
            "model.dec_conv_channels" => join(&self.model.dec_conv_channels),
            "model.dec_attn_dims" => join(&self.model.dec_attn_dims),
            "model.dec_attn_heads" => join(&self.model.dec_attn_heads),
            "model.ffn_ratio" => self.model.ffn_ratio.to_string(),
            "model.codebook_size" => self.model.codebook_size.to_string(),
            "model.d_context" => self.model.d_context.to_string(),
            "model.ctx_conv_kernels" => join(&self.model.ctx_conv_kernels),
            "model.ctx_conv_channels" => join(&self.model.ctx_conv_channels),
            "model.ctx_attn_dims" => join(&self.model.ctx_attn_dims),
            "model.ctx_attn_heads" => join(&self.model.ctx_attn_heads),
            "model.lstm_hidden" => self.model.lstm_hidden.to_string(),
            "model.disc_hidden" => self.model.disc_hidden.to_string(),
            "model.hyper_hidden" => self.model.hyper_hidden.to_string(),
            "model.hyper_gain" => self.model.hyper_gain.to_string(),
            "model.positives" => self.model.positives_per_sample.to_string(),
            "model.negatives" => self.model.negatives_per_positive.to_string(),
            "model.variant" => self.model.variant.as_str().to_string(),
            "data.stride" => self.stride.to_string(),
            "data.covariate_period" => self.covariate_period.to_string(),
            "synth.n_series" => self.synth.n_series.to_string(),
            "synth.n_steps" => self.synth.n_steps.to_string(),
            "synth.prototypes" => self.synth.n_global_prototypes.to_string(),
            "synth.period" => self.synth.period.to_string(),
            "synth.local_amplitude" => self.synth.local_amplitude.to_string(),
            "synth.trend_scale" => self.synth.trend_scale.to_string(),
            "synth.noise_std" => self.synth.noise_std.to_string(),
            "synth.seed" => self.synth.seed.to_string(),
            _ => unreachable!("key {key} not dumpable"),
        }
    }

    /// Full resolved configuration, one `key = value  # source` line per
    /// key. Pure function of the inputs that built this config.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            let _ = writeln!(
                out,
                "{key} = {:<24} # {}",
                self.get(key),
                self.provenance_of(key).as_str()
            );
        }
        out
    }
}

/// Resolve a config from defaults, an optional file, an optional seed from
/// the environment (applied only when the file did not set the seed), and
/// flag overrides.
pub fn parse_config(
    path: Option<&Path>,
    env_seed: Option<u64>,
    overrides: &[(String, String)],
) -> Result<RunConfig, ConfigError> {
    let mut cfg = RunConfig::default();

    if let Some(path) = path {
        let text = fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        for (ix, raw) in text.lines().enumerate() {
            let line_no = ix + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                ConfigError::MalformedLine { line: line_no, text: raw.to_string() }
            })?;
            cfg.set(key.trim(), value.trim(), Provenance::File, line_no)?;
        }
    }

    if let Some(seed) = env_seed {
        if cfg.provenance_of("seed") == Provenance::Default {
            cfg.set("seed", &seed.to_string(), Provenance::Env, 0)?;
        }
    }

    for (key, value) in overrides {
        cfg.set(key, value, Provenance::Flag, 0)?;
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn tmp_config(text: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir();
        let path = dir.join(format!(
            "dgl-cfg-{}-{}.cfg",
            std::process::id(),
            text.len()
        ));
        let mut f = fs::File::create(&path).unwrap();
        f.write_all(text.as_bytes()).unwrap();
        path
    }

    #[test]
    fn empty_file_yields_paper_defaults() {
        let path = tmp_config("");
        let cfg = parse_config(Some(&path), None, &[]).unwrap();
        assert_eq!(cfg.model.alpha, 0.7);
        assert_eq!(cfg.model.gamma, 0.2);
        assert_eq!(cfg.train.learning_rate, 1e-3);
        assert_eq!(cfg.train.epochs, 60);
        assert_eq!(cfg.model.conv_kernels, vec![5, 3, 3, 3]);
        fs::remove_file(path).unwrap();
    }

    #[test]
    fn flags_beat_file_beats_default() {
        let path = tmp_config("alpha = 0.9\nmodel.codebook_size = 16\n");
        let cfg = parse_config(
            Some(&path),
            None,
            &[("alpha".to_string(), "0.5".to_string())],
        )
        .unwrap();
        assert_eq!(cfg.model.alpha, 0.5);
        assert_eq!(cfg.provenance_of("alpha"), Provenance::Flag);
        assert_eq!(cfg.model.codebook_size, 16);
        assert_eq!(cfg.provenance_of("model.codebook_size"), Provenance::File);
        assert_eq!(cfg.provenance_of("gamma"), Provenance::Default);
        fs::remove_file(path).unwrap();
    }

    #[test]
    fn env_seed_is_last_resort() {
        let path = tmp_config("seed = 7\n");
        let cfg = parse_config(Some(&path), Some(99), &[]).unwrap();
        assert_eq!(cfg.train.seed, 7, "file beats env");
        fs::remove_file(path).unwrap();

        let cfg = parse_config(None, Some(99), &[]).unwrap();
        assert_eq!(cfg.train.seed, 99);
        assert_eq!(cfg.provenance_of("seed"), Provenance::Env);

        let cfg =
            parse_config(None, Some(99), &[("seed".to_string(), "3".to_string())]).unwrap();
        assert_eq!(cfg.train.seed, 3, "flag beats env");
    }

    #[test]
    fn unknown_keys_and_bad_values_name_the_line() {
        let path = tmp_config("alpha = 0.5\nunknown_key = 1\n");
        match parse_config(Some(&path), None, &[]).unwrap_err() {
            ConfigError::UnknownKey { line, key } => {
                assert_eq!(line, 2);
                assert_eq!(key, "unknown_key");
            }
            other => panic!("unexpected {other}"),
        }
        fs::remove_file(path).unwrap();

        let path = tmp_config("# comment\n\ntemperature = 0\n");
        match parse_config(Some(&path), None, &[]).unwrap_err() {
            ConfigError::BadValue { line, key, .. } => {
                assert_eq!(line, 3);
                assert_eq!(key, "temperature");
            }
            other => panic!("unexpected {other}"),
        }
        fs::remove_file(path).unwrap();

        let path = tmp_config("just some words\n");
        assert!(matches!(
            parse_config(Some(&path), None, &[]).unwrap_err(),
            ConfigError::MalformedLine { line: 1, .. }
        ));
        fs::remove_file(path).unwrap();
    }

    #[test]
    fn dump_is_a_pure_function_of_inputs() {
        let path = tmp_config("gamma = 0.3\nmodel.variant = local_only\n");
        let a = parse_config(Some(&path), None, &[("b_h".into(), "8".into())]).unwrap();
        let b = parse_config(Some(&path), None, &[("b_h".into(), "8".into())]).unwrap();
        assert_eq!(a.dump(), b.dump());
        assert!(a.dump().contains("gamma = 0.3"));
        assert!(a.dump().contains("# file"));
        assert!(a.dump().contains("# flag"));
        fs::remove_file(path).unwrap();
    }

    #[test]
    fn every_key_round_trips_through_dump() {
        let cfg = RunConfig::default();
        for line in cfg.dump().lines() {
            let stripped = line.split('#').next().unwrap();
            let (k, v) = stripped.split_once('=').unwrap();
            let mut cfg2 = RunConfig::default();
            cfg2.set(k.trim(), v.trim(), Provenance::File, 1).unwrap();
        }
    }
}
