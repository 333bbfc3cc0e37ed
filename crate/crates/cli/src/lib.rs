//! Command-line entry points: `synth`, `train`, `eval`, `forecast`, `plot`.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric divergence.

pub mod config;
pub mod plot;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deepdgl_core::checkpoint::{self, model_from_manifest, Checkpoint, CheckpointError};
use deepdgl_core::data::{
    generate_synthetic, load_csv, materialize_window, split, write_assignments_csv,
    write_covariates_csv, write_values_csv, DataError, SeriesCollection, WindowConfig,
};
use deepdgl_core::metrics::MetricsReport;
use deepdgl_core::model::{forecast, ModelConfig, ModelError, Variant};
use deepdgl_core::training::{
    evaluate_inductive, evaluate_transductive, train, InductiveGroup, TrainError,
};
use thiserror::Error;

use config::{parse_config, ConfigError, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numeric divergence: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFiniteLoss { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

const USAGE: &str = "\
usage: deepdgl <command> [flags]

commands:
  synth     --out DIR [--config FILE] [--KEY VALUE ...]
            generate a synthetic panel (values.csv, covariates.csv,
            prototypes.csv)
  train     --data FILE [--covariates FILE] --out DIR [--config FILE]
            [--KEY VALUE ...]
            train; writes checkpoint.ckpt, training_curve.csv,
            run_manifest.txt
  eval      --checkpoint FILE --data FILE [--covariates FILE]
            --mode transductive|inductive [--variant NAME] --out FILE
            score the held-out windows; writes a metric,value CSV
  forecast  --checkpoint FILE --data FILE [--covariates FILE]
            --series INDEX --out FILE
            forecast the most recent window of one series
  plot      --checkpoint FILE --data FILE [--covariates FILE]
            --series I[,J,...] --out DIR
            one SVG per series overlaying ground truth and forecast

Any configuration key (see README) can be passed as --KEY VALUE; flags beat
the config file, which beats built-in defaults. DEEPDGL_SEED sets the seed
when neither file nor flag does.

exit codes: 0 ok, 1 usage, 2 data error, 3 numeric divergence";

/// Entry point: returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match run_command(args) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, CliError::Usage(_)) {
                eprintln!("{USAGE}");
            }
            e.exit_code()
        }
    }
}

struct Parsed {
    flags: std::collections::BTreeMap<String, String>,
    overrides: Vec<(String, String)>,
}

fn parse_flags(args: &[String], known: &[&str]) -> Result<Parsed, CliError> {
    let mut flags = std::collections::BTreeMap::new();
    let mut overrides = Vec::new();
    let mut i = 0;
    while i < args.len() {
        let name = args[i]
            .strip_prefix("--")
            .ok_or_else(|| CliError::Usage(format!("expected a flag, found {:?}", args[i])))?;
        let value = args
            .get(i + 1)
            .ok_or_else(|| CliError::Usage(format!("flag --{name} needs a value")))?;
        if known.contains(&name) {
            flags.insert(name.to_string(), value.clone());
        } else if config::KEYS.contains(&name) {
            overrides.push((name.to_string(), value.clone()));
        } else {
            return Err(CliError::Usage(format!("unknown flag --{name}")));
        }
        i += 2;
    }
    Ok(Parsed { flags, overrides })
}

fn required<'a>(parsed: &'a Parsed, name: &str) -> Result<&'a str, CliError> {
    parsed
        .flags
        .get(name)
        .map(|s| s.as_str())
        .ok_or_else(|| CliError::Usage(format!("missing required flag --{name}")))
}

fn env_seed() -> Result<Option<u64>, CliError> {
    match std::env::var("DEEPDGL_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| CliError::Usage(format!("DEEPDGL_SEED is not an integer: {v:?}"))),
        Err(_) => Ok(None),
    }
}

fn resolve_config(parsed: &Parsed) -> Result<RunConfig, CliError> {
    let path = parsed.flags.get("config").map(PathBuf::from);
    let cfg = parse_config(path.as_deref(), env_seed()?, &parsed.overrides).map_err(|e| {
        // Bad flag values are usage errors; file problems are data errors.
        if parsed.flags.contains_key("config") {
            CliError::from(e)
        } else {
            CliError::Usage(e.to_string())
        }
    })?;
    Ok(cfg)
}

pub fn run_command(args: &[String]) -> Result<(), CliError> {
    let Some(command) = args.first() else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    let rest = &args[1..];
    match command.as_str() {
        "synth" => cmd_synth(rest),
        "train" => cmd_train(rest),
        "eval" => cmd_eval(rest),
        "forecast" => cmd_forecast(rest),
        "plot" => cmd_plot(rest),
        other => Err(CliError::Usage(format!("unknown subcommand {other:?}"))),
    }
}

fn write_file(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Data(format!("cannot write {}: {e}", path.display())))
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .map_err(|e| CliError::Data(format!("cannot create {}: {e}", path.display())))
}

/// Record everything needed to re-run this invocation exactly.
fn write_run_manifest(
    path: &Path,
    args: &[String],
    cfg_dump: Option<&str>,
    extras: &[(&str, String)],
) -> Result<(), CliError> {
    let mut out = String::new();
    let _ = writeln!(out, "artifact_version = {}", env!("CARGO_PKG_VERSION"));
    let _ = writeln!(out, "argv = {}", args.join(" "));
    for (k, v) in extras {
        let _ = writeln!(out, "{k} = {v}");
    }
    if let Some(dump) = cfg_dump {
        let _ = writeln!(out, "\n# resolved configuration");
        out.push_str(dump);
    }
    write_file(path, &out)
}

fn cmd_synth(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_flags(args, &["out", "config"])?;
    let out_dir = PathBuf::from(required(&parsed, "out")?);
    let cfg = resolve_config(&parsed)?;
    ensure_dir(&out_dir)?;
    eprintln!("{}", cfg.dump());

    let (collection, assignments) = generate_synthetic(&cfg.synth)?;
    write_values_csv(&collection, &out_dir.join("values.csv"))?;
    write_covariates_csv(&collection, &out_dir.join("covariates.csv"))?;
    write_assignments_csv(&collection, &assignments, &out_dir.join("prototypes.csv"))?;
    write_run_manifest(
        &out_dir.join("run_manifest.txt"),
        args,
        Some(&cfg.dump()),
        &[("command", "synth".into())],
    )?;
    eprintln!(
        "wrote {} series x {} steps to {}",
        collection.n_series(),
        collection.n_steps(),
        out_dir.display()
    );
    Ok(())
}

fn load_panel(parsed: &Parsed) -> Result<(SeriesCollection, PathBuf, Option<PathBuf>), CliError> {
    let values = PathBuf::from(required(parsed, "data")?);
    let covariates = parsed.flags.get("covariates").map(PathBuf::from);
    let collection = load_csv(&values, covariates.as_deref())?;
    Ok((collection, values, covariates))
}

fn window_config(model: &ModelConfig, cfg: &RunConfig) -> WindowConfig {
    WindowConfig {
        input_len: model.input_len,
        horizon: model.horizon,
        stride: cfg.stride,
        covariate_period: cfg.covariate_period,
    }
}

fn cmd_train(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_flags(args, &["data", "covariates", "out", "config"])?;
    let out_dir = PathBuf::from(required(&parsed, "out")?);
    let mut cfg = resolve_config(&parsed)?;
    let (collection, values_path, cov_path) = load_panel(&parsed)?;

    // The model sees the panel's own covariates, or the synthesized pair.
    cfg.model.n_covariates = if collection.n_covariates() > 0 { collection.n_covariates() } else { 2 };
    cfg.model.validate()?;
    ensure_dir(&out_dir)?;
    eprintln!("{}", cfg.dump());

    let wcfg = window_config(&cfg.model, &cfg);
    let splits = split(&collection, &wcfg, cfg.train.seed)?;
    eprintln!(
        "split: {} transductive / {} inductive-val / {} inductive-test series, {} train windows",
        splits.transductive_series.len(),
        splits.inductive_val_series.len(),
        splits.inductive_test_series.len(),
        splits.train_windows.len()
    );

    let mut outcome = train(&collection, &splits, &cfg.model, &cfg.train)?;
    outcome
        .checkpoint
        .manifest
        .push(("data.stride".to_string(), cfg.stride.to_string()));
    outcome
        .checkpoint
        .manifest
        .push(("data.covariate_period".to_string(), cfg.covariate_period.to_string()));

    let ckpt_path = out_dir.join("checkpoint.ckpt");
    checkpoint::save(&outcome.checkpoint, &ckpt_path)?;

    let mut curve = String::from("epoch,lr,pred,cmc,vq,total,val_wape\n");
    for e in &outcome.history.epochs {
        let _ = writeln!(
            curve,
            "{},{},{},{},{},{},{}",
            e.epoch, e.lr, e.pred, e.cmc, e.vq, e.total, e.val_wape
        );
    }
    write_file(&out_dir.join("training_curve.csv"), &curve)?;
    write_run_manifest(
        &out_dir.join("run_manifest.txt"),
        args,
        Some(&cfg.dump()),
        &[
            ("command", "train".into()),
            ("data_path", values_path.display().to_string()),
            (
                "covariates_path",
                cov_path.map(|p| p.display().to_string()).unwrap_or_else(|| "-".into()),
            ),
            ("checkpoint", ckpt_path.display().to_string()),
            ("checkpoint_sha256", outcome.checkpoint.checksum_hex()),
            ("best_epoch", outcome.best_epoch.to_string()),
            ("best_val_wape", outcome.best_val_wape.to_string()),
        ],
    )?;
    eprintln!(
        "trained {} epochs; best val WAPE {:.4} at epoch {}; checkpoint {}",
        cfg.train.epochs,
        outcome.best_val_wape,
        outcome.best_epoch,
        ckpt_path.display()
    );
    Ok(())
}

struct LoadedCheckpoint {
    ckpt: Checkpoint,
    model: ModelConfig,
    wcfg: WindowConfig,
    seed: u64,
}

fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CliError> {
    let ckpt = checkpoint::load(path)?;
    let model = model_from_manifest(&ckpt.manifest)?;
    let manifest_num = |key: &str| -> Result<usize, CliError> {
        ckpt.manifest_get(key)
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| CliError::Data(format!("checkpoint manifest lacks {key}")))
    };
    let wcfg = WindowConfig {
        input_len: model.input_len,
        horizon: model.horizon,
        stride: manifest_num("data.stride")?,
        covariate_period: manifest_num("data.covariate_period")?,
    };
    let seed = ckpt
        .manifest_get("seed")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| CliError::Data("checkpoint manifest lacks seed".into()))?;
    Ok(LoadedCheckpoint { ckpt, model, wcfg, seed })
}

fn metrics_csv(report: &MetricsReport, mode: &str, variant: Variant) -> String {
    let mut out = String::from("metric,value\n");
    let _ = writeln!(out, "mode,{mode}");
    let _ = writeln!(out, "variant,{}", variant.as_str());
    let _ = writeln!(out, "mape,{}", report.mape);
    let _ = writeln!(out, "wape,{}", report.wape);
    let _ = writeln!(out, "smape,{}", report.smape);
    let _ = writeln!(out, "n_windows,{}", report.n_windows);
    out.push_str("horizon_step,mae\n");
    for (k, v) in report.per_step_mae.iter().enumerate() {
        let _ = writeln!(out, "{k},{v}");
    }
    out
}

fn cmd_eval(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_flags(args, &["checkpoint", "data", "covariates", "mode", "variant", "out"])?;
    let out_path = PathBuf::from(required(&parsed, "out")?);
    let mode = required(&parsed, "mode")?.to_string();
    let loaded = load_checkpoint(Path::new(required(&parsed, "checkpoint")?))?;
    if let Some(v) = parsed.flags.get("variant") {
        let requested =
            Variant::parse(v).map_err(|e| CliError::Usage(e.to_string()))?;
        if requested != loaded.model.variant {
            return Err(CliError::Usage(format!(
                "checkpoint was trained as variant {:?}, not {:?}",
                loaded.model.variant.as_str(),
                requested.as_str()
            )));
        }
    }
    let (collection, _, _) = load_panel(&parsed)?;
    let splits = split(&collection, &loaded.wcfg, loaded.seed)?;

    let report = match mode.as_str() {
        "transductive" => {
            evaluate_transductive(&loaded.ckpt, &collection, &splits, &loaded.model)?
        }
        "inductive" => evaluate_inductive(
            &loaded.ckpt,
            &collection,
            &splits,
            &loaded.model,
            InductiveGroup::Test,
        )?,
        other => {
            return Err(CliError::Usage(format!(
                "--mode must be transductive or inductive, found {other:?}"
            )))
        }
    };
    write_file(&out_path, &metrics_csv(&report, &mode, loaded.model.variant))?;
    write_run_manifest(
        &PathBuf::from(format!("{}.manifest", out_path.display())),
        args,
        None,
        &[
            ("command", "eval".into()),
            ("checkpoint_sha256", loaded.ckpt.checksum_hex()),
            ("mode", mode.clone()),
            ("variant", loaded.model.variant.as_str().into()),
        ],
    )?;
    eprintln!(
        "{mode} ({}): mape {:.4}  wape {:.4}  smape {:.4} over {} windows",
        loaded.model.variant.as_str(),
        report.mape,
        report.wape,
        report.smape,
        report.n_windows
    );
    Ok(())
}

fn parse_series_list(raw: &str, n_series: usize) -> Result<Vec<usize>, CliError> {
    let list: Option<Vec<usize>> = raw.split(',').map(|p| p.trim().parse().ok()).collect();
    let list = list.ok_or_else(|| {
        CliError::Usage(format!("--series expects an index or comma list, found {raw:?}"))
    })?;
    for &s in &list {
        if s >= n_series {
            return Err(CliError::Data(format!(
                "series index {s} out of range: the panel has {n_series} series"
            )));
        }
    }
    Ok(list)
}

/// Most recent fully observed window of a series (so forecasts can be
/// compared to ground truth).
fn last_window(
    collection: &SeriesCollection,
    wcfg: &WindowConfig,
    series: usize,
) -> Result<deepdgl_core::data::WindowSample, CliError> {
    let needed = wcfg.window_len();
    if collection.n_steps() < needed {
        return Err(CliError::Data(format!(
            "panel has {} steps, need at least {needed} for one window",
            collection.n_steps()
        )));
    }
    Ok(materialize_window(collection, wcfg, series, collection.n_steps() - needed))
}

fn cmd_forecast(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_flags(args, &["checkpoint", "data", "covariates", "series", "out"])?;
    let out_path = PathBuf::from(required(&parsed, "out")?);
    let loaded = load_checkpoint(Path::new(required(&parsed, "checkpoint")?))?;
    let (collection, _, _) = load_panel(&parsed)?;
    let series = parse_series_list(required(&parsed, "series")?, collection.n_series())?;

    let mut out = String::from("series_id,step,actual,forecast\n");
    for &s in &series {
        let window = last_window(&collection, &loaded.wcfg, s)?;
        let fc = forecast(&window, &loaded.ckpt.params, &loaded.model)?;
        let actual = window.raw_target();
        for (k, (a, f)) in actual.iter().zip(&fc).enumerate() {
            let _ = writeln!(
                out,
                "{},{},{a},{f}",
                collection.series_ids[s],
                window.start + loaded.wcfg.input_len + k
            );
        }
    }
    write_file(&out_path, &out)?;
    write_run_manifest(
        &PathBuf::from(format!("{}.manifest", out_path.display())),
        args,
        None,
        &[
            ("command", "forecast".into()),
            ("checkpoint_sha256", loaded.ckpt.checksum_hex()),
        ],
    )?;
    Ok(())
}

fn cmd_plot(args: &[String]) -> Result<(), CliError> {
    let parsed = parse_flags(args, &["checkpoint", "data", "covariates", "series", "out"])?;
    let out_dir = PathBuf::from(required(&parsed, "out")?);
    let loaded = load_checkpoint(Path::new(required(&parsed, "checkpoint")?))?;
    let (collection, _, _) = load_panel(&parsed)?;
    let series = parse_series_list(required(&parsed, "series")?, collection.n_series())?;
    ensure_dir(&out_dir)?;

    for &s in &series {
        let window = last_window(&collection, &loaded.wcfg, s)?;
        let fc = forecast(&window, &loaded.ckpt.params, &loaded.model)?;
        // Ground truth: the input window plus the target segment.
        let shown = loaded.wcfg.window_len();
        let start = collection.n_steps() - shown;
        let actual: Vec<f64> =
            (0..shown).map(|k| collection.values[(s, start + k)]).collect();
        let svg = plot::render(
            &format!("series {}: forecast vs actual", collection.series_ids[s]),
            &[
                plot::Trace {
                    label: "actual",
                    start,
                    values: &actual,
                    color: "#1f77b4",
                    dashed: false,
                },
                plot::Trace {
                    label: "forecast",
                    start: start + loaded.wcfg.input_len,
                    values: &fc,
                    color: "#d62728",
                    dashed: true,
                },
            ],
        );
        write_file(&out_dir.join(format!("series_{s}.svg")), &svg)?;
    }
    write_run_manifest(
        &out_dir.join("run_manifest.txt"),
        args,
        None,
        &[
            ("command", "plot".into()),
            ("checkpoint_sha256", loaded.ckpt.checksum_hex()),
        ],
    )?;
    Ok(())
}
