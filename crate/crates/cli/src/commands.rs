//! The five pipeline commands. Each returns the text it wants on standard
//! output; the caller prints it and maps the result to an exit status.
//! Commands only ever read the data file and write into the output
//! directory, so reruns with unchanged inputs reproduce their artifacts
//! byte for byte.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use windcast::autodiff::{run_primitive_suite, Dtype, Element, Tensor};
use windcast::dataio::{flag_invalid, load_csv, TurbineSeriesSet};
use windcast::evaluate::backtest;
use windcast::model::{
    forward, full_model_grad_check, init_params, ForecasterConfig, Mode,
};
use windcast::postprocess::{
    apply_daily_fluctuation, fit_daily_profile, start_slot_of, DailyProfile,
};
use windcast::preprocess::{
    fit_scaler, forward_fill, temporal_split_days, transform, MinMaxScaler,
};
use windcast::train::{checkpoint_dtype, fit, load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::{to_toml, Precision, RunConfig};

/// Artifact locations after resolving relative names against the output
/// directory.
pub struct ResolvedPaths {
    pub checkpoint: PathBuf,
    pub scaler: PathBuf,
    pub profile: PathBuf,
    pub loss_history: PathBuf,
    pub forecast: PathBuf,
    pub report: PathBuf,
    pub persistence_report: PathBuf,
    pub config_echo: PathBuf,
}

pub fn resolve_paths(cfg: &RunConfig, out_dir: &Path) -> ResolvedPaths {
    let join = |p: &Path| {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            out_dir.join(p)
        }
    };
    ResolvedPaths {
        checkpoint: join(&cfg.paths.checkpoint),
        scaler: join(&cfg.paths.scaler),
        profile: join(&cfg.paths.profile),
        loss_history: join(&cfg.paths.loss_history),
        forecast: join(&cfg.paths.forecast),
        report: join(&cfg.paths.report),
        persistence_report: join(&cfg.paths.persistence_report),
        config_echo: join(&cfg.paths.config_echo),
    }
}

/// Writes the effective configuration next to the artifacts so every run
/// leaves a reloadable record of what produced it.
fn echo_config(cfg: &RunConfig, out_dir: &Path) -> Result<ResolvedPaths> {
    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating output directory {}", out_dir.display()))?;
    let paths = resolve_paths(cfg, out_dir);
    fs::write(&paths.config_echo, to_toml(cfg)?)
        .with_context(|| format!("writing {}", paths.config_echo.display()))?;
    Ok(paths)
}

fn load_flagged(cfg: &RunConfig) -> Result<TurbineSeriesSet> {
    let schema = cfg.data.schema.to_schema();
    let raw = load_csv(&cfg.data.path, &schema)
        .with_context(|| format!("loading {}", cfg.data.path.display()))?;
    let rules = cfg.data.validity.to_rules()?;
    Ok(flag_invalid(&raw, &rules)?)
}

/// Filled and feature-scaled series plus the scaler, fitted on the training
/// range only.
fn prepare_scaled(
    cfg: &RunConfig,
    series: &TurbineSeriesSet,
) -> Result<(TurbineSeriesSet, MinMaxScaler, std::ops::Range<usize>, std::ops::Range<usize>)> {
    let filled = forward_fill(series, cfg.preprocess.fill_invalid)?;
    let (train_range, val_range) = temporal_split_days(
        &filled,
        cfg.preprocess.train_end_day,
        cfg.preprocess.val_start_day,
    )?;
    let scaler = fit_scaler(&filled, &cfg.preprocess.roles(), train_range.clone())?;
    let scaled = transform(&filled, &scaler)?;
    Ok((scaled, scaler, train_range, val_range))
}

/// Filled series scaled with an already-fitted scaler (predict/evaluate).
fn prepare_with_scaler(
    cfg: &RunConfig,
    series: &TurbineSeriesSet,
    scaler: &MinMaxScaler,
) -> Result<TurbineSeriesSet> {
    let filled = forward_fill(series, cfg.preprocess.fill_invalid)?;
    Ok(transform(&filled, scaler)?)
}

pub fn cmd_inspect(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    echo_config(cfg, out_dir)?;
    let series = load_flagged(cfg)?;
    let (nt, nd, ns) = (series.n_turbines(), series.n_days(), series.n_steps());
    let mut out = format!("{nt} turbines, {nd} days, {ns} steps per turbine\n");
    let _ = writeln!(out, "{:<16} {:>8} {:>8}", "role", "missing", "invalid");
    let total = (nt * ns) as f64;
    let invalid: usize = (0..nt)
        .map(|t| series.valid_mask(t).iter().filter(|&&v| !v).count())
        .sum();
    let invalid_pct = 100.0 * invalid as f64 / total;
    for (r, role) in series.roles().iter().enumerate() {
        let missing: usize = (0..nt)
            .map(|t| series.channel(t, r).iter().filter(|v| !v.is_finite()).count())
            .sum();
        let _ = writeln!(
            out,
            "{:<16} {:>7.2}% {:>7.2}%",
            role.key(),
            100.0 * missing as f64 / total,
            invalid_pct,
        );
    }
    Ok(out)
}

pub fn cmd_train(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    match cfg.precision {
        Precision::F32 => train_typed::<f32>(cfg, out_dir),
        Precision::F64 => train_typed::<f64>(cfg, out_dir),
    }
}

fn train_typed<F: Element>(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let paths = echo_config(cfg, out_dir)?;
    let series = load_flagged(cfg)?;
    let (scaled, scaler, train_range, _) = prepare_scaled(cfg, &series)?;
    let roles = cfg.preprocess.roles();

    let init = init_params::<F>(&cfg.model, cfg.init_seed);
    let outcome = fit(&scaled, train_range.clone(), &roles, init, &cfg.model, &cfg.train)?;
    let profile = fit_daily_profile(&scaled, train_range, &cfg.postprocess)?;

    let ckpt = Checkpoint {
        forecaster: cfg.model.clone(),
        train: cfg.train.clone(),
        params: outcome.params,
        adam: outcome.adam,
    };
    save_checkpoint(&paths.checkpoint, &ckpt)?;
    scaler.save(&paths.scaler)?;
    profile.save(&paths.profile)?;
    let mut history = String::from("epoch,mean_loss\n");
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(history, "{},{}", i + 1, loss);
    }
    fs::write(&paths.loss_history, history)
        .with_context(|| format!("writing {}", paths.loss_history.display()))?;

    let mut out = String::new();
    for (i, loss) in outcome.loss_history.iter().enumerate() {
        let _ = writeln!(out, "epoch {} mean loss {loss:.6}", i + 1);
    }
    if outcome.skipped_batches > 0 {
        let _ = writeln!(out, "{} batches skipped (no valid targets)", outcome.skipped_batches);
    }
    let _ = writeln!(
        out,
        "wrote {}, {}, {}, {}",
        paths.checkpoint.display(),
        paths.scaler.display(),
        paths.profile.display(),
        paths.loss_history.display(),
    );
    Ok(out)
}

pub fn cmd_predict(cfg: &RunConfig, out_dir: &Path, at_step: Option<usize>) -> Result<String> {
    let paths = echo_config(cfg, out_dir)?;
    match checkpoint_dtype(&paths.checkpoint)? {
        Dtype::F32 => predict_typed::<f32>(cfg, &paths, at_step),
        Dtype::F64 => predict_typed::<f64>(cfg, &paths, at_step),
    }
}

fn predict_typed<F: Element>(
    cfg: &RunConfig,
    paths: &ResolvedPaths,
    at_step: Option<usize>,
) -> Result<String> {
    let ckpt = load_checkpoint::<F>(&paths.checkpoint)?;
    let scaler = MinMaxScaler::load(&paths.scaler)?;
    let profile = DailyProfile::load(&paths.profile)?;
    let fcfg = &ckpt.forecaster;
    let roles = cfg.preprocess.roles();
    if roles.len() != fcfg.n_features {
        bail!(
            "{} feature roles configured but the checkpoint expects {}",
            roles.len(),
            fcfg.n_features
        );
    }

    let series = load_flagged(cfg)?;
    let scaled = prepare_with_scaler(cfg, &series, &scaler)?;
    let (nt, ns, il, ol) = (
        scaled.n_turbines(),
        scaled.n_steps(),
        fcfg.input_length,
        fcfg.output_length,
    );
    if ns < il {
        bail!("series has {ns} steps, shorter than one {il}-step input window");
    }
    let start = at_step.unwrap_or(ns - il);
    if start + il > ns {
        bail!("window at step {start} runs past the {ns}-step series");
    }

    let role_idx: Vec<usize> = roles
        .iter()
        .map(|r| {
            scaled
                .role_index(r)
                .with_context(|| format!("role {r} not in the dataset"))
        })
        .collect::<Result<_>>()?;
    let mut data = Vec::with_capacity(nt * il * roles.len());
    for t in 0..nt {
        for s in start..start + il {
            for &ri in &role_idx {
                data.push(scaled.channel(t, ri)[s]);
            }
        }
    }
    let input = Tensor::<F>::from_f64_slice(&[nt, il, roles.len()], &data);
    let pred = forward(fcfg, &ckpt.params, &input, &mut Mode::Eval)?;
    let raw = pred.to_f64_vec();

    let start_slot = start_slot_of(start + il);
    let mut csv = String::from("turbine_id,step,prediction_kw\n");
    for (t, &tid) in scaled.turbine_ids().iter().enumerate() {
        let adjusted =
            apply_daily_fluctuation(&raw[t * ol..(t + 1) * ol], start_slot, &profile, &cfg.postprocess)?;
        for (s, v) in adjusted.iter().enumerate() {
            let _ = writeln!(csv, "{tid},{s},{v}");
        }
    }
    fs::write(&paths.forecast, csv)
        .with_context(|| format!("writing {}", paths.forecast.display()))?;

    Ok(format!(
        "forecast for {nt} turbines x {ol} steps from input window at step {start} -> {}\n",
        paths.forecast.display()
    ))
}

pub fn cmd_evaluate(cfg: &RunConfig, out_dir: &Path) -> Result<String> {
    let paths = echo_config(cfg, out_dir)?;
    match checkpoint_dtype(&paths.checkpoint)? {
        Dtype::F32 => evaluate_typed::<f32>(cfg, &paths),
        Dtype::F64 => evaluate_typed::<f64>(cfg, &paths),
    }
}

fn evaluate_typed<F: Element>(cfg: &RunConfig, paths: &ResolvedPaths) -> Result<String> {
    let ckpt = load_checkpoint::<F>(&paths.checkpoint)?;
    let scaler = MinMaxScaler::load(&paths.scaler)?;
    let profile = DailyProfile::load(&paths.profile)?;
    let series = load_flagged(cfg)?;
    let scaled = prepare_with_scaler(cfg, &series, &scaler)?;
    let (_, val_range) = temporal_split_days(
        &scaled,
        cfg.preprocess.train_end_day,
        cfg.preprocess.val_start_day,
    )?;

    let outcome = backtest(
        &ckpt.params,
        &ckpt.forecaster,
        &scaled,
        val_range,
        &cfg.preprocess.roles(),
        &profile,
        &cfg.postprocess,
        &cfg.evaluate,
    )?;
    fs::write(&paths.report, outcome.model.to_csv())
        .with_context(|| format!("writing {}", paths.report.display()))?;
    fs::write(&paths.persistence_report, outcome.persistence.to_csv())
        .with_context(|| format!("writing {}", paths.persistence_report.display()))?;

    let mut out = String::from("model:\n");
    out.push_str(&outcome.model.table());
    out.push_str("persistence:\n");
    out.push_str(&outcome.persistence.table());
    let _ = writeln!(
        out,
        "model farm score {:.4} vs persistence {:.4} (lower is better)",
        outcome.model.farm_score, outcome.persistence.farm_score,
    );
    Ok(out)
}

/// Primitive-by-primitive finite-difference checks plus a whole reduced
/// model. Returns the report text and whether everything passed.
pub fn cmd_gradcheck() -> Result<(String, bool)> {
    let report = run_primitive_suite(2, 1e-5, 1e-3)?;
    // the report's Display has no trailing newline
    let mut out = format!("{report}\n");

    let reduced = ForecasterConfig {
        input_length: 8,
        output_length: 8,
        attn_hidden: 4,
        ffn_hidden: 4,
        dense1: 8,
        dense2: 8,
        dense3: 8,
        ..ForecasterConfig::default()
    };
    let err = full_model_grad_check(&reduced, 52)?;
    let model_ok = err < 1e-4;
    let _ = writeln!(
        out,
        "{:<18} {:>12.3e}  {}",
        "reduced model",
        err,
        if model_ok { "pass" } else { "FAIL" },
    );
    let ok = report.all_passed() && model_ok;
    let _ = writeln!(
        out,
        "{}",
        if ok {
            "all gradient checks passed"
        } else {
            "gradient checks FAILED"
        },
    );
    Ok((out, ok))
}
