//! Gap filling, min-max scaling, sliding-window sampling and the temporal
//! train/validation split.
//!
//! Filling and scaling replace values but never touch the valid mask: an
//! invalid step may feed the model as input, yet it still must not act as
//! a training label or a scoring reference. Window targets therefore carry
//! the valid mask alongside the (filled) target values.

use std::fmt::Write as _;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::dataio::{Role, TurbineSeriesSet, RECORDS_PER_DAY};

pub const DEFAULT_TRAIN_END_DAY: usize = 181;
pub const DEFAULT_VAL_START_DAY: usize = 231;

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("turbine {turbine}: role {role} has no usable value to fill from")]
    AllMissing { turbine: i64, role: Role },
    #[error("target_power must not be scaled")]
    TargetNotScalable,
    #[error("role {0} is not a channel of this series")]
    UnknownRole(Role),
    #[error("scaler has no entry for role {0}")]
    UnfittedRole(Role),
    #[error("role {0} has no finite value in the fit range")]
    NoFiniteValues(Role),
    #[error("step range {start}..{end} is invalid for a series of {len} steps")]
    BadRange { start: usize, end: usize, len: usize },
    #[error("range of {len} steps cannot hold one {need}-step window")]
    RangeTooShort { len: usize, need: usize },
    #[error("window at turbine index {turbine}, step {start} leaves the series")]
    WindowOutOfBounds { turbine: usize, start: usize },
    #[error("turbine {turbine}: non-finite input at step {step}; fill before windowing")]
    UnfilledInput { turbine: i64, step: usize },
    #[error("series has {have} days, split needs at least {need}")]
    InsufficientDays { have: usize, need: usize },
    #[error("invalid window spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("scaler file line {line}: {detail}")]
    ScalerParse { line: usize, detail: String },
}

fn check_range(range: &Range<usize>, len: usize) -> Result<(), PreprocessError> {
    if range.start >= range.end || range.end > len {
        return Err(PreprocessError::BadRange {
            start: range.start,
            end: range.end,
            len,
        });
    }
    Ok(())
}

/// Previous-value imputation, per turbine and role. A step is a fill
/// *source* when it is present and, with `fill_invalid`, also valid;
/// every other step takes the most recent earlier source value, and steps
/// before the first source take the first one (back-fill). Masks are
/// unchanged: filling repairs inputs, not labels.
pub fn forward_fill(
    series: &TurbineSeriesSet,
    fill_invalid: bool,
) -> Result<TurbineSeriesSet, PreprocessError> {
    let n_steps = series.n_steps();
    let n_roles = series.roles().len();
    let mut values = series.raw_values().to_vec();

    for t in 0..series.n_turbines() {
        let present = series.present_mask(t);
        let valid = series.valid_mask(t);
        let source: Vec<bool> = (0..n_steps)
            .map(|s| present[s] && (!fill_invalid || valid[s]))
            .collect();
        let first_source = source.iter().position(|&b| b);

        for r in 0..n_roles {
            let first = first_source.ok_or_else(|| PreprocessError::AllMissing {
                turbine: series.turbine_ids()[t],
                role: series.roles()[r].clone(),
            })?;
            let chan = &mut values[(t * n_roles + r) * n_steps..(t * n_roles + r + 1) * n_steps];
            let mut carry = chan[first];
            for s in 0..n_steps {
                if source[s] {
                    carry = chan[s];
                } else {
                    chan[s] = carry;
                }
            }
        }
    }
    Ok(series.with_values(values))
}

/// Per-role min/max learned on a training range. The target role is never
/// fitted; its values pass through [`transform`] untouched.
#[derive(Debug, Clone, PartialEq)]
pub struct MinMaxScaler {
    entries: Vec<(Role, f64, f64)>,
}

impl MinMaxScaler {
    pub fn roles(&self) -> impl Iterator<Item = &Role> {
        self.entries.iter().map(|(r, _, _)| r)
    }

    pub fn bounds(&self, role: &Role) -> Option<(f64, f64)> {
        self.entries
            .iter()
            .find(|(r, _, _)| r == role)
            .map(|&(_, lo, hi)| (lo, hi))
    }

    pub fn scale_value(&self, role: &Role, x: f64) -> Result<f64, PreprocessError> {
        let (lo, hi) = self
            .bounds(role)
            .ok_or_else(|| PreprocessError::UnfittedRole(role.clone()))?;
        Ok(if hi == lo { 0.0 } else { (x - lo) / (hi - lo) })
    }

    pub fn unscale_value(&self, role: &Role, x: f64) -> Result<f64, PreprocessError> {
        let (lo, hi) = self
            .bounds(role)
            .ok_or_else(|| PreprocessError::UnfittedRole(role.clone()))?;
        Ok(x * (hi - lo) + lo)
    }

    /// One `role,min,max` line per fitted role. Floats print in Rust's
    /// shortest round-trip form, so load restores them bit-exactly.
    pub fn save(&self, path: &Path) -> Result<(), PreprocessError> {
        let mut out = String::from("role,min,max\n");
        for (role, lo, hi) in &self.entries {
            writeln!(out, "{},{},{}", role.key(), lo, hi).expect("string write");
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PreprocessError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if i == 0 || line.is_empty() {
                continue;
            }
            let parse = || -> Option<(Role, f64, f64)> {
                let mut parts = line.split(',');
                let role = Role::from_key(parts.next()?);
                let lo: f64 = parts.next()?.parse().ok()?;
                let hi: f64 = parts.next()?.parse().ok()?;
                if parts.next().is_some() {
                    return None;
                }
                Some((role, lo, hi))
            };
            let entry = parse().ok_or_else(|| PreprocessError::ScalerParse {
                line: i + 1,
                detail: format!("expected role,min,max, got {line:?}"),
            })?;
            entries.push(entry);
        }
        Ok(Self { entries })
    }
}

/// Min/max per requested role over every turbine and every step of
/// `fit_range`. A constant role is recorded as-is (max == min) and maps to
/// 0.0 in [`transform`].
pub fn fit_scaler(
    series: &TurbineSeriesSet,
    roles: &[Role],
    fit_range: Range<usize>,
) -> Result<MinMaxScaler, PreprocessError> {
    check_range(&fit_range, series.n_steps())?;
    let mut entries = Vec::with_capacity(roles.len());
    for role in roles {
        if *role == Role::TargetPower {
            return Err(PreprocessError::TargetNotScalable);
        }
        let r = series
            .role_index(role)
            .ok_or_else(|| PreprocessError::UnknownRole(role.clone()))?;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..series.n_turbines() {
            for &v in &series.channel(t, r)[fit_range.clone()] {
                if v.is_finite() {
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
        }
        if lo > hi {
            return Err(PreprocessError::NoFiniteValues(role.clone()));
        }
        entries.push((role.clone(), lo, hi));
    }
    Ok(MinMaxScaler { entries })
}

/// Applies `(x - min)/(max - min)` to every fitted role across the whole
/// series; all other channels (the target included) are bit-identical.
pub fn transform(
    series: &TurbineSeriesSet,
    scaler: &MinMaxScaler,
) -> Result<TurbineSeriesSet, PreprocessError> {
    let n_steps = series.n_steps();
    let n_roles = series.roles().len();
    let mut values = series.raw_values().to_vec();
    for (role, lo, hi) in &scaler.entries {
        let r = series
            .role_index(role)
            .ok_or_else(|| PreprocessError::UnknownRole(role.clone()))?;
        let span = hi - lo;
        for t in 0..series.n_turbines() {
            let chan = &mut values[(t * n_roles + r) * n_steps..(t * n_roles + r + 1) * n_steps];
            for v in chan.iter_mut() {
                *v = if span == 0.0 { 0.0 } else { (*v - lo) / span };
            }
        }
    }
    Ok(series.with_values(values))
}

/// Input/output window geometry on the step axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpec {
    pub input_length: usize,
    pub output_length: usize,
    pub stride: usize,
}

impl Default for WindowSpec {
    /// Two days in, two days out, dense stride.
    fn default() -> Self {
        Self {
            input_length: 288,
            output_length: 288,
            stride: 1,
        }
    }
}

impl WindowSpec {
    pub fn validate(&self) -> Result<(), PreprocessError> {
        if self.input_length == 0 || self.output_length == 0 || self.stride == 0 {
            return Err(PreprocessError::InvalidSpec(
                "window lengths and stride must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn total_length(&self) -> usize {
        self.input_length + self.output_length
    }
}

/// Windows per turbine in a range of `range_len` steps:
/// `floor((L - in - out)/stride) + 1`, or `None` when none fit.
pub fn window_count(spec: &WindowSpec, range_len: usize) -> Option<usize> {
    range_len
        .checked_sub(spec.total_length())
        .map(|slack| slack / spec.stride + 1)
}

/// A gathered batch of windows. `inputs` is `[len][input_length][n_features]`
/// row-major; `targets` and `target_valid` are `[len][output_length]`.
#[derive(Debug, Clone)]
pub struct WindowBatch {
    pub input_length: usize,
    pub output_length: usize,
    pub n_features: usize,
    pub inputs: Vec<f64>,
    pub targets: Vec<f64>,
    pub target_valid: Vec<bool>,
    /// Intraday slot (0..144) of each sample's first predicted step.
    pub start_slots: Vec<usize>,
    pub turbine_ids: Vec<i64>,
}

impl WindowBatch {
    pub fn len(&self) -> usize {
        self.turbine_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turbine_ids.is_empty()
    }

    pub fn input(&self, i: usize) -> &[f64] {
        let n = self.input_length * self.n_features;
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> &[f64] {
        &self.targets[i * self.output_length..(i + 1) * self.output_length]
    }

    pub fn target_valid(&self, i: usize) -> &[bool] {
        &self.target_valid[i * self.output_length..(i + 1) * self.output_length]
    }
}

fn resolve_roles(
    series: &TurbineSeriesSet,
    feature_roles: &[Role],
) -> Result<Vec<usize>, PreprocessError> {
    feature_roles
        .iter()
        .map(|role| {
            series
                .role_index(role)
                .ok_or_else(|| PreprocessError::UnknownRole(role.clone()))
        })
        .collect()
}

/// The model's default inputs: wind speed and wind direction.
pub fn default_feature_roles() -> Vec<Role> {
    vec![Role::WindSpeed, Role::WindDirection]
}

/// Gathers the windows starting at explicit `(turbine index, step)` pairs.
/// Inputs must already be filled; a leftover non-finite input is an error.
pub fn make_windows_at(
    series: &TurbineSeriesSet,
    spec: &WindowSpec,
    feature_roles: &[Role],
    picks: &[(usize, usize)],
) -> Result<WindowBatch, PreprocessError> {
    spec.validate()?;
    let role_idx = resolve_roles(series, feature_roles)?;
    let target_idx = series
        .role_index(&Role::TargetPower)
        .ok_or(PreprocessError::UnknownRole(Role::TargetPower))?;
    let (n_steps, nf) = (series.n_steps(), role_idx.len());
    let (il, ol) = (spec.input_length, spec.output_length);

    let mut batch = WindowBatch {
        input_length: il,
        output_length: ol,
        n_features: nf,
        inputs: Vec::with_capacity(picks.len() * il * nf),
        targets: Vec::with_capacity(picks.len() * ol),
        target_valid: Vec::with_capacity(picks.len() * ol),
        start_slots: Vec::with_capacity(picks.len()),
        turbine_ids: Vec::with_capacity(picks.len()),
    };

    for &(t, start) in picks {
        if t >= series.n_turbines() || start + il + ol > n_steps {
            return Err(PreprocessError::WindowOutOfBounds { turbine: t, start });
        }
        let turbine_id = series.turbine_ids()[t];
        for s in start..start + il {
            for &r in &role_idx {
                let v = series.channel(t, r)[s];
                if !v.is_finite() {
                    return Err(PreprocessError::UnfilledInput {
                        turbine: turbine_id,
                        step: s,
                    });
                }
                batch.inputs.push(v);
            }
        }
        let target_start = start + il;
        batch
            .targets
            .extend_from_slice(&series.channel(t, target_idx)[target_start..target_start + ol]);
        batch
            .target_valid
            .extend_from_slice(&series.valid_mask(t)[target_start..target_start + ol]);
        batch.start_slots.push(target_start % RECORDS_PER_DAY);
        batch.turbine_ids.push(turbine_id);
    }
    Ok(batch)
}

/// Cuts every window of `spec` inside `range` for every turbine, turbine
/// major, stride order within a turbine.
pub fn make_windows(
    series: &TurbineSeriesSet,
    spec: &WindowSpec,
    feature_roles: &[Role],
    range: Range<usize>,
) -> Result<WindowBatch, PreprocessError> {
    spec.validate()?;
    check_range(&range, series.n_steps())?;
    let per_turbine =
        window_count(spec, range.end - range.start).ok_or(PreprocessError::RangeTooShort {
            len: range.end - range.start,
            need: spec.total_length(),
        })?;
    let mut picks = Vec::with_capacity(series.n_turbines() * per_turbine);
    for t in 0..series.n_turbines() {
        for k in 0..per_turbine {
            picks.push((t, range.start + k * spec.stride));
        }
    }
    make_windows_at(series, spec, feature_roles, &picks)
}

/// Training and validation step ranges from day boundaries: train covers
/// days 1..=train_end_day, validation runs from val_start_day to the end
/// of the series. The days between are an intentional gap.
pub fn temporal_split_days(
    series: &TurbineSeriesSet,
    train_end_day: usize,
    val_start_day: usize,
) -> Result<(Range<usize>, Range<usize>), PreprocessError> {
    if train_end_day == 0 || val_start_day <= train_end_day {
        return Err(PreprocessError::InvalidSpec(format!(
            "split days {train_end_day}/{val_start_day} are not increasing"
        )));
    }
    if series.n_days() < val_start_day {
        return Err(PreprocessError::InsufficientDays {
            have: series.n_days(),
            need: val_start_day,
        });
    }
    let train = 0..train_end_day * RECORDS_PER_DAY;
    let val = (val_start_day - 1) * RECORDS_PER_DAY..series.n_steps();
    Ok((train, val))
}

/// The default split: train days 1..=181, validation days 231 to the end.
pub fn temporal_split(
    series: &TurbineSeriesSet,
) -> Result<(Range<usize>, Range<usize>), PreprocessError> {
    temporal_split_days(series, DEFAULT_TRAIN_END_DAY, DEFAULT_VAL_START_DAY)
}
