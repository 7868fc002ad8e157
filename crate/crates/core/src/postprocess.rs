//! Adds the historical intraday fluctuation back onto raw predictions.
//!
//! The forecaster is trained on smooth scaled inputs and its outputs miss
//! the strong within-day rhythm of the farm. The fix is unapologetically
//! empirical: average the valid power per 10-minute slot over the training
//! range, squash that curve to [0, multiplier], and add it to each
//! prediction aligned by start slot, boosting and clamping on the way out.

use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use thiserror::Error;

use crate::dataio::{Role, TurbineSeriesSet, RECORDS_PER_DAY};

#[derive(Debug, Error)]
pub enum PostprocessError {
    #[error("invalid postprocess config: {0}")]
    InvalidConfig(String),
    #[error("intraday slot {0} has no valid observation in the fit range")]
    EmptySlot(usize),
    #[error("series has no target power channel")]
    NoTargetChannel,
    #[error("fit range {start}..{end} does not fit a series of {steps} steps")]
    BadRange {
        start: usize,
        end: usize,
        steps: usize,
    },
    #[error("start slot {0} is outside 0..144")]
    BadSlot(usize),
    #[error("profile is not fitted")]
    ProfileNotFitted,
    #[error("profile file: {0}")]
    ProfileParse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Amplitude recovery settings. `boost_threshold` has no source value:
/// the original method only says large values get magnified. The shipped
/// default is half the clamp ceiling and is a tuning knob, nothing more.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocessConfig {
    pub multiplier: f64,
    pub boost_factor: f64,
    pub boost_threshold: f64,
    pub clamp_min: f64,
    pub clamp_max: f64,
    pub clamp_enabled: bool,
    pub center_profile: bool,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        Self {
            multiplier: 36.0,
            boost_factor: 1.1,
            boost_threshold: 810.0,
            clamp_min: 0.0,
            clamp_max: 1620.0,
            clamp_enabled: true,
            center_profile: false,
        }
    }
}

impl PostprocessConfig {
    pub fn validate(&self) -> Result<(), PostprocessError> {
        if !(self.boost_factor >= 1.0) {
            return Err(PostprocessError::InvalidConfig(
                "boost_factor must be >= 1".into(),
            ));
        }
        if !(self.clamp_max > self.clamp_min) {
            return Err(PostprocessError::InvalidConfig(
                "clamp_max must exceed clamp_min".into(),
            ));
        }
        Ok(())
    }
}

/// Mean intraday power shape, min-max squashed and premultiplied, one
/// value per 10-minute slot.
#[derive(Debug, Clone, PartialEq)]
pub struct DailyProfile {
    values: Vec<f64>,
    multiplier: f64,
    source_range: Range<usize>,
}

impl DailyProfile {
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn source_range(&self) -> Range<usize> {
        self.source_range.clone()
    }

    /// Header lines with the multiplier and fit range, then one
    /// `slot,value` line per slot. Values round-trip bit exactly.
    pub fn save(&self, path: &Path) -> Result<(), PostprocessError> {
        let mut out = String::new();
        let _ = writeln!(out, "multiplier,{}", self.multiplier);
        let _ = writeln!(
            out,
            "range,{},{}",
            self.source_range.start, self.source_range.end
        );
        for (slot, v) in self.values.iter().enumerate() {
            let _ = writeln!(out, "{slot},{v}");
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PostprocessError> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        let bad = |d: &str| PostprocessError::ProfileParse(d.to_string());

        let multiplier = lines
            .next()
            .and_then(|l| l.strip_prefix("multiplier,"))
            .ok_or_else(|| bad("missing multiplier header"))?
            .parse::<f64>()
            .map_err(|_| bad("multiplier is not a number"))?;
        let range_line = lines
            .next()
            .and_then(|l| l.strip_prefix("range,"))
            .ok_or_else(|| bad("missing range header"))?;
        let (start, end) = range_line
            .split_once(',')
            .ok_or_else(|| bad("range header needs two fields"))?;
        let source_range = start
            .parse::<usize>()
            .ok()
            .zip(end.parse::<usize>().ok())
            .map(|(s, e)| s..e)
            .ok_or_else(|| bad("range bounds are not integers"))?;

        let mut values = Vec::with_capacity(RECORDS_PER_DAY);
        for line in lines {
            let (slot, v) = line
                .split_once(',')
                .ok_or_else(|| bad("profile line needs two fields"))?;
            if slot.parse::<usize>() != Ok(values.len()) {
                return Err(bad("profile slots must count up from 0"));
            }
            values.push(v.parse::<f64>().map_err(|_| bad("bad profile value"))?);
        }
        if values.len() != RECORDS_PER_DAY {
            return Err(bad("expected one value per intraday slot"));
        }
        Ok(Self {
            values,
            multiplier,
            source_range,
        })
    }
}

/// Min-max squash to [0, 1] then scale; a flat input maps to all zeros.
fn standardize_scaled(means: &[f64], multiplier: f64) -> Vec<f64> {
    let min = means.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = means.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.0; means.len()];
    }
    means
        .iter()
        .map(|&m| (m - min) / (max - min) * multiplier)
        .collect()
}

/// Per-slot mean of valid target power over every turbine and day in
/// `range`, squashed and scaled. With `center_profile` the final curve is
/// shifted to zero mean so the addition keeps the forecast level.
pub fn fit_daily_profile(
    series: &TurbineSeriesSet,
    range: Range<usize>,
    config: &PostprocessConfig,
) -> Result<DailyProfile, PostprocessError> {
    config.validate()?;
    if range.start >= range.end || range.end > series.n_steps() {
        return Err(PostprocessError::BadRange {
            start: range.start,
            end: range.end,
            steps: series.n_steps(),
        });
    }
    let target_idx = series
        .role_index(&Role::TargetPower)
        .ok_or(PostprocessError::NoTargetChannel)?;

    let mut sums = [0.0f64; RECORDS_PER_DAY];
    let mut counts = [0usize; RECORDS_PER_DAY];
    for t in 0..series.n_turbines() {
        let power = series.channel(t, target_idx);
        let valid = series.valid_mask(t);
        for s in range.clone() {
            if valid[s] {
                sums[s % RECORDS_PER_DAY] += power[s];
                counts[s % RECORDS_PER_DAY] += 1;
            }
        }
    }
    let mut means = [0.0f64; RECORDS_PER_DAY];
    for slot in 0..RECORDS_PER_DAY {
        if counts[slot] == 0 {
            return Err(PostprocessError::EmptySlot(slot));
        }
        means[slot] = sums[slot] / counts[slot] as f64;
    }

    let mut values = standardize_scaled(&means, config.multiplier);
    if config.center_profile {
        let mean = values.iter().sum::<f64>() / values.len() as f64;
        for v in &mut values {
            *v -= mean;
        }
    }
    Ok(DailyProfile {
        values,
        multiplier: config.multiplier,
        source_range: range,
    })
}

/// Intraday slot of a global step index.
pub fn start_slot_of(first_target_step: usize) -> usize {
    first_target_step % RECORDS_PER_DAY
}

/// Adds the profile rotated to `start_slot`, boosts values that land
/// above the threshold, then clamps.
pub fn apply_daily_fluctuation(
    pred: &[f64],
    start_slot: usize,
    profile: &DailyProfile,
    config: &PostprocessConfig,
) -> Result<Vec<f64>, PostprocessError> {
    config.validate()?;
    if profile.values.len() != RECORDS_PER_DAY {
        return Err(PostprocessError::ProfileNotFitted);
    }
    if start_slot >= RECORDS_PER_DAY {
        return Err(PostprocessError::BadSlot(start_slot));
    }
    Ok(pred
        .iter()
        .enumerate()
        .map(|(t, &p)| {
            let mut base = p + profile.values[(start_slot + t) % RECORDS_PER_DAY];
            if base > config.boost_threshold {
                base *= config.boost_factor;
            }
            if config.clamp_enabled {
                base = base.clamp(config.clamp_min, config.clamp_max);
            }
            base
        })
        .collect())
}
