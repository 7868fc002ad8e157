//! Masked error metrics, competition-style score aggregation, and a
//! seeded backtest that scores the model against a persistence baseline
//! on identical validation samples.
//!
//! Invalid target steps are EXCLUDED from both numerator and denominator;
//! counting them as zero error over the full horizon would reward exactly
//! the steps the data marks unusable. That alternative stays available
//! behind [`BacktestConfig::zero_fill_invalid`] for comparison runs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Element;
use crate::dataio::{Role, TurbineSeriesSet};
use crate::model::{forward, ForecasterConfig, ForecasterParams, Mode, ModelError};
use crate::postprocess::{
    apply_daily_fluctuation, DailyProfile, PostprocessConfig, PostprocessError,
};
use crate::preprocess::{make_windows_at, PreprocessError, WindowSpec};
use crate::autodiff::Tensor;

#[derive(Debug, Error)]
pub enum EvaluateError {
    #[error("turbine sets do not match: {0}")]
    TurbineSetMismatch(String),
    #[error("validation range admits no full window: have {have} steps, need {need}")]
    RangeTooShort { have: usize, need: usize },
    #[error("series has no target power channel")]
    NoTargetChannel,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Postprocess(#[from] PostprocessError),
}

/// Mean absolute error over valid positions; `None` when nothing is valid.
pub fn masked_mae(pred: &[f64], truth: &[f64], valid: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), valid.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if valid[i] {
            sum += (pred[i] - truth[i]).abs();
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Root mean square error over valid positions; `None` when nothing is
/// valid.
pub fn masked_rmse(pred: &[f64], truth: &[f64], valid: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), valid.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..pred.len() {
        if valid[i] {
            let e = pred[i] - truth[i];
            sum += e * e;
            n += 1;
        }
    }
    (n > 0).then(|| (sum / n as f64).sqrt())
}

/// The comparison variant: invalid steps contribute zero error but stay
/// in the denominator, so a fully invalid window scores a flattering 0.
pub fn zero_filled_mae(pred: &[f64], truth: &[f64], valid: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), valid.len());
    if pred.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if valid[i] {
            sum += (pred[i] - truth[i]).abs();
        }
    }
    Some(sum / pred.len() as f64)
}

pub fn zero_filled_rmse(pred: &[f64], truth: &[f64], valid: &[bool]) -> Option<f64> {
    assert_eq!(pred.len(), truth.len());
    assert_eq!(pred.len(), valid.len());
    if pred.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for i in 0..pred.len() {
        if valid[i] {
            let e = pred[i] - truth[i];
            sum += e * e;
        }
    }
    Some((sum / pred.len() as f64).sqrt())
}

/// One sample's farm score: per-turbine `(MAE + RMSE) / 2` summed over
/// turbines, divided by `unit_divisor`. Turbines whose window is entirely
/// invalid contribute nothing.
pub fn score_sample(
    preds: &BTreeMap<i64, Vec<f64>>,
    truths: &BTreeMap<i64, Vec<f64>>,
    valids: &BTreeMap<i64, Vec<bool>>,
    unit_divisor: f64,
) -> Result<f64, EvaluateError> {
    let ids: Vec<i64> = preds.keys().copied().collect();
    for (name, keys) in [
        ("truths", truths.keys().copied().collect::<Vec<i64>>()),
        ("valid masks", valids.keys().copied().collect()),
    ] {
        if keys != ids {
            return Err(EvaluateError::TurbineSetMismatch(format!(
                "predictions cover {ids:?}, {name} cover {keys:?}"
            )));
        }
    }
    let mut total = 0.0;
    for id in &ids {
        let (p, t, v) = (&preds[id], &truths[id], &valids[id]);
        if let (Some(mae), Some(rmse)) = (masked_mae(p, t, v), masked_rmse(p, t, v)) {
            total += (mae + rmse) / 2.0;
        }
    }
    Ok(total / unit_divisor)
}

/// Repeats the last filled target power across the horizon.
pub fn persistence_forecast(input_power: &[f64], horizon: usize) -> Vec<f64> {
    let last = *input_power
        .last()
        .expect("persistence needs at least one observed step");
    vec![last; horizon]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    SumOverSamples,
    MeanOverSamples,
}

/// Backtest sampling and reporting knobs. 195 summed samples mirrors the
/// original local evaluation convention.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BacktestConfig {
    pub n_samples: usize,
    pub sample_seed: u64,
    pub aggregation: Aggregation,
    pub unit_divisor: f64,
    pub zero_fill_invalid: bool,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self {
            n_samples: 195,
            sample_seed: 0,
            aggregation: Aggregation::SumOverSamples,
            unit_divisor: 1000.0,
            zero_fill_invalid: false,
        }
    }
}

/// One turbine scored at one sampled offset.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleRow {
    pub sample: usize,
    pub start_step: usize,
    pub turbine_id: i64,
    pub mae: f64,
    pub rmse: f64,
    pub score: f64,
}

/// Per-turbine means over the samples it contributed to.
#[derive(Debug, Clone, PartialEq)]
pub struct TurbineSummary {
    pub turbine_id: i64,
    pub mae: f64,
    pub rmse: f64,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<SampleRow>,
    pub per_turbine: Vec<TurbineSummary>,
    /// Farm score contribution of each sample, already unit-divided.
    pub per_sample_scores: Vec<f64>,
    pub farm_score: f64,
    pub n_samples: usize,
    pub aggregation: Aggregation,
    pub unit_divisor: f64,
}

impl MetricReport {
    fn from_rows(rows: Vec<SampleRow>, bcfg: &BacktestConfig) -> Self {
        let mut per_sample = vec![0.0f64; bcfg.n_samples];
        for row in &rows {
            per_sample[row.sample] += row.score;
        }
        for s in &mut per_sample {
            *s /= bcfg.unit_divisor;
        }
        let total: f64 = per_sample.iter().sum();
        let farm_score = match bcfg.aggregation {
            Aggregation::SumOverSamples => total,
            Aggregation::MeanOverSamples => total / bcfg.n_samples as f64,
        };

        let mut grouped: BTreeMap<i64, (f64, f64, usize)> = BTreeMap::new();
        for row in &rows {
            let e = grouped.entry(row.turbine_id).or_insert((0.0, 0.0, 0));
            e.0 += row.mae;
            e.1 += row.rmse;
            e.2 += 1;
        }
        let per_turbine = grouped
            .into_iter()
            .map(|(turbine_id, (mae_sum, rmse_sum, n))| {
                let mae = mae_sum / n as f64;
                let rmse = rmse_sum / n as f64;
                TurbineSummary {
                    turbine_id,
                    mae,
                    rmse,
                    score: (mae + rmse) / 2.0,
                }
            })
            .collect();

        Self {
            rows,
            per_turbine,
            per_sample_scores: per_sample,
            farm_score,
            n_samples: bcfg.n_samples,
            aggregation: bcfg.aggregation,
            unit_divisor: bcfg.unit_divisor,
        }
    }

    /// One row per scored turbine per sample, then aggregate rows with
    /// `turbine_id = ALL`: one per sample carrying that sample's
    /// unit-divided farm contribution, and a final total row with
    /// `sample_id = ALL`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample_id,turbine_id,mae,rmse,score\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.sample, r.turbine_id, r.mae, r.rmse, r.score
            );
        }
        for (s, v) in self.per_sample_scores.iter().enumerate() {
            let _ = writeln!(out, "{s},ALL,,,{v}");
        }
        let _ = writeln!(out, "ALL,ALL,,,{}", self.farm_score);
        out
    }

    /// Human-readable per-turbine means plus the farm score.
    pub fn table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:>10} {:>12} {:>12} {:>12}", "turbine", "mae", "rmse", "score");
        for t in &self.per_turbine {
            let _ = writeln!(
                out,
                "{:>10} {:>12.3} {:>12.3} {:>12.3}",
                t.turbine_id, t.mae, t.rmse, t.score
            );
        }
        let agg = match self.aggregation {
            Aggregation::SumOverSamples => "sum",
            Aggregation::MeanOverSamples => "mean",
        };
        let _ = writeln!(
            out,
            "farm score {:.4} ({} over {} samples, divisor {})",
            self.farm_score, agg, self.n_samples, self.unit_divisor
        );
        out
    }
}

/// Model and baseline scored on the same sampled windows.
#[derive(Debug, Clone, PartialEq)]
pub struct BacktestOutcome {
    pub model: MetricReport,
    pub persistence: MetricReport,
}

/// Draws `n_samples` window offsets uniformly (with replacement) from the
/// validation range, forwards the model in eval mode, applies the daily
/// fluctuation, and scores both the model and the persistence baseline.
///
/// `series` must already be gap filled and feature scaled with the
/// training scaler; target power passes through scaling untouched, so
/// scores stay in kW.
pub fn backtest<F: Element>(
    params: &ForecasterParams<F>,
    fcfg: &ForecasterConfig,
    series: &TurbineSeriesSet,
    val_range: Range<usize>,
    feature_roles: &[Role],
    profile: &DailyProfile,
    pcfg: &PostprocessConfig,
    bcfg: &BacktestConfig,
) -> Result<BacktestOutcome, EvaluateError> {
    let spec = WindowSpec {
        input_length: fcfg.input_length,
        output_length: fcfg.output_length,
        stride: 1,
    };
    let have = val_range.end.min(series.n_steps()) - val_range.start.min(series.n_steps());
    let need = spec.total_length();
    if have < need {
        return Err(EvaluateError::RangeTooShort { have, need });
    }
    let admissible = have - need + 1;
    let target_idx = series
        .role_index(&Role::TargetPower)
        .ok_or(EvaluateError::NoTargetChannel)?;

    let (mae_of, rmse_of): (
        fn(&[f64], &[f64], &[bool]) -> Option<f64>,
        fn(&[f64], &[f64], &[bool]) -> Option<f64>,
    ) = if bcfg.zero_fill_invalid {
        (zero_filled_mae, zero_filled_rmse)
    } else {
        (masked_mae, masked_rmse)
    };

    let mut rng = ChaCha8Rng::seed_from_u64(bcfg.sample_seed);
    let starts: Vec<usize> = (0..bcfg.n_samples)
        .map(|_| val_range.start + rng.gen_range(0..admissible))
        .collect();

    let nt = series.n_turbines();
    let mut model_rows = Vec::new();
    let mut persistence_rows = Vec::new();
    for (sample, &start) in starts.iter().enumerate() {
        let picks: Vec<(usize, usize)> = (0..nt).map(|t| (t, start)).collect();
        let batch = make_windows_at(series, &spec, feature_roles, &picks)?;
        let inputs = Tensor::<F>::from_f64_slice(
            &[nt, fcfg.input_length, fcfg.n_features],
            &batch.inputs,
        );
        let preds = forward(fcfg, params, &inputs, &mut Mode::Eval)?;
        let preds = preds.to_f64_vec();

        for t in 0..nt {
            let truth = batch.target(t);
            let valid = batch.target_valid(t);
            let raw = &preds[t * fcfg.output_length..(t + 1) * fcfg.output_length];
            let adjusted =
                apply_daily_fluctuation(raw, batch.start_slots[t], profile, pcfg)?;

            let last_step = start + fcfg.input_length;
            let history = &series.channel(t, target_idx)[start..last_step];
            let baseline = persistence_forecast(history, fcfg.output_length);

            let turbine_id = series.turbine_ids()[t];
            if let (Some(mae), Some(rmse)) =
                (mae_of(&adjusted, truth, valid), rmse_of(&adjusted, truth, valid))
            {
                model_rows.push(SampleRow {
                    sample,
                    start_step: start,
                    turbine_id,
                    mae,
                    rmse,
                    score: (mae + rmse) / 2.0,
                });
            }
            if let (Some(mae), Some(rmse)) =
                (mae_of(&baseline, truth, valid), rmse_of(&baseline, truth, valid))
            {
                persistence_rows.push(SampleRow {
                    sample,
                    start_step: start,
                    turbine_id,
                    mae,
                    rmse,
                    score: (mae + rmse) / 2.0,
                });
            }
        }
    }

    Ok(BacktestOutcome {
        model: MetricReport::from_rows(model_rows, bcfg),
        persistence: MetricReport::from_rows(persistence_rows, bcfg),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::RECORDS_PER_DAY;
    use crate::model::init_params;
    use crate::postprocess::fit_daily_profile;
    use crate::preprocess::default_feature_roles;
    use std::f64::consts::TAU;

    #[test]
    fn mae_ignores_masked_positions() {
        assert_eq!(masked_mae(&[1.0, 2.0], &[1.0, 2.0], &[true, true]), Some(0.0));
        assert_eq!(
            masked_mae(&[100.0, 200.0], &[f64::NAN, 150.0], &[false, true]),
            Some(50.0)
        );
        assert_eq!(masked_mae(&[1.0], &[9.0], &[false]), None);
    }

    #[test]
    fn rmse_matches_hand_values() {
        assert_eq!(masked_rmse(&[5.0], &[2.0], &[true]), Some(3.0));
        let r = masked_rmse(&[3.0, 0.0], &[0.0, 4.0], &[true, true]).unwrap();
        assert!((r - 3.5355339059327378).abs() < 1e-12);
        assert_eq!(masked_rmse(&[1.0, 2.0], &[0.0, 0.0], &[false, false]), None);
    }

    #[test]
    fn metrics_match_a_brute_force_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let pred: Vec<f64> = (0..288).map(|_| rng.gen_range(0.0..1500.0)).collect();
        let truth: Vec<f64> = (0..288).map(|_| rng.gen_range(0.0..1500.0)).collect();
        let valid: Vec<bool> = (0..288).map(|_| rng.gen_bool(0.8)).collect();

        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut n = 0;
        for i in 0..288 {
            if valid[i] {
                abs_sum += (pred[i] - truth[i]).abs();
                sq_sum += (pred[i] - truth[i]) * (pred[i] - truth[i]);
                n += 1;
            }
        }
        assert_eq!(masked_mae(&pred, &truth, &valid), Some(abs_sum / n as f64));
        assert_eq!(
            masked_rmse(&pred, &truth, &valid),
            Some((sq_sum / n as f64).sqrt())
        );
    }

    #[test]
    fn rmse_dominates_mae() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pred: Vec<f64> = (0..64).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let truth: Vec<f64> = (0..64).map(|_| rng.gen_range(-10.0..10.0)).collect();
            let valid: Vec<bool> = (0..64).map(|_| rng.gen_bool(0.7)).collect();
            if let (Some(mae), Some(rmse)) = (
                masked_mae(&pred, &truth, &valid),
                masked_rmse(&pred, &truth, &valid),
            ) {
                assert!(rmse >= mae - 1e-12);
            }
        }
    }

    #[test]
    fn masked_truth_values_cannot_move_the_metrics() {
        let pred = vec![10.0, 20.0, 30.0, 40.0];
        let truth = vec![12.0, 25.0, 28.0, 100.0];
        let valid = vec![true, false, true, false];
        let mut wild = truth.clone();
        wild[1] = -1e12;
        wild[3] = f64::NAN;
        let bits = |x: Option<f64>| x.map(f64::to_bits);
        assert_eq!(
            bits(masked_mae(&pred, &truth, &valid)),
            bits(masked_mae(&pred, &wild, &valid))
        );
        assert_eq!(
            bits(masked_rmse(&pred, &truth, &valid)),
            bits(masked_rmse(&pred, &wild, &valid))
        );
    }

    #[test]
    fn zero_fill_variant_keeps_the_full_denominator() {
        let pred = vec![100.0, 200.0];
        let truth = vec![0.0, 150.0];
        let valid = vec![false, true];
        // 50 kW of error spread over 2 positions instead of 1
        assert_eq!(zero_filled_mae(&pred, &truth, &valid), Some(25.0));
        assert_eq!(zero_filled_mae(&pred, &truth, &[false, false]), Some(0.0));
    }

    fn map_of(pairs: &[(i64, Vec<f64>)]) -> BTreeMap<i64, Vec<f64>> {
        pairs.iter().cloned().collect()
    }

    #[test]
    fn sample_scores_sum_turbines_then_divide() {
        // errors chosen so (mae + rmse) / 2 is 10 for one turbine, 20 for
        // the other
        let preds = map_of(&[(1, vec![10.0]), (2, vec![20.0])]);
        let truths = map_of(&[(1, vec![0.0]), (2, vec![0.0])]);
        let valids: BTreeMap<i64, Vec<bool>> =
            [(1, vec![true]), (2, vec![true])].into_iter().collect();
        let s = score_sample(&preds, &truths, &valids, 1.0).unwrap();
        assert_eq!(s, 30.0);
        let s = score_sample(&preds, &preds.clone(), &valids, 1.0).unwrap();
        assert_eq!(s, 0.0);
    }

    #[test]
    fn sample_score_matches_metric_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut preds = BTreeMap::new();
        let mut truths = BTreeMap::new();
        let mut valids = BTreeMap::new();
        for id in [3i64, 7, 20] {
            preds.insert(id, (0..48).map(|_| rng.gen_range(0.0..1000.0)).collect::<Vec<f64>>());
            truths.insert(id, (0..48).map(|_| rng.gen_range(0.0..1000.0)).collect::<Vec<f64>>());
            valids.insert(id, (0..48).map(|_| rng.gen_bool(0.9)).collect::<Vec<bool>>());
        }
        let got = score_sample(&preds, &truths, &valids, 1000.0).unwrap();
        let mut expected = 0.0;
        for id in [3i64, 7, 20] {
            let mae = masked_mae(&preds[&id], &truths[&id], &valids[&id]).unwrap();
            let rmse = masked_rmse(&preds[&id], &truths[&id], &valids[&id]).unwrap();
            expected += (mae + rmse) / 2.0;
        }
        assert!((got - expected / 1000.0).abs() < 1e-12);
    }

    #[test]
    fn farm_score_is_additive_over_turbine_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut preds = BTreeMap::new();
        let mut truths = BTreeMap::new();
        let mut valids = BTreeMap::new();
        for id in 0..6i64 {
            preds.insert(id, (0..16).map(|_| rng.gen_range(0.0..100.0)).collect::<Vec<f64>>());
            truths.insert(id, (0..16).map(|_| rng.gen_range(0.0..100.0)).collect::<Vec<f64>>());
            valids.insert(id, vec![true; 16]);
        }
        let take = |ids: &[i64],
                    m: &BTreeMap<i64, Vec<f64>>| -> BTreeMap<i64, Vec<f64>> {
            ids.iter().map(|i| (*i, m[i].clone())).collect()
        };
        let take_v = |ids: &[i64],
                      m: &BTreeMap<i64, Vec<bool>>| -> BTreeMap<i64, Vec<bool>> {
            ids.iter().map(|i| (*i, m[i].clone())).collect()
        };
        let all = score_sample(&preds, &truths, &valids, 1.0).unwrap();
        let left_ids = [0i64, 1, 2];
        let right_ids = [3i64, 4, 5];
        let left = score_sample(
            &take(&left_ids, &preds),
            &take(&left_ids, &truths),
            &take_v(&left_ids, &valids),
            1.0,
        )
        .unwrap();
        let right = score_sample(
            &take(&right_ids, &preds),
            &take(&right_ids, &truths),
            &take_v(&right_ids, &valids),
            1.0,
        )
        .unwrap();
        assert!((all - (left + right)).abs() < 1e-9);
    }

    #[test]
    fn mismatched_turbine_sets_are_rejected() {
        let preds = map_of(&[(1, vec![1.0])]);
        let truths = map_of(&[(2, vec![1.0])]);
        let valids: BTreeMap<i64, Vec<bool>> = [(1, vec![true])].into_iter().collect();
        assert!(matches!(
            score_sample(&preds, &truths, &valids, 1.0),
            Err(EvaluateError::TurbineSetMismatch(_))
        ));
    }

    #[test]
    fn persistence_repeats_the_final_value() {
        let out = persistence_forecast(&[12.0, 77.0, 500.0], 288);
        assert_eq!(out.len(), 288);
        assert!(out.iter().all(|&v| v == 500.0));
        // only the final step matters
        let other = persistence_forecast(&[-4.0, 0.0, 500.0], 288);
        assert_eq!(out, other);
    }

    /// Sinusoidal wind, power proportional to speed, one invalid stripe.
    fn val_series(n_turbines: usize, n_days: usize) -> TurbineSeriesSet {
        let n = n_days * RECORDS_PER_DAY;
        let roles = vec![Role::WindSpeed, Role::WindDirection, Role::TargetPower];
        let mut values = Vec::new();
        for t in 0..n_turbines {
            let phase = t as f64;
            let wspd: Vec<f64> = (0..n)
                .map(|s| 0.5 + 0.4 * (s as f64 * TAU / RECORDS_PER_DAY as f64 + phase).sin())
                .collect();
            let wdir: Vec<f64> = (0..n).map(|s| 0.4 + 0.2 * ((s / 9) % 2) as f64).collect();
            let patv: Vec<f64> = wspd.iter().map(|w| 900.0 * w).collect();
            values.extend(wspd);
            values.extend(wdir);
            values.extend(patv);
        }
        let present = vec![true; n_turbines * n];
        let mut valid = vec![true; n_turbines * n];
        for t in 0..n_turbines {
            for s in (0..n).filter(|s| s % 31 == 2) {
                valid[t * n + s] = false;
            }
        }
        TurbineSeriesSet::from_parts(
            (1..=n_turbines as i64).collect(),
            n_days,
            roles,
            values,
            present,
            valid,
        )
        .unwrap()
    }

    fn small_forecaster() -> ForecasterConfig {
        ForecasterConfig {
            input_length: 12,
            output_length: 6,
            attn_hidden: 4,
            dense1: 8,
            dense2: 8,
            dense3: 6,
            ..ForecasterConfig::default()
        }
    }

    fn run_backtest(bcfg: &BacktestConfig) -> BacktestOutcome {
        let series = val_series(2, 3);
        let fcfg = small_forecaster();
        let params = init_params::<f32>(&fcfg, 9);
        let pcfg = PostprocessConfig::default();
        let profile = fit_daily_profile(&series, 0..2 * RECORDS_PER_DAY, &pcfg).unwrap();
        backtest(
            &params,
            &fcfg,
            &series,
            2 * RECORDS_PER_DAY..series.n_steps(),
            &default_feature_roles(),
            &profile,
            &pcfg,
            bcfg,
        )
        .unwrap()
    }

    #[test]
    fn backtest_is_deterministic_and_covers_both_forecasts() {
        let bcfg = BacktestConfig {
            n_samples: 7,
            sample_seed: 42,
            ..BacktestConfig::default()
        };
        let a = run_backtest(&bcfg);
        let b = run_backtest(&bcfg);
        assert_eq!(a, b);

        // both reports walk the same sampled offsets
        assert_eq!(a.model.rows.len(), 7 * 2);
        assert_eq!(a.persistence.rows.len(), 7 * 2);
        let offsets = |r: &MetricReport| {
            r.rows
                .iter()
                .map(|row| (row.sample, row.start_step, row.turbine_id))
                .collect::<Vec<_>>()
        };
        assert_eq!(offsets(&a.model), offsets(&a.persistence));
        for row in a.model.rows.iter().chain(&a.persistence.rows) {
            assert_eq!(row.score.to_bits(), ((row.mae + row.rmse) / 2.0).to_bits());
        }
    }

    #[test]
    fn aggregation_modes_are_consistent() {
        let sum_cfg = BacktestConfig {
            n_samples: 5,
            sample_seed: 3,
            aggregation: Aggregation::SumOverSamples,
            ..BacktestConfig::default()
        };
        let mean_cfg = BacktestConfig {
            aggregation: Aggregation::MeanOverSamples,
            ..sum_cfg.clone()
        };
        let s = run_backtest(&sum_cfg);
        let m = run_backtest(&mean_cfg);
        assert!((s.model.farm_score / 5.0 - m.model.farm_score).abs() < 1e-12);
    }

    #[test]
    fn short_validation_range_is_an_error() {
        let series = val_series(1, 2);
        let fcfg = small_forecaster();
        let params = init_params::<f32>(&fcfg, 1);
        let pcfg = PostprocessConfig::default();
        let profile = fit_daily_profile(&series, 0..series.n_steps(), &pcfg).unwrap();
        // 16 steps on offer, the window needs 18
        let err = backtest(
            &params,
            &fcfg,
            &series,
            series.n_steps() - 16..series.n_steps(),
            &default_feature_roles(),
            &profile,
            &pcfg,
            &BacktestConfig::default(),
        );
        assert!(matches!(err, Err(EvaluateError::RangeTooShort { .. })));
    }

    #[test]
    fn csv_report_has_per_row_and_aggregate_lines() {
        let bcfg = BacktestConfig {
            n_samples: 2,
            sample_seed: 1,
            ..BacktestConfig::default()
        };
        let out = run_backtest(&bcfg);
        let csv = out.model.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "sample_id,turbine_id,mae,rmse,score");
        assert_eq!(lines.len(), 1 + out.model.rows.len() + bcfg.n_samples + 1);
        let per_sample_all: Vec<&&str> =
            lines.iter().filter(|l| l.contains(",ALL,")).collect();
        assert_eq!(per_sample_all.len(), bcfg.n_samples + 1);
        assert!(lines.last().unwrap().starts_with("ALL,ALL,"));
        assert!(!out.model.table().is_empty());
    }
}
