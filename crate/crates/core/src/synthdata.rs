//! Deterministic synthetic SCADA generator.
//!
//! Produces a CSV in the same dialect the loader consumes: sinusoidal
//! daily wind, power through a saturating piecewise-linear turbine curve,
//! a slow direction random walk, and seeded invalid injections split
//! between zeroed and blanked target cells. Everything is a pure function
//! of the [`SynthSpec`], bit for bit.

use std::f64::consts::TAU;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataio::{load_csv, ColumnSchema, DataError, TurbineSeriesSet, RECORDS_PER_DAY};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synth spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Monotone wind-speed to power map, linear between knots, flat outside
/// them. The last knot's power is the rated ceiling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerCurve {
    knots: Vec<(f64, f64)>,
}

impl Default for PowerCurve {
    fn default() -> Self {
        // cut-in at 3 m/s, rated 1500 kW from 12 m/s
        Self {
            knots: vec![(0.0, 0.0), (3.0, 0.0), (12.0, 1500.0), (25.0, 1500.0)],
        }
    }
}

impl PowerCurve {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self, SynthError> {
        let bad = |d: String| Err(SynthError::InvalidSpec(d));
        if knots.len() < 2 {
            return bad("power curve needs at least two knots".into());
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) {
                return bad(format!("knot speeds must increase: {} then {}", w[0].0, w[1].0));
            }
            if !(w[1].1 >= w[0].1) {
                return bad(format!("knot powers must not fall: {} then {}", w[0].1, w[1].1));
            }
        }
        if knots[0].1 < 0.0 || !knots.iter().all(|k| k.1.is_finite() && k.0.is_finite()) {
            return bad("knot values must be finite and non-negative".into());
        }
        if knots.last().unwrap().1 > 1620.0 {
            return bad("rated power must not exceed 1620 kW".into());
        }
        Ok(Self { knots })
    }

    pub fn rated(&self) -> f64 {
        self.knots.last().unwrap().1
    }

    pub fn eval(&self, wind: f64) -> f64 {
        let first = self.knots[0];
        let last = *self.knots.last().unwrap();
        if wind <= first.0 {
            return first.1;
        }
        if wind >= last.0 {
            return last.1;
        }
        for w in self.knots.windows(2) {
            let ((x0, y0), (x1, y1)) = (w[0], w[1]);
            if wind <= x1 {
                return y0 + (y1 - y0) * (wind - x0) / (x1 - x0);
            }
        }
        last.1
    }

    /// Start, end, and slope of the rising section, used to convert the
    /// requested kW amplitude into a wind-speed amplitude.
    fn ramp(&self) -> (f64, f64, f64) {
        let y0 = self.knots[0].1;
        let y_max = self.rated();
        let lo = self
            .knots
            .iter()
            .rev()
            .find(|k| k.1 == y0)
            .map(|k| k.0)
            .unwrap_or(self.knots[0].0);
        let hi = self
            .knots
            .iter()
            .find(|k| k.1 == y_max)
            .map(|k| k.0)
            .unwrap_or(self.knots.last().unwrap().0);
        ((lo), (hi), (y_max - y0) / (hi - lo))
    }
}

/// Generator settings. `daily_amplitude` and `noise_std` are in kW and
/// are mapped into wind-speed space through the curve's ramp slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_turbines: usize,
    pub n_days: usize,
    pub seed: u64,
    pub daily_amplitude: f64,
    pub noise_std: f64,
    pub power_curve: PowerCurve,
    pub invalid_fraction: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_turbines: 2,
            n_days: 30,
            seed: 0,
            daily_amplitude: 600.0,
            noise_std: 30.0,
            power_curve: PowerCurve::default(),
            invalid_fraction: 0.05,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_turbines == 0 || self.n_days == 0 {
            return Err(SynthError::InvalidSpec(
                "need at least one turbine and one day".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) {
            return Err(SynthError::InvalidSpec(
                "invalid_fraction must lie in [0, 1)".into(),
            ));
        }
        if !(self.daily_amplitude >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(SynthError::InvalidSpec(
                "amplitude and noise must be non-negative".into(),
            ));
        }
        PowerCurve::new(self.power_curve.knots.clone())?;
        Ok(())
    }
}

fn fmt_cell(v: f64) -> String {
    format!("{v}")
}

/// Writes the CSV and loads it straight back through the default schema.
/// Validity flags are left structural (present only); callers apply their
/// own rules.
pub fn generate(spec: &SynthSpec, path: &Path) -> Result<TurbineSeriesSet, SynthError> {
    spec.validate()?;
    let curve = &spec.power_curve;
    let (ramp_lo, ramp_hi, slope) = curve.ramp();
    let mean_wind = (ramp_lo + ramp_hi) / 2.0;
    let wind_amp = spec.daily_amplitude / slope;
    let wind_noise = Normal::new(0.0, spec.noise_std / slope).unwrap();
    let power_noise = Normal::new(0.0, spec.noise_std).unwrap();
    let walk = Normal::new(0.0, 2.0).unwrap();
    let jitter = Normal::new(0.0, 1.0).unwrap();

    let mut out = String::from(
        "TurbID,Day,Tmstamp,Wspd,Wdir,Etmp,Itmp,Ndir,Pab1,Pab2,Pab3,Prtv,Patv\n",
    );
    for t in 0..spec.n_turbines {
        let mut rng = ChaCha8Rng::seed_from_u64(
            spec.seed ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        // turbines share the daily phase up to a small offset, the way one
        // weather system drives a whole farm
        let phase = 0.3 * (rng.gen::<f64>() - 0.5);
        let mut wdir: f64 = rng.gen_range(0.0..360.0);
        for day in 1..=spec.n_days {
            for slot in 0..RECORDS_PER_DAY {
                let wind = (mean_wind
                    + wind_amp * (TAU * slot as f64 / RECORDS_PER_DAY as f64 + phase).sin()
                    + wind_noise.sample(&mut rng))
                .max(0.0);
                let power = (curve.eval(wind) + power_noise.sample(&mut rng))
                    .clamp(0.0, curve.rated());
                wdir = (wdir + walk.sample(&mut rng)).rem_euclid(360.0);
                let etmp = 20.0 + jitter.sample(&mut rng);
                let itmp = 40.0 + jitter.sample(&mut rng);
                let ndir = (wdir + 5.0 * jitter.sample(&mut rng)).rem_euclid(360.0);
                let pab = [
                    jitter.sample(&mut rng).abs(),
                    jitter.sample(&mut rng).abs(),
                    jitter.sample(&mut rng).abs(),
                ];
                let prtv = 0.1 * power;

                let patv_cell = if rng.gen::<f64>() < spec.invalid_fraction {
                    if rng.gen_bool(0.5) {
                        "0".to_string()
                    } else {
                        String::new()
                    }
                } else {
                    fmt_cell(power)
                };
                let _ = writeln!(
                    out,
                    "{},{},{:02}:{:02},{},{},{},{},{},{},{},{},{},{}",
                    t + 1,
                    day,
                    slot / 6,
                    (slot % 6) * 10,
                    fmt_cell(wind),
                    fmt_cell(wdir),
                    fmt_cell(etmp),
                    fmt_cell(itmp),
                    fmt_cell(ndir),
                    fmt_cell(pab[0]),
                    fmt_cell(pab[1]),
                    fmt_cell(pab[2]),
                    fmt_cell(prtv),
                    patv_cell
                );
            }
        }
    }
    fs::write(path, &out)?;
    Ok(load_csv(path, &ColumnSchema::default())?)
}
