//! CSV ingestion onto a dense per-turbine 10-minute grid.
//!
//! Rows arrive keyed by (turbine, day, HH:MM) and may be sparse, unordered
//! or partially unparseable. Loading reindexes them onto a dense
//! `(day - 1) * 144 + slot` axis shared by every turbine, keeping a
//! `present` bit per step (the row existed and every mapped cell parsed to
//! a finite number) and a `valid` bit per step (passes the configured
//! validity rules; always a subset of `present`).

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use thiserror::Error;

/// Measurements per day on the 10-minute grid.
pub const RECORDS_PER_DAY: usize = 144;
pub const INTERVAL_MINUTES: usize = 10;

#[derive(Debug, Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error("column {0:?} not found in header")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {detail}")]
    MalformedRow { line: u64, detail: String },
    #[error("duplicate row for turbine {turbine}, day {day}, {}", slot_hhmm(*.slot))]
    DuplicateRow { turbine: i64, day: u32, slot: usize },
    #[error("invalid column schema: {0}")]
    SchemaInvalid(String),
    #[error("role {0:?} is not a channel of this series")]
    UnknownRole(String),
    #[error("inconsistent series dimensions: {0}")]
    Shape(String),
}

fn slot_hhmm(slot: usize) -> String {
    format!("{:02}:{:02}", slot / 6, (slot % 6) * 10)
}

/// Semantic meaning of a value column.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Role {
    WindSpeed,
    WindDirection,
    TargetPower,
    Extra(String),
}

impl Role {
    /// Stable key used in scaler files and config.
    pub fn key(&self) -> &str {
        match self {
            Role::WindSpeed => "wind_speed",
            Role::WindDirection => "wind_direction",
            Role::TargetPower => "target_power",
            Role::Extra(name) => name,
        }
    }

    pub fn from_key(key: &str) -> Role {
        match key {
            "wind_speed" => Role::WindSpeed,
            "wind_direction" => Role::WindDirection,
            "target_power" => Role::TargetPower,
            other => Role::Extra(other.to_string()),
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// Maps file headers to grid keys and value roles.
#[derive(Debug, Clone, PartialEq)]
pub struct ColumnSchema {
    pub turbine_id_column: String,
    pub day_column: String,
    pub time_of_day_column: String,
    /// Channel order of the loaded series follows this order.
    pub role_map: Vec<(Role, String)>,
}

impl Default for ColumnSchema {
    /// Header names of the public SDWPF file; all ten measured parameters
    /// are ingested, though only wind speed and direction are modeled by
    /// default.
    fn default() -> Self {
        let extras = ["Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3", "Prtv"];
        let mut role_map = vec![
            (Role::WindSpeed, "Wspd".to_string()),
            (Role::WindDirection, "Wdir".to_string()),
            (Role::TargetPower, "Patv".to_string()),
        ];
        role_map.extend(
            extras
                .iter()
                .map(|&c| (Role::Extra(c.to_string()), c.to_string())),
        );
        ColumnSchema {
            turbine_id_column: "TurbID".to_string(),
            day_column: "Day".to_string(),
            time_of_day_column: "Tmstamp".to_string(),
            role_map,
        }
    }
}

impl ColumnSchema {
    fn validate(&self) -> Result<(), DataError> {
        for required in [Role::WindSpeed, Role::WindDirection, Role::TargetPower] {
            if !self.role_map.iter().any(|(r, _)| *r == required) {
                return Err(DataError::SchemaInvalid(format!(
                    "role {required} is not mapped to any column"
                )));
            }
        }
        let mut cols: Vec<&str> = vec![
            &self.turbine_id_column,
            &self.day_column,
            &self.time_of_day_column,
        ];
        cols.extend(self.role_map.iter().map(|(_, c)| c.as_str()));
        let mut sorted = cols.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::SchemaInvalid(
                "mapped columns are not distinct".to_string(),
            ));
        }
        let mut roles: Vec<&Role> = self.role_map.iter().map(|(r, _)| r).collect();
        roles.sort_unstable();
        if roles.windows(2).any(|w| w[0] == w[1]) {
            return Err(DataError::SchemaInvalid(
                "mapped roles are not distinct".to_string(),
            ));
        }
        Ok(())
    }
}

/// Dense, immutable multi-turbine series. Values are laid out
/// `[turbine][role][step]` so one turbine's channel is a contiguous slice.
#[derive(Debug, Clone)]
pub struct TurbineSeriesSet {
    turbine_ids: Vec<i64>,
    n_days: usize,
    roles: Vec<Role>,
    values: Vec<f64>,
    present: Vec<bool>,
    valid: Vec<bool>,
}

impl TurbineSeriesSet {
    /// Builds a series from raw parts, checking every dimension. `values`
    /// is `[turbine][role][step]`, masks are `[turbine][step]`.
    pub fn from_parts(
        turbine_ids: Vec<i64>,
        n_days: usize,
        roles: Vec<Role>,
        values: Vec<f64>,
        present: Vec<bool>,
        valid: Vec<bool>,
    ) -> Result<Self, DataError> {
        let n_steps = n_days * RECORDS_PER_DAY;
        let (nt, nr) = (turbine_ids.len(), roles.len());
        if nt == 0 || nr == 0 || n_days == 0 {
            return Err(DataError::Shape("empty turbine, role, or day axis".into()));
        }
        if values.len() != nt * nr * n_steps {
            return Err(DataError::Shape(format!(
                "values has {} elements, expected {}",
                values.len(),
                nt * nr * n_steps
            )));
        }
        if present.len() != nt * n_steps || valid.len() != nt * n_steps {
            return Err(DataError::Shape(format!(
                "masks must have {} elements",
                nt * n_steps
            )));
        }
        if !turbine_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(DataError::Shape(
                "turbine ids must be strictly increasing".into(),
            ));
        }
        if valid.iter().zip(present.iter()).any(|(&v, &p)| v && !p) {
            return Err(DataError::Shape(
                "valid mask exceeds present mask".into(),
            ));
        }
        Ok(Self {
            turbine_ids,
            n_days,
            roles,
            values,
            present,
            valid,
        })
    }

    pub fn turbine_ids(&self) -> &[i64] {
        &self.turbine_ids
    }

    pub fn n_turbines(&self) -> usize {
        self.turbine_ids.len()
    }

    pub fn n_days(&self) -> usize {
        self.n_days
    }

    /// Steps per turbine: `n_days * 144`.
    pub fn n_steps(&self) -> usize {
        self.n_days * RECORDS_PER_DAY
    }

    pub fn roles(&self) -> &[Role] {
        &self.roles
    }

    pub fn turbine_index(&self, id: i64) -> Option<usize> {
        self.turbine_ids.binary_search(&id).ok()
    }

    pub fn role_index(&self, role: &Role) -> Option<usize> {
        self.roles.iter().position(|r| r == role)
    }

    /// One turbine's full sequence for one role.
    pub fn channel(&self, turbine: usize, role_idx: usize) -> &[f64] {
        let n = self.n_steps();
        let base = (turbine * self.roles.len() + role_idx) * n;
        &self.values[base..base + n]
    }

    pub fn present_mask(&self, turbine: usize) -> &[bool] {
        let n = self.n_steps();
        &self.present[turbine * n..(turbine + 1) * n]
    }

    pub fn valid_mask(&self, turbine: usize) -> &[bool] {
        let n = self.n_steps();
        &self.valid[turbine * n..(turbine + 1) * n]
    }

    /// Same grid and masks, different values. Length-checked.
    pub(crate) fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        Self {
            values,
            ..self.clone()
        }
    }

    pub(crate) fn with_valid(&self, valid: Vec<bool>) -> Self {
        assert_eq!(valid.len(), self.valid.len());
        Self {
            valid,
            ..self.clone()
        }
    }

    pub(crate) fn raw_values(&self) -> &[f64] {
        &self.values
    }
}

/// Per-step validity predicates. A step is valid when it is present, the
/// target is positive (if `treat_nonpositive_target_invalid`), and no
/// extra predicate fires; an extra predicate `(role, cmp, threshold)`
/// marks the step invalid when `value cmp threshold` holds.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidityRules {
    /// Present ⊇ valid is structural; this flag is accepted for config
    /// symmetry but cannot lift that invariant.
    pub treat_missing_invalid: bool,
    pub treat_nonpositive_target_invalid: bool,
    pub extra_predicates: Vec<(Role, Comparison, f64)>,
}

impl Default for ValidityRules {
    fn default() -> Self {
        Self {
            treat_missing_invalid: true,
            treat_nonpositive_target_invalid: true,
            extra_predicates: Vec::new(),
        }
    }
}

impl ValidityRules {
    /// Identity rules: valid equals present.
    pub fn none() -> Self {
        Self {
            treat_missing_invalid: true,
            treat_nonpositive_target_invalid: false,
            extra_predicates: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Comparison {
    Lt,
    Le,
    Gt,
    Ge,
    Eq,
}

impl Comparison {
    /// NaN compares false under every variant, so missing cells never
    /// trigger a predicate; missingness is handled by the present mask.
    fn holds(self, value: f64, threshold: f64) -> bool {
        match self {
            Comparison::Lt => value < threshold,
            Comparison::Le => value <= threshold,
            Comparison::Gt => value > threshold,
            Comparison::Ge => value >= threshold,
            Comparison::Eq => value == threshold,
        }
    }
}

fn parse_slot(text: &str) -> Option<usize> {
    let (hh, mm) = text.split_once(':')?;
    if hh.len() != 2 || mm.len() != 2 {
        return None;
    }
    let hh: usize = hh.parse().ok()?;
    let mm: usize = mm.parse().ok()?;
    if hh >= 24 || mm >= 60 || mm % 10 != 0 {
        return None;
    }
    Some(hh * 6 + mm / 10)
}

/// Loads a CSV file onto the dense grid. The grid spans day 1 through the
/// maximum day seen, for the union of all turbine ids, sorted. The valid
/// mask starts equal to the present mask; see [`flag_invalid`].
pub fn load_csv(path: &Path, schema: &ColumnSchema) -> Result<TurbineSeriesSet, DataError> {
    schema.validate()?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .flexible(false)
        .from_path(path)?;

    let headers = reader.headers()?.clone();
    let col_of = |name: &str| -> Result<usize, DataError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| DataError::MissingColumn(name.to_string()))
    };
    let turb_col = col_of(&schema.turbine_id_column)?;
    let day_col = col_of(&schema.day_column)?;
    let time_col = col_of(&schema.time_of_day_column)?;
    let value_cols: Vec<usize> = schema
        .role_map
        .iter()
        .map(|(_, c)| col_of(c))
        .collect::<Result<_, _>>()?;
    let n_roles = value_cols.len();

    // (day, slot, one value per role, all cells finite)
    type Row = (u32, usize, Vec<f64>, bool);
    let mut by_turbine: BTreeMap<i64, Vec<Row>> = BTreeMap::new();
    let mut max_day = 0u32;

    let mut record = csv::StringRecord::new();
    while reader.read_record(&mut record)? {
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |detail: String| DataError::MalformedRow { line, detail };
        let turbine: i64 = record
            .get(turb_col)
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("turbine id is not an integer".into()))?;
        let day: u32 = record
            .get(day_col)
            .and_then(|s| s.parse().ok())
            .filter(|&d| d >= 1)
            .ok_or_else(|| malformed("day is not a positive integer".into()))?;
        let slot = record
            .get(time_col)
            .and_then(parse_slot)
            .ok_or_else(|| malformed("time of day is not HH:MM on the 10-minute grid".into()))?;

        let mut cells = Vec::with_capacity(n_roles);
        let mut all_finite = true;
        for &c in &value_cols {
            let text = record.get(c).unwrap_or("");
            let v: f64 = if text.is_empty() {
                f64::NAN
            } else {
                text.parse().unwrap_or(f64::NAN)
            };
            all_finite &= v.is_finite();
            cells.push(v);
        }
        max_day = max_day.max(day);
        by_turbine
            .entry(turbine)
            .or_default()
            .push((day, slot, cells, all_finite));
    }

    if by_turbine.is_empty() {
        return Err(DataError::Shape("file contains no data rows".into()));
    }

    let n_days = max_day as usize;
    let n_steps = n_days * RECORDS_PER_DAY;
    let turbine_ids: Vec<i64> = by_turbine.keys().copied().collect();
    let nt = turbine_ids.len();
    let mut values = vec![f64::NAN; nt * n_roles * n_steps];
    let mut present = vec![false; nt * n_steps];
    let mut occupied = vec![false; nt * n_steps];

    for (t, (&turbine, rows)) in by_turbine.iter().enumerate() {
        for (day, slot, cells, all_finite) in rows {
            let step = (*day as usize - 1) * RECORDS_PER_DAY + slot;
            let cell_idx = t * n_steps + step;
            if occupied[cell_idx] {
                return Err(DataError::DuplicateRow {
                    turbine,
                    day: *day,
                    slot: *slot,
                });
            }
            occupied[cell_idx] = true;
            present[cell_idx] = *all_finite;
            for (r, &v) in cells.iter().enumerate() {
                values[(t * n_roles + r) * n_steps + step] = v;
            }
        }
    }

    let roles: Vec<Role> = schema.role_map.iter().map(|(r, _)| r.clone()).collect();
    let valid = present.clone();
    TurbineSeriesSet::from_parts(turbine_ids, n_days, roles, values, present, valid)
}

/// Recomputes the valid mask from the present mask and the rules. Values
/// are untouched; the result is a new series. Pure and idempotent.
pub fn flag_invalid(
    series: &TurbineSeriesSet,
    rules: &ValidityRules,
) -> Result<TurbineSeriesSet, DataError> {
    let target_idx = if rules.treat_nonpositive_target_invalid {
        Some(
            series
                .role_index(&Role::TargetPower)
                .ok_or_else(|| DataError::UnknownRole(Role::TargetPower.key().to_string()))?,
        )
    } else {
        None
    };
    let predicate_idx: Vec<(usize, Comparison, f64)> = rules
        .extra_predicates
        .iter()
        .map(|(role, cmp, thr)| {
            series
                .role_index(role)
                .map(|i| (i, *cmp, *thr))
                .ok_or_else(|| DataError::UnknownRole(role.key().to_string()))
        })
        .collect::<Result<_, _>>()?;

    let n_steps = series.n_steps();
    let mut valid = vec![false; series.n_turbines() * n_steps];
    for t in 0..series.n_turbines() {
        let present = series.present_mask(t);
        let target = target_idx.map(|r| series.channel(t, r));
        let out = &mut valid[t * n_steps..(t + 1) * n_steps];
        for s in 0..n_steps {
            let mut ok = present[s];
            if let Some(target) = target {
                ok &= target[s] > 0.0;
            }
            for &(r, cmp, thr) in &predicate_idx {
                ok &= !cmp.holds(series.channel(t, r)[s], thr);
            }
            out[s] = ok;
        }
    }
    Ok(series.with_valid(valid))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn write_csv(content: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        f.flush().unwrap();
        f
    }

    fn tiny_schema() -> ColumnSchema {
        ColumnSchema {
            turbine_id_column: "TurbID".into(),
            day_column: "Day".into(),
            time_of_day_column: "Tmstamp".into(),
            role_map: vec![
                (Role::WindSpeed, "Wspd".into()),
                (Role::WindDirection, "Wdir".into()),
                (Role::TargetPower, "Patv".into()),
            ],
        }
    }

    #[test]
    fn three_rows_land_on_a_dense_day_grid() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,100.0\n\
             1,1,00:10,6.0,11.0,110.0\n\
             1,1,00:20,7.0,12.0,120.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        assert_eq!(s.n_steps(), 144);
        assert_eq!(s.n_days(), 1);
        let present = s.present_mask(0);
        assert!(present[0] && present[1] && present[2]);
        assert!(present[3..].iter().all(|&p| !p));
        let wspd = s.channel(0, 0);
        assert_eq!(&wspd[..3], &[5.0, 6.0, 7.0]);
        assert!(wspd[3].is_nan());
    }

    #[test]
    fn blank_cell_clears_present_and_stores_nan() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,\n\
             1,1,00:10,6.0,11.0,110.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        assert!(!s.present_mask(0)[0]);
        assert!(s.present_mask(0)[1]);
        assert!(s.channel(0, 2)[0].is_nan());
        // other cells of the row are still readable
        assert_eq!(s.channel(0, 0)[0], 5.0);
    }

    #[test]
    fn rows_may_arrive_out_of_order_and_skip_days() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             2,3,12:30,7.0,12.0,120.0\n\
             1,1,00:10,6.0,11.0,110.0\n\
             2,1,00:00,5.0,10.0,100.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        assert_eq!(s.turbine_ids(), &[1, 2]);
        assert_eq!(s.n_days(), 3);
        let step = 2 * 144 + 12 * 6 + 3;
        assert_eq!(s.channel(1, 0)[step], 7.0);
        assert!(s.present_mask(1)[step]);
        assert_eq!(s.channel(0, 0)[1], 6.0);
    }

    #[test]
    fn parsed_values_read_back_bit_exactly() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut content = String::from("TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n");
        let mut expect = Vec::new();
        for slot in 0..20 {
            let v: f64 = rng.gen::<f64>() * 1000.0;
            content.push_str(&format!("1,1,{},{v},180.0,500.0\n", slot_hhmm(slot)));
            expect.push(v.to_string().parse::<f64>().unwrap());
        }
        let f = write_csv(&content);
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        for (slot, e) in expect.iter().enumerate() {
            assert_eq!(s.channel(0, 0)[slot].to_bits(), e.to_bits());
        }
    }

    #[test]
    fn missing_column_and_malformed_rows_error() {
        let f = write_csv("TurbID,Day,Tmstamp,Wspd,Wdir\n1,1,00:00,5.0,10.0\n");
        assert!(matches!(
            load_csv(f.path(), &tiny_schema()),
            Err(DataError::MissingColumn(c)) if c == "Patv"
        ));

        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:07,5.0,10.0,1.0\n",
        );
        assert!(matches!(
            load_csv(f.path(), &tiny_schema()),
            Err(DataError::MalformedRow { line: 2, .. })
        ));

        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,0,00:00,5.0,10.0,1.0\n",
        );
        assert!(matches!(
            load_csv(f.path(), &tiny_schema()),
            Err(DataError::MalformedRow { .. })
        ));
    }

    #[test]
    fn duplicate_grid_cell_errors() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,1.0\n\
             1,1,00:00,6.0,11.0,2.0\n",
        );
        assert!(matches!(
            load_csv(f.path(), &tiny_schema()),
            Err(DataError::DuplicateRow { turbine: 1, day: 1, slot: 0 })
        ));
    }

    #[test]
    fn schema_rejects_duplicate_columns() {
        let mut schema = tiny_schema();
        schema.role_map[1].1 = "Wspd".into();
        let f = write_csv("TurbID,Day,Tmstamp,Wspd,Patv\n1,1,00:00,5.0,1.0\n");
        assert!(matches!(
            load_csv(f.path(), &schema),
            Err(DataError::SchemaInvalid(_))
        ));
    }

    #[test]
    fn nonpositive_target_rule_flags_steps() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,0.0\n\
             1,1,00:10,6.0,11.0,-3.0\n\
             1,1,00:20,7.0,12.0,120.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        let flagged = flag_invalid(&s, &ValidityRules::default()).unwrap();
        let valid = flagged.valid_mask(0);
        assert!(!valid[0] && !valid[1] && valid[2]);
        // values untouched
        assert_eq!(flagged.channel(0, 2)[1], -3.0);
    }

    #[test]
    fn no_rules_means_valid_equals_present() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,0.0\n\
             1,1,00:10,,11.0,110.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        let flagged = flag_invalid(&s, &ValidityRules::none()).unwrap();
        assert_eq!(flagged.valid_mask(0), flagged.present_mask(0));
    }

    #[test]
    fn predicates_match_a_per_step_oracle() {
        // six steps, nonpositive-target rule plus (wind_speed > 2.5)
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,1.0,10.0,50.0\n\
             1,1,00:10,2.5,10.0,60.0\n\
             1,1,00:20,3.0,10.0,70.0\n\
             1,1,00:30,2.0,10.0,0.0\n\
             1,1,00:40,9.9,10.0,-1.0\n\
             1,1,00:50,,10.0,80.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        let rules = ValidityRules {
            treat_missing_invalid: true,
            treat_nonpositive_target_invalid: true,
            extra_predicates: vec![(Role::WindSpeed, Comparison::Gt, 2.5)],
        };
        let flagged = flag_invalid(&s, &rules).unwrap();

        let wspd = s.channel(0, 0);
        let patv = s.channel(0, 2);
        for step in 0..6 {
            let expect = s.present_mask(0)[step] && patv[step] > 0.0 && !(wspd[step] > 2.5);
            assert_eq!(flagged.valid_mask(0)[step], expect, "step {step}");
        }
        assert_eq!(flagged.valid_mask(0)[..6], [true, true, false, false, false, false]);
    }

    #[test]
    fn flag_invalid_is_idempotent_and_checks_roles() {
        let f = write_csv(
            "TurbID,Day,Tmstamp,Wspd,Wdir,Patv\n\
             1,1,00:00,5.0,10.0,100.0\n",
        );
        let s = load_csv(f.path(), &tiny_schema()).unwrap();
        let rules = ValidityRules::default();
        let once = flag_invalid(&s, &rules).unwrap();
        let twice = flag_invalid(&once, &rules).unwrap();
        assert_eq!(once.valid_mask(0), twice.valid_mask(0));

        let rules = ValidityRules {
            extra_predicates: vec![(Role::Extra("Etmp".into()), Comparison::Lt, -40.0)],
            ..ValidityRules::default()
        };
        assert!(matches!(
            flag_invalid(&s, &rules),
            Err(DataError::UnknownRole(r)) if r == "Etmp"
        ));
    }
}
