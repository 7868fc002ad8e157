//! The single run configuration every command consumes. One TOML file, all
//! fields defaulted, dotted-key overrides from the command line applied on
//! the raw value tree before deserialization so overrides and file entries
//! go through identical parsing.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use windcast::dataio::{ColumnSchema, Comparison, Role, ValidityRules};
use windcast::evaluate::BacktestConfig;
use windcast::model::ForecasterConfig;
use windcast::postprocess::PostprocessConfig;
use windcast::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Float width used by train; predict and evaluate follow the
    /// checkpoint's stored dtype instead.
    pub precision: Precision,
    /// Seed for parameter initialization. `--seed` overrides this together
    /// with the shuffle and sample seeds.
    pub init_seed: u64,
    pub data: DataSection,
    pub preprocess: PreprocessSection,
    pub model: ForecasterConfig,
    pub train: TrainConfig,
    pub postprocess: PostprocessConfig,
    pub evaluate: BacktestConfig,
    pub paths: PathsSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            precision: Precision::F32,
            init_seed: 0,
            data: DataSection::default(),
            preprocess: PreprocessSection::default(),
            model: ForecasterConfig::default(),
            train: TrainConfig::default(),
            postprocess: PostprocessConfig::default(),
            evaluate: BacktestConfig::default(),
            paths: PathsSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Input CSV, resolved relative to the working directory.
    pub path: PathBuf,
    pub schema: SchemaSection,
    pub validity: ValiditySection,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: PathBuf::from("data.csv"),
            schema: SchemaSection::default(),
            validity: ValiditySection::default(),
        }
    }
}

/// Column-name overrides; defaults are the public SDWPF headers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemaSection {
    pub turbine_id_column: String,
    pub day_column: String,
    pub time_of_day_column: String,
    pub wind_speed_column: String,
    pub wind_direction_column: String,
    pub target_column: String,
    /// Further measured columns ingested as extra roles named after the
    /// column.
    pub extra_columns: Vec<String>,
}

impl Default for SchemaSection {
    fn default() -> Self {
        Self {
            turbine_id_column: "TurbID".into(),
            day_column: "Day".into(),
            time_of_day_column: "Tmstamp".into(),
            wind_speed_column: "Wspd".into(),
            wind_direction_column: "Wdir".into(),
            target_column: "Patv".into(),
            extra_columns: ["Etmp", "Itmp", "Ndir", "Pab1", "Pab2", "Pab3", "Prtv"]
                .into_iter()
                .map(String::from)
                .collect(),
        }
    }
}

impl SchemaSection {
    /// Channel order mirrors `ColumnSchema::default`: wind speed, wind
    /// direction, target, then extras in listed order.
    pub fn to_schema(&self) -> ColumnSchema {
        let mut role_map = vec![
            (Role::WindSpeed, self.wind_speed_column.clone()),
            (Role::WindDirection, self.wind_direction_column.clone()),
            (Role::TargetPower, self.target_column.clone()),
        ];
        role_map.extend(
            self.extra_columns
                .iter()
                .map(|c| (Role::Extra(c.clone()), c.clone())),
        );
        ColumnSchema {
            turbine_id_column: self.turbine_id_column.clone(),
            day_column: self.day_column.clone(),
            time_of_day_column: self.time_of_day_column.clone(),
            role_map,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ValiditySection {
    pub treat_missing_invalid: bool,
    pub treat_nonpositive_target_invalid: bool,
    /// Extra abnormality predicates as `"role op threshold"` strings, e.g.
    /// `"Pab1 > 89"`. A step is invalid when the comparison holds.
    pub extra_predicates: Vec<String>,
}

impl Default for ValiditySection {
    fn default() -> Self {
        Self {
            treat_missing_invalid: true,
            treat_nonpositive_target_invalid: true,
            extra_predicates: Vec::new(),
        }
    }
}

impl ValiditySection {
    pub fn to_rules(&self) -> Result<ValidityRules> {
        let mut extra = Vec::new();
        for spec in &self.extra_predicates {
            let parts: Vec<&str> = spec.split_whitespace().collect();
            let [role, op, threshold] = parts[..] else {
                bail!("predicate {spec:?}: expected \"role op threshold\"");
            };
            let op = match op {
                "<" => Comparison::Lt,
                "<=" => Comparison::Le,
                ">" => Comparison::Gt,
                ">=" => Comparison::Ge,
                "==" => Comparison::Eq,
                other => bail!("predicate {spec:?}: unknown comparison {other:?}"),
            };
            let threshold: f64 = threshold
                .parse()
                .with_context(|| format!("predicate {spec:?}: bad threshold"))?;
            extra.push((Role::from_key(role), op, threshold));
        }
        Ok(ValidityRules {
            treat_missing_invalid: self.treat_missing_invalid,
            treat_nonpositive_target_invalid: self.treat_nonpositive_target_invalid,
            extra_predicates: extra,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    /// Model input channels by role key, in channel order.
    pub feature_roles: Vec<String>,
    /// Forward fill replaces invalid (not just missing) readings when set.
    pub fill_invalid: bool,
    /// Training covers days 1..=train_end_day.
    pub train_end_day: usize,
    /// Validation covers val_start_day..=last day.
    pub val_start_day: usize,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self {
            feature_roles: vec!["wind_speed".into(), "wind_direction".into()],
            fill_invalid: true,
            train_end_day: 181,
            val_start_day: 231,
        }
    }
}

impl PreprocessSection {
    pub fn roles(&self) -> Vec<Role> {
        self.feature_roles
            .iter()
            .map(|k| Role::from_key(k))
            .collect()
    }
}

/// Artifact file names, resolved relative to `--output-dir` unless
/// absolute. The data path is the one input; everything here is written.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    pub checkpoint: PathBuf,
    pub scaler: PathBuf,
    pub profile: PathBuf,
    pub loss_history: PathBuf,
    pub forecast: PathBuf,
    pub report: PathBuf,
    pub persistence_report: PathBuf,
    pub config_echo: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        Self {
            checkpoint: "model.ckpt".into(),
            scaler: "scaler.csv".into(),
            profile: "profile.csv".into(),
            loss_history: "loss_history.csv".into(),
            forecast: "forecast.csv".into(),
            report: "report_model.csv".into(),
            persistence_report: "report_persistence.csv".into(),
            config_echo: "config_echo.toml".into(),
        }
    }
}

/// Reads the optional file, applies `key=value` overrides onto the raw TOML
/// tree, then deserializes. `seed` last: it wins over both.
pub fn load_config(
    path: Option<&Path>,
    overrides: &[String],
    seed: Option<u64>,
) -> Result<RunConfig> {
    let mut tree: toml::Table = match path {
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            text.parse()
                .with_context(|| format!("parsing config {}", p.display()))?
        }
        None => toml::Table::new(),
    };
    for spec in overrides {
        apply_override(&mut tree, spec)?;
    }
    let mut cfg: RunConfig = toml::Value::Table(tree)
        .try_into()
        .context("interpreting configuration")?;
    if let Some(s) = seed {
        cfg.init_seed = s;
        cfg.train.shuffle_seed = s;
        cfg.evaluate.sample_seed = s;
    }
    Ok(cfg)
}

/// Sets one dotted key, creating intermediate tables. The value text is
/// parsed as a TOML literal and falls back to a plain string, so
/// `train.epochs=5` and `data.path=wind.csv` both read naturally.
fn apply_override(tree: &mut toml::Table, spec: &str) -> Result<()> {
    let (key, raw) = spec
        .split_once('=')
        .with_context(|| format!("override {spec:?}: expected key=value"))?;
    let (key, raw) = (key.trim(), raw.trim());
    let segments: Vec<&str> = key.split('.').collect();
    if segments.iter().any(|s| s.is_empty()) {
        bail!("override {spec:?}: empty key segment");
    }
    let mut cur = tree;
    for seg in &segments[..segments.len() - 1] {
        cur = cur
            .entry(seg.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("override {key:?}: {seg} is not a table"))?;
    }
    cur.insert(segments[segments.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

pub fn to_toml(cfg: &RunConfig) -> Result<String> {
    toml::to_string_pretty(cfg).context("serializing configuration")
}
