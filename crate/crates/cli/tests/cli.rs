//! End-to-end runs of the windcast binary on generated data: artifact
//! determinism, config plumbing, and agreement between the predict command
//! and an in-process replication of the same pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use tempfile::TempDir;

use windcast::dataio::{flag_invalid, load_csv};
use windcast::model::{forward, init_params, Mode};
use windcast::postprocess::{apply_daily_fluctuation, fit_daily_profile, start_slot_of};
use windcast::preprocess::{fit_scaler, forward_fill, temporal_split_days, transform};
use windcast::synthdata::{generate, SynthSpec};
use windcast::train::fit;
use windcast_cli::config::{load_config, RunConfig};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_windcast")
}

fn run_args(dir: &Path, args: &[String]) -> Output {
    Command::new(bin())
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_strs(dir: &Path, args: &[&str]) -> Output {
    let owned: Vec<String> = args.iter().map(|s| s.to_string()).collect();
    run_args(dir, &owned)
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).expect("utf8 stdout")
}

struct Fixture {
    dir: TempDir,
    data: PathBuf,
}

/// 2 turbines x 12 days of synthetic records plus a model small enough to
/// train in well under a second.
const REDUCED: &[&str] = &[
    "preprocess.train_end_day=8",
    "preprocess.val_start_day=10",
    "model.input_length=24",
    "model.output_length=12",
    "model.attn_hidden=8",
    "model.ffn_hidden=8",
    "model.dense1=16",
    "model.dense2=16",
    "model.dense3=12",
    "train.batch_size=256",
    "train.epochs=2",
    "evaluate.n_samples=5",
];

fn fixture() -> Fixture {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("data.csv");
    let spec = SynthSpec {
        n_days: 12,
        ..SynthSpec::default()
    };
    generate(&spec, &data).unwrap();
    Fixture { dir, data }
}

impl Fixture {
    fn args(&self, out_dir: &str, cmd: &str, extra: &[&str]) -> Vec<String> {
        let mut v: Vec<String> = vec!["--output-dir".into(), out_dir.into(), cmd.into()];
        v.push(format!("data.path={}", self.data.display()));
        v.extend(REDUCED.iter().map(|s| s.to_string()));
        v.extend(extra.iter().map(|s| s.to_string()));
        v
    }

    fn overrides(&self) -> Vec<String> {
        let mut v = vec![format!("data.path={}", self.data.display())];
        v.extend(REDUCED.iter().map(|s| s.to_string()));
        v
    }

    fn out(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }
}

#[test]
fn show_config_prints_documented_defaults() {
    let dir = TempDir::new().unwrap();
    let out = run_strs(dir.path(), &["--show-config", "train"]);
    assert!(out.status.success());
    let cfg: RunConfig = toml::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(cfg, RunConfig::default());
    assert_eq!(cfg.model.input_length, 288);
    assert_eq!(cfg.model.output_length, 288);
    assert_eq!(cfg.model.attn_hidden, 32);
    assert_eq!(cfg.model.n_heads, 1);
    assert_eq!(cfg.model.dense1, 512);
    assert_eq!(cfg.model.dense2, 1024);
    assert_eq!(cfg.model.dense1_dropout, 0.25);
    assert_eq!(cfg.train.batch_size, 1024);
    assert_eq!(cfg.train.epochs, 3);
    assert_eq!(cfg.train.learning_rate, 0.005);
    assert_eq!(cfg.train.adam_beta1, 0.9);
    assert_eq!(cfg.train.adam_beta2, 0.999);
    assert_eq!(cfg.postprocess.multiplier, 36.0);
    assert_eq!(cfg.postprocess.boost_factor, 1.1);
    assert_eq!(cfg.postprocess.clamp_min, 0.0);
    assert_eq!(cfg.postprocess.clamp_max, 1620.0);
    assert_eq!(cfg.evaluate.n_samples, 195);
    assert_eq!(cfg.evaluate.unit_divisor, 1000.0);
    assert_eq!(cfg.preprocess.train_end_day, 181);
    assert_eq!(cfg.preprocess.val_start_day, 231);

    // command-line override beats the file
    fs::write(dir.path().join("run.toml"), "[train]\nepochs = 9\n").unwrap();
    let out = run_strs(
        dir.path(),
        &["--config", "run.toml", "--show-config", "train", "train.epochs=2"],
    );
    assert!(out.status.success());
    let cfg: RunConfig = toml::from_str(&stdout_of(&out)).unwrap();
    assert_eq!(cfg.train.epochs, 2);
}

#[test]
fn inspect_reports_counts_and_gaps() {
    let fx = fixture();
    let out = run_args(fx.dir.path(), &fx.args("i", "inspect", &[]));
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.starts_with("2 turbines, 12 days"), "got: {text}");
    assert!(text.contains("wind_speed"));
    assert!(text.contains("target_power"));

    let bad = run_strs(fx.dir.path(), &["inspect", "data.path=missing.csv"]);
    assert!(!bad.status.success());
}

#[test]
fn train_is_deterministic_and_leaves_inputs_alone() {
    let fx = fixture();
    let data_before = fs::read(&fx.data).unwrap();

    let out = run_args(fx.dir.path(), &fx.args("a", "train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in [
        "model.ckpt",
        "scaler.csv",
        "profile.csv",
        "loss_history.csv",
        "config_echo.toml",
    ] {
        assert!(fx.out("a").join(f).exists(), "missing {f}");
    }
    let text = stdout_of(&out);
    assert!(text.contains("epoch 1"), "got: {text}");
    let history = fs::read_to_string(fx.out("a").join("loss_history.csv")).unwrap();
    assert!(history.starts_with("epoch,mean_loss\n"));
    assert_eq!(history.lines().count(), 3);

    // the echoed config round-trips to the effective one
    let echoed: RunConfig =
        toml::from_str(&fs::read_to_string(fx.out("a").join("config_echo.toml")).unwrap())
            .unwrap();
    let expected = load_config(None, &fx.overrides(), None).unwrap();
    assert_eq!(echoed, expected);

    // rerun with the same seeds: identical checkpoint bytes
    let out = run_args(fx.dir.path(), &fx.args("b", "train", &[]));
    assert!(out.status.success());
    assert_eq!(
        fs::read(fx.out("a").join("model.ckpt")).unwrap(),
        fs::read(fx.out("b").join("model.ckpt")).unwrap(),
    );
    assert_eq!(
        fs::read(fx.out("a").join("loss_history.csv")).unwrap(),
        fs::read(fx.out("b").join("loss_history.csv")).unwrap(),
    );

    // another seed trains different weights
    let out = run_args(fx.dir.path(), &fx.args("c", "train", &["--seed", "5"]));
    assert!(out.status.success());
    assert_ne!(
        fs::read(fx.out("a").join("model.ckpt")).unwrap(),
        fs::read(fx.out("c").join("model.ckpt")).unwrap(),
    );

    assert_eq!(data_before, fs::read(&fx.data).unwrap(), "data file mutated");

    let out = run_args(fx.dir.path(), &fx.args("z", "train", &["train.epochs=0"]));
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("epochs"));
}

#[test]
fn predict_matches_an_in_process_pipeline_exactly() {
    let fx = fixture();

    // artifacts are a precondition
    let miss = run_args(fx.dir.path(), &fx.args("p0", "predict", &[]));
    assert!(!miss.status.success());

    let out = run_args(fx.dir.path(), &fx.args("m", "train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_args(fx.dir.path(), &fx.args("m", "predict", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let text = fs::read_to_string(fx.out("m").join("forecast.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("turbine_id,step,prediction_kw"));
    let rows: Vec<(i64, usize, f64)> = lines
        .map(|l| {
            let mut p = l.split(',');
            (
                p.next().unwrap().parse().unwrap(),
                p.next().unwrap().parse().unwrap(),
                p.next().unwrap().parse().unwrap(),
            )
        })
        .collect();
    assert_eq!(rows.len(), 2 * 12, "288-per-turbine scaled down to ol=12");
    for (i, &(tid, step, kw)) in rows.iter().enumerate() {
        assert_eq!(tid, if i < 12 { 1 } else { 2 });
        assert_eq!(step, i % 12);
        assert!((0.0..=1620.0).contains(&kw), "row {i} out of clamp: {kw}");
    }

    // reruns reproduce the file from the stored checkpoint
    let again = run_args(fx.dir.path(), &fx.args("m", "predict", &[]));
    assert!(again.status.success());
    assert_eq!(
        text,
        fs::read_to_string(fx.out("m").join("forecast.csv")).unwrap(),
    );

    // replicate the whole pipeline in this process; the binary's forecasts
    // (trained, saved, reloaded) must agree to the last bit
    let cfg = load_config(None, &fx.overrides(), None).unwrap();
    let raw = load_csv(&cfg.data.path, &cfg.data.schema.to_schema()).unwrap();
    let flagged = flag_invalid(&raw, &cfg.data.validity.to_rules().unwrap()).unwrap();
    let filled = forward_fill(&flagged, cfg.preprocess.fill_invalid).unwrap();
    let (train_range, _) = temporal_split_days(
        &filled,
        cfg.preprocess.train_end_day,
        cfg.preprocess.val_start_day,
    )
    .unwrap();
    let roles = cfg.preprocess.roles();
    let scaler = fit_scaler(&filled, &roles, train_range.clone()).unwrap();
    let scaled = transform(&filled, &scaler).unwrap();
    let init = init_params::<f32>(&cfg.model, cfg.init_seed);
    let fitted = fit(&scaled, train_range.clone(), &roles, init, &cfg.model, &cfg.train).unwrap();
    let profile = fit_daily_profile(&scaled, train_range, &cfg.postprocess).unwrap();

    let (ns, il, ol) = (scaled.n_steps(), cfg.model.input_length, cfg.model.output_length);
    let start = ns - il;
    let role_idx: Vec<usize> = roles.iter().map(|r| scaled.role_index(r).unwrap()).collect();
    let mut data = Vec::new();
    for t in 0..scaled.n_turbines() {
        for s in start..start + il {
            for &ri in &role_idx {
                data.push(scaled.channel(t, ri)[s]);
            }
        }
    }
    let input = windcast::autodiff::Tensor::<f32>::from_f64_slice(
        &[scaled.n_turbines(), il, roles.len()],
        &data,
    );
    let pred = forward(&cfg.model, &fitted.params, &input, &mut Mode::Eval)
        .unwrap()
        .to_f64_vec();
    let mut expected = Vec::new();
    for t in 0..scaled.n_turbines() {
        expected.extend(
            apply_daily_fluctuation(
                &pred[t * ol..(t + 1) * ol],
                start_slot_of(start + il),
                &profile,
                &cfg.postprocess,
            )
            .unwrap(),
        );
    }
    let got: Vec<f64> = rows.iter().map(|&(_, _, kw)| kw).collect();
    assert_eq!(got, expected);

    // an explicit window start is honored
    let out = run_args(fx.dir.path(), &fx.args("m", "predict", &["--at-step", "0"]));
    assert!(out.status.success());
    let shifted = fs::read_to_string(fx.out("m").join("forecast.csv")).unwrap();
    assert_eq!(shifted.lines().count(), 1 + 24);
    assert_ne!(shifted, text);
}

#[test]
fn evaluate_reports_are_internally_consistent_and_stable() {
    let fx = fixture();
    let out = run_args(fx.dir.path(), &fx.args("e", "train", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = run_args(fx.dir.path(), &fx.args("e", "evaluate", &[]));
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = stdout_of(&out);
    assert!(text.contains("persistence:"), "got: {text}");
    assert!(text.contains("model farm score"), "got: {text}");

    let report = fs::read_to_string(fx.out("e").join("report_model.csv")).unwrap();
    assert!(fx.out("e").join("report_persistence.csv").exists());
    let mut lines = report.lines();
    assert_eq!(lines.next(), Some("sample_id,turbine_id,mae,rmse,score"));
    let mut per_turbine_scores = vec![0.0f64; 5];
    let mut per_sample_alls = vec![f64::NAN; 5];
    let mut farm = f64::NAN;
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        assert_eq!(cells.len(), 5, "bad row {line:?}");
        match (cells[0], cells[1]) {
            ("ALL", "ALL") => farm = cells[4].parse().unwrap(),
            (s, "ALL") => {
                per_sample_alls[s.parse::<usize>().unwrap()] = cells[4].parse().unwrap()
            }
            (s, _) => {
                per_turbine_scores[s.parse::<usize>().unwrap()] +=
                    cells[4].parse::<f64>().unwrap()
            }
        }
    }
    // aggregate rows recompute from the per-turbine rows they summarize
    for (s, &got) in per_sample_alls.iter().enumerate() {
        assert_eq!(got, per_turbine_scores[s] / 1000.0, "sample {s}");
    }
    assert_eq!(farm, per_sample_alls.iter().sum::<f64>());

    // fixed sample seed: identical bytes on rerun
    let out = run_args(fx.dir.path(), &fx.args("e", "evaluate", &[]));
    assert!(out.status.success());
    assert_eq!(
        report,
        fs::read_to_string(fx.out("e").join("report_model.csv")).unwrap(),
    );
}

#[test]
fn gradcheck_passes_well_under_a_minute() {
    let dir = TempDir::new().unwrap();
    let t0 = Instant::now();
    let out = run_strs(dir.path(), &["gradcheck"]);
    assert!(out.status.success());
    assert!(t0.elapsed().as_secs() < 60);
    let text = stdout_of(&out);
    assert!(text.contains("all gradient checks passed"), "got: {text}");
    assert!(text.contains("reduced model"));
}
