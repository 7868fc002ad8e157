//! Adam training loop over windows cut straight from a series set, plus a
//! self-describing binary checkpoint format.
//!
//! The loop is single threaded and fully deterministic: sample order is a
//! seeded shuffle, dropout draws come from one seeded stream consumed in
//! batch order, and batches whose target mask is entirely invalid are
//! skipped without touching either stream's position in a data-dependent
//! way.

use std::fs;
use std::io::Write as _;
use std::ops::Range;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Dtype, Element, Tape, Tensor};
use crate::dataio::{Role, TurbineSeriesSet};
use crate::model::{
    forward_on_tape, param_shapes, BoundParams, ForecasterConfig, ForecasterParams, Mode,
    ModelError,
};
use crate::preprocess::{make_windows_at, PreprocessError, WindowSpec};

/// Offset mixed into `shuffle_seed` so the dropout stream never aliases an
/// epoch's shuffle stream.
const DROPOUT_STREAM_SALT: u64 = 0x517c_c1b7_2722_0a95;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"WINDCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train setup: {0}")]
    InvalidConfig(String),
    #[error("no training windows fit the given range")]
    NoTrainingData,
    #[error("non-finite loss at batch {step}")]
    NonFiniteLoss { step: usize },
    #[error("adam shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("checkpoint is corrupt: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint has format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("checkpoint stores {found} tensors, caller asked for {requested}")]
    DtypeMismatch { found: Dtype, requested: Dtype },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
}

/// Optimizer settings. Batch size, epochs and learning rate follow the
/// original experiment; the remaining Adam constants are the usual
/// defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub shuffle_seed: u64,
    /// Exclude invalid target steps from the loss. On by default; turning
    /// it off trains against every recorded value, zeros and all.
    pub mask_invalid_targets: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 1024,
            epochs: 3,
            learning_rate: 0.005,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            shuffle_seed: 0,
            mask_invalid_targets: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::InvalidConfig("batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TrainError::InvalidConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning_rate must be > 0".into(),
            ));
        }
        Ok(())
    }
}

/// First and second moment estimates, one tensor per parameter in the
/// same order as the parameter list, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState<F: Element> {
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
    t: u64,
}

impl<F: Element> AdamState<F> {
    /// Fresh state: zero moments mirroring `tensors`, step counter zero.
    pub fn zeros_like(tensors: &[Tensor<F>]) -> Self {
        Self {
            m: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            v: tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            t: 0,
        }
    }

    pub fn for_params(params: &ForecasterParams<F>) -> Self {
        let tensors: Vec<Tensor<F>> =
            params.entries().iter().map(|(_, t)| t.clone()).collect();
        Self::zeros_like(&tensors)
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Tensor<F>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Tensor<F>] {
        &self.v
    }

    fn from_parts(m: Vec<Tensor<F>>, v: Vec<Tensor<F>>, t: u64) -> Self {
        Self { m, v, t }
    }
}

/// One Adam update in place. Moments and parameters stay in `F`; the
/// bias-correction scalars are computed in f64 before conversion.
pub fn adam_step<F: Element>(
    params: &mut [Tensor<F>],
    grads: &[Tensor<F>],
    state: &mut AdamState<F>,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters, {} gradients, {} moment pairs",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(TrainError::ShapeMismatch(format!(
                "tensor {i}: param {:?}, grad {:?}, moment {:?}",
                p.shape(),
                g.shape(),
                state.m[i].shape()
            )));
        }
    }

    state.t += 1;
    let b1 = F::from_f64(cfg.adam_beta1);
    let b2 = F::from_f64(cfg.adam_beta2);
    let one = F::from_f64(1.0);
    let bc1 = F::from_f64(1.0 - cfg.adam_beta1.powi(state.t as i32));
    let bc2 = F::from_f64(1.0 - cfg.adam_beta2.powi(state.t as i32));
    let lr = F::from_f64(cfg.learning_rate);
    let eps = F::from_f64(cfg.adam_eps);

    for i in 0..params.len() {
        let g = grads[i].data();
        let mut m = state.m[i].to_vec();
        let mut v = state.v[i].to_vec();
        let mut p = params[i].to_vec();
        for j in 0..p.len() {
            m[j] = b1 * m[j] + (one - b1) * g[j];
            v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        let shape = params[i].shape().to_vec();
        state.m[i] = Tensor::from_vec(&shape, m);
        state.v[i] = Tensor::from_vec(&shape, v);
        params[i] = Tensor::from_vec(&shape, p);
    }
    Ok(())
}

/// Everything `fit` hands back: final parameters, optimizer state for
/// checkpointing, mean batch loss per epoch, and skip diagnostics.
#[derive(Debug)]
pub struct FitOutcome<F: Element> {
    pub params: ForecasterParams<F>,
    pub adam: AdamState<F>,
    pub loss_history: Vec<f64>,
    /// Batches whose target mask had no valid step; they consume a batch
    /// slot but never reach the optimizer.
    pub skipped_batches: usize,
}

/// Trains `init` on every window of `train_range`, all turbines pooled.
///
/// Per epoch the pooled sample list is reshuffled with
/// `shuffle_seed + epoch`; the last partial batch is kept. Inputs must be
/// gap filled and scaled beforehand: a non-finite feature value is an
/// error, not data.
pub fn fit<F: Element>(
    series: &TurbineSeriesSet,
    train_range: Range<usize>,
    feature_roles: &[Role],
    init: ForecasterParams<F>,
    fcfg: &ForecasterConfig,
    tcfg: &TrainConfig,
) -> Result<FitOutcome<F>, TrainError> {
    fcfg.validate()?;
    tcfg.validate()?;
    if feature_roles.len() != fcfg.n_features {
        return Err(TrainError::InvalidConfig(format!(
            "{} feature roles for a {}-feature model",
            feature_roles.len(),
            fcfg.n_features
        )));
    }
    if train_range.end > series.n_steps() {
        return Err(TrainError::InvalidConfig(format!(
            "train range ends at {} but the series has {} steps",
            train_range.end,
            series.n_steps()
        )));
    }

    let spec = WindowSpec {
        input_length: fcfg.input_length,
        output_length: fcfg.output_length,
        stride: 1,
    };
    let total = spec.total_length();
    let mut picks: Vec<(usize, usize)> = Vec::new();
    if train_range.end - train_range.start >= total {
        let last_start = train_range.end - total;
        for t in 0..series.n_turbines() {
            for start in train_range.start..=last_start {
                picks.push((t, start));
            }
        }
    }
    if picks.is_empty() {
        return Err(TrainError::NoTrainingData);
    }

    let names: Vec<String> = param_shapes(fcfg).into_iter().map(|(n, _)| n).collect();
    let mut tensors: Vec<Tensor<F>> =
        init.entries().iter().map(|(_, t)| t.clone()).collect();
    let mut adam = AdamState::zeros_like(&tensors);
    let mut dropout_rng =
        ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed.wrapping_add(DROPOUT_STREAM_SALT));

    let mut loss_history = Vec::with_capacity(tcfg.epochs);
    let mut skipped = 0usize;
    let mut step = 0usize;
    for epoch in 0..tcfg.epochs {
        let mut order = picks.clone();
        let mut shuffle_rng =
            ChaCha8Rng::seed_from_u64(tcfg.shuffle_seed.wrapping_add(epoch as u64));
        order.shuffle(&mut shuffle_rng);

        let mut epoch_loss = 0.0;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(tcfg.batch_size) {
            let batch = make_windows_at(series, &spec, feature_roles, chunk)?;
            let b = batch.len();
            let mask: Vec<bool> = if tcfg.mask_invalid_targets {
                batch.target_valid.clone()
            } else {
                vec![true; b * fcfg.output_length]
            };
            if !mask.iter().any(|&m| m) {
                skipped += 1;
                step += 1;
                continue;
            }

            let mut tape = Tape::new();
            let bound = BoundParams::from_vars(
                tensors.iter().map(|t| tape.leaf(t.clone(), true)).collect(),
            );
            let input = tape.constant(Tensor::from_f64_slice(
                &[b, fcfg.input_length, fcfg.n_features],
                &batch.inputs,
            ));
            let target = tape.constant(Tensor::from_f64_slice(
                &[b, fcfg.output_length],
                &batch.targets,
            ));
            let pred = {
                let mut mode = Mode::Train(&mut dropout_rng);
                forward_on_tape(&mut tape, fcfg, &bound, input, &mut mode)?
            };
            let loss = tape.rmse_loss(pred, target, &mask)?;
            let loss_value = tape.value(loss).item().as_f64();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss { step });
            }

            let grads = tape.backward(loss)?;
            let grad_tensors: Vec<Tensor<F>> = bound
                .vars()
                .iter()
                .zip(&tensors)
                .map(|(&var, param)| {
                    grads
                        .get(var)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(param.shape()))
                })
                .collect();
            adam_step(&mut tensors, &grad_tensors, &mut adam, tcfg)?;

            epoch_loss += loss_value;
            epoch_batches += 1;
            step += 1;
        }
        loss_history.push(if epoch_batches > 0 {
            epoch_loss / epoch_batches as f64
        } else {
            f64::NAN
        });
    }

    let entries = names.into_iter().zip(tensors).collect();
    Ok(FitOutcome {
        params: ForecasterParams::from_entries(fcfg, entries)?,
        adam,
        loss_history,
        skipped_batches: skipped,
    })
}

/// A trained model plus everything needed to resume or rerun it.
#[derive(Debug)]
pub struct Checkpoint<F: Element> {
    pub forecaster: ForecasterConfig,
    pub train: TrainConfig,
    pub params: ForecasterParams<F>,
    pub adam: AdamState<F>,
}

fn push_json<T: Serialize>(out: &mut Vec<u8>, value: &T) -> Result<(), TrainError> {
    let bytes = serde_json::to_vec(value)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("config serialization: {e}")))?;
    out.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&bytes);
    Ok(())
}

fn push_record<F: Element>(out: &mut Vec<u8>, name: &str, tensor: &Tensor<F>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in tensor.data() {
        x.write_le(out);
    }
}

/// Writes magic, version, element type, both configs as JSON, the Adam
/// step counter, then every tensor as a named record: parameters first in
/// canonical order, then `adam.m.*`, then `adam.v.*`.
pub fn save_checkpoint<F: Element>(
    path: &Path,
    ckpt: &Checkpoint<F>,
) -> Result<(), TrainError> {
    let n_params = ckpt.params.entries().len();
    if ckpt.adam.m.len() != n_params || ckpt.adam.v.len() != n_params {
        return Err(TrainError::ShapeMismatch(format!(
            "{} parameters but {}/{} adam moment tensors",
            n_params,
            ckpt.adam.m.len(),
            ckpt.adam.v.len()
        )));
    }

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(F::DTYPE.tag());
    push_json(&mut out, &ckpt.forecaster)?;
    push_json(&mut out, &ckpt.train)?;
    out.extend_from_slice(&ckpt.adam.t.to_le_bytes());
    out.extend_from_slice(&((n_params * 3) as u32).to_le_bytes());
    for (name, tensor) in ckpt.params.entries() {
        push_record(&mut out, name, tensor);
    }
    for ((name, _), m) in ckpt.params.entries().iter().zip(&ckpt.adam.m) {
        push_record(&mut out, &format!("adam.m.{name}"), m);
    }
    for ((name, _), v) in ckpt.params.entries().iter().zip(&ckpt.adam.v) {
        push_record(&mut out, &format!("adam.v.{name}"), v);
    }

    let mut file = fs::File::create(path)?;
    file.write_all(&out)?;
    Ok(())
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.buf.len() {
            return Err(TrainError::CorruptCheckpoint(format!(
                "unexpected end of file reading {what}"
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8, TrainError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32, TrainError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64, TrainError> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes([
            b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
        ]))
    }
}

fn read_record<F: Element>(
    r: &mut ByteReader,
) -> Result<(String, Tensor<F>), TrainError> {
    let name_len = r.u32("record name length")? as usize;
    let name = std::str::from_utf8(r.take(name_len, "record name")?)
        .map_err(|_| TrainError::CorruptCheckpoint("record name is not utf-8".into()))?
        .to_string();
    let rank = r.u32("record rank")? as usize;
    if rank == 0 || rank > 8 {
        return Err(TrainError::CorruptCheckpoint(format!(
            "record {name:?} has rank {rank}"
        )));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = r.u64("record dimension")? as usize;
        len = len.checked_mul(d).filter(|_| d > 0).ok_or_else(|| {
            TrainError::CorruptCheckpoint(format!("record {name:?} has a bad shape"))
        })?;
        shape.push(d);
    }
    let payload = r.take(len * F::DTYPE.byte_width(), "tensor payload")?;
    let data: Vec<F> = payload
        .chunks_exact(F::DTYPE.byte_width())
        .map(F::read_le)
        .collect();
    Ok((name, Tensor::from_vec(&shape, data)))
}

/// Element type stored in a checkpoint, without reading the tensors.
pub fn checkpoint_dtype(path: &Path) -> Result<Dtype, TrainError> {
    let buf = fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(TrainError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tag = r.u8("element type")?;
    Dtype::from_tag(tag)
        .ok_or_else(|| TrainError::CorruptCheckpoint(format!("unknown element tag {tag}")))
}

pub fn load_checkpoint<F: Element>(path: &Path) -> Result<Checkpoint<F>, TrainError> {
    let buf = fs::read(path)?;
    let mut r = ByteReader { buf: &buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(TrainError::CorruptCheckpoint("bad magic".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let tag = r.u8("element type")?;
    let dtype = Dtype::from_tag(tag)
        .ok_or_else(|| TrainError::CorruptCheckpoint(format!("unknown element tag {tag}")))?;
    if dtype != F::DTYPE {
        return Err(TrainError::DtypeMismatch {
            found: dtype,
            requested: F::DTYPE,
        });
    }

    let fcfg_len = r.u32("forecaster config length")? as usize;
    let forecaster: ForecasterConfig = serde_json::from_slice(r.take(fcfg_len, "forecaster config")?)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("forecaster config: {e}")))?;
    let tcfg_len = r.u32("train config length")? as usize;
    let train: TrainConfig = serde_json::from_slice(r.take(tcfg_len, "train config")?)
        .map_err(|e| TrainError::CorruptCheckpoint(format!("train config: {e}")))?;
    let t = r.u64("adam step counter")?;
    let n_records = r.u32("record count")? as usize;

    let expected = param_shapes(&forecaster);
    if n_records != expected.len() * 3 {
        return Err(TrainError::CorruptCheckpoint(format!(
            "{} records for {} parameters",
            n_records,
            expected.len()
        )));
    }

    let mut entries = Vec::with_capacity(expected.len());
    for _ in 0..expected.len() {
        entries.push(read_record::<F>(&mut r)?);
    }
    let params = ForecasterParams::from_entries(&forecaster, entries)
        .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;

    let read_moments = |prefix: &str, r: &mut ByteReader| {
        let mut out = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let (got_name, tensor) = read_record::<F>(r)?;
            let want = format!("{prefix}{name}");
            if got_name != want {
                return Err(TrainError::CorruptCheckpoint(format!(
                    "expected record {want:?}, found {got_name:?}"
                )));
            }
            if tensor.shape() != shape {
                return Err(TrainError::CorruptCheckpoint(format!(
                    "{got_name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    shape
                )));
            }
            out.push(tensor);
        }
        Ok(out)
    };
    let m = read_moments("adam.m.", &mut r)?;
    let v = read_moments("adam.v.", &mut r)?;

    if r.pos != buf.len() {
        return Err(TrainError::CorruptCheckpoint(format!(
            "{} trailing bytes",
            buf.len() - r.pos
        )));
    }

    Ok(Checkpoint {
        forecaster,
        train,
        params,
        adam: AdamState::from_parts(m, v, t),
    })
}
