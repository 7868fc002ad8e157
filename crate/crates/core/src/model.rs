//! The forecaster: a per-step token embedding (no positional encoding),
//! one post-norm transformer encoder layer, and a three-layer dense head
//! over the flattened [time x hidden] encoding that emits all 288
//! predicted power values at once, in raw kW.
//!
//! Forward passes are expressed on an autodiff [`Tape`] so training and
//! inference share one code path; inference simply never calls backward.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Element, Tape, Tensor, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid forecaster config: {0}")]
    InvalidConfig(String),
    #[error("input shape {actual:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("forward input contains a non-finite value")]
    NonFiniteInput,
    #[error("parameter mismatch: {0}")]
    ParamMismatch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply<F: Element>(self, tape: &mut Tape<F>, x: Var) -> Var {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
        }
    }
}

/// Architecture hyper-parameters. The defaults are the published
/// configuration: 288 steps in and out, 32-wide single-head attention,
/// 32-wide feed-forward, dense head 512 -> 1024 -> 288 with 0.25 dropout
/// on the first two dense layers and none inside the encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForecasterConfig {
    pub input_length: usize,
    pub output_length: usize,
    pub n_features: usize,
    pub n_encoder_layers: usize,
    pub attn_hidden: usize,
    pub n_heads: usize,
    pub attn_dropout: f64,
    pub ffn_hidden: usize,
    pub ffn_dropout: f64,
    pub dense1: usize,
    pub dense1_dropout: f64,
    pub dense2: usize,
    pub dense2_dropout: f64,
    pub dense3: usize,
    pub layer_norm_eps: f64,
    pub activation: Activation,
}

impl Default for ForecasterConfig {
    fn default() -> Self {
        Self {
            input_length: 288,
            output_length: 288,
            n_features: 2,
            n_encoder_layers: 1,
            attn_hidden: 32,
            n_heads: 1,
            attn_dropout: 0.0,
            ffn_hidden: 32,
            ffn_dropout: 0.0,
            dense1: 512,
            dense1_dropout: 0.25,
            dense2: 1024,
            dense2_dropout: 0.25,
            dense3: 288,
            layer_norm_eps: 1e-5,
            activation: Activation::Relu,
        }
    }
}

impl ForecasterConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("input_length", self.input_length),
            ("output_length", self.output_length),
            ("n_features", self.n_features),
            ("n_encoder_layers", self.n_encoder_layers),
            ("attn_hidden", self.attn_hidden),
            ("n_heads", self.n_heads),
            ("ffn_hidden", self.ffn_hidden),
            ("dense1", self.dense1),
            ("dense2", self.dense2),
            ("dense3", self.dense3),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(ModelError::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.attn_hidden % self.n_heads != 0 {
            return Err(ModelError::InvalidConfig(format!(
                "attn_hidden {} is not divisible by n_heads {}",
                self.attn_hidden, self.n_heads
            )));
        }
        if self.dense3 != self.output_length {
            return Err(ModelError::InvalidConfig(format!(
                "dense3 {} must equal output_length {}",
                self.dense3, self.output_length
            )));
        }
        for (name, rate) in [
            ("attn_dropout", self.attn_dropout),
            ("ffn_dropout", self.ffn_dropout),
            ("dense1_dropout", self.dense1_dropout),
            ("dense2_dropout", self.dense2_dropout),
        ] {
            if !(0.0..1.0).contains(&rate) {
                return Err(ModelError::InvalidConfig(format!(
                    "{name} must lie in [0, 1), got {rate}"
                )));
            }
        }
        if self.layer_norm_eps <= 0.0 {
            return Err(ModelError::InvalidConfig(
                "layer_norm_eps must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Canonical (name, shape) listing of every parameter. This order is the
/// single source of truth: initialization, binding, checkpoints and the
/// optimizer all walk it. Encoder layers beyond the first are prefixed
/// `enc1.`, `enc2.`, ...
pub fn param_shapes(cfg: &ForecasterConfig) -> Vec<(String, Vec<usize>)> {
    let h = cfg.attn_hidden;
    let mut out: Vec<(String, Vec<usize>)> = vec![
        ("embed.w".into(), vec![cfg.n_features, h]),
        ("embed.b".into(), vec![h]),
    ];
    for layer in 0..cfg.n_encoder_layers {
        let prefix = if layer == 0 {
            String::new()
        } else {
            format!("enc{layer}.")
        };
        let block: [(&str, Vec<usize>); 16] = [
            ("attn.wq", vec![h, h]),
            ("attn.bq", vec![h]),
            ("attn.wk", vec![h, h]),
            ("attn.bk", vec![h]),
            ("attn.wv", vec![h, h]),
            ("attn.bv", vec![h]),
            ("attn.wo", vec![h, h]),
            ("attn.bo", vec![h]),
            ("ln1.gamma", vec![h]),
            ("ln1.beta", vec![h]),
            ("ffn.w1", vec![h, cfg.ffn_hidden]),
            ("ffn.b1", vec![cfg.ffn_hidden]),
            ("ffn.w2", vec![cfg.ffn_hidden, h]),
            ("ffn.b2", vec![h]),
            ("ln2.gamma", vec![h]),
            ("ln2.beta", vec![h]),
        ];
        out.extend(block.map(|(n, s)| (format!("{prefix}{n}"), s)));
    }
    out.extend([
        ("head.w1".into(), vec![cfg.input_length * h, cfg.dense1]),
        ("head.b1".into(), vec![cfg.dense1]),
        ("head.w2".into(), vec![cfg.dense1, cfg.dense2]),
        ("head.b2".into(), vec![cfg.dense2]),
        ("head.w3".into(), vec![cfg.dense2, cfg.dense3]),
        ("head.b3".into(), vec![cfg.dense3]),
    ]);
    out
}

/// Total trainable element count.
pub fn param_count(cfg: &ForecasterConfig) -> usize {
    param_shapes(cfg)
        .iter()
        .map(|(_, s)| s.iter().product::<usize>())
        .sum()
}

/// Named parameter tensors in canonical order.
#[derive(Debug, Clone)]
pub struct ForecasterParams<F: Element> {
    entries: Vec<(String, Tensor<F>)>,
}

impl<F: Element> ForecasterParams<F> {
    pub fn entries(&self) -> &[(String, Tensor<F>)] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<F>> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
    }

    /// Replaces one tensor; the new value must keep the declared shape.
    pub fn set(&mut self, name: &str, tensor: Tensor<F>) -> Result<(), ModelError> {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| ModelError::ParamMismatch(format!("no parameter named {name:?}")))?;
        if entry.1.shape() != tensor.shape() {
            return Err(ModelError::ParamMismatch(format!(
                "{name:?} has shape {:?}, replacement has {:?}",
                entry.1.shape(),
                tensor.shape()
            )));
        }
        entry.1 = tensor;
        Ok(())
    }

    /// Validates entries against the canonical listing for `cfg`: same
    /// names, same order, same shapes.
    pub fn from_entries(
        cfg: &ForecasterConfig,
        entries: Vec<(String, Tensor<F>)>,
    ) -> Result<Self, ModelError> {
        let expected = param_shapes(cfg);
        if entries.len() != expected.len() {
            return Err(ModelError::ParamMismatch(format!(
                "expected {} tensors, got {}",
                expected.len(),
                entries.len()
            )));
        }
        for ((name, tensor), (want_name, want_shape)) in entries.iter().zip(&expected) {
            if name != want_name {
                return Err(ModelError::ParamMismatch(format!(
                    "expected tensor {want_name:?}, found {name:?}"
                )));
            }
            if tensor.shape() != want_shape {
                return Err(ModelError::ParamMismatch(format!(
                    "{name:?} has shape {:?}, expected {:?}",
                    tensor.shape(),
                    want_shape
                )));
            }
        }
        Ok(Self { entries })
    }
}

/// Glorot-uniform weights (`±sqrt(6/(fan_in + fan_out))`), zero biases,
/// unit layer-norm gains. Deterministic per seed: tensors are sampled in
/// canonical order from one ChaCha stream.
pub fn init_params<F: Element>(cfg: &ForecasterConfig, seed: u64) -> ForecasterParams<F> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries = param_shapes(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let tensor = if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                let data: Vec<F> = (0..n)
                    .map(|_| F::from_f64((rng.gen::<f64>() * 2.0 - 1.0) * bound))
                    .collect();
                Tensor::from_vec(&shape, data)
            } else if name.ends_with("gamma") {
                Tensor::ones(&shape)
            } else {
                Tensor::zeros(&shape)
            };
            (name, tensor)
        })
        .collect();
    ForecasterParams { entries }
}

/// Tape handles for every parameter, in canonical order.
pub struct BoundParams {
    vars: Vec<Var>,
}

impl BoundParams {
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Registers every parameter tensor on the tape. Training binds with
/// `requires_grad` so backward produces a gradient per parameter;
/// inference binds without.
pub fn bind_params<F: Element>(
    tape: &mut Tape<F>,
    params: &ForecasterParams<F>,
    requires_grad: bool,
) -> BoundParams {
    BoundParams {
        vars: params
            .entries
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect(),
    }
}

/// Whether dropout draws masks (training) or is skipped (eval).
pub enum Mode<'a> {
    Eval,
    Train(&'a mut ChaCha8Rng),
}

fn maybe_dropout<F: Element>(
    tape: &mut Tape<F>,
    x: Var,
    rate: f64,
    mode: &mut Mode,
) -> Result<Var, ModelError> {
    match mode {
        Mode::Train(rng) if rate > 0.0 => Ok(tape.dropout(x, rate, true, &mut **rng)?),
        _ => Ok(x),
    }
}

/// Sequential reader of bound parameter handles; consumption order must
/// mirror [`param_shapes`].
struct ParamCursor<'a> {
    vars: &'a [Var],
    next: usize,
}

impl<'a> ParamCursor<'a> {
    fn take(&mut self) -> Var {
        let v = self.vars[self.next];
        self.next += 1;
        v
    }
}

/// Stages 1-2: embedding plus the encoder stack. Input `[b, T, n_features]`,
/// output `[b, T, attn_hidden]`. Time positions interact only through
/// attention, which is permutation-equivariant: no positional encoding.
fn encode_on_tape<F: Element>(
    tape: &mut Tape<F>,
    cfg: &ForecasterConfig,
    cursor: &mut ParamCursor,
    input: Var,
    mode: &mut Mode,
) -> Result<Var, ModelError> {
    let shape = tape.value(input).shape().to_vec();
    let (b, t) = (shape[0], shape[1]);
    let h = cfg.attn_hidden;
    let nh = cfg.n_heads;
    let dh = h / nh;

    let (embed_w, embed_b) = (cursor.take(), cursor.take());
    let mut x = tape.affine(input, embed_w, embed_b)?;

    for _ in 0..cfg.n_encoder_layers {
        let (wq, bq) = (cursor.take(), cursor.take());
        let (wk, bk) = (cursor.take(), cursor.take());
        let (wv, bv) = (cursor.take(), cursor.take());
        let (wo, bo) = (cursor.take(), cursor.take());
        let (ln1_g, ln1_b) = (cursor.take(), cursor.take());
        let (ffn_w1, ffn_b1) = (cursor.take(), cursor.take());
        let (ffn_w2, ffn_b2) = (cursor.take(), cursor.take());
        let (ln2_g, ln2_b) = (cursor.take(), cursor.take());

        // scaled dot-product attention through the general multi-head
        // path; n_heads=1 is just the degenerate reshape
        let q = tape.affine(x, wq, bq)?;
        let k = tape.affine(x, wk, bk)?;
        let v = tape.affine(x, wv, bv)?;
        let split = |tape: &mut Tape<F>, y: Var| -> Result<Var, ModelError> {
            let y4 = tape.reshape(y, &[b, t, nh, dh])?;
            Ok(tape.permute(y4, &[0, 2, 1, 3])?) // [b, nh, t, dh]
        };
        let qh = split(tape, q)?;
        let kh = split(tape, k)?;
        let vh = split(tape, v)?;
        let kt = tape.permute(kh, &[0, 1, 3, 2])?; // [b, nh, dh, t]
        let scores = tape.bmm(qh, kt)?; // [b, nh, t, t]
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let weights = tape.softmax_lastaxis(scaled)?;
        let ctx = tape.bmm(weights, vh)?; // [b, nh, t, dh]
        let merged4 = tape.permute(ctx, &[0, 2, 1, 3])?;
        let merged = tape.reshape(merged4, &[b, t, h])?;
        let projected = tape.affine(merged, wo, bo)?;
        let attn_out = maybe_dropout(tape, projected, cfg.attn_dropout, mode)?;

        // post-norm residuals
        let res1 = tape.add(x, attn_out)?;
        let normed1 = tape.layer_norm(res1, ln1_g, ln1_b, cfg.layer_norm_eps)?;

        let f1 = tape.affine(normed1, ffn_w1, ffn_b1)?;
        let fa = cfg.activation.apply(tape, f1);
        let f2 = tape.affine(fa, ffn_w2, ffn_b2)?;
        let ffn_out = maybe_dropout(tape, f2, cfg.ffn_dropout, mode)?;
        let res2 = tape.add(normed1, ffn_out)?;
        x = tape.layer_norm(res2, ln2_g, ln2_b, cfg.layer_norm_eps)?;
    }
    Ok(x)
}

/// Full forward pass on an existing tape. `input` must be a recorded
/// `[batch, input_length, n_features]` tensor of finite values; the result
/// is `[batch, output_length]` raw-kW predictions.
pub fn forward_on_tape<F: Element>(
    tape: &mut Tape<F>,
    cfg: &ForecasterConfig,
    bound: &BoundParams,
    input: Var,
    mode: &mut Mode,
) -> Result<Var, ModelError> {
    cfg.validate()?;
    let shape = tape.value(input).shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.input_length || shape[2] != cfg.n_features {
        return Err(ModelError::ShapeMismatch {
            expected: vec![shape.first().copied().unwrap_or(1), cfg.input_length, cfg.n_features],
            actual: shape,
        });
    }
    if !tape.value(input).iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let expected_vars = param_shapes(cfg).len();
    if bound.vars.len() != expected_vars {
        return Err(ModelError::ParamMismatch(format!(
            "bound {} parameter tensors, config needs {}",
            bound.vars.len(),
            expected_vars
        )));
    }
    let b = shape[0];
    let mut cursor = ParamCursor {
        vars: &bound.vars,
        next: 0,
    };

    let encoded = encode_on_tape(tape, cfg, &mut cursor, input, mode)?;
    let flat = tape.reshape(encoded, &[b, cfg.input_length * cfg.attn_hidden])?;

    let (w1, b1) = (cursor.take(), cursor.take());
    let (w2, b2) = (cursor.take(), cursor.take());
    let (w3, b3) = (cursor.take(), cursor.take());
    let d1 = tape.affine(flat, w1, b1)?;
    let a1 = cfg.activation.apply(tape, d1);
    let r1 = maybe_dropout(tape, a1, cfg.dense1_dropout, mode)?;
    let d2 = tape.affine(r1, w2, b2)?;
    let a2 = cfg.activation.apply(tape, d2);
    let r2 = maybe_dropout(tape, a2, cfg.dense2_dropout, mode)?;
    Ok(tape.affine(r2, w3, b3)?)
}

/// One-shot forward pass: builds a private tape and returns the
/// predictions `[batch, output_length]`.
pub fn forward<F: Element>(
    cfg: &ForecasterConfig,
    params: &ForecasterParams<F>,
    inputs: &Tensor<F>,
    mode: &mut Mode,
) -> Result<Tensor<F>, ModelError> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let input = tape.constant(inputs.clone());
    let out = forward_on_tape(&mut tape, cfg, &bound, input, mode)?;
    Ok(tape.value(out).clone())
}

/// Embedding + encoder output `[batch, input_length, attn_hidden]` in eval
/// mode; exposed so the no-positional-encoding property (permutation
/// equivariance over time) is directly observable.
pub fn encode<F: Element>(
    cfg: &ForecasterConfig,
    params: &ForecasterParams<F>,
    inputs: &Tensor<F>,
) -> Result<Tensor<F>, ModelError> {
    cfg.validate()?;
    let shape = inputs.shape();
    if shape.len() != 3 || shape[1] != cfg.input_length || shape[2] != cfg.n_features {
        return Err(ModelError::ShapeMismatch {
            expected: vec![shape.first().copied().unwrap_or(1), cfg.input_length, cfg.n_features],
            actual: shape.to_vec(),
        });
    }
    if !inputs.iter().all(|v| v.is_finite()) {
        return Err(ModelError::NonFiniteInput);
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params, false);
    let input = tape.constant(inputs.clone());
    let mut cursor = ParamCursor {
        vars: &bound.vars,
        next: 0,
    };
    let out = encode_on_tape(&mut tape, cfg, &mut cursor, input, &mut Mode::Eval)?;
    Ok(tape.value(out).clone())
}

/// Checks the analytic gradient of every parameter (and the input) of a
/// forecaster against central finite differences in f64 and returns the
/// worst relative error. Dropout is active and replays identically across
/// probes. Meant for reduced configs; full-size models are prohibitively
/// slow to probe parameter by parameter.
///
/// Rank-1 parameters are jittered away from their zero init: a dropout- or
/// relu-dead row otherwise leaves a later relu input exactly at b = 0, the
/// one point where finite differences and the subgradient legitimately
/// disagree.
pub fn full_model_grad_check(cfg: &ForecasterConfig, seed: u64) -> Result<f64, ModelError> {
    let mut params = init_params::<f64>(cfg, seed);
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb1a5);
    let names: Vec<String> = params.entries().iter().map(|(n, _)| n.clone()).collect();
    for name in names {
        let t = params.get(&name).expect("just listed");
        if t.rank() == 1 {
            let data: Vec<f64> = t
                .iter()
                .map(|&v| v + jitter_rng.gen::<f64>() * 0.1 - 0.05)
                .collect();
            let shape = t.shape().to_vec();
            params.set(&name, Tensor::from_vec(&shape, data))?;
        }
    }
    let batch = 2;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let input_data: Vec<f64> = (0..batch * cfg.input_length * cfg.n_features)
        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
        .collect();
    let input = Tensor::from_vec(&[batch, cfg.input_length, cfg.n_features], input_data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 2);
    let target_data: Vec<f64> = (0..batch * cfg.output_length)
        .map(|_| rng.gen::<f64>() * 2.0 - 1.0)
        .collect();
    let target = Tensor::from_vec(&[batch, cfg.output_length], target_data);
    let mask: Vec<bool> = (0..batch * cfg.output_length).map(|i| i % 5 != 0).collect();
    let drop_seed = seed + 3;

    let mut tensors: Vec<Tensor<f64>> = vec![input];
    tensors.extend(params.entries().iter().map(|(_, t)| t.clone()));

    crate::autodiff::grad_check(
        move |tape, vars| {
            let bound = BoundParams::from_vars(vars[1..].to_vec());
            let mut drop_rng = ChaCha8Rng::seed_from_u64(drop_seed);
            let mut mode = Mode::Train(&mut drop_rng);
            let pred = forward_on_tape(tape, cfg, &bound, vars[0], &mut mode).map_err(|e| {
                match e {
                    ModelError::Autodiff(inner) => inner,
                    other => panic!("unexpected model error in grad check: {other}"),
                }
            })?;
            let t = tape.constant(target.clone());
            tape.rmse_loss(pred, t, &mask)
        },
        &tensors,
        // larger step than the primitive suite: some parameters here have
        // true gradients near ULP(loss)/(2*eps), where the central
        // difference quantizes to whole ULPs; the noise term scales as
        // 1/eps, so a coarser step pushes it below the pass threshold
        1e-4,
    )
    .map_err(ModelError::Autodiff)
}
