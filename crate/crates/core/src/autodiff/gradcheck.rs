//! Finite-difference verification of backward rules.
//!
//! [`grad_check`] compares analytic gradients against central differences
//! for an arbitrary scalar-valued graph. [`run_primitive_suite`] applies it
//! to every primitive on the tape with randomized shapes and values, in
//! f64, where central differences resolve ~1e-10 absolute error and a
//! wrong rule shows up orders of magnitude above the pass threshold.
//! Draws that leave a true gradient coordinate barely nonzero are redrawn
//! before the comparison runs; see the conditioning note on the suite.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Element, Tape, Tensor, Var};

/// Largest relative disagreement between analytic and central-difference
/// gradients over every element of every input.
///
/// `build` must construct the same graph on every call; anything stochastic
/// inside (dropout) has to be re-seeded within the closure so repeated
/// evaluations see identical masks.
pub fn grad_check<F, B>(
    build: B,
    inputs: &[Tensor<F>],
    fd_eps: f64,
) -> Result<f64, AutodiffError>
where
    F: Element,
    B: Fn(&mut Tape<F>, &[Var]) -> Result<Var, AutodiffError>,
{
    let analytic = tape_gradients(&build, inputs)?;

    let eval = |mutated: usize, replacement: &Tensor<F>| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs
            .iter()
            .enumerate()
            .map(|(k, orig)| {
                let t = if k == mutated { replacement.clone() } else { orig.clone() };
                tape.leaf(t, false)
            })
            .collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss).item().as_f64())
    };

    let mut max_rel = 0.0f64;
    for (i, input) in inputs.iter().enumerate() {
        for j in 0..input.len() {
            let base = input.data()[j].as_f64();
            let fp = eval(i, &input.with_element(j, F::from_f64(base + fd_eps)))?;
            let fm = eval(i, &input.with_element(j, F::from_f64(base - fd_eps)))?;
            let numeric = (fp - fm) / (2.0 * fd_eps);
            let a = analytic[i][j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

/// Analytic gradients of `build`'s loss for every input, without the
/// finite-difference sweep.
fn tape_gradients<F, B>(build: &B, inputs: &[Tensor<F>]) -> Result<Vec<Vec<f64>>, AutodiffError>
where
    F: Element,
    B: Fn(&mut Tape<F>, &[Var]) -> Result<Var, AutodiffError>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = build(&mut tape, &vars)?;
    if !tape.value(loss).is_scalar() {
        return Err(AutodiffError::NotScalar(tape.value(loss).shape().to_vec()));
    }
    let grads = tape.backward(loss)?;
    Ok(vars
        .iter()
        .enumerate()
        .map(|(i, &v)| match grads.get(v) {
            Some(t) => t.to_f64_vec(),
            None => vec![0.0; inputs[i].len()],
        })
        .collect())
}

/// Result row for one primitive.
#[derive(Debug, Clone)]
pub struct CheckEntry {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub passed: bool,
}

/// Suite outcome across all primitives.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub threshold: f64,
    pub fd_eps: f64,
    pub entries: Vec<CheckEntry>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.entries.iter().all(|e| e.passed)
    }

    pub fn worst(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<18} {:>12}  result", "primitive", "max rel err")?;
        for e in &self.entries {
            writeln!(
                f,
                "{:<18} {:>12.3e}  {}",
                e.name,
                e.max_rel_err,
                if e.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(
            f,
            "worst {:.3e}, threshold {:.1e}: {}",
            self.worst(),
            self.threshold,
            if self.all_passed() { "pass" } else { "FAIL" }
        )
    }
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * (hi - lo) + lo).collect();
    Tensor::from_vec(shape, data)
}

/// Values bounded away from zero so an fd_eps-sized perturbation cannot
/// cross the relu kink.
fn rand_tensor_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n)
        .map(|_| {
            let mag = 0.1 + rng.gen::<f64>() * 1.9;
            if rng.gen::<bool>() {
                mag
            } else {
                -mag
            }
        })
        .collect();
    Tensor::from_vec(shape, data)
}

/// Scalarizes an arbitrary-shaped op output by scoring it against a fixed
/// random target. Unlike `sum_all` this keeps every output element's
/// gradient distinct (summing a softmax row would be identically one).
fn scalarize(
    tape: &mut Tape<f64>,
    out: Var,
    target: &Tensor<f64>,
) -> Result<Var, AutodiffError> {
    let t = tape.constant(target.clone());
    let mask = vec![true; target.len()];
    tape.rmse_loss(out, t, &mask)
}

const SUITE_SEED: u64 = 0x5eed_cafe;

/// Independent stream per primitive, so a redraw in one block cannot shift
/// the values any other block sees.
fn block_rng(block: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(SUITE_SEED ^ block.wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Smallest analytic gradient magnitude a draw may leave on any coordinate.
/// The central difference carries ~1e-10 of absolute rounding noise at
/// eps 1e-5 in f64, so coordinates above this floor resolve to ~1e-7
/// relative or better.
const GRAD_FLOOR: f64 = 1e-3;

type BuildFn = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, AutodiffError>>;

/// Runs one finite-difference comparison on a well-conditioned draw.
///
/// Gradient fields like softmax's change sign across coordinates, so a raw
/// draw can land a coordinate arbitrarily close to a zero crossing, where
/// the difference quotient resolves only rounding noise and the elementwise
/// relative error measures that noise instead of the backward rule. Draws
/// are redrawn until every nonzero analytic coordinate clears [`GRAD_FLOOR`].
/// Exactly-zero gradients are kept: they come from structural independence
/// (dropped elements, masked-out terms) where the difference quotient is
/// exactly zero as well. A broken backward rule stays detectable, being
/// wrong on accepted draws as much as on rejected ones.
fn filtered_check<D>(rng: &mut ChaCha8Rng, fd_eps: f64, draw: D) -> Result<f64, AutodiffError>
where
    D: Fn(&mut ChaCha8Rng) -> (Vec<Tensor<f64>>, BuildFn),
{
    for _ in 0..100_000 {
        let (inputs, build) = draw(rng);
        let grads = tape_gradients(&build, &inputs)?;
        if grads
            .iter()
            .flatten()
            .any(|&g| g != 0.0 && g.abs() < GRAD_FLOOR)
        {
            continue;
        }
        return grad_check(build, &inputs, fd_eps);
    }
    panic!("no draw cleared the gradient floor {GRAD_FLOOR}");
}

/// Runs `trials` randomized checks per primitive, each on freshly drawn
/// shapes and values, and reports the worst relative error for each.
pub fn run_primitive_suite(
    trials: usize,
    fd_eps: f64,
    threshold: f64,
) -> Result<CheckReport, AutodiffError> {
    let mut entries = Vec::new();
    let push = |entries: &mut Vec<CheckEntry>, name: &'static str, worst: f64| {
        entries.push(CheckEntry {
            name,
            max_rel_err: worst,
            passed: worst < threshold,
        });
    };

    {
        let mut rng = block_rng(0);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let m = rng.gen_range(2..=5);
                let k = rng.gen_range(2..=5);
                let n = rng.gen_range(2..=4);
                let a = rand_tensor(rng, &[m, k], -2.0, 2.0);
                let b = rand_tensor(rng, &[k, n], -2.0, 2.0);
                let target = rand_tensor(rng, &[m, n], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.matmul(vars[0], vars[1])?;
                    scalarize(tape, y, &target)
                };
                (vec![a, b], Box::new(build) as BuildFn)
            })?);

            // leading-dimension broadcast over a shared right factor
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let b = rng.gen_range(2..=3);
                let m = rng.gen_range(2..=4);
                let k = rng.gen_range(2..=5);
                let n = rng.gen_range(2..=4);
                let a3 = rand_tensor(rng, &[b, m, k], -2.0, 2.0);
                let b2 = rand_tensor(rng, &[k, n], -2.0, 2.0);
                let target = rand_tensor(rng, &[b, m, n], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.matmul(vars[0], vars[1])?;
                    scalarize(tape, y, &target)
                };
                (vec![a3, b2], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "matmul", worst);
    }

    {
        let mut rng = block_rng(1);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let b = rng.gen_range(2..=3);
                let m = rng.gen_range(2..=4);
                let k = rng.gen_range(2..=5);
                let n = rng.gen_range(2..=4);
                let lhs = rand_tensor(rng, &[b, m, k], -2.0, 2.0);
                let rhs = rand_tensor(rng, &[b, k, n], -2.0, 2.0);
                let target = rand_tensor(rng, &[b, m, n], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.bmm(vars[0], vars[1])?;
                    scalarize(tape, y, &target)
                };
                (vec![lhs, rhs], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "bmm", worst);
    }

    {
        let mut rng = block_rng(2);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let b = rng.gen_range(2..=3);
                let s = rng.gen_range(2..=4);
                let k = rng.gen_range(2..=5);
                let o = rng.gen_range(2..=4);
                let x = rand_tensor(rng, &[b, s, k], -2.0, 2.0);
                let w = rand_tensor(rng, &[k, o], -2.0, 2.0);
                let bias = rand_tensor(rng, &[o], -1.0, 1.0);
                let target = rand_tensor(rng, &[b, s, o], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.affine(vars[0], vars[1], vars[2])?;
                    scalarize(tape, y, &target)
                };
                (vec![x, w, bias], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "affine", worst);
    }

    {
        let mut rng = block_rng(3);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let a = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let b = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.add(vars[0], vars[1])?;
                    scalarize(tape, y, &target)
                };
                (vec![a, b], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "add", worst);
    }

    {
        let mut rng = block_rng(4);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let x = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], -1.0, 1.0);
                let factor = rng.gen::<f64>() * 3.0 - 1.5;
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.scale(vars[0], factor);
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "scale", worst);
    }

    {
        let mut rng = block_rng(5);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let x = rand_tensor_off_zero(rng, &[r, c]);
                let target = rand_tensor(rng, &[r, c], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.relu(vars[0]);
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "relu", worst);
    }

    {
        let mut rng = block_rng(6);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let x = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.tanh(vars[0]);
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "tanh", worst);
    }

    {
        let mut rng = block_rng(7);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let x = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[c, r], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.reshape(vars[0], &[c, r])?;
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "reshape", worst);
    }

    {
        let mut rng = block_rng(8);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let d0 = rng.gen_range(2..=4);
                let d1 = rng.gen_range(2..=4);
                let d2 = rng.gen_range(2..=4);
                let x = rand_tensor(rng, &[d0, d1, d2], -2.0, 2.0);
                let target = rand_tensor(rng, &[d2, d0, d1], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.permute(vars[0], &[2, 0, 1])?;
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "permute", worst);
    }

    {
        let mut rng = block_rng(9);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=4);
                let c = rng.gen_range(2..=6);
                let x = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], 0.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.softmax_lastaxis(vars[0])?;
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "softmax_lastaxis", worst);
    }

    {
        let mut rng = block_rng(10);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let b = rng.gen_range(2..=4);
                let n = rng.gen_range(3..=6);
                let x = rand_tensor(rng, &[b, n], -2.0, 2.0);
                let gamma = rand_tensor(rng, &[n], 0.5, 1.5);
                let beta = rand_tensor(rng, &[n], -0.5, 0.5);
                let target = rand_tensor(rng, &[b, n], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    let y = tape.layer_norm(vars[0], vars[1], vars[2], 1e-5)?;
                    scalarize(tape, y, &target)
                };
                (vec![x, gamma, beta], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "layer_norm", worst);
    }

    {
        let mut rng = block_rng(11);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=5);
                let c = rng.gen_range(2..=6);
                let seed = rng.gen::<u64>();
                let x = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], -1.0, 1.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    // re-seeded per evaluation: identical mask every call
                    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
                    let y = tape.dropout(vars[0], 0.4, true, &mut drop_rng)?;
                    scalarize(tape, y, &target)
                };
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "dropout", worst);
    }

    {
        let mut rng = block_rng(12);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let r = rng.gen_range(2..=4);
                let c = rng.gen_range(2..=6);
                let pred = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let target = rand_tensor(rng, &[r, c], -2.0, 2.0);
                let mut mask: Vec<bool> = (0..r * c).map(|_| rng.gen::<f64>() < 0.7).collect();
                mask[0] = true;
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| {
                    tape.rmse_loss(vars[0], vars[1], &mask)
                };
                (vec![pred, target], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "rmse_loss", worst);
    }

    {
        let mut rng = block_rng(13);
        let mut worst = 0.0f64;
        for _ in 0..trials {
            worst = worst.max(filtered_check(&mut rng, fd_eps, |rng| {
                let n = rng.gen_range(3..=8);
                let x = rand_tensor(rng, &[n], -2.0, 2.0);
                let build = move |tape: &mut Tape<f64>, vars: &[Var]| Ok(tape.sum_all(vars[0]));
                (vec![x], Box::new(build) as BuildFn)
            })?);
        }
        push(&mut entries, "sum_all", worst);
    }

    Ok(CheckReport {
        threshold,
        fd_eps,
        entries,
    })
}
