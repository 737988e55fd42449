//! Finite-difference gradient checking and the registered-op checklist.

use super::{AdError, Tape, VarId};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of comparing a backward gradient against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_component: usize,
    pub value: f64,
    pub pass: bool,
}

/// Compare the backward gradient of `f` at `x` against central finite
/// differences with the given `step`. `f` builds a scalar-valued graph
/// from a single leaf.
pub fn grad_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, VarId) -> Result<VarId, AdError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |t: &Tensor| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(t.clone());
        let root = f(&mut tape, leaf)?;
        Ok(tape.value(root).item())
    };

    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    let value = tape.value(root).item();
    if !value.is_finite() {
        return Err(AdError::NonFinite {
            context: "grad_check objective",
        });
    }
    let grads = tape.backward(root)?;
    let analytic = grads.get_or_zeros(leaf, x.shape());

    let mut max_rel = 0.0;
    let mut worst = 0;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let plus = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let minus = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * step);
        let a = analytic.data()[i];
        if a.abs() < 1e-9 && numeric.abs() < 1e-9 {
            continue;
        }
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
        if rel > max_rel {
            max_rel = rel;
            worst = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err: max_rel,
        worst_component: worst,
        value,
        pass: max_rel < tol,
    })
}

/// One registered operation with a scalarized test harness.
pub struct OpCheck {
    pub name: &'static str,
    pub input_shape: Vec<usize>,
    /// Inputs must stay positive (log, sqrt).
    pub positive_input: bool,
    /// Non-smooth points to keep sampled inputs away from.
    pub kinks: &'static [f64],
    pub build: fn(&mut Tape, VarId) -> Result<VarId, AdError>,
}

impl OpCheck {
    /// Deterministic input for this op, nudged away from any kink so the
    /// central-difference stencil stays on one smooth branch.
    pub fn sample_input(&self, seed: u64) -> Tensor {
        let mut rng = Rng::derive(seed, &[0x6f70, self.name.len() as u64]);
        let n: usize = self.input_shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| {
                let mut v = if self.positive_input {
                    rng.uniform(0.3, 1.5)
                } else {
                    let mag = rng.uniform(0.3, 1.2);
                    if rng.chance(0.5) {
                        mag
                    } else {
                        -mag
                    }
                };
                for &k in self.kinks {
                    if (v - k).abs() < 5e-3 {
                        v += 1e-2;
                    }
                }
                v
            })
            .collect();
        Tensor::new(self.input_shape.clone(), data).expect("shape matches count")
    }
}

/// Deterministic weight vector so that reductions of normalized outputs
/// (softmax) have a non-trivial gradient.
fn probe_weights(tape: &mut Tape, n: usize) -> VarId {
    let w: Vec<f64> = (0..n).map(|i| 0.1 + 0.07 * (i as f64)).collect();
    tape.constant(Tensor::vector(&w))
}

/// Every differentiable op, each wrapped into a scalar objective.
///
/// Weighted reductions (rather than plain sums) keep the objective
/// sensitive to each input component so the check cannot silently pass
/// on a zero gradient.
pub fn registered_op_checks() -> Vec<OpCheck> {
    vec![
        OpCheck {
            name: "add",
            input_shape: vec![6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let c = probe_weights(t, 6);
                let y = t.add(x, c)?;
                let w = probe_weights(t, 6);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "sub",
            input_shape: vec![6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let c = probe_weights(t, 6);
                let y = t.sub(c, x)?;
                let w = probe_weights(t, 6);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "multiply",
            input_shape: vec![6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.mul(x, x)?;
                let w = probe_weights(t, 6);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "scale",
            input_shape: vec![5],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.scale(x, -2.5);
                let w = probe_weights(t, 5);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "matmul",
            input_shape: vec![3, 4],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let xt = t.transpose(x)?;
                let sq = t.matmul(x, xt)?; // 3x3
                let flat = t.reshape(sq, &[9])?;
                let w = probe_weights(t, 9);
                t.dot(flat, w)
            },
        },
        OpCheck {
            name: "transpose",
            input_shape: vec![2, 3],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.transpose(x)?;
                let flat = t.reshape(y, &[6])?;
                let w = probe_weights(t, 6);
                t.dot(flat, w)
            },
        },
        OpCheck {
            name: "relu",
            input_shape: vec![8],
            positive_input: false,
            kinks: &[0.0],
            build: |t, x| {
                let y = t.relu(x);
                let w = probe_weights(t, 8);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "tanh",
            input_shape: vec![6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.tanh(x);
                let w = probe_weights(t, 6);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "sqrt",
            input_shape: vec![5],
            positive_input: true,
            kinks: &[],
            build: |t, x| {
                let y = t.sqrt(x);
                let w = probe_weights(t, 5);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "log",
            input_shape: vec![5],
            positive_input: true,
            kinks: &[],
            build: |t, x| {
                let y = t.log(x);
                let w = probe_weights(t, 5);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "clamp",
            input_shape: vec![8],
            positive_input: false,
            kinks: &[-0.5, 0.5],
            build: |t, x| {
                let y = t.clamp(x, -0.5, 0.5);
                let w = probe_weights(t, 8);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "softmax",
            input_shape: vec![7],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.softmax(x);
                let w = probe_weights(t, 7);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "sum",
            input_shape: vec![2, 3],
            positive_input: false,
            kinks: &[],
            build: |t, x| Ok(t.sum(x)),
        },
        OpCheck {
            name: "mean",
            input_shape: vec![6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let m = t.mean(x);
                let sq = t.mul(m, m)?;
                Ok(t.sum(sq))
            },
        },
        OpCheck {
            name: "concat",
            input_shape: vec![4],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let c = probe_weights(t, 3);
                let y = t.concat(&[x, c, x])?;
                let w = probe_weights(t, 11);
                t.dot(y, w)
            },
        },
        OpCheck {
            name: "gather_cell",
            input_shape: vec![3, 3, 2],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let v = t.gather_cell(x, 1, 2)?;
                let w = probe_weights(t, 2);
                t.dot(v, w)
            },
        },
        OpCheck {
            name: "gather_flat",
            input_shape: vec![3, 3],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let a = t.gather_flat(x, 4)?;
                let b = t.gather_flat(x, 7)?;
                let p = t.mul(a, b)?;
                Ok(t.sum(p))
            },
        },
        OpCheck {
            name: "block_average_pool",
            input_shape: vec![4, 4, 2],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let p = t.block_average_pool(x, 2)?;
                let flat = t.reshape(p, &[8])?;
                let w = probe_weights(t, 8);
                t.dot(flat, w)
            },
        },
        OpCheck {
            name: "reshape",
            input_shape: vec![2, 6],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let y = t.reshape(x, &[3, 4])?;
                let flat = t.reshape(y, &[12])?;
                let sq = t.mul(flat, flat)?;
                let w = probe_weights(t, 12);
                t.dot(sq, w)
            },
        },
        OpCheck {
            // logdet(Q Q^T / d + eps I) as a function of the free factor Q
            name: "logdet_spd",
            input_shape: vec![3, 5],
            positive_input: false,
            kinks: &[],
            build: |t, x| {
                let xt = t.transpose(x)?;
                let qqt = t.matmul(x, xt)?;
                let omega_raw = t.scale(qqt, 1.0 / 5.0);
                let eps_eye = t.constant(Tensor::eye(3).scale(1e-6));
                let omega = t.add(omega_raw, eps_eye)?;
                t.logdet_spd(omega)
            },
        },
    ]
}
