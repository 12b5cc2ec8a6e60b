//! Central finite-difference verification of reverse-mode gradients.

use serde::Serialize;

use super::graph::{Graph, OpKind, Var};
use super::params::{ParamId, ParamStore};
use super::rng::RngState;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Outcome of a gradient check.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub pass: bool,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value<T: Scalar>(g: &Graph<T>, out: Var) -> Result<f64> {
    let v = g.value(out);
    if v.len() != 1 {
        return Err(Error::invalid(
            "gradient_check",
            format!("function output must be scalar, got shape {:?}", v.shape()),
        ));
    }
    let s = v.data()[0].as_f64();
    if !s.is_finite() {
        return Err(Error::NonFinite { op: "gradient_check" });
    }
    Ok(s)
}

fn validate_step(step: f64) -> Result<()> {
    if !(1e-6..=1e-4).contains(&step) {
        return Err(Error::invalid(
            "gradient_check",
            format!("step {step} outside [1e-6, 1e-4]"),
        ));
    }
    Ok(())
}

struct Worst {
    err: f64,
    index: usize,
    analytic: f64,
    numeric: f64,
}

impl Default for Worst {
    fn default() -> Self {
        Self {
            err: -1.0,
            index: 0,
            analytic: 0.0,
            numeric: 0.0,
        }
    }
}

impl Worst {
    fn observe(&mut self, index: usize, analytic: f64, numeric: f64) {
        let err = relative_error(analytic, numeric);
        if err > self.err {
            *self = Worst {
                err,
                index,
                analytic,
                numeric,
            };
        }
    }

    fn report(self, tol: f64) -> GradReport {
        let err = self.err.max(0.0);
        GradReport {
            max_rel_err: err,
            worst_index: self.index,
            analytic: self.analytic,
            numeric: self.numeric,
            pass: err <= tol,
        }
    }
}

/// Checks the reverse-mode gradient of the scalar function `f` at `x`
/// against central differences `(f(x+h) - f(x-h)) / 2h`.
pub fn gradient_check<T, F>(f: F, x: &Tensor<T>, step: f64, tol: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    validate_step(step)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let out = f(&mut g, xv)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));

    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(probe)?;
        let out = f(&mut g, v)?;
        scalar_value(&g, out)
    };
    let mut worst = Worst::default();
    for i in 0..x.len() {
        let numeric = central_difference(x, i, step, &eval)?;
        worst.observe(i, analytic.data()[i].as_f64(), numeric);
    }
    Ok(worst.report(tol))
}

fn central_difference<T: Scalar>(
    x: &Tensor<T>,
    i: usize,
    step: f64,
    eval: &impl Fn(Tensor<T>) -> Result<f64>,
) -> Result<f64> {
    let h = T::lit(step);
    let mut plus = x.clone();
    plus.data_mut()[i] += h;
    let mut minus = x.clone();
    minus.data_mut()[i] -= h;
    // Use the actually representable step.
    let width = (plus.data()[i] - minus.data()[i]).as_f64();
    Ok((eval(plus)? - eval(minus)?) / width)
}

/// Per-parameter result of [`check_parameters`].
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheck {
    pub name: String,
    pub report: GradReport,
}

/// Gradient check over stored parameters.
#[derive(Clone, Debug, Serialize)]
pub struct ParamCheckReport {
    pub params: Vec<ParamCheck>,
    pub max_rel_err: f64,
    /// Name of the parameter holding the worst coordinate.
    pub worst_param: String,
    pub pass: bool,
}

/// Checks every coordinate of the listed parameters. `f` builds the scalar
/// objective from a parameter store into a fresh graph.
pub fn check_parameters<T, F>(
    store: &ParamStore<T>,
    ids: &[ParamId],
    step: f64,
    tol: f64,
    f: F,
) -> Result<ParamCheckReport>
where
    T: Scalar,
    F: Fn(&ParamStore<T>, &mut Graph<T>) -> Result<Var>,
{
    validate_step(step)?;
    let mut probe = store.clone();
    for &id in ids {
        probe.set_trainable(id, true);
    }
    let mut g = Graph::new();
    let out = f(&probe, &mut g)?;
    scalar_value(&g, out)?;
    let grads = g.backward(out)?;

    let mut params = Vec::with_capacity(ids.len());
    for &id in ids {
        let shape = probe.tensor(id).shape().to_vec();
        let analytic = grads.param(id, &shape);
        let original = probe.tensor(id).clone();
        let mut worst = Worst::default();
        for i in 0..original.len() {
            let eval = |t: Tensor<T>| -> Result<f64> {
                let mut s = probe.clone();
                s.get_mut(id).tensor = t;
                let mut g = Graph::new();
                let out = f(&s, &mut g)?;
                scalar_value(&g, out)
            };
            let numeric = central_difference(&original, i, step, &eval)?;
            worst.observe(i, analytic.data()[i].as_f64(), numeric);
        }
        params.push(ParamCheck {
            name: probe.get(id).name.clone(),
            report: worst.report(tol),
        });
    }
    let (max_rel_err, worst_param) =
        params
            .iter()
            .map(|p| (p.report.max_rel_err, p.name.clone()))
            .fold((0.0, String::new()), |acc, x| {
                if x.0 > acc.0 || acc.1.is_empty() {
                    x
                } else {
                    acc
                }
            });
    Ok(ParamCheckReport {
        pass: params.iter().all(|p| p.report.pass),
        params,
        max_rel_err,
        worst_param,
    })
}

/// Checks the vector-Jacobian product of `f` at `x` for the cotangent `r`
/// against central differences of `⟨r, f(x)⟩`. The contraction happens
/// outside the graph, so only the operations inside `f` are exercised.
pub fn vjp_check<T, F>(f: F, x: &Tensor<T>, r: &Tensor<T>, step: f64, tol: f64) -> Result<GradReport>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    validate_step(step)?;
    let mut g = Graph::new();
    let xv = g.input(x.clone())?;
    let out = f(&mut g, xv)?;
    let grads = g.backward_with(out, r.clone())?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
    let eval = |probe: Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(probe)?;
        let out = f(&mut g, v)?;
        Ok(g.value(out)
            .data()
            .iter()
            .zip(r.data())
            .map(|(a, b)| a.as_f64() * b.as_f64())
            .sum())
    };
    let mut worst = Worst::default();
    for i in 0..x.len() {
        let numeric = central_difference(x, i, step, &eval)?;
        worst.observe(i, analytic.data()[i].as_f64(), numeric);
    }
    Ok(worst.report(tol))
}

fn random<T: Scalar>(rng: &mut RngState, shape: &[usize]) -> Tensor<T> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal::<T>()).collect()).expect("shape matches data")
}

/// Isolated check of the backward rule of one operation kind, optionally
/// with a deliberately broken rule for `fault`.
pub fn op_self_test<T: Scalar>(kind: OpKind, fault: Option<OpKind>, seed: u64) -> Result<GradReport> {
    let mut rng = RngState::new(seed).derive(kind.name());
    let (rows, cols) = (3, 4);
    let x: Tensor<T> = random(&mut rng, &[rows, cols]);
    let other: Tensor<T> = random(&mut rng, &[rows, cols]);
    let right: Tensor<T> = random(&mut rng, &[cols, 2]);
    let gain: Tensor<T> = random(&mut rng, &[cols]);
    let bias: Tensor<T> = random(&mut rng, &[cols]);
    let f = move |g: &mut Graph<T>, v: Var| -> Result<Var> {
        if let Some(k) = fault {
            g.inject_fault(k);
        }
        match kind {
            OpKind::Leaf => Ok(v),
            OpKind::Add => {
                let c = g.constant(other.clone())?;
                g.add(v, c)
            }
            OpKind::Sub => {
                let c = g.constant(other.clone())?;
                g.sub(c, v)
            }
            OpKind::Mul => {
                let c = g.constant(other.clone())?;
                g.mul(v, c)
            }
            OpKind::Scale => g.scale(v, T::lit(-1.5)),
            OpKind::AddScalar => g.add_scalar(v, T::lit(0.5)),
            OpKind::MatMul => {
                let c = g.constant(right.clone())?;
                g.matmul(v, c)
            }
            OpKind::TransposeLast => g.transpose_last(v),
            OpKind::Permute => g.permute(v, &[1, 0]),
            OpKind::Reshape => g.reshape(v, &[cols, rows]),
            OpKind::Sigmoid => g.sigmoid(v),
            OpKind::Tanh => g.tanh(v),
            OpKind::Gelu => g.gelu(v),
            OpKind::Exp => g.exp(v),
            OpKind::Clamp => g.clamp(v, T::lit(-10.0), T::lit(10.0)),
            OpKind::Softmax => g.softmax(v, 1),
            OpKind::LayerNorm => {
                let (a, b) = (g.constant(gain.clone())?, g.constant(bias.clone())?);
                g.layer_norm(v, a, b, T::lit(super::EPS))
            }
            OpKind::Standardize => g.standardize(v, 0, T::lit(super::EPS)),
            OpKind::Mean => g.mean(v, 0),
            OpKind::SumAll => g.sum_all(v),
            OpKind::MeanAll => g.mean_all(v),
            OpKind::Concat => {
                let c = g.constant(other.clone())?;
                g.concat(&[v, c, v], 1)
            }
            OpKind::Slice => g.slice(v, 1, 1, 2),
            OpKind::GatherRows => g.gather_rows(v, &[2, 0, 2]),
        }
    };
    let mut probe = Graph::new();
    let xv = probe.input(x.clone())?;
    let shape = {
        let out = f(&mut probe, xv)?;
        probe.shape(out).to_vec()
    };
    let r = random(&mut rng, &shape);
    vjp_check(f, &x, &r, 1e-5, 1e-4)
}

/// Operation kinds whose isolated self-test fails, in a stable order.
pub fn failing_ops<T: Scalar>(fault: Option<OpKind>, seed: u64) -> Result<Vec<OpKind>> {
    let mut out = Vec::new();
    for kind in OpKind::ALL {
        if !op_self_test::<T>(kind, fault, seed)?.pass {
            out.push(kind);
        }
    }
    Ok(out)
}
