use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Outcome of a finite-difference gradient check.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradReport<T> {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
    pub max_rel_error: T,
    /// Input and flat coordinate where the maximum occurred.
    pub worst: (usize, usize),
    pub coordinates: usize,
}

/// Central-difference gradient checker.
#[derive(Clone, Copy, Debug)]
pub struct GradCheck {
    pub step: f64,
    /// Scale analytic gradients by `1 + tamper` before comparing. Only
    /// used to prove the harness catches broken gradients.
    pub tamper: f64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck { step: 1e-5, tamper: 0.0 }
    }
}

fn scalar_value<T: Scalar>(g: &Graph<T>, out: Var) -> Result<T> {
    let t = g.value(out);
    if t.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must be scalar-valued, got shape {}", t.shape()),
        ));
    }
    let v = t.data()[0];
    if !v.is_finite() {
        return Err(Error::NonFinite(format!("function value {v}")));
    }
    Ok(v)
}

impl GradCheck {
    pub fn run<T, F>(&self, f: F, inputs: &[Tensor<T>]) -> Result<GradReport<T>>
    where
        T: Scalar,
        F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
    {
        let eval = |xs: &[Tensor<T>]| -> Result<T> {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
            let out = f(&mut g, &vars)?;
            scalar_value(&g, out)
        };

        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        scalar_value(&g, out)?;
        g.backward(out)?;
        let scale = T::one() + T::from_f64_lossy(self.tamper);
        let analytic: Vec<Vec<T>> = vars
            .iter()
            .map(|v| g.grad(*v).expect("inputs require grad").iter().map(|a| *a * scale).collect())
            .collect();
        for (i, a) in analytic.iter().enumerate() {
            if let Some(j) = a.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("analytic gradient of input {i} at {j}")));
            }
        }

        let h = T::from_f64_lossy(self.step);
        let two_h = h + h;
        let floor = T::from_f64_lossy(1e-8);
        let mut work: Vec<Tensor<T>> = inputs.to_vec();
        let mut report = GradReport {
            max_rel_error: T::zero(),
            worst: (0, 0),
            coordinates: 0,
        };
        for i in 0..inputs.len() {
            for j in 0..inputs[i].numel() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + h;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - h;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                let numeric = (plus - minus) / two_h;
                let a = analytic[i][j];
                let denom = a.abs().max(numeric.abs()).max(floor);
                let rel = (a - numeric).abs() / denom;
                if rel > report.max_rel_error || rel.is_nan() {
                    report.max_rel_error = rel;
                    report.worst = (i, j);
                }
                report.coordinates += 1;
            }
        }
        Ok(report)
    }
}

/// Max relative error between analytic and central-difference gradients
/// of the scalar function `f` over every coordinate of every input.
pub fn grad_check<T, F>(f: F, inputs: &[Tensor<T>], h: f64) -> Result<GradReport<T>>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    GradCheck { step: h, tamper: 0.0 }.run(f, inputs)
}
