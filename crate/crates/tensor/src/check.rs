//! Central finite-difference gradient checking.
//!
//! The numeric side only ever calls the forward pass, so it is independent
//! of every backward rule it is used to validate.

use crate::error::TensorError;
use crate::tape::{OpKind, Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference checker.
#[derive(Clone, Copy, Debug)]
pub struct FiniteDiff {
    pub step: f64,
    /// Backward rule to corrupt on the analytic side, for detector tests.
    pub fault: Option<OpKind>,
}

impl Default for FiniteDiff {
    fn default() -> Self {
        Self {
            step: 1e-5,
            fault: None,
        }
    }
}

impl FiniteDiff {
    pub fn new(step: f64) -> Self {
        Self { step, fault: None }
    }

    /// Analytic gradients of the scalar `f` with respect to every input.
    pub fn analytic<F, E>(&self, inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>, E>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
        E: From<TensorError>,
    {
        let tape = Tape::new();
        tape.inject_fault(self.fault);
        let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = f(&tape, &vars)?;
        let mut grads = tape.backward(out)?;
        Ok(vars.iter().map(|&v| grads.take(v)).collect())
    }

    /// Central-difference gradients of the scalar `f`.
    pub fn numeric<F, E>(&self, inputs: &[Tensor], f: &F) -> Result<Vec<Tensor>, E>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
        E: From<TensorError>,
    {
        let eval = |inputs: &[Tensor]| -> Result<f64, E> {
            let tape = Tape::new();
            let vars: Vec<Var<'_>> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
            Ok(f(&tape, &vars)?.value().item())
        };
        let mut work = inputs.to_vec();
        let mut out = Vec::with_capacity(inputs.len());
        for i in 0..inputs.len() {
            let mut grad = Tensor::zeros(inputs[i].shape());
            for j in 0..inputs[i].len() {
                let orig = inputs[i].data()[j];
                work[i].data_mut()[j] = orig + self.step;
                let plus = eval(&work)?;
                work[i].data_mut()[j] = orig - self.step;
                let minus = eval(&work)?;
                work[i].data_mut()[j] = orig;
                grad.data_mut()[j] = (plus - minus) / (2.0 * self.step);
            }
            out.push(grad);
        }
        Ok(out)
    }

    /// Relative error per input: `|a - n| / max(|a|, |n|)` in the 2-norm.
    /// When both gradients vanish the absolute difference is reported.
    ///
    /// `f` may fail with any error type that tensor errors convert into.
    pub fn relative_errors<F, E>(&self, inputs: &[Tensor], f: F) -> Result<Vec<f64>, E>
    where
        F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>, E>,
        E: From<TensorError>,
    {
        let analytic = self.analytic(inputs, &f)?;
        let numeric = self.numeric(inputs, &f)?;
        Ok(analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| relative_error(a, n))
            .collect())
    }
}

pub fn relative_error(a: &Tensor, n: &Tensor) -> f64 {
    let diff = a.sub(n).expect("gradient shapes").norm();
    let scale = a.norm().max(n.norm());
    if scale < 1e-10 {
        diff
    } else {
        diff / scale
    }
}
