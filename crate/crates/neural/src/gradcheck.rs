//! Central finite-difference gradient checks.
//!
//! The numerical side only ever evaluates forward values, so it is
//! independent of every backward rule it is used to verify.

use crate::params::ParameterStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::Result;

pub const DEFAULT_PROBE: f64 = 1e-5;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`, or 0 when both norms are below 1e-7 (the
/// truncation noise of a central difference at the default probe).
pub fn relative_error(analytic: &Tensor, numeric: &Tensor) -> f64 {
    let diff: f64 = analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let scale = analytic.sq_norm().sqrt().max(numeric.sq_norm().sqrt());
    if scale < 1e-7 {
        0.0
    } else {
        diff / scale
    }
}

#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<Tensor>,
    pub numeric: Vec<Tensor>,
    pub rel_errors: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().cloned().fold(0.0, f64::max)
    }
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every input.
pub fn check_inputs<F>(inputs: &[Tensor], probe: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|v| grads.wrt(&tape, *v)).collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::inference();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let o = f(&mut t, &vs)?;
        Ok(t.value(o).item())
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut numeric = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut n = Tensor::zeros(inputs[i].rows(), inputs[i].cols());
        for k in 0..inputs[i].len() {
            let orig = work[i].data()[k];
            work[i].data_mut()[k] = orig + probe;
            let up = eval(&work)?;
            work[i].data_mut()[k] = orig - probe;
            let down = eval(&work)?;
            work[i].data_mut()[k] = orig;
            n.data_mut()[k] = (up - down) / (2.0 * probe);
        }
        numeric.push(n);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        analytic,
        numeric,
        rel_errors,
    })
}

/// Checks the gradient of `f` with respect to every parameter in `store`.
pub fn check_params<F>(store: &ParameterStore, probe: f64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &ParameterStore) -> Result<Var>,
{
    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?.params(&tape, store);
    let analytic: Vec<Tensor> = store
        .ids()
        .map(|id| {
            grads.get(id).cloned().unwrap_or_else(|| {
                let (r, c) = store.value(id).shape();
                Tensor::zeros(r, c)
            })
        })
        .collect();

    let eval = |s: &ParameterStore| -> Result<f64> {
        let mut t = Tape::inference();
        let o = f(&mut t, s)?;
        Ok(t.value(o).item())
    };
    let mut work = store.clone();
    let mut numeric = Vec::with_capacity(store.len());
    for id in store.ids() {
        let (r, c) = store.value(id).shape();
        let mut n = Tensor::zeros(r, c);
        for k in 0..r * c {
            let orig = work.value(id).data()[k];
            work.value_mut(id).data_mut()[k] = orig + probe;
            let up = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig - probe;
            let down = eval(&work)?;
            work.value_mut(id).data_mut()[k] = orig;
            n.data_mut()[k] = (up - down) / (2.0 * probe);
        }
        numeric.push(n);
    }
    let rel_errors = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a, n))
        .collect();
    Ok(GradCheck {
        analytic,
        numeric,
        rel_errors,
    })
}
