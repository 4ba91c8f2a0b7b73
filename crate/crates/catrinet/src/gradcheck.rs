//! Central finite-difference verification of analytic gradients.
//!
//! The oracle only ever evaluates forward passes, so it is independent of
//! every backward formula it checks. Comparison uses
//! `|a - n| <= atol + rtol * max(|a|, |n|)`: relative error wherever the
//! gradient has magnitude, with an absolute floor below the f64
//! differencing noise.

use crate::tensor::{Graph, ParamStore, TensorRef};

pub const FD_STEP: f64 = 1e-5;

#[derive(Debug, Clone, Copy)]
pub struct GradTolerance {
    pub rtol: f64,
    pub atol: f64,
}

impl GradTolerance {
    pub const fn new(rtol: f64, atol: f64) -> Self {
        GradTolerance { rtol, atol }
    }

    pub fn ok(&self, analytic: f64, numeric: f64) -> bool {
        (analytic - numeric).abs() <= self.atol + self.rtol * analytic.abs().max(numeric.abs())
    }
}

/// Worst offender found by a check, for failure messages.
#[derive(Debug, Clone)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Checks analytic gradients of `loss_fn` (a pure forward evaluation over
/// the store) against central differences of every scalar coordinate of
/// every parameter. `analytic` maps parameter name -> gradient buffer.
pub fn check_store_gradients<F>(
    store: &ParamStore,
    analytic: &dyn Fn(&str) -> Vec<f64>,
    loss_fn: F,
    tol: GradTolerance,
) -> Result<(), GradMismatch>
where
    F: Fn(&ParamStore) -> f64,
{
    let mut work = store.clone();
    let names: Vec<String> = store.names().cloned().collect();
    for name in &names {
        let grad = analytic(name);
        let len = store.get(name).data.len();
        assert_eq!(grad.len(), len, "gradient length mismatch for {name}");
        for i in 0..len {
            let orig = work.get(name).data[i];
            work.get_mut(name).data[i] = orig + FD_STEP;
            let up = loss_fn(&work);
            work.get_mut(name).data[i] = orig - FD_STEP;
            let down = loss_fn(&work);
            work.get_mut(name).data[i] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !tol.ok(grad[i], numeric) {
                return Err(GradMismatch {
                    param: name.clone(),
                    index: i,
                    analytic: grad[i],
                    numeric,
                });
            }
        }
    }
    Ok(())
}

/// Finite-difference gradient of a scalar-valued graph builder with
/// respect to one flat input vector. `build` must construct a fresh graph
/// from the given values and return the loss node.
pub fn numeric_gradient<F>(values: &[f64], build: F) -> Vec<f64>
where
    F: Fn(&[f64], &mut Graph) -> TensorRef,
{
    let mut work = values.to_vec();
    let mut out = vec![0.0; values.len()];
    for i in 0..values.len() {
        let orig = work[i];
        work[i] = orig + FD_STEP;
        let mut g = Graph::new();
        let loss = build(&work, &mut g);
        let up = g.value(loss)[0];
        work[i] = orig - FD_STEP;
        let mut g = Graph::new();
        let loss = build(&work, &mut g);
        let down = g.value(loss)[0];
        work[i] = orig;
        out[i] = (up - down) / (2.0 * FD_STEP);
    }
    out
}
