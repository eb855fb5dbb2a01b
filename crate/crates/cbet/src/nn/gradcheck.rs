//! Finite-difference gradient oracle.
//!
//! Central differences with step `h = 1e-3 * (1 + |x|)` per coordinate,
//! compared against tape gradients coordinate-by-coordinate. The reduction
//! projects the op output onto fixed random weights first, otherwise ops
//! with built-in constraints (softmax rows summing to one) would gradcheck
//! vacuously at zero.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::params::{ParamId, ParamStore};
use super::scalar::Scalar;
use super::session::{Session, Var};
use super::tensor::Tensor;
use super::NnError;

/// Relative error with a unit floor, so near-zero gradients are compared
/// absolutely instead of blowing up the ratio.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central difference of `f` at `x0` with the oracle's step policy.
pub fn central_diff(mut f: impl FnMut(f64) -> f64, x0: f64) -> f64 {
    let h = 1e-3 * (1.0 + x0.abs());
    (f(x0 + h) - f(x0 - h)) / (2.0 * h)
}

/// One primitive under test: inputs become parameters, `build` applies the
/// op inside a session.
pub struct OpCheck<S: Scalar> {
    pub name: &'static str,
    pub inputs: Vec<Tensor<S>>,
    #[allow(clippy::type_complexity)]
    pub build: Box<dyn Fn(&mut Session<S>, &[Var]) -> Result<Var, NnError>>,
}

impl<S: Scalar> OpCheck<S> {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<S>>,
        build: impl Fn(&mut Session<S>, &[Var]) -> Result<Var, NnError> + 'static,
    ) -> Self {
        OpCheck {
            name,
            inputs,
            build: Box::new(build),
        }
    }
}

/// Compares tape gradients against central differences over every input
/// coordinate; returns the worst relative error. `dropout_seed` fixes the
/// session RNG so stochastic ops see identical noise across re-evaluations.
pub fn check_op<S: Scalar>(check: &OpCheck<S>, dropout_seed: u64) -> Result<f64, NnError> {
    let mut store: ParamStore<S> = ParamStore::new();
    let mut ids = Vec::new();
    for (i, t) in check.inputs.iter().enumerate() {
        ids.push(store.add(format!("in{i}"), t.clone())?);
    }

    // Dry run to size the random projection.
    let out_shape = {
        let mut s = Session::train(dropout_seed);
        let vars: Vec<Var> = ids.iter().map(|&id| s.param(&store, id)).collect();
        let out = (check.build)(&mut s, &vars)?;
        s.value(out).shape().to_vec()
    };
    let mut wrng = ChaCha8Rng::seed_from_u64(dropout_seed ^ 0x9e37_79b9);
    let weights: Tensor<S> =
        Tensor::from_fn(&out_shape, |_| S::from_f64(wrng.gen_range(-1.0..1.0)));

    let eval = |store: &ParamStore<S>| -> Result<(Session<S>, Var), NnError> {
        let mut s = Session::train(dropout_seed);
        let vars: Vec<Var> = ids.iter().map(|&id| s.param(store, id)).collect();
        let out = (check.build)(&mut s, &vars)?;
        let w = s.constant(weights.clone());
        let projected = s.mul(out, w)?;
        let loss = s.mean_all(projected)?;
        Ok((s, loss))
    };

    store.zero_grads();
    let (s, loss) = eval(&store)?;
    s.backward(loss, &mut store)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| store.grad(id).data().iter().map(|v| v.as_f64()).collect())
        .collect();

    let mut max_err = 0.0f64;
    for (pi, &id) in ids.iter().enumerate() {
        for c in 0..store.value(id).numel() {
            let fd = fd_grad_at(&mut store, id, c, |st| {
                let (s, l) = eval(st).expect("op built once already");
                s.value(l).item().as_f64()
            });
            let err = rel_err(analytic[pi][c], fd);
            if err > max_err {
                max_err = err;
            }
        }
    }
    Ok(max_err)
}

/// Central difference of `f(store)` with respect to one parameter
/// coordinate, restoring the original value afterwards.
pub fn fd_grad_at<S: Scalar>(
    store: &mut ParamStore<S>,
    id: ParamId,
    coord: usize,
    mut f: impl FnMut(&ParamStore<S>) -> f64,
) -> f64 {
    let x0 = store.value(id).data()[coord].as_f64();
    let h = 1e-3 * (1.0 + x0.abs());
    store.value_mut(id).data_mut()[coord] = S::from_f64(x0 + h);
    let fp = f(store);
    store.value_mut(id).data_mut()[coord] = S::from_f64(x0 - h);
    let fm = f(store);
    store.value_mut(id).data_mut()[coord] = S::from_f64(x0);
    (fp - fm) / (2.0 * h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn central_diff_matches_analytic_on_cubic() {
        let d = central_diff(|x| x * x * x, 2.0);
        // f'(2) = 12; central difference has O(h^2) error.
        assert!((d - 12.0).abs() < 1e-3, "{d}");
    }

    #[test]
    fn rel_err_floors_at_one() {
        assert_eq!(rel_err(0.0, 0.0), 0.0);
        assert!((rel_err(1e-9, 0.0) - 1e-9).abs() < 1e-15);
        assert!((rel_err(200.0, 100.0) - 0.5).abs() < 1e-12);
    }
}
