//! Finite-difference verification of the reverse pass.
//!
//! The differentiable function under test is expressed generically over the
//! element type, so the same graph can run in `f32` or `f64`. The
//! finite-difference reference is always evaluated in `f64`: a central
//! difference computed in `f32` cannot resolve relative errors anywhere near
//! the tolerances the engine is held to, while the `f64` reference pins the
//! true derivative to ~1e-10 and isolates the precision of the reverse pass
//! itself.

use rand::seq::SliceRandom;
use rand::Rng;

use super::tape::{Element, Tape, Tensor, Var};
use super::{NumericsError, Result};

/// A scalar-valued differentiable function, buildable at either precision.
pub trait DiffFn {
    fn build<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var>;
}

/// Precision the reverse pass under test runs at.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdPrecision {
    F32,
    F64,
}

/// Max over all input coordinates of
/// `|g_ad - g_fd| / (|g_ad| + |g_fd| + 1e-12)`.
pub fn grad_check<F: DiffFn>(
    f: &F,
    point: &[Tensor<f64>],
    epsilon: f64,
    precision: AdPrecision,
) -> Result<f64> {
    let coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
        .collect();
    grad_check_coords(f, point, epsilon, precision, &coords)
}

/// Same check restricted to `max_coords` randomly chosen coordinates; used
/// when the full sweep would be too expensive (whole-model losses).
pub fn grad_check_sampled<F: DiffFn, R: Rng>(
    f: &F,
    point: &[Tensor<f64>],
    epsilon: f64,
    precision: AdPrecision,
    max_coords: usize,
    rng: &mut R,
) -> Result<f64> {
    let mut coords: Vec<(usize, usize)> = point
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.numel()).map(move |ci| (ti, ci)))
        .collect();
    coords.shuffle(rng);
    coords.truncate(max_coords);
    grad_check_coords(f, point, epsilon, precision, &coords)
}

fn grad_check_coords<F: DiffFn>(
    f: &F,
    point: &[Tensor<f64>],
    epsilon: f64,
    precision: AdPrecision,
    coords: &[(usize, usize)],
) -> Result<f64> {
    let analytic: Vec<Vec<f64>> = match precision {
        AdPrecision::F32 => reverse_gradients::<f32, F>(f, point)?,
        AdPrecision::F64 => reverse_gradients::<f64, F>(f, point)?,
    };

    let mut max_rel = 0.0f64;
    let mut bumped: Vec<Tensor<f64>> = point.to_vec();
    for &(ti, ci) in coords {
        let orig = bumped[ti].data[ci];
        bumped[ti].data[ci] = orig + epsilon;
        let f_plus = eval_scalar_f64(f, &bumped)?;
        bumped[ti].data[ci] = orig - epsilon;
        let f_minus = eval_scalar_f64(f, &bumped)?;
        bumped[ti].data[ci] = orig;
        let g_fd = (f_plus - f_minus) / (2.0 * epsilon);
        let g_ad = analytic[ti][ci];
        let rel = (g_ad - g_fd).abs() / (g_ad.abs() + g_fd.abs() + 1e-12);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok(max_rel)
}

fn reverse_gradients<E: Element, F: DiffFn>(
    f: &F,
    point: &[Tensor<f64>],
) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::<E>::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| {
            let te = Tensor::<E>::from_f64(t.shape.clone(), &t.data)?;
            Ok(tape.leaf(te, true))
        })
        .collect::<Result<_>>()?;
    let out = f.build(&mut tape, &vars)?;
    if tape.value(out).numel() != 1 {
        return Err(NumericsError::Invalid(
            "grad_check function must produce a scalar".into(),
        ));
    }
    tape.backward(out)?;
    Ok(vars
        .iter()
        .zip(point.iter())
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|x| x.to_f64_lossy()).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect())
}

fn eval_scalar_f64<F: DiffFn>(f: &F, point: &[Tensor<f64>]) -> Result<f64> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = point
        .iter()
        .map(|t| tape.leaf(t.clone(), false))
        .collect();
    let out = f.build(&mut tape, &vars)?;
    Ok(tape.value(out).data[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Square;
    impl DiffFn for Square {
        fn build<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
            let x = inputs[0];
            let y = tape.mul(x, x)?;
            tape.sum_all(y)
        }
    }

    struct Linear;
    impl DiffFn for Linear {
        fn build<E: Element>(&self, tape: &mut Tape<E>, inputs: &[Var]) -> Result<Var> {
            let w = Tensor::from_f64(vec![1, 3], &[2.0, -3.0, 0.5])?;
            let wv = tape.leaf(w, false);
            let y = tape.mul(inputs[0], wv)?;
            tape.sum_all(y)
        }
    }

    #[test]
    fn square_at_three() {
        let point = [Tensor::matrix(1, 1, vec![3.0]).unwrap()];
        let err = grad_check(&Square, &point, 1e-4, AdPrecision::F64).unwrap();
        assert!(err < 1e-6, "rel err {err}");
        // analytic gradient is 6
        let err32 = grad_check(&Square, &point, 1e-4, AdPrecision::F32).unwrap();
        assert!(err32 < 1e-6, "f32 rel err {err32}");
    }

    #[test]
    fn linear_exact_for_any_epsilon() {
        let point = [Tensor::matrix(1, 3, vec![0.4, -1.1, 2.2]).unwrap()];
        for eps in [1e-1, 1e-3, 1e-6] {
            let err = grad_check(&Linear, &point, eps, AdPrecision::F64).unwrap();
            assert!(err < 1e-8, "eps {eps}: rel err {err}");
        }
    }
}
