//! Central finite differences, the reference for every analytic gradient.

use super::{Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn perturbed<S: Scalar>(params: &[Tensor<S>], which: usize, coord: usize, delta: S) -> Vec<Tensor<S>> {
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            if i == which {
                let mut data = p.to_vec();
                data[coord] += delta;
                Tensor::raw(p.shape().to_vec(), data)
            } else {
                p.detach()
            }
        })
        .collect()
}

fn check_deterministic<S: Scalar, F>(f: &F, params: &[Tensor<S>]) -> Result<()>
where
    F: Fn(&[Tensor<S>]) -> S,
{
    let base: Vec<Tensor<S>> = params.iter().map(Tensor::detach).collect();
    let first = f(&base);
    let second = f(&base);
    if first.as_f64().to_bits() != second.as_f64().to_bits() {
        return Err(TensorError::NonDeterministic {
            first: first.as_f64(),
            second: second.as_f64(),
        });
    }
    Ok(())
}

/// Central difference `(f(p + h e) - f(p - h e)) / 2h` for every coordinate
/// of every parameter.
///
/// `f` is evaluated twice at the unperturbed point first; differing results
/// are reported as [`TensorError::NonDeterministic`].
pub fn finite_diff_grad<S: Scalar, F>(f: F, params: &[Tensor<S>], h: S) -> Result<Vec<Tensor<S>>>
where
    F: Fn(&[Tensor<S>]) -> S,
{
    if h <= S::zero() {
        return Err(TensorError::Invalid("finite-difference step must be positive".into()));
    }
    check_deterministic(&f, params)?;
    let two_h = h + h;
    params
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let data = (0..p.numel())
                .map(|j| (f(&perturbed(params, i, j, h)) - f(&perturbed(params, i, j, -h))) / two_h)
                .collect();
            Tensor::new(p.shape(), data)
        })
        .collect()
}

/// Central differences at selected `(parameter, coordinate)` pairs only.
pub fn finite_diff_coords<S: Scalar, F>(f: F, params: &[Tensor<S>], h: S, coords: &[(usize, usize)]) -> Result<Vec<S>>
where
    F: Fn(&[Tensor<S>]) -> S,
{
    if h <= S::zero() {
        return Err(TensorError::Invalid("finite-difference step must be positive".into()));
    }
    check_deterministic(&f, params)?;
    let two_h = h + h;
    Ok(coords
        .iter()
        .map(|&(i, j)| (f(&perturbed(params, i, j, h)) - f(&perturbed(params, i, j, -h))) / two_h)
        .collect())
}

/// `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    #[test]
    fn cubic_derivative() {
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let g = finite_diff_grad(|p| p[0].data()[0].powi(3), &[x], 1e-4).unwrap();
        assert!((g[0].item() - 3.0).abs() < 1e-6);
    }

    #[test]
    fn constant_function() {
        let x = Tensor::<f64>::from_f64(&[3], &[1.0, -2.0, 0.5]).unwrap();
        let g = finite_diff_grad(|_| 4.0, &[x], 1e-4).unwrap();
        assert_eq!(g[0].data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn non_deterministic_detected() {
        let calls = Cell::new(0.0);
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        let r = finite_diff_grad(
            |_| {
                calls.set(calls.get() + 1.0);
                calls.get()
            },
            &[x],
            1e-4,
        );
        assert!(matches!(r, Err(TensorError::NonDeterministic { .. })));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::from_f64(&[1], &[1.0]).unwrap();
        assert!(finite_diff_grad(|p| p[0].item(), &[x], 0.0).is_err());
    }
}
