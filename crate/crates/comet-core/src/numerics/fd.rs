//! Central finite-difference gradient oracle.
//!
//! Independent of the tape by construction: it only ever calls the target
//! function as a black box, so agreement between the two is meaningful
//! evidence that an analytic gradient is right.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mat::Mat;
use crate::params::ParamSet;

/// Central differences (f(θ+h·e_i) − f(θ−h·e_i)) / 2h for every coordinate
/// of every parameter in `theta`.
pub fn finite_difference_gradient<F>(mut f: F, theta: &ParamSet, h: f64) -> Result<ParamSet>
where
    F: FnMut(&ParamSet) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(CoreError::InvalidArgument(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut work = theta.clone();
    let mut grad = ParamSet::new();
    let paths = theta.paths();
    for path in &paths {
        let shape = theta.get(path)?.shape();
        let mut g = Mat::zeros(shape.0, shape.1);
        for i in 0..g.len() {
            let base = theta.get(path)?.data()[i];

            work.get_mut(path)?.data_mut()[i] = base + h;
            let up = f(&work)?;
            work.get_mut(path)?.data_mut()[i] = base - h;
            let down = f(&work)?;
            work.get_mut(path)?.data_mut()[i] = base;

            if !up.is_finite() || !down.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "objective at perturbed {path}[{i}]"
                )));
            }
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        grad.insert(path, g);
    }
    Ok(grad)
}

/// Slice-level version for checks that differentiate a single flat vector.
pub fn fd_gradient_slice(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut work = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let base = work[i];
        work[i] = base + h;
        let up = f(&work);
        work[i] = base - h;
        let down = f(&work);
        work[i] = base;
        grad.push((up - down) / (2.0 * h));
    }
    grad
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn square_at_three_gives_six() {
        let mut theta = ParamSet::new();
        theta.insert("x", Mat::scalar(3.0));
        let g = finite_difference_gradient(
            |p: &ParamSet| Ok(p.get("x")?.at(0, 0) * p.get("x")?.at(0, 0)),
            &theta,
            1e-4,
        )
        .unwrap();
        assert!((g.get("x").unwrap().at(0, 0) - 6.0).abs() < 1e-7);
    }

    #[test]
    fn constant_function_gives_zero_gradient() {
        let mut theta = ParamSet::new();
        theta.insert("a", Mat::from_vec(2, 2, vec![1.0, -2.0, 0.5, 4.0]).unwrap());
        let g = finite_difference_gradient(|_| Ok(42.0), &theta, 1e-4).unwrap();
        assert!(g.get("a").unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_function_recovered_exactly_up_to_roundoff() {
        let a = [2.0, -3.0, 0.25, 10.0];
        let mut theta = ParamSet::new();
        theta.insert("v", Mat::row_vec(vec![0.3, -0.7, 1.1, 0.0]));
        let g = finite_difference_gradient(
            |p: &ParamSet| {
                Ok(p.get("v")?
                    .data()
                    .iter()
                    .zip(a)
                    .map(|(x, c)| x * c)
                    .sum())
            },
            &theta,
            1e-4,
        )
        .unwrap();
        for (got, want) in g.get("v").unwrap().data().iter().zip(a) {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
    }

    #[test]
    fn non_finite_objective_is_reported() {
        let mut theta = ParamSet::new();
        theta.insert("x", Mat::scalar(0.0));
        let r = finite_difference_gradient(|_| Ok(f64::NAN), &theta, 1e-4);
        assert!(matches!(r, Err(CoreError::NonFinite(_))));
    }

    #[test]
    fn non_positive_step_rejected() {
        let theta = ParamSet::new();
        let r = finite_difference_gradient(|_| Ok(0.0), &theta, 0.0);
        assert!(matches!(r, Err(CoreError::InvalidArgument(_))));
    }
}
