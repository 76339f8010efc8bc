//! Central finite-difference verification of analytic gradients.

use super::Tensor;
use crate::error::{Error, Result};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// max over checked components of |analytic − numeric| / max(|analytic|, |numeric|, 1e-12)
    pub max_rel_error: f64,
    /// Component index where `max_rel_error` was attained.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Components skipped because a probe crossed a non-differentiable point.
    pub skipped: usize,
    /// Components whose numeric derivative was recomputed by a more precise
    /// evaluator (see [`check_gradient_refined`]).
    pub refined: usize,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-12)
}

/// Finite-difference formula.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    Central,
    /// `(−f(x+2h) + 8f(x+h) − 8f(x−h) + f(x−2h)) / 12h`; truncation error
    /// `O(h⁴)`, so a larger `h` can be used and round-off shrinks with it.
    FivePoint,
}

/// Compares `analytic` against central differences of `f` around `point`.
pub fn check_gradient<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: Option<&[usize]>,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
{
    check_gradient_with(f, point, analytic, eps, indices, Stencil::Central)
}

/// Compares `analytic` against finite differences of `f` around `point`.
///
/// `f` returns `Ok(None)` when an evaluation is not comparable (for example a
/// ReLU pre-activation changed sign between the two probes); such components
/// are counted as skipped. `indices` restricts the check to a subset of
/// components; `None` checks all of them.
pub fn check_gradient_with<F>(
    f: F,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: Option<&[usize]>,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
{
    check_impl(f, None, point, analytic, eps, indices, stencil)
}

/// Central-difference check in which any component at or above `tolerance` gets
/// a second opinion from `refine(i)`, which must return the central
/// difference for component `i` at the same `eps` computed with less
/// round-off (or `None` if not comparable). The refined value replaces the
/// plain one, so a genuinely wrong gradient still fails.
///
/// Useful when the function value is large next to a gradient component:
/// plain f64 evaluation then leaves a noise floor of about
/// `ulp(f) / eps` in the difference quotient.
pub fn check_gradient_refined<F, R>(
    f: F,
    mut refine: R,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: Option<&[usize]>,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
    R: FnMut(usize) -> Result<Option<f64>>,
{
    check_impl(
        f,
        Some((&mut refine as &mut dyn FnMut(usize) -> Result<Option<f64>>, tolerance)),
        point,
        analytic,
        eps,
        indices,
        Stencil::Central,
    )
}

type Refiner<'a> = (&'a mut dyn FnMut(usize) -> Result<Option<f64>>, f64);

fn check_impl<F>(
    mut f: F,
    mut refine: Option<Refiner<'_>>,
    point: &[f64],
    analytic: &[f64],
    eps: f64,
    indices: Option<&[usize]>,
    stencil: Stencil,
) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<Option<f64>>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Config(format!(
            "finite-difference eps must be > 0, got {eps}"
        )));
    }
    if point.len() != analytic.len() {
        return Err(Error::dim(format!(
            "gradient has {} components, point has {}",
            analytic.len(),
            point.len()
        )));
    }
    let all: Vec<usize>;
    let indices = match indices {
        Some(ix) => ix,
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };

    let mut probe = point.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: None,
        checked: 0,
        skipped: 0,
        refined: 0,
    };
    let offsets: &[(f64, f64)] = match stencil {
        Stencil::Central => &[(1.0, 0.5), (-1.0, -0.5)],
        Stencil::FivePoint => &[
            (2.0, -1.0 / 12.0),
            (1.0, 8.0 / 12.0),
            (-1.0, -8.0 / 12.0),
            (-2.0, 1.0 / 12.0),
        ],
    };
    'components: for &i in indices {
        let orig = probe[i];
        let mut numeric = 0.0;
        for &(step, weight) in offsets {
            probe[i] = orig + step * eps;
            let value = f(&probe)?;
            probe[i] = orig;
            let Some(value) = value else {
                report.skipped += 1;
                continue 'components;
            };
            if !value.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite function value probing component {i}"
                )));
            }
            numeric += weight * value;
        }
        numeric /= eps;
        let mut err = relative_error(analytic[i], numeric);
        if let Some((refine, tolerance)) = refine.as_mut() {
            if err >= *tolerance {
                report.refined += 1;
                match refine(i)? {
                    Some(better) if better.is_finite() => err = relative_error(analytic[i], better),
                    Some(_) => {
                        return Err(Error::Numeric(format!(
                            "non-finite refined derivative for component {i}"
                        )))
                    }
                    None => {
                        report.skipped += 1;
                        continue 'components;
                    }
                }
            }
        }
        report.checked += 1;
        if report.worst_index.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

/// Max relative error between `analytic` (the gradient of `f` at `point`)
/// and central differences with step `eps`.
pub fn finite_difference_check<F>(f: F, point: &Tensor, analytic: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&Tensor) -> f64,
{
    point.ensure_same_shape(analytic, "finite_difference_check")?;
    let report = check_gradient(
        |v| Ok(Some(f(&point.with_data(v.to_vec())))),
        point.data(),
        analytic.data(),
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}
