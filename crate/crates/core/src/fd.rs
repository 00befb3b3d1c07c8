//! Central-difference gradient checking against the tape.
//!
//! The numeric side evaluates `f` on an exact (double-double) tape at
//! `x +- eps` formed without rounding, so the quotient carries truncation
//! error only. Coordinates whose stencil crosses a branch of a non-smooth
//! primitive are counted as kinks and left out of the error.

use alloc::format;
use alloc::vec::Vec;

use crate::dd::DoubleDouble;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor4;

/// Relative error with denominator `max(|a|, |b|, 1e-12)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = libm::fabs(a).max(libm::fabs(b)).max(1e-12);
    libm::fabs(a - b) / denom
}

/// Result of comparing analytic and numerical gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    /// Worst relative error per input, in input order.
    pub per_input: Vec<f64>,
    /// Coordinates compared.
    pub coordinates: usize,
    pub worst: Option<WorstCoordinate>,
    /// Coordinates skipped because `f(x + eps)`, `f(x)` and `f(x - eps)` did
    /// not all take the same branches.
    pub kinks: usize,
}

/// The coordinate with the largest relative error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorstCoordinate {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdReport {
    pub fn max_relative_error(&self) -> f64 {
        self.per_input.iter().cloned().fold(0.0, f64::max)
    }
}

fn check_eps(eps: f64) -> Result<()> {
    if (1e-8..=1e-4).contains(&eps) {
        Ok(())
    } else {
        Err(Error::Invalid(format!("finite-difference eps {eps} outside [1e-8, 1e-4]")))
    }
}

/// Exact value of `f` and its branch signature, with coordinate `at` of
/// input `at.0` moved by `delta`.
fn evaluate<F>(f: &F, inputs: &[Tensor4], at: Option<(usize, usize)>, delta: f64) -> Result<(DoubleDouble, u64)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new_exact();
    let mut vars = Vec::with_capacity(inputs.len());
    for (i, t) in inputs.iter().enumerate() {
        let mut values: Vec<DoubleDouble> = t.data().iter().map(|&x| DoubleDouble::from_f64(x)).collect();
        if let Some((_, index)) = at.filter(|&(input, _)| input == i) {
            values[index] = DoubleDouble::sum_of(t.data()[index], delta);
        }
        vars.push(tape.constant_exact(t.shape(), values)?);
    }
    let out = f(&mut tape, &vars)?;
    let shape = tape.shape(out);
    if shape.numel() != 1 {
        return Err(Error::NonScalarLoss(shape));
    }
    let value = tape.exact_value(out).map_or(DoubleDouble::ZERO, |v| v[0]);
    Ok((value, tape.branch_signature()))
}

/// Analytic gradients of the scalar `f` with respect to every input.
pub fn analytic_grads<F>(f: &F, inputs: &[Tensor4]) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss)?;
    Ok(vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| {
            tape.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| alloc::vec![0.0; t.numel()])
        })
        .collect())
}

/// Same as [`fd_check`] but with a pre-computed (possibly tampered) analytic gradient.
pub fn fd_compare<F>(f: &F, inputs: &[Tensor4], analytic: &[Vec<f64>], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let (_, center) = evaluate(f, inputs, None, 0.0)?;
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut coordinates = 0;
    let mut kinks = 0;
    let mut worst_at: Option<(f64, WorstCoordinate)> = None;
    for (i, grad) in analytic.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for j in 0..inputs[i].numel() {
            let (plus, sp) = evaluate(f, inputs, Some((i, j)), eps)?;
            let (minus, sm) = evaluate(f, inputs, Some((i, j)), -eps)?;
            coordinates += 1;
            if sp != center || sm != center {
                kinks += 1;
                continue;
            }
            let numeric = ((plus - minus) / (2.0 * eps)).to_f64();
            let err = relative_error(grad[j], numeric);
            worst = worst.max(err);
            if worst_at.is_none_or(|(e, _)| err > e) {
                let at = WorstCoordinate {
                    input: i,
                    index: j,
                    analytic: grad[j],
                    numeric,
                };
                worst_at = Some((err, at));
            }
        }
        per_input.push(worst);
    }
    Ok(FdReport {
        per_input,
        coordinates,
        worst: worst_at.map(|(_, w)| w),
        kinks,
    })
}

/// Compares taped gradients of the scalar function `f` against central
/// differences `(f(x + eps) - f(x - eps)) / (2 eps)` on every coordinate of
/// every input.
pub fn fd_check<F>(f: F, inputs: &[Tensor4], eps: f64) -> Result<FdReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    let analytic = analytic_grads(&f, inputs)?;
    fd_compare(&f, inputs, &analytic, eps)
}

/// Maximum relative error for a single input `leaf`.
pub fn fd_check_leaf<F>(f: F, inputs: &[Tensor4], leaf: usize, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    check_eps(eps)?;
    if leaf >= inputs.len() {
        return Err(Error::Invalid(format!("leaf {leaf} out of {} inputs", inputs.len())));
    }
    let analytic = analytic_grads(&f, inputs)?;
    let mut only: Vec<Tensor4> = inputs.to_vec();
    let target = only.remove(leaf);
    let g = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut all: Vec<Var> = vars[1..].to_vec();
        all.insert(leaf, vars[0]);
        f(tape, &all)
    };
    let mut reordered = alloc::vec![target];
    reordered.extend(only);
    let report = fd_compare(&g, &reordered, &analytic[leaf..=leaf], eps)?;
    Ok(report.per_input[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn identity_map_matches() {
        let x = Tensor4::from_vec(Shape::new(1, 1, 1, 3), alloc::vec![0.3, -1.2, 2.0]).unwrap();
        let r = fd_check(|t, v| Ok(t.sum_all(v[0])), &[x], 1e-6).unwrap();
        assert!(r.max_relative_error() < 1e-9, "{r:?}");
    }

    #[test]
    fn quadratic_loss_within_1e9() {
        let x = Tensor4::from_vec(Shape::new(1, 2, 1, 2), alloc::vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let r = fd_check(
            |t, v| {
                let sq = t.mul(v[0], v[0])?;
                Ok(t.sum_all(sq))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error() <= 1e-9, "{r:?}");
    }

    #[test]
    fn eps_range_enforced() {
        let x = Tensor4::scalar(1.0);
        assert!(fd_check(|t, v| Ok(t.sum_all(v[0])), &[x.clone()], 1e-3).is_err());
        assert!(fd_check(|t, v| Ok(t.sum_all(v[0])), &[x], 1e-9).is_err());
    }

    #[test]
    fn single_leaf_check() {
        let a = Tensor4::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![1.0, 2.0]).unwrap();
        let b = Tensor4::from_vec(Shape::new(1, 1, 1, 2), alloc::vec![3.0, -1.0]).unwrap();
        let err = fd_check_leaf(
            |t, v| {
                let p = t.mul(v[0], v[1])?;
                Ok(t.sum_all(p))
            },
            &[a, b],
            1,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-9);
    }

    #[test]
    fn kinks_are_detected_not_scored() {
        // |x| summed over channels: the coordinate at 0.0 straddles the kink.
        let x = Tensor4::from_vec(Shape::new(1, 2, 1, 1), alloc::vec![0.0, 0.7]).unwrap();
        let r = fd_check(|t, v| {
            let d = t.abs_sum_channels(v[0]);
            Ok(t.sum_all(d))
        }, &[x], 1e-6)
        .unwrap();
        assert_eq!(r.kinks, 1);
        assert_eq!(r.coordinates, 2);
        assert!(r.max_relative_error() < 1e-12);
    }

    #[test]
    fn exact_differences_resolve_tiny_gradients() {
        // f = exp(a) + 1e-9 b^2. In f64 the b-difference would carry ~2e-10 of
        // roundoff against a true derivative of ~2.6e-9.
        let a = Tensor4::scalar(0.9);
        let b = Tensor4::scalar(1.3);
        let r = fd_check(
            |t, v| {
                let e = t.exp(v[0]);
                let sq = t.mul(v[1], v[1])?;
                let small = t.scale(sq, 1e-9);
                let s = t.add(e, small)?;
                Ok(t.sum_all(s))
            },
            &[a, b],
            1e-6,
        )
        .unwrap();
        assert!(r.max_relative_error() < 1e-9, "{r:?}");
    }
}
