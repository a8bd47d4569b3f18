//! Central finite-difference checks against [`Tape::backward`].

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Largest relative discrepancy found by a check, and where.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input tensor, flat index)` of the worst coordinate.
    pub worst: (usize, usize),
    pub coords_checked: usize,
}

/// `|ad − fd| / max(1, |ad|, |fd|)`.
pub fn relative_error(ad: f64, fd: f64) -> f64 {
    (ad - fd).abs() / 1f64.max(ad.abs()).max(fd.abs())
}

fn evaluate<F>(f: &F, inputs: &[Tensor]) -> Result<(Tape, Vec<Var>, Var)>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.leaf(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    let v = tape.value(out);
    if v.shape() != (1, 1) {
        return Err(Error::Contract(format!(
            "gradient check needs a scalar function, got {:?}",
            v.shape()
        )));
    }
    if !v.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((tape, vars, out))
}

fn scalar_at<F>(f: &F, inputs: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let (tape, _, out) = evaluate(f, inputs)?;
    Ok(tape.value(out).item())
}

/// Checks `f` over several input tensors at the listed `(tensor, index)`
/// coordinates, or at every coordinate when `coords` is `None`.
pub fn grad_check_many<F>(
    f: F,
    inputs: &[Tensor],
    eps: f64,
    coords: Option<&[(usize, usize)]>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Config(format!(
            "eps must lie in (0, 1e-2], got {eps}"
        )));
    }
    let (tape, vars, out) = evaluate(&f, inputs)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(v)).collect();
    drop(tape);

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = inputs
                .iter()
                .enumerate()
                .flat_map(|(t, x)| (0..x.len()).map(move |i| (t, i)))
                .collect();
            &all
        }
    };

    let mut work = inputs.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        coords_checked: 0,
    };
    for &(t, i) in coords {
        let orig = work[t].data()[i];
        work[t].data_mut()[i] = orig + eps;
        let plus = scalar_at(&f, &work)?;
        work[t].data_mut()[i] = orig - eps;
        let minus = scalar_at(&f, &work)?;
        work[t].data_mut()[i] = orig;

        let fd = (plus - minus) / (2.0 * eps);
        let err = relative_error(analytic[t].data()[i], fd);
        if report.coords_checked == 0 || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = (t, i);
        }
        report.coords_checked += 1;
    }
    Ok(report)
}

/// Single-input form: max relative error over every coordinate of `x`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let report = grad_check_many(
        |tape: &mut Tape, vars: &[Var]| f(tape, vars[0]),
        std::slice::from_ref(x),
        eps,
        None,
    )?;
    Ok(report.max_rel_error)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_passes() {
        let x = Tensor::column(vec![0.3, -1.7, 2.5, 10.0]);
        let err = grad_check(
            |tape, x| {
                let xt = tape.transpose(x)?;
                tape.matmul(xt, x)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::column(vec![1.0, 2.0]);
        let err = grad_check(|tape, _x| tape.constant(Tensor::scalar(4.2)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_finite_function_is_an_evaluation_error() {
        let x = Tensor::column(vec![1.0]);
        let err = grad_check(
            |tape, x| {
                let s = tape.sum(x)?;
                tape.affine(s, 1e308, 1e308)
            },
            &x,
            1e-5,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn rejects_bad_eps() {
        let x = Tensor::column(vec![1.0]);
        assert!(grad_check(|tape, x| tape.sum(x), &x, 0.5).is_err());
        assert!(grad_check(|tape, x| tape.sum(x), &x, 0.0).is_err());
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // ClampedLog at a point below its floor has a zero analytic gradient
        // while the finite difference straddles the kink.
        let x = Tensor::column(vec![1e-3]);
        let err = grad_check(
            |tape, x| {
                let l = tape.clamped_log(x, 1e-3)?;
                tape.sum(l)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err > 1e-1, "{err}");
    }
}
