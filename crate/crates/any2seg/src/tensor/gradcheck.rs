//! Central-difference verification of tape gradients.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};

/// Outcome of a gradient check, including the worst coordinate for
/// diagnostics.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// (input index, flat coordinate, analytic, numeric) of the worst
    /// disagreement. `None` when there were no coordinates to check.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares tape gradients of a scalar function against central finite
/// differences and returns the maximum relative error
/// |g_ad − g_fd| / max(1e-8, |g_ad| + |g_fd|) over all coordinates.
///
/// `f` is evaluated once on watched copies of `inputs` for the analytic
/// gradients, then 2·N more times on perturbed plain copies.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    Ok(grad_check_detailed(f, inputs, eps)?.max_rel_err)
}

/// Like [`grad_check`] but also reports the worst coordinate.
pub fn grad_check_detailed<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Tensor]) -> Result<Tensor>,
{
    if !(eps > 0.0) || !eps.is_finite() {
        return Err(Error::domain(format!(
            "finite-difference step must be positive, got {}",
            eps
        )));
    }

    let tape = Tape::new();
    let watched: Vec<Tensor> = inputs.iter().map(|t| tape.watch(t)).collect();
    let out = f(&tape, &watched)?;
    if !out.is_scalar() {
        return Err(Error::shape(format!(
            "grad_check needs a scalar function, got shape {:?}",
            out.shape()
        )));
    }
    let grads = tape.backward(&out)?;
    let analytic: Vec<Vec<f64>> = watched
        .iter()
        .map(|w| grads.wrt(w).expect("watched tensor has a node").data().to_vec())
        .collect();

    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let t = Tape::new();
        f(&t, tensors)?.item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
    };
    for i in 0..inputs.len() {
        for j in 0..inputs[i].len() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            let mut minus: Vec<Tensor> = inputs.to_vec();
            let mut dp = inputs[i].data().to_vec();
            let mut dm = dp.clone();
            dp[j] += eps;
            dm[j] -= eps;
            plus[i] = Tensor::from_vec(inputs[i].shape().to_vec(), dp)?;
            minus[i] = Tensor::from_vec(inputs[i].shape().to_vec(), dm)?;
            let fd = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let ad = analytic[i][j];
            let rel = (ad - fd).abs() / (ad.abs() + fd.abs()).max(1e-8);
            if report.worst.is_none() || rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = Some((i, j, ad, fd));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let inputs = vec![Tensor::vector(&[0.5, -1.2, 2.0])];
        let err = grad_check(
            |tape, xs| {
                let sq = tape.mul(&xs[0], &xs[0])?;
                tape.sum(&sq)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error too large: {}", err);
    }

    #[test]
    fn composite_softmax_kl_passes() {
        let inputs = vec![Tensor::vector(&[0.3, -0.8, 1.1, 0.2])];
        let target = Tensor::vector(&[0.1, 0.4, 0.3, 0.2]);
        let err = grad_check(
            move |tape, xs| {
                let q = tape.softmax(&xs[0], 0, 0.9)?;
                tape.kl_div(&target, &q)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error too large: {}", err);
    }

    #[test]
    fn matmul_chain_passes() {
        let a = Tensor::from_vec(vec![2, 3], vec![0.3, -0.2, 0.5, 1.0, 0.8, -0.4]).unwrap();
        let b = Tensor::from_vec(vec![3, 2], vec![0.1, 0.9, -0.3, 0.2, 0.6, -0.5]).unwrap();
        let err = grad_check(
            |tape, xs| {
                let prod = tape.matmul(&xs[0], &xs[1])?;
                let sq = tape.mul(&prod, &prod)?;
                tape.mean(&sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "relative error too large: {}", err);
    }

    #[test]
    fn detects_a_broken_gradient_path() {
        // detach() hides the true dependence from the tape, so the analytic
        // gradient is zero while the finite difference is not.
        let inputs = vec![Tensor::vector(&[0.4, 0.7])];
        let report = grad_check_detailed(
            |tape, xs| {
                let cut = xs[0].detach();
                let sq = tape.mul(&cut, &cut)?;
                let dummy = tape.mul_scalar(&xs[0], 0.0)?;
                tape.add(&tape.sum(&sq)?, &tape.sum(&dummy)?)
            },
            &inputs,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err > 0.9, "break not detected: {}", report.max_rel_err);
    }

    #[test]
    fn loose_eps_reports_finite_error() {
        let inputs = vec![Tensor::vector(&[0.4, 0.7])];
        let report = grad_check_detailed(
            |tape, xs| {
                let sq = tape.mul(&xs[0], &xs[0])?;
                tape.sum(&sq)
            },
            &inputs,
            1e-2,
        )
        .unwrap();
        assert!(report.max_rel_err.is_finite());
        assert!(report.worst.is_some());
    }

    #[test]
    fn rejects_bad_eps_and_non_scalar() {
        let inputs = vec![Tensor::vector(&[1.0])];
        assert!(matches!(
            grad_check(|tape, xs| tape.sum(&xs[0]), &inputs, 0.0),
            Err(Error::Domain(_))
        ));
        let wide = vec![Tensor::vector(&[1.0, 2.0])];
        assert!(matches!(
            grad_check(|tape, xs| tape.mul(&xs[0], &xs[0]), &wide, 1e-5),
            Err(Error::Shape(_))
        ));
    }
}
