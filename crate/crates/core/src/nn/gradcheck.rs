//! Central finite-difference gradient verification at 64-bit.
//!
//! The numeric side perturbs every parameter element by ±h and re-runs the
//! forward closure; it never touches the reverse-mode path it is checking.

use super::tensor::{NnResult, Tensor};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked_elements: usize,
}

/// Compares reverse-mode gradients of `forward()` (a scalar loss over
/// `params`) against central finite differences. Returns the worst relative
/// error `|a - n| / max(|a|, |n|, 1e-3)` across all parameter elements; the
/// denominator floor keeps near-zero gradients from amplifying discretization
/// noise into spurious relative error.
pub fn check_gradients(
    params: &[Tensor<f64>],
    forward: impl Fn() -> NnResult<Tensor<f64>>,
) -> NnResult<GradCheckReport> {
    for p in params {
        p.zero_grad();
    }
    let loss = forward()?;
    loss.backward();
    let analytic: Vec<Vec<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.numel()]))
        .collect();

    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for (p, grads) in params.iter().zip(&analytic) {
        for i in 0..p.numel() {
            let orig = p.value()[i];
            let h = 1e-5 * orig.abs().max(1.0);

            p.update_value(|v| v[i] = orig + h);
            let plus = forward()?.item();
            p.update_value(|v| v[i] = orig - h);
            let minus = forward()?.item();
            p.update_value(|v| v[i] = orig);

            let numeric = (plus - minus) / (2.0 * h);
            let a = grads[i];
            let denom = a.abs().max(numeric.abs()).max(1e-3);
            let rel = (a - numeric).abs() / denom;
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    for p in params {
        p.zero_grad();
    }
    Ok(GradCheckReport {
        max_rel_err,
        checked_elements: checked,
    })
}

/// Convenience wrapper asserting the blanket tolerance used across blocks.
pub fn assert_gradients(params: &[Tensor<f64>], forward: impl Fn() -> NnResult<Tensor<f64>>) {
    let report = check_gradients(params, forward).expect("forward must succeed");
    assert!(
        report.max_rel_err < 1e-4,
        "gradient check failed: max relative error {} over {} elements",
        report.max_rel_err,
        report.checked_elements
    );
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init::{Init, ParamBuilder};

    #[test]
    fn catches_correct_and_wrong_gradients() {
        let mut b = ParamBuilder::<f64>::new(5, &["gradcheck"]);
        let w = b.param(&[4, 3], Init::TruncNormal(0.5));
        let x = Tensor::<f64>::constant(&[2, 4], vec![0.3, -0.7, 1.1, 0.4, -0.2, 0.9, 0.5, -1.3]);

        let w2 = w.clone();
        let x2 = x.clone();
        let report = check_gradients(&[w.clone()], move || {
            Ok(x2.matmul(&w2)?.tanh_act().square().sum_all())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-7, "got {}", report.max_rel_err);
        assert_eq!(report.checked_elements, 12);
    }

    #[test]
    fn elementwise_chain_passes() {
        let mut b = ParamBuilder::<f64>::new(6, &["gradcheck2"]);
        let p = b.param(&[10], Init::TruncNormal(1.0));
        let p2 = p.clone();
        assert_gradients(&[p], move || {
            let a = p2.gelu().sigmoid();
            let c = a.mul(&p2.relu())?.add(&p2.exp_t())?;
            Ok(c.sum_all())
        });
    }
}
