//! Central-difference gradient oracle used by the gradient checks.

use super::{Graph, Real, Tensor, Var};
use crate::error::Result;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every element `i` of `x`.
pub fn finite_diff_grad<T: Real>(
    mut f: impl FnMut(&Tensor<T>) -> T,
    x: &Tensor<T>,
    h: f64,
) -> Tensor<T> {
    let h_t = T::lit(h);
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h_t;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h_t;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (h_t + h_t));
    }
    Tensor::new(x.shape(), grad).expect("gradient has the input's shape")
}

/// Analytic gradient of a scalar graph function of one input, via `backward`.
pub fn analytic_grad<T: Real>(
    build: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let v = g.leaf(x.clone(), true);
    let out = build(&mut g, v)?;
    g.backward(out)?;
    let grad = g
        .grad(v)
        .map(<[T]>::to_vec)
        .unwrap_or_else(|| vec![T::zero(); x.numel()]);
    Tensor::new(x.shape(), grad)
}

/// Maximum absolute difference between the analytic and central-difference
/// gradients of `build` at `x`.
pub fn gradient_error<T: Real>(
    build: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    h: f64,
) -> Result<f64> {
    let analytic = analytic_grad(&build, x)?;
    let numeric = finite_diff_grad(
        |p| {
            let mut g = Graph::new();
            let v = g.leaf(p.clone(), false);
            let out = build(&mut g, v).expect("forward succeeded at the base point");
            g.value(out).item()
        },
        x,
        h,
    );
    Ok(analytic.max_abs_diff(&numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Axes;

    #[test]
    fn sum_has_unit_gradient() {
        let x = Tensor::<f64>::from_fn(&[2, 3], |i| i as f64 * 0.3 - 1.0);
        let g = finite_diff_grad(|t| t.sum(), &x, 1e-3);
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn square_at_three() {
        let x = Tensor::<f64>::from_f64(&[1], &[3.0]).unwrap();
        let g = finite_diff_grad(|t| t.data()[0] * t.data()[0], &x, 1e-3);
        assert!((g.data()[0] - 6.0).abs() < 1e-6);
    }

    #[test]
    fn fan_out_contributions_sum() {
        // x feeds both a relu-free square and a scaled copy.
        let x = Tensor::<f64>::from_f64(&[3], &[0.3, -1.2, 2.0]).unwrap();
        let err = gradient_error(
            |g, v| {
                let sq = g.mul(v, v)?;
                let lin = g.mul_scalar(v, 3.0);
                let both = g.add(sq, lin)?;
                g.sum(both, Axes::All)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "err {err}");
    }
}
