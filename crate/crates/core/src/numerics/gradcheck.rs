use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Comparison of reverse-mode gradients against fourth-order central
/// differences, `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// Largest `|g_ad - g_fd| / max(|g_ad|, |g_fd|, 1e-8)` seen.
    pub max_rel_error: f64,
    /// `(param index, element index)` where it occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Checks the gradient of the scalar built by `f` with respect to every
/// tensor in `params`.
///
/// `f` receives a fresh graph with `params` bound as leaves (same order)
/// and returns the loss node. At most `max_samples` elements per tensor
/// are perturbed, evenly strided; pass `usize::MAX` to check them all.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, max_samples: usize) -> Result<GradCheck>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.param(p.clone())).collect();
        let loss = f(&mut g, &vars)?;
        let v = g.value(loss).item();
        if !v.is_finite() {
            return Err(Error::Numeric(format!("function value {v} is not finite")));
        }
        Ok(v)
    };

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let loss = f(&mut g, &vars)?;
    if !g.value(loss).item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let mut work = params.to_vec();
    let mut report = GradCheck {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    for pi in 0..params.len() {
        let n = params[pi].len();
        let stride = n.div_ceil(max_samples.max(1)).max(1);
        for ei in (0..n).step_by(stride) {
            let orig = params[pi].data()[ei];
            let mut at = |k: f64| {
                work[pi].data_mut()[ei] = orig + k * h;
                eval(&work)
            };
            let (p2, p1, m1, m2) = (at(2.0)?, at(1.0)?, at(-1.0)?, at(-2.0)?);
            work[pi].data_mut()[ei] = orig;

            let fd = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
            let ad = analytic[pi].data()[ei];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1e-8);
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (pi, ei);
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_has_derivative_six_at_three() {
        let r = grad_check(
            |g, v| g.mul(v[0], v[0]),
            &[Tensor::scalar(3.0)],
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-9, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let r = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[Tensor::vector(vec![1.0, -2.0])],
            1e-5,
            usize::MAX,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
        assert_eq!(r.checked, 2);
    }

    #[test]
    fn non_finite_function_is_a_numeric_error() {
        let r = grad_check(
            |g, v| {
                let big = g.scale(v[0], 1e300);
                let sq = g.mul(big, big)?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(10.0)],
            1e-5,
            usize::MAX,
        );
        assert!(matches!(r, Err(Error::Numeric(_))));
    }
}
