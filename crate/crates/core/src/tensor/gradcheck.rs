use super::tape::{Tape, Var};
use super::{Real, Tensor, TensorError};

/// Gradient norms below this are treated as zero when forming relative errors.
const NORM_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct LeafCheck {
    pub leaf: usize,
    /// `‖analytic − numeric‖₂ / max(‖analytic‖₂, ‖numeric‖₂)`
    pub rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub leaves: Vec<LeafCheck>,
    pub step: f64,
    pub tolerance: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.leaves.iter().all(|l| l.passed)
    }

    pub fn failing(&self) -> Vec<usize> {
        self.leaves
            .iter()
            .filter(|l| !l.passed)
            .map(|l| l.leaf)
            .collect()
    }

    pub fn max_rel_error(&self) -> f64 {
        self.leaves.iter().map(|l| l.rel_error).fold(0.0, f64::max)
    }
}

/// Compares reverse-mode gradients of the scalar `f(leaves)` with central
/// finite differences of step `step`, leaf by leaf.
pub fn check_gradients<T, E, F>(
    leaves: &[Tensor<T>],
    f: F,
    step: f64,
    tolerance: f64,
) -> std::result::Result<GradReport, E>
where
    T: Real,
    E: From<TensorError>,
    F: for<'t> Fn(&'t Tape<T>, &[Var<'t, T>]) -> std::result::Result<Var<'t, T>, E>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(TensorError::Invalid(format!("finite-difference step {step}")).into());
    }
    if let Some(bad) = leaves.iter().position(|l| !l.is_finite()) {
        return Err(TensorError::Invalid(format!("leaf {bad} is not finite")).into());
    }

    let eval = |inputs: &[Tensor<T>]| -> std::result::Result<f64, E> {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
        Ok(f(&tape, &vars)?.item().f64())
    };

    let analytic: Vec<Vec<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = leaves
            .iter()
            .map(|t| tape.leaf(t.clone().trainable()))
            .collect();
        let out = f(&tape, &vars)?;
        let grads = tape.backward(out)?;
        vars.iter().map(|v| grads.get(v).to_f64_vec()).collect()
    };

    let mut work: Vec<Tensor<T>> = leaves.to_vec();
    let mut checks = Vec::with_capacity(leaves.len());
    for (li, grad) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..leaves[li].len() {
            let orig = leaves[li].data()[j];
            work[li].data_mut()[j] = T::lit(orig.f64() + step);
            let plus = eval(&work)?;
            work[li].data_mut()[j] = T::lit(orig.f64() - step);
            let minus = eval(&work)?;
            work[li].data_mut()[j] = orig;
            numeric.push((plus - minus) / (2.0 * step));
        }
        let diff: f64 = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let na = grad.iter().map(|a| a * a).sum::<f64>().sqrt();
        let nb = numeric.iter().map(|b| b * b).sum::<f64>().sqrt();
        let rel_error = diff / na.max(nb).max(NORM_FLOOR);
        let max_abs_error = grad
            .iter()
            .zip(&numeric)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        checks.push(LeafCheck {
            leaf: li,
            rel_error,
            max_abs_error,
            passed: rel_error < tolerance,
        });
    }
    Ok(GradReport {
        leaves: checks,
        step,
        tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::<f64>::from_f64([2], &[1.0, 2.0]).unwrap();
        let r = check_gradients::<_, TensorError, _>(&[x], |_, v| Ok(v[0].sum()), 0.0, 1e-6);
        assert!(matches!(r, Err(TensorError::Invalid(_))));
    }

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::<f64>::from_f64([3], &[0.3, -1.2, 2.0]).unwrap();
        let r = check_gradients::<_, TensorError, _>(&[x], |_, v| Ok(v[0].mul(&v[0])?.sum()), 1e-5, 1e-9)
            .unwrap();
        assert!(r.passed(), "{r:?}");
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn corrupted_rule_is_flagged_on_exactly_that_leaf() {
        let a = Tensor::<f64>::from_f64([2], &[0.5, 1.5]).unwrap();
        let b = Tensor::<f64>::from_f64([2], &[-0.7, 0.2]).unwrap();
        let c = Tensor::<f64>::from_f64([2], &[1.1, 0.4]).unwrap();
        let report = check_gradients::<_, TensorError, _>(
            &[a, b, c],
            |tape, v| {
                // doubles b with a gradient rule that claims slope 3
                let bv = v[1].value();
                let doubled = bv.map(|x| 2.0 * x);
                let broken = tape.custom(
                    &[v[1]],
                    doubled,
                    Box::new(|_, _, g| vec![g.iter().map(|x| 3.0 * x).collect()]),
                );
                let s = v[0].mul(&v[0])?.add(&broken)?.add(&v[2].exp())?;
                Ok(s.sum())
            },
            1e-5,
            1e-6,
        )
        .unwrap();
        assert_eq!(report.failing(), vec![1]);
    }
}
