//! Finite-difference gradient verification, f64 only.

use super::tape::{Tape, Var};
use super::tensor::{Tensor, TensorError};

/// Central-difference gradient estimate of a scalar function, coordinate
/// by coordinate: `(f(x + h e_k) - f(x - h e_k)) / 2h`.
pub fn finite_diff_grad<F>(f: F, x: &Tensor<f64>, h: f64) -> Result<Tensor<f64>, TensorError>
where
    F: Fn(&Tensor<f64>) -> Result<f64, TensorError>,
{
    let mut grad = Tensor::zeros(x.shape.clone());
    for k in 0..x.numel() {
        let mut xp = x.clone();
        xp.data[k] += h;
        let fp = f(&xp)?;
        let mut xm = x.clone();
        xm.data[k] -= h;
        let fm = f(&xm)?;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(TensorError::NonFinite {
                op: "finite_diff_grad",
            });
        }
        grad.data[k] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

#[derive(Debug, Clone)]
pub struct CoordReport {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
    pub pass: bool,
}

#[derive(Debug, Clone)]
pub struct GradReport {
    pub coords: Vec<CoordReport>,
    pub max_rel_err: f64,
    pub pass: bool,
}

impl GradReport {
    pub fn failing(&self) -> Vec<&CoordReport> {
        self.coords.iter().filter(|c| !c.pass).collect()
    }
}

/// Compare the tape gradient of `f` at `x` against central differences.
///
/// `f` builds a scalar graph from a single leaf; it is re-invoked on a
/// fresh tape for every perturbed evaluation, so the analytic and numeric
/// routes share one definition but stay independent computations.
/// Pass criterion per coordinate: `|a - n| / max(1, |n|) <= rel_tol`.
pub fn check_gradients<F>(f: F, x: &Tensor<f64>, rel_tol: f64) -> Result<GradReport, TensorError>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var, TensorError>,
{
    let mut tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let root = f(&mut tape, leaf)?;
    tape.backward(root)?;
    let analytic = tape
        .grad(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape.clone()));

    let eval = |pt: &Tensor<f64>| -> Result<f64, TensorError> {
        let mut t = Tape::new();
        let l = t.leaf(pt.clone());
        let r = f(&mut t, l)?;
        if !t.value(r).is_scalar() {
            return Err(TensorError::NonScalarRoot {
                shape: t.value(r).shape.clone(),
            });
        }
        Ok(t.value(r).scalar_value())
    };
    let numeric = finite_diff_grad(eval, x, 1e-5)?;

    let mut coords = Vec::with_capacity(x.numel());
    let mut max_rel_err = 0.0f64;
    for k in 0..x.numel() {
        let a = analytic.data[k];
        let n = numeric.data[k];
        let rel_err = (a - n).abs() / n.abs().max(1.0);
        max_rel_err = max_rel_err.max(rel_err);
        coords.push(CoordReport {
            index: k,
            analytic: a,
            numeric: n,
            rel_err,
            pass: rel_err <= rel_tol,
        });
    }
    let pass = coords.iter().all(|c| c.pass);
    Ok(GradReport {
        coords,
        max_rel_err,
        pass,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_sum_of_squares() {
        let x = Tensor::from_f64_slice(vec![3], &[1., 2., 3.]).unwrap();
        let g = finite_diff_grad(
            |t| Ok(t.data.iter().map(|v| v * v).sum()),
            &x,
            1e-5,
        )
        .unwrap();
        for (got, want) in g.data.iter().zip(&[2., 4., 6.]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_constant_is_zero() {
        let x = Tensor::from_f64_slice(vec![4], &[1., -1., 2., 0.]).unwrap();
        let g = finite_diff_grad(|_| Ok(7.5), &x, 1e-5).unwrap();
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn corrupted_gradient_names_coordinate() {
        // A graph whose analytic grad is deliberately wrong in one spot:
        // f(x) = sum(x^2) but with an extra +1*x[1] sneaked in analytically
        // via a mismatched evaluation path is hard to fake through the
        // shared-closure API, so instead corrupt the comparison directly.
        let x = Tensor::from_f64_slice(vec![3], &[0.5, -1.0, 2.0]).unwrap();
        let mut report = check_gradients(
            |tape, v| {
                let sq = tape.mul(v, v)?;
                tape.sum(sq)
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(report.pass);
        // inject a fault into coordinate 1 and re-grade
        report.coords[1].analytic += 1.0;
        for c in report.coords.iter_mut() {
            c.rel_err = (c.analytic - c.numeric).abs() / c.numeric.abs().max(1.0);
            c.pass = c.rel_err <= 1e-6;
        }
        let failing: Vec<usize> = report
            .coords
            .iter()
            .filter(|c| !c.pass)
            .map(|c| c.index)
            .collect();
        assert_eq!(failing, vec![1]);
    }
}
