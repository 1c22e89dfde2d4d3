//! Central finite-difference verification of analytic gradients.
//!
//! Meaningful only in f64: the h^2 truncation error of central differences
//! has to stay above f32 rounding noise for the comparison to say anything.

use super::tape::{Tape, Var};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradReport {
    pub pass: bool,
    pub tol: f64,
    pub max_rel_err: f64,
    /// (tensor index, element index) of the worst disagreement.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
}

impl std::fmt::Display for GradReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} max_rel_err={:.3e} (tol {:.1e}) at tensor {} element {}: analytic {:.6e} vs numeric {:.6e}",
            if self.pass { "pass" } else { "FAIL" },
            self.max_rel_err,
            self.tol,
            self.worst.0,
            self.worst.1,
            self.analytic_at_worst,
            self.numeric_at_worst
        )
    }
}

/// Checks `f`'s gradient w.r.t. a single input tensor.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, h: f64, tol: f64) -> GradReport
where
    F: Fn(&mut Tape<f64>, Var) -> Var,
{
    grad_check_multi(|tape, vars| f(tape, vars[0]), &[x.clone()], h, tol)
}

/// Checks `f`'s gradient w.r.t. every element of every input tensor, using
/// central differences with step `h`. Relative error uses the denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check_multi<F>(f: F, xs: &[Tensor<f64>], h: f64, tol: f64) -> GradReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    // Analytic gradients in one pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|x| tape.param(x.clone())).collect();
    let loss = f(&mut tape, &vars);
    tape.backward(loss);
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let eval = |inputs: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let loss = f(&mut tape, &vars);
        tape.value(loss).item()
    };

    let mut report = GradReport {
        pass: true,
        tol,
        max_rel_err: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
    };
    let mut work: Vec<Tensor<f64>> = xs.to_vec();
    for ti in 0..xs.len() {
        for ei in 0..xs[ti].len() {
            let orig = work[ti].data()[ei];
            work[ti].data_mut()[ei] = orig + h;
            let plus = eval(&work);
            work[ti].data_mut()[ei] = orig - h;
            let minus = eval(&work);
            work[ti].data_mut()[ei] = orig;

            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ti].data()[ei];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > report.max_rel_err {
                report.max_rel_err = rel;
                report.worst = (ti, ei);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.pass = report.max_rel_err <= tol;
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds;

    #[test]
    fn gelu_sum_passes() {
        let mut rng = seeds::stream(1, 50);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let report = grad_check(
            |tape, x| {
                let y = tape.gelu(x);
                tape.sum_all(y)
            },
            &x,
            1e-5,
            1e-4,
        );
        assert!(report.pass, "{report}");
    }

    #[test]
    fn projection_gradient_is_exactly_a_basis_vector() {
        // f = x[0][0] via slice_rows + mul with a one-hot constant.
        let x = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]);
        let mut tape = Tape::new();
        let v = tape.param(x);
        let first_row = tape.slice_rows(v, 0, 1);
        let pick = tape.constant(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]));
        let masked = tape.mul(first_row, pick);
        let loss = tape.sum_all(masked);
        tape.backward(loss);
        assert_eq!(tape.grad(v).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_chain_matches_central_differences() {
        let mut rng = seeds::stream(2, 50);
        let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let b = Tensor::randn(&[4, 5], 1.0, &mut rng);
        let c = Tensor::randn(&[5, 2], 1.0, &mut rng);
        let report = grad_check_multi(
            |tape, vars| {
                let ab = tape.matmul(vars[0], vars[1]);
                let abc = tape.matmul(ab, vars[2]);
                tape.sum_all(abc)
            },
            &[a, b, c],
            1e-5,
            1e-6,
        );
        assert!(report.pass, "{report}");
    }
}
