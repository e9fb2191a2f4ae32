//! Finite-difference gradient checking.

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Compare the tape's analytic gradients of a scalar-valued function
/// against central finite differences, coordinate by coordinate, and return
/// the maximum relative error.
///
/// The relative error uses a `max(|analytic|, |numeric|, 1e-8)` denominator
/// so near-zero gradients do not blow up the ratio. `f` is called many
/// times and must be a pure function of its inputs.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: Elem) -> Result<Elem>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if eps <= 0.0 {
        return Err(Error::Usage("grad_check eps must be positive".into()));
    }

    // Analytic pass.
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.value(root).numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check function must return a scalar, got shape {:?}",
            tape.value(root).shape()
        )));
    }
    let y0 = tape.value(root).data()[0];
    if !y0.is_finite() {
        return Err(Error::Numeric("grad_check function produced a non-finite value".into()));
    }
    tape.backward(root)?;
    let analytic: Vec<Vec<Elem>> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| tape.grad(*v).map(<[Elem]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let eval = |points: &[Tensor]| -> Result<Elem> {
        let mut t = Tape::new();
        let vs: Vec<Var> = points.iter().map(|x| t.leaf(x.clone(), false)).collect();
        let r = f(&mut t, &vs)?;
        let y = t.value(r).data()[0];
        if !y.is_finite() {
            return Err(Error::Numeric(
                "grad_check function produced a non-finite value".into(),
            ));
        }
        Ok(y)
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut max_rel: Elem = 0.0;
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + eps;
            let yp = eval(&work)?;
            work[i].data_mut()[j] = orig - eps;
            let ym = eval(&work)?;
            work[i].data_mut()[j] = orig;
            let numeric = (yp - ym) / (2.0 * eps);
            let a = analytic[i][j];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            max_rel = max_rel.max((a - numeric).abs() / denom);
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        // d(mean(3x))/dx is constant; central differences are exact for
        // linear maps up to roundoff.
        let x = Tensor::from_slice(&[0.3, -1.2, 2.0]);
        let err = grad_check(
            |tape, vars| {
                let y = tape.scalar_mul(vars[0], 3.0);
                Ok(tape.mean_all(y))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-10, "linear map error {}", err);
    }

    #[test]
    fn rbf_block_gradients_check_out() {
        // exp(-g^2 (x - mu)^2) for scalar x, mu, g.
        let x = Tensor::scalar(0.37);
        let mu = Tensor::scalar(0.52);
        let ga = Tensor::scalar(1.9);
        let err = grad_check(
            |tape, vars| {
                let d = tape.sub(vars[0], vars[1])?;
                let d2 = tape.square(d);
                let g2 = tape.square(vars[2]);
                let ng2 = tape.negate(g2);
                let e = tape.mul(ng2, d2)?;
                let y = tape.exp(e);
                Ok(tape.mean_all(y))
            },
            &[x, mu, ga],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "rbf block error {}", err);
    }

    #[test]
    fn corrupted_backward_is_detected() {
        let x = Tensor::from_slice(&[0.5, -0.25, 1.5]);
        let err = grad_check(
            |tape, vars| {
                let y = tape.exp_faulty(vars[0]);
                Ok(tape.mean_all(y))
            },
            &[x],
            1e-6,
        )
        .unwrap();
        assert!(err > 1e-2, "fault injection must be detected, got {}", err);
    }

    #[test]
    fn non_finite_output_is_an_error() {
        let x = Tensor::scalar(1.0);
        let res = grad_check(
            |tape, vars| {
                // ln-free way to a NaN-ish blowup: exp(square) overflows at
                // large inputs; force it with a scalar_mul.
                let y = tape.scalar_mul(vars[0], Elem::MAX);
                let z = tape.square(y);
                Ok(tape.mean_all(z))
            },
            &[x],
            1e-6,
        );
        assert!(matches!(res, Err(Error::Numeric(_))));
    }

    #[test]
    fn square_sub_chain_matches_finite_differences() {
        let x = Tensor::from_slice(&[0.1, 0.9, -0.4, 0.7]);
        let c = Tensor::from_slice(&[0.5, 0.5, 0.5, 0.5]);
        let err = grad_check(
            |tape, vars| {
                let d = tape.sub(vars[0], vars[1])?;
                let s = tape.square(d);
                Ok(tape.mean_all(s))
            },
            &[x, c],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-7, "square-sub chain error {}", err);
    }
}
