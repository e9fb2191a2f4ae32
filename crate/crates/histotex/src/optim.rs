//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Per-parameter first/second moment estimates plus the shared step
/// counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<Elem>>,
    v: Vec<Vec<Elem>>,
    step: u64,
}

impl AdamState {
    /// Zero state matching a parameter list.
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }
}

/// One in-place Adam update over a parameter list.
///
/// `m <- b1 m + (1-b1) g`, `v <- b2 v + (1-b2) g^2`, then the
/// bias-corrected update `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
pub fn adam_step(
    params: &mut [Tensor],
    grads: &[Vec<Elem>],
    state: &mut AdamState,
    lr: Elem,
    betas: (Elem, Elem),
    eps: Elem,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Usage(format!(
            "adam_step size mismatch: {} params, {} grads, {} state slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let (b1, b2) = betas;
    state.step += 1;
    let t = state.step as i32;
    let corr1 = 1.0 - b1.powi(t);
    let corr2 = 1.0 - b2.powi(t);
    for ((p, g), (m, v)) in params
        .iter_mut()
        .zip(grads)
        .zip(state.m.iter_mut().zip(state.v.iter_mut()))
    {
        if p.numel() != g.len() {
            return Err(Error::Usage(format!(
                "adam_step gradient length {} does not match parameter {}",
                g.len(),
                p.numel()
            )));
        }
        let pd = p.data_mut();
        for i in 0..g.len() {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let m_hat = m[i] / corr1;
            let v_hat = v[i] / corr2;
            pd[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const BETAS: (Elem, Elem) = (0.9, 0.999);
    const EPS: Elem = 1e-8;

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = vec![Tensor::from_slice(&[1.0, -2.0, 3.0])];
        let grads = vec![vec![0.0; 3]];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &grads, &mut state, 0.1, BETAS, EPS).unwrap();
        assert_eq!(params[0].data(), &[1.0, -2.0, 3.0]);
    }

    #[test]
    fn first_step_matches_textbook_formula() {
        // From zero state, one step with gradient g gives
        // delta = -lr * g / (|g| + eps): bias correction cancels exactly.
        let g = 0.37;
        let lr = 0.01;
        let mut params = vec![Tensor::scalar(2.0)];
        let mut state = AdamState::new(&params);
        adam_step(&mut params, &[vec![g]], &mut state, lr, BETAS, EPS).unwrap();
        let expect = 2.0 - lr * g / ((g as Elem).abs() + EPS);
        assert!((params[0].data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn constant_gradient_update_approaches_lr_sign() {
        // With a fixed gradient the bias-corrected ratio m_hat/sqrt(v_hat)
        // tends to sign(g), so the per-step move tends to lr*sign(g).
        let g = -0.01;
        let lr = 0.004;
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let mut prev = 0.0;
        let mut last_delta = 0.0;
        for _ in 0..5000 {
            adam_step(&mut params, &[vec![g]], &mut state, lr, BETAS, EPS).unwrap();
            last_delta = params[0].data()[0] - prev;
            prev = params[0].data()[0];
        }
        // moving against the gradient: delta = +lr within 1%.
        assert!(
            (last_delta - lr).abs() < 0.01 * lr,
            "late-step delta {} vs lr {}",
            last_delta,
            lr
        );
    }

    #[test]
    fn state_shape_mismatch_is_an_error() {
        let mut params = vec![Tensor::scalar(0.0)];
        let mut state = AdamState::new(&params);
        let bad = vec![vec![0.0, 1.0]];
        assert!(adam_step(&mut params, &bad, &mut state, 0.1, BETAS, EPS).is_err());
    }
}
