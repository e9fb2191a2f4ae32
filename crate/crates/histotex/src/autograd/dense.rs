//! Affine map, softmax cross-entropy loss, and batch normalization.

use super::{buf, shape4, Node, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

pub(crate) fn linear_forward(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let is = input.shape();
    let ws = weight.shape();
    if is.len() != 2 || ws.len() != 2 {
        return Err(Error::Dim(format!(
            "linear expects 2-D input and weight, got {:?} and {:?}",
            is, ws
        )));
    }
    let (n, in_f) = (is[0], is[1]);
    let (out_f, w_in) = (ws[0], ws[1]);
    if w_in != in_f {
        return Err(Error::Dim(format!(
            "linear inner dimensions disagree: input {} vs weight {}",
            in_f, w_in
        )));
    }
    if bias.shape() != [out_f] {
        return Err(Error::Dim(format!(
            "linear bias must have shape [{}], got {:?}",
            out_f,
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, out_f]);
    let id = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for b in 0..n {
        let irow = &id[b * in_f..][..in_f];
        for o in 0..out_f {
            let wrow = &wd[o * in_f..][..in_f];
            let mut acc = bd[o];
            for (iv, wv) in irow.iter().zip(wrow) {
                acc += iv * wv;
            }
            od[b * out_f + o] = acc;
        }
    }
    Ok(out)
}

pub(crate) fn linear_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    input: Var,
    weight: Var,
    bias: Var,
) {
    let is = nodes[input.0].value.shape();
    let (n, in_f) = (is[0], is[1]);
    let out_f = nodes[weight.0].value.shape()[0];

    if nodes[bias.0].needs_grad {
        let gb = buf(grads, nodes, bias);
        for b in 0..n {
            for o in 0..out_f {
                gb[o] += g[b * out_f + o];
            }
        }
    }
    if nodes[weight.0].needs_grad {
        let id = nodes[input.0].value.data();
        let gw = buf(grads, nodes, weight);
        for b in 0..n {
            let irow = &id[b * in_f..][..in_f];
            for o in 0..out_f {
                let gv = g[b * out_f + o];
                if gv == 0.0 {
                    continue;
                }
                let gw_row = &mut gw[o * in_f..][..in_f];
                for (gwv, iv) in gw_row.iter_mut().zip(irow) {
                    *gwv += gv * iv;
                }
            }
        }
    }
    if nodes[input.0].needs_grad {
        let wd = nodes[weight.0].value.data().to_vec();
        let gi = buf(grads, nodes, input);
        for b in 0..n {
            let gi_row = &mut gi[b * in_f..][..in_f];
            for o in 0..out_f {
                let gv = g[b * out_f + o];
                if gv == 0.0 {
                    continue;
                }
                let wrow = &wd[o * in_f..][..in_f];
                for (giv, wv) in gi_row.iter_mut().zip(wrow) {
                    *giv += gv * wv;
                }
            }
        }
    }
}

/// Numerically stabilized softmax cross-entropy; returns the scalar loss
/// and the softmax probabilities (saved for backward).
pub(crate) fn sce_forward(logits: &Tensor, labels: &[usize]) -> Result<(Tensor, Vec<Elem>)> {
    let s = logits.shape();
    if s.len() != 2 {
        return Err(Error::Dim(format!("softmax_cross_entropy expects 2-D logits, got {:?}", s)));
    }
    let (n, k) = (s[0], s[1]);
    if labels.len() != n {
        return Err(Error::Input(format!(
            "expected {} labels for a batch of {}, got {}",
            n,
            n,
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Input(format!("label {} out of range for {} classes", bad, k)));
    }
    let ld = logits.data();
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for b in 0..n {
        let row = &ld[b * k..][..k];
        let m = row.iter().cloned().fold(Elem::NEG_INFINITY, Elem::max);
        let mut denom = 0.0;
        for j in 0..k {
            let e = (row[j] - m).exp();
            probs[b * k + j] = e;
            denom += e;
        }
        for j in 0..k {
            probs[b * k + j] /= denom;
        }
        let lse = denom.ln() + m;
        total += lse - row[labels[b]];
    }
    Ok((Tensor::scalar(total / n as Elem), probs))
}

pub(crate) fn sce_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    logits: Var,
    labels: &[usize],
    probs: &[Elem],
) {
    if !nodes[logits.0].needs_grad {
        return;
    }
    let k = nodes[logits.0].value.shape()[1];
    let n = labels.len();
    let scale = g[0] / n as Elem;
    let gl = buf(grads, nodes, logits);
    for b in 0..n {
        for j in 0..k {
            let onehot = if j == labels[b] { 1.0 } else { 0.0 };
            gl[b * k + j] += scale * (probs[b * k + j] - onehot);
        }
    }
}

type BnTrainOut = (Tensor, Vec<Elem>, Vec<Elem>, Vec<Elem>, Vec<Elem>);

/// Batch-statistics normalization over (batch, height, width) per channel.
/// Returns (output, xhat, inv_std, batch_mean, batch_var); variance is the
/// biased estimate.
pub(crate) fn bn_train_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: Elem,
) -> Result<BnTrainOut> {
    let [n, c, h, w] = shape4(x, "batch_norm")?;
    check_bn_params(c, gamma, beta)?;
    let m = (n * h * w) as Elem;
    let plane = h * w;
    let xd = x.data();

    let mut mean = vec![0.0; c];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            let mut s = 0.0;
            for i in 0..plane {
                s += xd[off + i];
            }
            mean[ci] += s;
        }
    }
    for v in mean.iter_mut() {
        *v /= m;
    }
    let mut var = vec![0.0; c];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            let mu = mean[ci];
            let mut s = 0.0;
            for i in 0..plane {
                let d = xd[off + i] - mu;
                s += d * d;
            }
            var[ci] += s;
        }
    }
    for v in var.iter_mut() {
        *v /= m;
    }
    let inv_std: Vec<Elem> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

    let (out, xhat) = bn_apply(x, gamma, beta, &mean, &inv_std);
    Ok((out, xhat, inv_std, mean, var))
}

pub(crate) fn bn_eval_forward(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[Elem],
    var: &[Elem],
    eps: Elem,
) -> Result<(Tensor, Vec<Elem>, Vec<Elem>)> {
    let [_, c, _, _] = shape4(x, "batch_norm")?;
    check_bn_params(c, gamma, beta)?;
    if mean.len() != c || var.len() != c {
        return Err(Error::Dim(format!(
            "batch_norm running stats must have length {}, got {}/{}",
            c,
            mean.len(),
            var.len()
        )));
    }
    let inv_std: Vec<Elem> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
    let (out, xhat) = bn_apply(x, gamma, beta, mean, &inv_std);
    Ok((out, xhat, inv_std))
}

fn check_bn_params(c: usize, gamma: &Tensor, beta: &Tensor) -> Result<()> {
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::Dim(format!(
            "batch_norm gamma/beta must have shape [{}], got {:?}/{:?}",
            c,
            gamma.shape(),
            beta.shape()
        )));
    }
    Ok(())
}

fn bn_apply(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    mean: &[Elem],
    inv_std: &[Elem],
) -> (Tensor, Vec<Elem>) {
    let s = x.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let xd = x.data();
    let gd = gamma.data();
    let bd = beta.data();
    let mut out = Tensor::zeros(s);
    let mut xhat = vec![0.0; xd.len()];
    let od = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            let (mu, is, ga, be) = (mean[ci], inv_std[ci], gd[ci], bd[ci]);
            for i in 0..plane {
                let xh = (xd[off + i] - mu) * is;
                xhat[off + i] = xh;
                od[off + i] = ga * xh + be;
            }
        }
    }
    (out, xhat)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn bn_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    x: Var,
    gamma: Var,
    beta: Var,
    train: bool,
    xhat: &[Elem],
    inv_std: &[Elem],
) {
    let s = nodes[x.0].value.shape();
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    let m = (n * plane) as Elem;

    // Per-channel sums of g and g*xhat, needed for dgamma/dbeta and, in
    // train mode, the statistics terms of dx.
    let mut sum_g = vec![0.0; c];
    let mut sum_gx = vec![0.0; c];
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            let mut sg = 0.0;
            let mut sgx = 0.0;
            for i in 0..plane {
                sg += g[off + i];
                sgx += g[off + i] * xhat[off + i];
            }
            sum_g[ci] += sg;
            sum_gx[ci] += sgx;
        }
    }

    if nodes[beta.0].needs_grad {
        let gb = buf(grads, nodes, beta);
        for ci in 0..c {
            gb[ci] += sum_g[ci];
        }
    }
    if nodes[gamma.0].needs_grad {
        let gg = buf(grads, nodes, gamma);
        for ci in 0..c {
            gg[ci] += sum_gx[ci];
        }
    }
    if nodes[x.0].needs_grad {
        let gd = nodes[gamma.0].value.data().to_vec();
        let gx = buf(grads, nodes, x);
        for b in 0..n {
            for ci in 0..c {
                let off = (b * c + ci) * plane;
                let coeff = gd[ci] * inv_std[ci];
                if train {
                    let mg = sum_g[ci] / m;
                    let mgx = sum_gx[ci] / m;
                    for i in 0..plane {
                        gx[off + i] += coeff * (g[off + i] - mg - xhat[off + i] * mgx);
                    }
                } else {
                    for i in 0..plane {
                        gx[off + i] += coeff * g[off + i];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn linear_identity() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![3.0, 4.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);
    }

    #[test]
    fn linear_row_example() {
        // weight [[1,1]], bias [1], input [[2,3]] -> [[6]]
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![2.0, 3.0]).unwrap(), false);
        let w = tape.leaf(Tensor::new(&[1, 2], vec![1.0, 1.0]).unwrap(), false);
        let b = tape.leaf(Tensor::from_slice(&[1.0]), false);
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);
    }

    #[test]
    fn linear_dim_mismatch() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
        let w = tape.leaf(Tensor::zeros(&[2, 4]), false);
        let b = tape.leaf(Tensor::zeros(&[2]), false);
        assert!(matches!(tape.linear(x, w, b), Err(Error::Dim(_))));
    }

    #[test]
    fn sce_uniform_logits() {
        // equal logits over K=4 -> loss = ln 4
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 4]), false);
        let y = tape.softmax_cross_entropy(x, &[2]).unwrap();
        assert!((tape.value(y).data()[0] - (4.0 as Elem).ln()).abs() < 1e-12);
    }

    #[test]
    fn sce_dominant_logit() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 2], vec![100.0, 0.0]).unwrap(), false);
        let y = tape.softmax_cross_entropy(x, &[0]).unwrap();
        assert!(tape.value(y).data()[0].abs() < 1e-12);
    }

    #[test]
    fn sce_label_out_of_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[1, 3]), false);
        assert!(matches!(tape.softmax_cross_entropy(x, &[3]), Err(Error::Input(_))));
    }

    #[test]
    fn bn_train_normalizes_batch() {
        let mut tape = Tape::new();
        let x = tape.leaf(
            Tensor::new(&[2, 1, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            false,
        );
        let gamma = tape.leaf(Tensor::ones(&[1]), false);
        let beta = tape.leaf(Tensor::zeros(&[1]), false);
        let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, 1e-5).unwrap();
        assert!((mean[0] - 2.5).abs() < 1e-12);
        assert!((var[0] - 1.25).abs() < 1e-12);
        let od = tape.value(y).data();
        let s: Elem = od.iter().sum();
        assert!(s.abs() < 1e-9, "normalized output should have zero mean");
    }

    #[test]
    fn bn_eval_uses_given_stats() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 1, 2], 3.0), false);
        let gamma = tape.leaf(Tensor::ones(&[1]), false);
        let beta = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.batch_norm_eval(x, gamma, beta, &[1.0], &[4.0], 0.0).unwrap();
        // (3 - 1)/sqrt(4) = 1
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }
}
