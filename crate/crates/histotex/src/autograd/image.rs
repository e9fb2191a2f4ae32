//! Convolution and pooling kernels for the tape.
//!
//! Plain nested loops over `[batch, channel, height, width]` buffers with a
//! fast path for fully in-bounds kernel rows. Loop order is fixed, so
//! results are bit-identical across runs.

use super::{buf, shape4, Node, PoolKind, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Output spatial extent of a strided window sweep.
pub(crate) fn out_extent(input: usize, pad: usize, kernel: usize, stride: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

pub(crate) fn conv2d_forward(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Result<Tensor> {
    let [n, c_in, h, w] = shape4(input, "conv2d input")?;
    let [f, wc, kh, kw] = shape4(weight, "conv2d weight")?;
    if wc != c_in {
        return Err(Error::Dim(format!(
            "conv2d channel mismatch: input has {}, weight expects {}",
            c_in, wc
        )));
    }
    if bias.shape() != [f] {
        return Err(Error::Dim(format!(
            "conv2d bias must have shape [{}], got {:?}",
            f,
            bias.shape()
        )));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Config("conv2d stride must be positive".into()));
    }
    let (ph, pw) = padding;
    if kh > h + 2 * ph || kw > w + 2 * pw {
        return Err(Error::Dim(format!(
            "conv2d kernel {}x{} exceeds padded input {}x{}",
            kh,
            kw,
            h + 2 * ph,
            w + 2 * pw
        )));
    }
    let oh = out_extent(h, ph, kh, stride.0);
    let ow = out_extent(w, pw, kw, stride.1);
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!(
            "conv2d configuration yields an empty {}x{} output",
            oh, ow
        )));
    }

    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    let id = input.data();
    let wd = weight.data();
    let bd = bias.data();
    let od = out.data_mut();
    for b in 0..n {
        for fo in 0..f {
            let b0 = bd[fo];
            for oy in 0..oh {
                let y0 = (oy * stride.0) as isize - ph as isize;
                for ox in 0..ow {
                    let x0 = (ox * stride.1) as isize - pw as isize;
                    let mut acc = b0;
                    for ci in 0..c_in {
                        let in_ch = (b * c_in + ci) * h;
                        let w_ch = (fo * c_in + ci) * kh;
                        for ky in 0..kh {
                            let y = y0 + ky as isize;
                            if y < 0 || y >= h as isize {
                                continue;
                            }
                            let irow = &id[(in_ch + y as usize) * w..][..w];
                            let wrow = &wd[(w_ch + ky) * kw..][..kw];
                            if x0 >= 0 && x0 + kw as isize <= w as isize {
                                let seg = &irow[x0 as usize..x0 as usize + kw];
                                for (iv, wv) in seg.iter().zip(wrow) {
                                    acc += iv * wv;
                                }
                            } else {
                                for (kx, wv) in wrow.iter().enumerate() {
                                    let x = x0 + kx as isize;
                                    if x >= 0 && x < w as isize {
                                        acc += irow[x as usize] * wv;
                                    }
                                }
                            }
                        }
                    }
                    od[((b * f + fo) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    input: Var,
    weight: Var,
    bias: Var,
    stride: (usize, usize),
    padding: (usize, usize),
) {
    let ishape = nodes[input.0].value.shape();
    let (n, c_in, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let wshape = nodes[weight.0].value.shape();
    let (f, kh, kw) = (wshape[0], wshape[2], wshape[3]);
    let (ph, pw) = padding;
    let oh = out_extent(h, ph, kh, stride.0);
    let ow = out_extent(w, pw, kw, stride.1);

    if nodes[bias.0].needs_grad {
        let gb = buf(grads, nodes, bias);
        for b in 0..n {
            for fo in 0..f {
                let off = (b * f + fo) * oh * ow;
                let mut s = 0.0;
                for i in 0..oh * ow {
                    s += g[off + i];
                }
                gb[fo] += s;
            }
        }
    }

    if nodes[weight.0].needs_grad {
        let id = nodes[input.0].value.data();
        let mut gw_local = vec![0.0; nodes[weight.0].value.numel()];
        for b in 0..n {
            for fo in 0..f {
                for oy in 0..oh {
                    let y0 = (oy * stride.0) as isize - ph as isize;
                    for ox in 0..ow {
                        let x0 = (ox * stride.1) as isize - pw as isize;
                        let gv = g[((b * f + fo) * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let in_ch = (b * c_in + ci) * h;
                            let w_ch = (fo * c_in + ci) * kh;
                            for ky in 0..kh {
                                let y = y0 + ky as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let irow = &id[(in_ch + y as usize) * w..][..w];
                                let gw_row = &mut gw_local[(w_ch + ky) * kw..][..kw];
                                for (kx, gw) in gw_row.iter_mut().enumerate() {
                                    let x = x0 + kx as isize;
                                    if x >= 0 && x < w as isize {
                                        *gw += gv * irow[x as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let gw = buf(grads, nodes, weight);
        for i in 0..gw.len() {
            gw[i] += gw_local[i];
        }
    }

    if nodes[input.0].needs_grad {
        let wd = nodes[weight.0].value.data().to_vec();
        let gi = buf(grads, nodes, input);
        for b in 0..n {
            for fo in 0..f {
                for oy in 0..oh {
                    let y0 = (oy * stride.0) as isize - ph as isize;
                    for ox in 0..ow {
                        let x0 = (ox * stride.1) as isize - pw as isize;
                        let gv = g[((b * f + fo) * oh + oy) * ow + ox];
                        if gv == 0.0 {
                            continue;
                        }
                        for ci in 0..c_in {
                            let in_ch = (b * c_in + ci) * h;
                            let w_ch = (fo * c_in + ci) * kh;
                            for ky in 0..kh {
                                let y = y0 + ky as isize;
                                if y < 0 || y >= h as isize {
                                    continue;
                                }
                                let gi_row = &mut gi[(in_ch + y as usize) * w..][..w];
                                let wrow = &wd[(w_ch + ky) * kw..][..kw];
                                for (kx, wv) in wrow.iter().enumerate() {
                                    let x = x0 + kx as isize;
                                    if x >= 0 && x < w as isize {
                                        gi_row[x as usize] += gv * wv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Windowed max/average pooling. No padding: the kernel must fit.
pub(crate) fn pool2d_forward(
    input: &Tensor,
    kind: PoolKind,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = shape4(input, "pool2d")?;
    let (kh, kw) = kernel;
    if kh == 0 || kw == 0 || stride.0 == 0 || stride.1 == 0 {
        return Err(Error::Config("pool2d kernel and stride must be positive".into()));
    }
    if kh > h || kw > w {
        return Err(Error::Config(format!(
            "pool2d kernel {}x{} larger than input {}x{}",
            kh, kw, h, w
        )));
    }
    let oh = (h - kh) / stride.0 + 1;
    let ow = (w - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::new();
    if kind == PoolKind::Max {
        argmax.resize(n * c * oh * ow, 0usize);
    }
    let id = input.data();
    let od = out.data_mut();
    let count = (kh * kw) as Elem;
    for b in 0..n {
        for ci in 0..c {
            let base = (b * c + ci) * h;
            for oy in 0..oh {
                let y0 = oy * stride.0;
                for ox in 0..ow {
                    let x0 = ox * stride.1;
                    let oidx = ((b * c + ci) * oh + oy) * ow + ox;
                    match kind {
                        PoolKind::Average => {
                            let mut s = 0.0;
                            for ky in 0..kh {
                                let row = &id[(base + y0 + ky) * w + x0..][..kw];
                                for v in row {
                                    s += v;
                                }
                            }
                            od[oidx] = s / count;
                        }
                        PoolKind::Max => {
                            // Ties break to the first index in row-major scan.
                            let mut best = Elem::NEG_INFINITY;
                            let mut best_idx = 0usize;
                            for ky in 0..kh {
                                let roff = (base + y0 + ky) * w + x0;
                                for kx in 0..kw {
                                    let v = id[roff + kx];
                                    if v > best {
                                        best = v;
                                        best_idx = roff + kx;
                                    }
                                }
                            }
                            od[oidx] = best;
                            argmax[oidx] = best_idx;
                        }
                    }
                }
            }
        }
    }
    Ok((out, argmax))
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn pool2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    out_id: usize,
    input: Var,
    kind: PoolKind,
    kernel: (usize, usize),
    stride: (usize, usize),
    argmax: &[usize],
) {
    if !nodes[input.0].needs_grad {
        return;
    }
    let ishape = nodes[input.0].value.shape();
    let (n, c, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
    let oshape = nodes[out_id].value.shape();
    let (oh, ow) = (oshape[2], oshape[3]);
    let (kh, kw) = kernel;
    let gi = buf(grads, nodes, input);
    match kind {
        PoolKind::Max => {
            for (oidx, &src) in argmax.iter().enumerate() {
                gi[src] += g[oidx];
            }
        }
        PoolKind::Average => {
            let share = 1.0 / (kh * kw) as Elem;
            for b in 0..n {
                for ci in 0..c {
                    let base = (b * c + ci) * h;
                    for oy in 0..oh {
                        let y0 = oy * stride.0;
                        for ox in 0..ow {
                            let x0 = ox * stride.1;
                            let gv = g[((b * c + ci) * oh + oy) * ow + ox] * share;
                            for ky in 0..kh {
                                let roff = (base + y0 + ky) * w + x0;
                                for kx in 0..kw {
                                    gi[roff + kx] += gv;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn gap_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = shape4(input, "global_average_pool")?;
    if h == 0 || w == 0 {
        return Err(Error::Dim("global_average_pool needs H, W >= 1".into()));
    }
    let mut out = Tensor::zeros(&[n, c]);
    let plane = h * w;
    let id = input.data();
    let od = out.data_mut();
    for b in 0..n {
        for ci in 0..c {
            let off = (b * c + ci) * plane;
            let mut s = 0.0;
            for i in 0..plane {
                s += id[off + i];
            }
            od[b * c + ci] = s / plane as Elem;
        }
    }
    Ok(out)
}

pub(crate) fn gap_backward(
    nodes: &[Node],
    grads: &mut [Option<Vec<Elem>>],
    g: &[Elem],
    input: Var,
) {
    if !nodes[input.0].needs_grad {
        return;
    }
    let ishape = nodes[input.0].value.shape();
    let (n, c, plane) = (ishape[0], ishape[1], ishape[2] * ishape[3]);
    let gi = buf(grads, nodes, input);
    for b in 0..n {
        for ci in 0..c {
            let share = g[b * c + ci] / plane as Elem;
            let off = (b * c + ci) * plane;
            for i in 0..plane {
                gi[off + i] += share;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;

    #[test]
    fn conv_identity_kernel_scales() {
        // 1x1x3x3 ones, 1x1x1x1 weight [2], bias 0 -> 3x3 of twos.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let w = tape.leaf(Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap(), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, w, b, (1, 1), (0, 0)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_box_sum() {
        // 1x1x4x4 input, 2x2 all-ones kernel, stride 2 -> each output is the
        // sum of its 2x2 block.
        let data: Vec<Elem> = (0..16).map(|v| v as Elem).collect();
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 4, 4], data).unwrap(), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        let y = tape.conv2d(x, w, b, (2, 2), (0, 0)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
        // block sums: (0+1+4+5), (2+3+6+7), (8+9+12+13), (10+11+14+15)
        assert_eq!(tape.value(y).data(), &[10.0, 18.0, 42.0, 50.0]);
    }

    #[test]
    fn conv_shape_mismatch_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 2, 4, 4]), false);
        let w = tape.leaf(Tensor::ones(&[1, 3, 2, 2]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(matches!(tape.conv2d(x, w, b, (1, 1), (0, 0)), Err(Error::Dim(_))));
    }

    #[test]
    fn conv_oversized_kernel_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 3, 3]), false);
        let w = tape.leaf(Tensor::ones(&[1, 1, 5, 5]), false);
        let b = tape.leaf(Tensor::zeros(&[1]), false);
        assert!(tape.conv2d(x, w, b, (1, 1), (0, 0)).is_err());
    }

    #[test]
    fn avg_pool_full_window_of_constant() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 3, 3], 2.5), false);
        let y = tape.pool2d(x, PoolKind::Average, (3, 3), (1, 1)).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert!((tape.value(y).data()[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        // max over [[1,2],[3,4]] -> 4, gradient lands on position (1,1).
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(), true);
        let y = tape.pool2d(x, PoolKind::Max, (2, 2), (1, 1)).unwrap();
        assert_eq!(tape.value(y).data(), &[4.0]);
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn max_pool_ties_break_to_first() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 7.0), true);
        let y = tape.pool2d(x, PoolKind::Max, (2, 2), (1, 1)).unwrap();
        let m = tape.mean_all(y);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn pool_kernel_too_large_errors() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::ones(&[1, 1, 2, 2]), false);
        assert!(matches!(
            tape.pool2d(x, PoolKind::Max, (3, 3), (1, 1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn gap_of_constant_map() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 3, 4, 4], 1.25), false);
        let y = tape.global_average_pool(x).unwrap();
        assert_eq!(tape.value(y).shape(), &[2, 3]);
        assert!(tape.value(y).data().iter().all(|&v| (v - 1.25).abs() < 1e-15));
    }

    #[test]
    fn gap_small_example() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(&[1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), false);
        let y = tape.global_average_pool(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5]);
    }
}
