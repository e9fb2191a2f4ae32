//! Local radial-basis-function histogram layer with learnable bins.
//!
//! Each (bin `b`, channel `d`) pair has a learnable center `mu` and width
//! coefficient `gamma`. A pixel value `x` contributes the soft count
//! `exp(-gamma^2 (x - mu)^2)` to that bin, and the layer averages the
//! contributions over a sliding spatial window:
//!
//! `Y[r, c, b, d] = (1/(S*T)) * sum_{s,t} exp(-gamma_bd^2 * (x[r+s, c+t, d] - mu_bd)^2)`
//!
//! Every output value therefore lies in (0, 1]: it is 1 exactly when the
//! whole window sits on the bin center, and decays with distance. Only the
//! difference `x - mu` enters, so shifting the data and the centers by the
//! same constant leaves the output unchanged.
//!
//! The layer is implemented twice:
//! - [`histogram_forward`]: a direct loop evaluation of the formula, used
//!   as the reference oracle,
//! - [`histogram_forward_composed`]: the same map built strictly from
//!   autograd primitives (channel replicate, bias, square, per-channel
//!   scale, exp, average pooling), which is the trainable path.
//!
//! Both produce output channels in the fixed layout `k = d * bins + b`:
//! each input channel's bin maps are contiguous.
//!
//! ```
//! use histotex::histogram::{init_bins, histogram_forward};
//! use histotex::Tensor;
//!
//! let params = init_bins(3, (0.0, 1.0), 1, (1, 1), (1, 1)).unwrap();
//! // Centers sit at the midpoints of 3 equal bins of [0, 1].
//! assert_eq!(params.centers.data(), &[1.0 / 6.0, 0.5, 5.0 / 6.0]);
//! let x = Tensor::full(&[1, 1, 2, 2], 0.5);
//! let y = histogram_forward(&x, &params).unwrap();
//! // The middle bin responds 1.0 to pixels exactly on its center.
//! assert_eq!(y.data()[4..8], [1.0; 4]);
//! ```

use crate::autograd::{PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::Elem;

/// Learnable parameters of one histogram layer.
///
/// `centers` holds the bin centers `mu` and `width_coeffs` the width
/// coefficients `gamma`, both shaped `[bins, channels]`. `gamma` enters the
/// kernel squared, so its sign is irrelevant and it is stored
/// unconstrained; a value of 0 makes the bin respond 1 everywhere (legal,
/// but flagged by [`HistogramLayerParams::diagnostics`]).
#[derive(Debug, Clone, PartialEq)]
pub struct HistogramLayerParams {
    pub centers: Tensor,
    pub width_coeffs: Tensor,
    pub bins: usize,
    pub channels: usize,
    /// Spatial window extents (S, T) in pixels.
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
}

impl HistogramLayerParams {
    pub fn new(
        centers: Tensor,
        width_coeffs: Tensor,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let s = centers.shape().to_vec();
        if s.len() != 2 {
            return Err(Error::Config(format!(
                "histogram params must be [bins, channels], got {:?}",
                s
            )));
        }
        if width_coeffs.shape() != centers.shape() {
            return Err(Error::Config(format!(
                "centers {:?} and width_coeffs {:?} must share a shape",
                centers.shape(),
                width_coeffs.shape()
            )));
        }
        if kernel.0 == 0 || kernel.1 == 0 || stride.0 == 0 || stride.1 == 0 {
            return Err(Error::Config("histogram kernel and stride must be positive".into()));
        }
        Ok(Self { bins: s[0], channels: s[1], centers, width_coeffs, kernel, stride })
    }

    /// Human-readable warnings about degenerate parameter values.
    pub fn diagnostics(&self) -> Vec<String> {
        let mut notes = Vec::new();
        for (i, &g) in self.width_coeffs.data().iter().enumerate() {
            let (b, d) = (i / self.channels, i % self.channels);
            if !g.is_finite() {
                notes.push(format!("width coefficient (bin {}, channel {}) is non-finite", b, d));
            } else if g == 0.0 {
                notes.push(format!(
                    "width coefficient (bin {}, channel {}) is 0: bin responds 1 everywhere",
                    b, d
                ));
            }
        }
        notes
    }
}

/// Equally spaced bin initialization over a known value range.
///
/// Centers sit at the midpoints of `bins` equal slices of `[lo, hi]`; every
/// width coefficient starts at `1/delta` (inverse bin spacing), which puts
/// the response at an adjacent center at `exp(-1)`.
pub fn init_bins(
    bins: usize,
    value_range: (Elem, Elem),
    channels: usize,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<HistogramLayerParams> {
    let (lo, hi) = value_range;
    if bins == 0 {
        return Err(Error::Config("init_bins needs at least one bin".into()));
    }
    if channels == 0 {
        return Err(Error::Config("init_bins needs at least one channel".into()));
    }
    if !(lo < hi) {
        return Err(Error::Config(format!("degenerate value range [{}, {}]", lo, hi)));
    }
    let delta = (hi - lo) / bins as Elem;
    let mut centers = Vec::with_capacity(bins * channels);
    for b in 0..bins {
        let c = lo + (b as Elem + 0.5) * delta;
        for _ in 0..channels {
            centers.push(c);
        }
    }
    let widths = vec![1.0 / delta; bins * channels];
    HistogramLayerParams::new(
        Tensor::new(&[bins, channels], centers)?,
        Tensor::new(&[bins, channels], widths)?,
        kernel,
        stride,
    )
}

fn check_input(input: &Tensor, params: &HistogramLayerParams) -> Result<[usize; 4]> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::Dim(format!(
            "histogram input must be [batch, channel, h, w], got {:?}",
            s
        )));
    }
    let [n, d, m, nn] = [s[0], s[1], s[2], s[3]];
    if d != params.channels {
        return Err(Error::Dim(format!(
            "histogram params expect {} channels, input has {}",
            params.channels, d
        )));
    }
    if params.kernel.0 > m || params.kernel.1 > nn {
        return Err(Error::Config(format!(
            "histogram kernel {}x{} exceeds input {}x{}",
            params.kernel.0, params.kernel.1, m, nn
        )));
    }
    Ok([n, d, m, nn])
}

/// Direct loop evaluation of the histogram layer.
///
/// Output shape is `[batch, bins*channels, R, C]` with channel layout
/// `k = d * bins + b` and `R = (M - S)/stride + 1` (no padding; windows
/// must fit).
pub fn histogram_forward(input: &Tensor, params: &HistogramLayerParams) -> Result<Tensor> {
    let [n, d_ch, m, nn] = check_input(input, params)?;
    let (s_k, t_k) = params.kernel;
    let (sh, sw) = params.stride;
    let rows = (m - s_k) / sh + 1;
    let cols = (nn - t_k) / sw + 1;
    let bins = params.bins;
    let count = (s_k * t_k) as Elem;

    let mut out = Tensor::zeros(&[n, bins * d_ch, rows, cols]);
    let id = input.data();
    let cd = params.centers.data();
    let wd = params.width_coeffs.data();
    let od = out.data_mut();
    for bt in 0..n {
        for d in 0..d_ch {
            let in_base = (bt * d_ch + d) * m;
            for b in 0..bins {
                let mu = cd[b * d_ch + d];
                let gamma = wd[b * d_ch + d];
                // Same arithmetic as the composed route: scale by the
                // negated square of gamma, then exp, then window-average.
                let neg_g2 = -(gamma * gamma);
                let k = d * bins + b;
                let out_base = (bt * bins * d_ch + k) * rows;
                for r in 0..rows {
                    let y0 = r * sh;
                    for c in 0..cols {
                        let x0 = c * sw;
                        let mut acc = 0.0;
                        for s in 0..s_k {
                            let row = &id[(in_base + y0 + s) * nn + x0..][..t_k];
                            for &x in row {
                                let diff = x + (-mu);
                                acc += (neg_g2 * (diff * diff)).exp();
                            }
                        }
                        od[(out_base + r) * cols + c] = acc / count;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Histogram layer assembled from autograd primitives; the trainable path.
///
/// Produces exactly the same values as [`histogram_forward`] and registers
/// gradients for the input, the centers and the width coefficients. The
/// `centers` and `widths` vars must be `[bins, channels]` tensors on the
/// same tape as `x`.
pub fn histogram_forward_composed(
    tape: &mut Tape,
    x: Var,
    centers: Var,
    widths: Var,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Result<Var> {
    let cshape = tape.value(centers).shape().to_vec();
    if cshape.len() != 2 {
        return Err(Error::Config(format!(
            "histogram centers must be [bins, channels], got {:?}",
            cshape
        )));
    }
    if tape.value(widths).shape() != cshape.as_slice() {
        return Err(Error::Config("centers and widths must share a shape".into()));
    }
    let (bins, channels) = (cshape[0], cshape[1]);
    let xs = tape.value(x).shape().to_vec();
    if xs.len() != 4 || xs[1] != channels {
        return Err(Error::Dim(format!(
            "histogram input {:?} incompatible with {} channels",
            xs, channels
        )));
    }
    if kernel.0 > xs[2] || kernel.1 > xs[3] {
        return Err(Error::Config(format!(
            "histogram kernel {}x{} exceeds input {}x{}",
            kernel.0, kernel.1, xs[2], xs[3]
        )));
    }

    // Per-channel replicate to bins*channels maps, channel k = d*bins + b.
    let xr = tape.repeat_channels(x, bins)?;
    // Flatten [bins, channels] params into that channel order.
    let ct = tape.transpose2(centers)?;
    let cf = tape.reshape(ct, &[bins * channels])?;
    let cneg = tape.negate(cf);
    // x - mu, squared.
    let xb = tape.channel_bias(xr, cneg)?;
    let d2 = tape.square(xb);
    // Scale by -gamma^2.
    let wt = tape.transpose2(widths)?;
    let wf = tape.reshape(wt, &[bins * channels])?;
    let w2 = tape.square(wf);
    let wneg = tape.negate(w2);
    let scaled = tape.channel_scale(d2, wneg)?;
    // Soft count, then window average.
    let e = tape.exp(scaled);
    tape.pool2d(e, PoolKind::Average, kernel, stride)
}

/// Convenience wrapper: run the composed route on a throwaway tape without
/// gradients.
pub fn composed_eval(input: &Tensor, params: &HistogramLayerParams) -> Result<Tensor> {
    check_input(input, params)?;
    let mut tape = Tape::new();
    let x = tape.constant(input.clone());
    let c = tape.constant(params.centers.clone());
    let w = tape.constant(params.width_coeffs.clone());
    let y = histogram_forward_composed(&mut tape, x, c, w, params.kernel, params.stride)?;
    Ok(tape.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::grad_check;
    use crate::rng::rng_from_seed;
    use rand::Rng as _;

    fn random_input(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        let data = (0..shape.iter().product::<usize>())
            .map(|_| rng.gen::<f64>() as Elem)
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    fn random_params(
        bins: usize,
        channels: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        seed: u64,
    ) -> HistogramLayerParams {
        let mut rng = rng_from_seed(seed);
        let n = bins * channels;
        let centers: Vec<Elem> = (0..n).map(|_| rng.gen::<f64>() as Elem).collect();
        let widths: Vec<Elem> =
            (0..n).map(|_| (0.5 + 3.0 * rng.gen::<f64>()) as Elem).collect();
        HistogramLayerParams::new(
            Tensor::new(&[bins, channels], centers).unwrap(),
            Tensor::new(&[bins, channels], widths).unwrap(),
            kernel,
            stride,
        )
        .unwrap()
    }

    /// Independent 5-loop evaluation of the windowed RBF binning formula,
    /// kept deliberately naive.
    fn naive_histogram(input: &Tensor, p: &HistogramLayerParams) -> Tensor {
        let (n, d_ch, m, nn) =
            (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
        let (sk, tk) = p.kernel;
        let rows = (m - sk) / p.stride.0 + 1;
        let cols = (nn - tk) / p.stride.1 + 1;
        let mut out = Tensor::zeros(&[n, p.bins * d_ch, rows, cols]);
        for bt in 0..n {
            for d in 0..d_ch {
                for b in 0..p.bins {
                    let mu = p.centers.at2(b, d);
                    let gamma = p.width_coeffs.at2(b, d);
                    for r in 0..rows {
                        for c in 0..cols {
                            let mut acc: Elem = 0.0;
                            for s in 0..sk {
                                for t in 0..tk {
                                    let x =
                                        input.at4(bt, d, r * p.stride.0 + s, c * p.stride.1 + t);
                                    acc += (-(gamma * gamma) * (x - mu) * (x - mu)).exp();
                                }
                            }
                            let k = d * p.bins + b;
                            let idx = out.idx4(bt, k, r, c);
                            out.data_mut()[idx] = acc / (sk * tk) as Elem;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn init_bins_three_over_unit() {
        let p = init_bins(3, (0.0, 1.0), 1, (7, 7), (3, 3)).unwrap();
        let c = p.centers.data();
        assert!((c[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((c[1] - 0.5).abs() < 1e-15);
        assert!((c[2] - 5.0 / 6.0).abs() < 1e-15);
        assert!(p.width_coeffs.data().iter().all(|&g| (g - 3.0).abs() < 1e-15));
    }

    #[test]
    fn init_bins_single() {
        let p = init_bins(1, (0.0, 1.0), 1, (1, 1), (1, 1)).unwrap();
        assert_eq!(p.centers.data(), &[0.5]);
    }

    #[test]
    fn init_bins_four_gives_gamma_four() {
        let p = init_bins(4, (0.0, 1.0), 2, (3, 3), (1, 1)).unwrap();
        assert!(p.width_coeffs.data().iter().all(|&g| (g - 4.0).abs() < 1e-15));
    }

    #[test]
    fn init_bins_rejects_degenerate() {
        assert!(init_bins(0, (0.0, 1.0), 1, (1, 1), (1, 1)).is_err());
        assert!(init_bins(3, (1.0, 1.0), 1, (1, 1), (1, 1)).is_err());
    }

    #[test]
    fn constant_input_on_center_is_all_ones() {
        let p = init_bins(3, (0.0, 1.0), 1, (2, 2), (1, 1)).unwrap();
        let x = Tensor::full(&[1, 1, 4, 4], 0.5); // the middle bin's center
        let y = histogram_forward(&x, &p).unwrap();
        // Channel k = 0*3 + 1 = 1 is the middle bin.
        let (rows, cols) = (3, 3);
        for r in 0..rows {
            for c in 0..cols {
                assert_eq!(y.at4(0, 1, r, c), 1.0);
            }
        }
    }

    #[test]
    fn single_pixel_window_scalar_value() {
        // x=0.25, mu=0.5, gamma=2 -> exp(-4 * 0.0625) = exp(-0.25)
        let p = HistogramLayerParams::new(
            Tensor::new(&[1, 1], vec![0.5]).unwrap(),
            Tensor::new(&[1, 1], vec![2.0]).unwrap(),
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let x = Tensor::new(&[1, 1, 1, 1], vec![0.25]).unwrap();
        let y = histogram_forward(&x, &p).unwrap();
        assert!((y.data()[0] - (-0.25 as Elem).exp()).abs() < 1e-15);
    }

    #[test]
    fn direct_matches_naive_loop_oracle() {
        let p = random_params(3, 2, (3, 3), (3, 3), 11);
        let x = random_input(&[1, 2, 9, 9], 12);
        let direct = histogram_forward(&x, &p).unwrap();
        let naive = naive_histogram(&x, &p);
        assert!(direct.max_abs_diff(&naive).unwrap() <= 1e-12);
    }

    #[test]
    fn composed_equals_direct_on_random_inputs() {
        for seed in 0..20u64 {
            let bins = 1 + (seed % 4) as usize;
            let ch = 1 + (seed % 2) as usize;
            let p = random_params(bins, ch, (2, 3), (2, 2), 100 + seed);
            let x = random_input(&[2, ch, 7, 8], 200 + seed);
            let direct = histogram_forward(&x, &p).unwrap();
            let composed = composed_eval(&x, &p).unwrap();
            let diff = direct.max_abs_diff(&composed).unwrap();
            assert!(diff <= 1e-12, "seed {}: composed differs by {}", seed, diff);
        }
    }

    #[test]
    fn composed_constant_at_center_is_ones() {
        let p = HistogramLayerParams::new(
            Tensor::new(&[1, 1], vec![0.7]).unwrap(),
            Tensor::new(&[1, 1], vec![3.0]).unwrap(),
            (2, 2),
            (2, 2),
        )
        .unwrap();
        let x = Tensor::full(&[1, 1, 4, 4], 0.7);
        let y = composed_eval(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn composed_gradients_pass_grad_check() {
        let x = random_input(&[1, 2, 4, 4], 31);
        let p = random_params(2, 2, (2, 2), (2, 2), 32);
        let err = grad_check(
            |tape, vars| {
                let y = histogram_forward_composed(tape, vars[0], vars[1], vars[2], (2, 2), (2, 2))?;
                Ok(tape.mean_all(y))
            },
            &[x, p.centers.clone(), p.width_coeffs.clone()],
            1e-6,
        )
        .unwrap();
        assert!(err <= 1e-5, "histogram grad error {}", err);
    }

    #[test]
    fn output_in_unit_interval_and_unimodal() {
        let p = random_params(4, 1, (2, 2), (1, 1), 77);
        let x = random_input(&[1, 1, 6, 6], 78);
        let y = histogram_forward(&x, &p).unwrap();
        assert!(y.data().iter().all(|&v| v > 0.0 && v <= 1.0));

        // Single-pixel window: response strictly decreases in |x - mu|.
        let p1 = HistogramLayerParams::new(
            Tensor::new(&[1, 1], vec![0.5]).unwrap(),
            Tensor::new(&[1, 1], vec![2.0]).unwrap(),
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let resp = |x: Elem| {
            let t = Tensor::new(&[1, 1, 1, 1], vec![x]).unwrap();
            histogram_forward(&t, &p1).unwrap().data()[0]
        };
        assert!(resp(0.5) > resp(0.6));
        assert!(resp(0.6) > resp(0.8));
        assert!(resp(0.4) > resp(0.2));
    }

    #[test]
    fn translation_invariance() {
        let p = random_params(3, 1, (2, 2), (2, 2), 5);
        let x = random_input(&[1, 1, 6, 6], 6);
        let y0 = histogram_forward(&x, &p).unwrap();

        let shift = 0.37;
        let xs = Tensor::new(
            x.shape(),
            x.data().iter().map(|&v| v + shift).collect(),
        )
        .unwrap();
        let cs = Tensor::new(
            p.centers.shape(),
            p.centers.data().iter().map(|&v| v + shift).collect(),
        )
        .unwrap();
        let ps =
            HistogramLayerParams::new(cs, p.width_coeffs.clone(), p.kernel, p.stride).unwrap();
        let y1 = histogram_forward(&xs, &ps).unwrap();
        assert!(y0.max_abs_diff(&y1).unwrap() <= 1e-12);
    }

    #[test]
    fn window_average_linearity() {
        // Output over an SxT window equals the mean of single-pixel-window
        // outputs over its positions.
        let p = random_params(2, 1, (2, 3), (1, 1), 41);
        let x = random_input(&[1, 1, 4, 5], 42);
        let y = histogram_forward(&x, &p).unwrap();

        let p1 = HistogramLayerParams::new(
            p.centers.clone(),
            p.width_coeffs.clone(),
            (1, 1),
            (1, 1),
        )
        .unwrap();
        let y1 = histogram_forward(&x, &p1).unwrap();
        let (sk, tk) = p.kernel;
        for b in 0..p.bins {
            for r in 0..y.shape()[2] {
                for c in 0..y.shape()[3] {
                    let mut acc: Elem = 0.0;
                    for s in 0..sk {
                        for t in 0..tk {
                            acc += y1.at4(0, b, r + s, c + t);
                        }
                    }
                    let mean = acc / (sk * tk) as Elem;
                    assert!((y.at4(0, b, r, c) - mean).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn kernel_exceeding_input_is_config_error() {
        let p = init_bins(2, (0.0, 1.0), 1, (5, 5), (1, 1)).unwrap();
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        assert!(matches!(histogram_forward(&x, &p), Err(Error::Config(_))));
    }
}
