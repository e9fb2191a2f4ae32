//! Self-verification suite: gradient checks for every primitive, naive
//! loop-oracle comparisons for the structured ops, and the composed-vs-
//! direct histogram equivalence. Backs the `verify` CLI command; the
//! oracles here are deliberately naive re-derivations, independent of the
//! tape implementations they check.

use crate::autograd::{grad_check, PoolKind, Tape, Var};
use crate::error::Result;
use crate::histogram::{composed_eval, histogram_forward, histogram_forward_composed, HistogramLayerParams};
use crate::models::{Model, ModelConfig, ModelKind};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::Elem;
use rand::seq::SliceRandom;
use rand::Rng as _;
use std::fmt::Write as _;

pub const GRAD_TOL: Elem = 1e-5;
pub const GRAD_TOL_MODEL: Elem = 1e-4;
pub const ORACLE_TOL: Elem = 1e-12;
pub const GRAD_EPS: Elem = 1e-6;
pub const GRAD_SEEDS: u64 = 10;

#[derive(Debug, Clone)]
pub struct CheckResult {
    pub name: String,
    /// Worst observed metric (max relative gradient error or max abs diff).
    pub metric: Elem,
    pub threshold: Elem,
    pub passed: bool,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(10).max(10);
        writeln!(out, "{:<width$}  {:>12}  {:>10}  result", "check", "max error", "threshold")
            .unwrap();
        for c in &self.checks {
            writeln!(
                out,
                "{:<width$}  {:>12.3e}  {:>10.0e}  {}",
                c.name,
                c.metric,
                c.threshold,
                if c.passed { "PASS" } else { "FAIL" }
            )
            .unwrap();
        }
        out
    }

    fn push(&mut self, name: &str, metric: Elem, threshold: Elem) {
        self.checks.push(CheckResult {
            name: name.to_string(),
            metric,
            threshold,
            passed: metric.is_finite() && metric <= threshold,
        });
    }
}

// ── naive reference implementations ─────────────────────────────────────

/// Direct 7-loop cross-correlation, written from the definition.
pub fn naive_conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: (usize, usize),
    padding: (usize, usize),
) -> Tensor {
    let (n, c, h, w) =
        (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let (f, kh, kw) = (weight.shape()[0], weight.shape()[2], weight.shape()[3]);
    let oh = (h + 2 * padding.0 - kh) / stride.0 + 1;
    let ow = (w + 2 * padding.1 - kw) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, f, oh, ow]);
    for b in 0..n {
        for fo in 0..f {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = bias.data()[fo];
                    for ci in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let y = (oy * stride.0 + ky) as isize - padding.0 as isize;
                                let x = (ox * stride.1 + kx) as isize - padding.1 as isize;
                                if y >= 0 && y < h as isize && x >= 0 && x < w as isize {
                                    acc += input.at4(b, ci, y as usize, x as usize)
                                        * weight.at4(fo, ci, ky, kx);
                                }
                            }
                        }
                    }
                    let idx = out.idx4(b, fo, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Windowed max/mean from the definition.
pub fn naive_pool2d(
    input: &Tensor,
    kind: PoolKind,
    kernel: (usize, usize),
    stride: (usize, usize),
) -> Tensor {
    let (n, c, h, w) =
        (input.shape()[0], input.shape()[1], input.shape()[2], input.shape()[3]);
    let oh = (h - kernel.0) / stride.0 + 1;
    let ow = (w - kernel.1) / stride.1 + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for b in 0..n {
        for ci in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc: Elem = match kind {
                        PoolKind::Max => Elem::NEG_INFINITY,
                        PoolKind::Average => 0.0,
                    };
                    for ky in 0..kernel.0 {
                        for kx in 0..kernel.1 {
                            let v = input.at4(b, ci, oy * stride.0 + ky, ox * stride.1 + kx);
                            match kind {
                                PoolKind::Max => acc = acc.max(v),
                                PoolKind::Average => acc += v,
                            }
                        }
                    }
                    if kind == PoolKind::Average {
                        acc /= (kernel.0 * kernel.1) as Elem;
                    }
                    let idx = out.idx4(b, ci, oy, ox);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

/// Triple-loop affine map from the definition.
pub fn naive_linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Tensor {
    let (n, in_f) = (input.shape()[0], input.shape()[1]);
    let out_f = weight.shape()[0];
    let mut out = Tensor::zeros(&[n, out_f]);
    for b in 0..n {
        for o in 0..out_f {
            let mut acc = bias.data()[o];
            for i in 0..in_f {
                acc += input.data()[b * in_f + i] * weight.data()[o * in_f + i];
            }
            out.data_mut()[b * out_f + o] = acc;
        }
    }
    out
}

// ── randomized inputs ────────────────────────────────────────────────────

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::new(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| (rng.gen::<f64>() * 2.0 - 1.0) as Elem)
            .collect(),
    )
    .unwrap()
}

/// Uniform values bounded away from zero (for kinked ops like relu).
fn rand_tensor_away_from_zero(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::new(
        shape,
        (0..shape.iter().product::<usize>())
            .map(|_| {
                let v = 0.1 + 0.9 * rng.gen::<f64>();
                (if rng.gen::<bool>() { v } else { -v }) as Elem
            })
            .collect(),
    )
    .unwrap()
}

/// Distinct, well-separated values (shuffled grid) so max-pool argmaxes are
/// stable under finite-difference perturbation.
fn rand_tensor_distinct(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    let n = shape.iter().product::<usize>();
    let mut values: Vec<Elem> = (0..n).map(|i| i as Elem * 0.01).collect();
    values.shuffle(&mut rng);
    Tensor::new(shape, values).unwrap()
}

// ── the suite ────────────────────────────────────────────────────────────

type CheckFn = Box<dyn Fn(u64) -> Result<Elem>>;

fn grad_checks(inject_fault: bool) -> Vec<(&'static str, CheckFn)> {
    let mut checks: Vec<(&'static str, CheckFn)> = Vec::new();

    fn unary(
        make_input: fn(&[usize], u64) -> Tensor,
        apply: impl Fn(&mut Tape, Var) -> Var + 'static,
    ) -> CheckFn {
        Box::new(move |seed| {
            let x = make_input(&[2, 3], seed);
            grad_check(
                |tape, vars| {
                    let y = apply(tape, vars[0]);
                    Ok(tape.mean_all(y))
                },
                &[x],
                GRAD_EPS,
            )
        })
    }

    checks.push(("relu", unary(rand_tensor_away_from_zero, |t, x| t.relu(x))));
    if inject_fault {
        checks.push(("exp", unary(rand_tensor, |t, x| t.exp_faulty(x))));
    } else {
        checks.push(("exp", unary(rand_tensor, |t, x| t.exp(x))));
    }
    checks.push(("square", unary(rand_tensor, |t, x| t.square(x))));
    checks.push(("negate", unary(rand_tensor, |t, x| t.negate(x))));
    checks.push(("sigmoid", unary(rand_tensor, |t, x| t.sigmoid(x))));
    checks.push(("scalar_mul", unary(rand_tensor, |t, x| t.scalar_mul(x, -1.7))));

    for (name, which) in [("add", 0u8), ("sub", 1u8), ("mul", 2u8)] {
        checks.push((
            name,
            Box::new(move |seed| {
                let a = rand_tensor(&[2, 4], seed);
                let b = rand_tensor(&[2, 4], seed.wrapping_add(1000));
                grad_check(
                    move |tape, vars| {
                        let y = match which {
                            0 => tape.add(vars[0], vars[1])?,
                            1 => tape.sub(vars[0], vars[1])?,
                            _ => tape.mul(vars[0], vars[1])?,
                        };
                        Ok(tape.mean_all(y))
                    },
                    &[a, b],
                    GRAD_EPS,
                )
            }),
        ));
    }

    checks.push((
        "mean_all",
        Box::new(|seed| {
            let x = rand_tensor(&[3, 3], seed);
            grad_check(|tape, vars| Ok(tape.mean_all(vars[0])), &[x], GRAD_EPS)
        }),
    ));

    checks.push((
        "transpose2",
        Box::new(|seed| {
            let x = rand_tensor(&[3, 4], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.transpose2(vars[0])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "reshape",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 6], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.reshape(vars[0], &[3, 4])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "concat2",
        Box::new(|seed| {
            let a = rand_tensor(&[2, 3], seed);
            let b = rand_tensor(&[2, 2], seed.wrapping_add(7));
            grad_check(
                |tape, vars| {
                    let y = tape.concat2(vars[0], vars[1])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[a, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "repeat_channels",
        Box::new(|seed| {
            let x = rand_tensor(&[1, 2, 3, 3], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.repeat_channels(vars[0], 3)?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "channel_bias",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 3, 2, 2], seed);
            let b = rand_tensor(&[3], seed.wrapping_add(3));
            grad_check(
                |tape, vars| {
                    let y = tape.channel_bias(vars[0], vars[1])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "channel_scale",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 3, 2, 2], seed);
            let s = rand_tensor(&[3], seed.wrapping_add(3));
            grad_check(
                |tape, vars| {
                    let y = tape.channel_scale(vars[0], vars[1])?;
                    let q = tape.square(y);
                    Ok(tape.mean_all(q))
                },
                &[x, s],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "conv2d",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 2, 5, 5], seed);
            let w = rand_tensor(&[3, 2, 3, 3], seed.wrapping_add(11));
            let b = rand_tensor(&[3], seed.wrapping_add(12));
            grad_check(
                |tape, vars| {
                    let y = tape.conv2d(vars[0], vars[1], vars[2], (2, 2), (1, 1))?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x, w, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "pool2d_max",
        Box::new(|seed| {
            let x = rand_tensor_distinct(&[1, 2, 4, 4], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.pool2d(vars[0], PoolKind::Max, (2, 2), (2, 2))?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "pool2d_average",
        Box::new(|seed| {
            let x = rand_tensor(&[1, 2, 5, 4], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.pool2d(vars[0], PoolKind::Average, (2, 2), (1, 2))?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "global_average_pool",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 3, 4, 4], seed);
            grad_check(
                |tape, vars| {
                    let y = tape.global_average_pool(vars[0])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "linear",
        Box::new(|seed| {
            let x = rand_tensor(&[3, 4], seed);
            let w = rand_tensor(&[2, 4], seed.wrapping_add(5));
            let b = rand_tensor(&[2], seed.wrapping_add(6));
            grad_check(
                |tape, vars| {
                    let y = tape.linear(vars[0], vars[1], vars[2])?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x, w, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "softmax_cross_entropy",
        Box::new(|seed| {
            let x = rand_tensor(&[5, 6], seed);
            let labels: Vec<usize> = (0..5).map(|i| (i + seed as usize) % 6).collect();
            grad_check(
                move |tape, vars| tape.softmax_cross_entropy(vars[0], &labels),
                &[x],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "batch_norm_train",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 2, 3, 3], seed);
            let g = rand_tensor_away_from_zero(&[2], seed.wrapping_add(21));
            let b = rand_tensor(&[2], seed.wrapping_add(22));
            // Weight the output with fixed random coefficients: a plain
            // mean of squares is almost x-invariant (the op standardizes
            // its output), which starves the finite differences of signal.
            let r = rand_tensor(&[2, 2, 3, 3], seed.wrapping_add(23));
            grad_check(
                move |tape, vars| {
                    let (y, _, _) = tape.batch_norm_train(vars[0], vars[1], vars[2], 1e-5)?;
                    let rv = tape.constant(r.clone());
                    let w = tape.mul(y, rv)?;
                    let s = tape.square(w);
                    Ok(tape.mean_all(s))
                },
                &[x, g, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "batch_norm_eval",
        Box::new(|seed| {
            let x = rand_tensor(&[2, 2, 3, 3], seed);
            let g = rand_tensor_away_from_zero(&[2], seed.wrapping_add(31));
            let b = rand_tensor(&[2], seed.wrapping_add(32));
            grad_check(
                |tape, vars| {
                    let y = tape.batch_norm_eval(
                        vars[0],
                        vars[1],
                        vars[2],
                        &[0.2, -0.1],
                        &[0.9, 1.4],
                        1e-5,
                    )?;
                    let s = tape.square(y);
                    Ok(tape.mean_all(s))
                },
                &[x, g, b],
                GRAD_EPS,
            )
        }),
    ));

    checks.push((
        "histogram_composed",
        Box::new(|seed| {
            let x = rand_tensor(&[1, 2, 4, 4], seed);
            let c = rand_tensor(&[3, 2], seed.wrapping_add(41));
            let w = rand_tensor_away_from_zero(&[3, 2], seed.wrapping_add(42));
            grad_check(
                |tape, vars| {
                    let y =
                        histogram_forward_composed(tape, vars[0], vars[1], vars[2], (2, 2), (2, 2))?;
                    Ok(tape.mean_all(y))
                },
                &[x, c, w],
                GRAD_EPS,
            )
        }),
    ));

    checks
}

/// Worst gradient-check error for a tiny end-to-end model, over every
/// parameter coordinate.
pub fn model_grad_check(kind: ModelKind, seed: u64) -> Result<Elem> {
    let mut cfg = match kind {
        ModelKind::ShallowCnn | ModelKind::ShallowHist => {
            let mut c = ModelConfig::shallow(kind, 2, (8, 8));
            c.kernel = (3, 3);
            c.stride = (2, 2);
            c
        }
        _ => {
            let mut c = ModelConfig::deep(kind, 2, (8, 8), 2);
            c.backbone_channels = [2, 2, 4, 4];
            c.stem_pool = false;
            c
        }
    };
    cfg.seed = seed;
    let model = Model::build(cfg)?;
    // Batch 8 keeps every batch-norm population healthy even where the
    // tiny backbone collapses to 1x1 maps; tiny populations pin the
    // normalized values and starve the finite differences of signal.
    let batch = 8;
    let x = rand_tensor(&[batch, 1, 8, 8], seed.wrapping_add(100));
    // Map pixel-like inputs into [0, 1].
    let x = Tensor::new(x.shape(), x.data().iter().map(|v| 0.5 + 0.5 * v).collect())?;
    let inputs = model.param_tensors();
    let labels: Vec<usize> = (0..batch).map(|i| i % 2).collect();
    let model_ref = &model;
    grad_check(
        move |tape, vars| {
            // Rebind the supplied parameter leaves through a Bound-shaped
            // adapter: forward sees exactly these vars.
            let bound = crate::models::Bound::from_vars(vars.to_vec());
            let xv = tape.constant(x.clone());
            let (out, _) = model_ref.forward_with(tape, &bound, xv, true)?;
            tape.softmax_cross_entropy(out.logits, &labels)
        },
        &inputs,
        GRAD_EPS,
    )
}

/// Run the whole suite. `inject_fault` corrupts one backward rule so the
/// negative path (detection must fire) can be exercised from the CLI.
pub fn run_verification(inject_fault: bool) -> VerifyReport {
    let mut report = VerifyReport::default();

    for (name, check) in grad_checks(inject_fault) {
        let mut worst: Elem = 0.0;
        let mut failed = false;
        for seed in 0..GRAD_SEEDS {
            match check(seed) {
                Ok(err) => worst = worst.max(err),
                Err(_) => {
                    failed = true;
                    break;
                }
            }
        }
        report.push(
            &format!("grad {}", name),
            if failed { Elem::INFINITY } else { worst },
            GRAD_TOL,
        );
    }

    // Structured-op loop oracles over a small shape sweep.
    let mut conv_worst: Elem = 0.0;
    let mut pool_worst: Elem = 0.0;
    let mut linear_worst: Elem = 0.0;
    let mut seed = 500u64;
    for n in [1usize, 2] {
        for c in [1usize, 3] {
            for hw in [4usize, 7, 8] {
                for k in [1usize, 2, 3] {
                    for stride in [1usize, 2] {
                        for pad in [0usize, 1] {
                            if k > hw + 2 * pad {
                                continue;
                            }
                            seed += 1;
                            let x = rand_tensor(&[n, c, hw, hw], seed);
                            let f = 2;
                            let w = rand_tensor(&[f, c, k, k], seed + 9000);
                            let b = rand_tensor(&[f], seed + 18000);
                            let mut tape = Tape::new();
                            let xv = tape.constant(x.clone());
                            let wv = tape.constant(w.clone());
                            let bv = tape.constant(b.clone());
                            if let Ok(y) =
                                tape.conv2d(xv, wv, bv, (stride, stride), (pad, pad))
                            {
                                let oracle = naive_conv2d(&x, &w, &b, (stride, stride), (pad, pad));
                                conv_worst = conv_worst
                                    .max(tape.value(y).max_abs_diff(&oracle).unwrap());
                            }
                            if k <= hw && pad == 0 {
                                for kind in [PoolKind::Max, PoolKind::Average] {
                                    let mut tape = Tape::new();
                                    let xv = tape.constant(x.clone());
                                    if let Ok(y) =
                                        tape.pool2d(xv, kind, (k, k), (stride, stride))
                                    {
                                        let oracle =
                                            naive_pool2d(&x, kind, (k, k), (stride, stride));
                                        pool_worst = pool_worst.max(
                                            tape.value(y).max_abs_diff(&oracle).unwrap(),
                                        );
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    for (bn, inf, of) in [(1usize, 3usize, 2usize), (4, 8, 3), (2, 5, 7)] {
        seed += 1;
        let x = rand_tensor(&[bn, inf], seed);
        let w = rand_tensor(&[of, inf], seed + 31000);
        let b = rand_tensor(&[of], seed + 32000);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let wv = tape.constant(w.clone());
        let bv = tape.constant(b.clone());
        let y = tape.linear(xv, wv, bv).unwrap();
        let oracle = naive_linear(&x, &w, &b);
        linear_worst = linear_worst.max(tape.value(y).max_abs_diff(&oracle).unwrap());
    }
    report.push("oracle conv2d", conv_worst, ORACLE_TOL);
    report.push("oracle pool2d", pool_worst, ORACLE_TOL);
    report.push("oracle linear", linear_worst, ORACLE_TOL);

    // Composed histogram equals the direct loop evaluation.
    let mut hist_worst: Elem = 0.0;
    for seed in 0..20u64 {
        let bins = 1 + (seed % 4) as usize;
        let ch = 1 + (seed % 2) as usize;
        let mut rng = rng_from_seed(seed + 900);
        let n = bins * ch;
        let params = HistogramLayerParams::new(
            Tensor::new(&[bins, ch], (0..n).map(|_| rng.gen::<f64>() as Elem).collect()).unwrap(),
            Tensor::new(
                &[bins, ch],
                (0..n).map(|_| (0.5 + 3.0 * rng.gen::<f64>()) as Elem).collect(),
            )
            .unwrap(),
            (2, 3),
            (2, 2),
        )
        .unwrap();
        let x = rand_tensor(&[2, ch, 7, 8], seed + 901);
        let direct = histogram_forward(&x, &params).unwrap();
        let composed = composed_eval(&x, &params).unwrap();
        hist_worst = hist_worst.max(direct.max_abs_diff(&composed).unwrap());
    }
    report.push("histogram composed = direct", hist_worst, ORACLE_TOL);

    // Finite-value audit on a representative composed forward.
    {
        let mut tape = Tape::new();
        let x = tape.constant(rand_tensor(&[1, 2, 6, 6], 3000));
        let c = tape.constant(rand_tensor(&[3, 2], 3001));
        let w = tape.constant(rand_tensor(&[3, 2], 3002));
        let y = histogram_forward_composed(&mut tape, x, c, w, (3, 3), (3, 3)).unwrap();
        let _ = tape.mean_all(y);
        let metric = if tape.check_finite().is_some() { 1.0 } else { 0.0 };
        report.push("finite-value audit", metric, 0.5);
    }

    // End-to-end model gradients at toy size.
    for kind in [ModelKind::ShallowHist, ModelKind::DeepParallel] {
        let err = model_grad_check(kind, 2).unwrap_or(Elem::INFINITY);
        report.push(&format!("grad model {}", kind.name()), err, GRAD_TOL_MODEL);
    }

    report
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pristine_suite_passes() {
        let report = run_verification(false);
        assert!(report.all_passed(), "\n{}", report.to_table());
    }

    #[test]
    fn fault_injection_is_detected() {
        let report = run_verification(true);
        assert!(!report.all_passed());
        let exp = report.checks.iter().find(|c| c.name == "grad exp").unwrap();
        assert!(!exp.passed);
        assert!(exp.metric > 1e-2);
    }
}
