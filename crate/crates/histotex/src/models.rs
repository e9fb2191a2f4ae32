//! Model zoo: shallow single-extractor classifiers and a small residual
//! backbone with baseline / parallel / series histogram heads.
//!
//! - `shallow_cnn`: conv (ReLU) -> global average pool -> linear.
//! - `shallow_hist`: histogram layer -> global average pool -> linear.
//! - `deep_baseline`: stem + 4 residual stages -> GAP -> linear.
//! - `deep_parallel`: the baseline plus a histogram branch over the final
//!   feature map; the classifier sees GAP and histogram features
//!   concatenated.
//! - `deep_series`: the classifier sees only the histogram features.
//!
//! The histogram branch reduces the final map's channels with a learned
//! 1x1 convolution to a width `d'` chosen so that the flattened histogram
//! output has exactly the GAP vector's length `F`
//! (`rows * cols * bins * d' = F`), squashes it into (0, 1) with a sigmoid
//! so equally spaced bins over [0, 1] match the data range, then applies
//! the histogram layer.
//!
//! A model owns named parameter tensors (in a fixed order, which the
//! checkpoint format preserves) plus batch-norm running statistics as
//! non-trainable buffers.

use crate::autograd::{PoolKind, Tape, Var};
use crate::error::{Error, Result};
use crate::histogram::{histogram_forward_composed, init_bins};
use crate::rng::rng_from_seed;
use crate::tensor::Tensor;
use crate::Elem;
use rand::Rng as _;
use std::fmt;
use std::str::FromStr;

pub mod checkpoint;

const BN_EPS: Elem = 1e-5;
const BN_MOMENTUM: Elem = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    ShallowCnn,
    ShallowHist,
    DeepBaseline,
    DeepParallel,
    DeepSeries,
}

impl ModelKind {
    pub const ALL: [ModelKind; 5] = [
        ModelKind::ShallowCnn,
        ModelKind::ShallowHist,
        ModelKind::DeepBaseline,
        ModelKind::DeepParallel,
        ModelKind::DeepSeries,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ModelKind::ShallowCnn => "shallow_cnn",
            ModelKind::ShallowHist => "shallow_hist",
            ModelKind::DeepBaseline => "deep_baseline",
            ModelKind::DeepParallel => "deep_parallel",
            ModelKind::DeepSeries => "deep_series",
        }
    }

    pub fn is_deep(&self) -> bool {
        matches!(self, ModelKind::DeepBaseline | ModelKind::DeepParallel | ModelKind::DeepSeries)
    }

    pub fn has_histogram(&self) -> bool {
        matches!(self, ModelKind::ShallowHist | ModelKind::DeepParallel | ModelKind::DeepSeries)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{}'", s)))
    }
}

/// Declarative description of an architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub num_classes: usize,
    /// (height, width) the model expects at its input.
    pub input_size: (usize, usize),
    pub in_channels: usize,
    /// Histogram bin count (histogram variants).
    pub bins: usize,
    /// Shallow CNN feature width.
    pub filters: usize,
    /// Shallow feature-extractor window and stride.
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    /// Residual stage widths; the last is the feature length F.
    pub backbone_channels: [usize; 4],
    pub blocks_per_stage: usize,
    /// Extra 2x2/2 max pool after the stem (for larger inputs).
    pub stem_pool: bool,
    /// Histogram window over the tapped feature map (deep variants).
    pub hist_kernel: (usize, usize),
    pub hist_stride: (usize, usize),
    /// Initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Shallow protocol defaults: 7x7 window, 3x3 stride, 3 bins/filters.
    pub fn shallow(kind: ModelKind, num_classes: usize, input_size: (usize, usize)) -> Self {
        Self {
            kind,
            num_classes,
            input_size,
            in_channels: 1,
            bins: 3,
            filters: 3,
            kernel: (7, 7),
            stride: (3, 3),
            backbone_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            stem_pool: false,
            hist_kernel: (1, 1),
            hist_stride: (1, 1),
            seed: 0,
        }
    }

    /// Deep protocol defaults at desk scale: widths 16/32/64/128, one
    /// residual block per stage.
    pub fn deep(
        kind: ModelKind,
        num_classes: usize,
        input_size: (usize, usize),
        bins: usize,
    ) -> Self {
        Self {
            kind,
            num_classes,
            input_size,
            in_channels: 1,
            bins,
            filters: 3,
            kernel: (7, 7),
            stride: (3, 3),
            backbone_channels: [16, 32, 64, 128],
            blocks_per_stage: 1,
            stem_pool: input_size.0 >= 64,
            hist_kernel: (1, 1),
            hist_stride: (1, 1),
            seed: 0,
        }
    }
}

/// Spatial geometry derived from a deep config.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeepGeometry {
    /// Final feature map (height, width).
    pub feat: (usize, usize),
    /// Feature length F (final stage width).
    pub feat_len: usize,
    /// Histogram output grid (rows, cols) over the final map.
    pub hist_grid: (usize, usize),
    /// Channel width d' the 1x1 reduction maps to.
    pub dprime: usize,
}

fn conv_out(h: usize, k: usize, s: usize, p: usize) -> usize {
    (h + 2 * p - k) / s + 1
}

impl ModelConfig {
    /// Trace the backbone's downsampling and solve the histogram size
    /// contract. Errors name the violated constraint.
    pub fn deep_geometry(&self) -> Result<DeepGeometry> {
        let (mut h, mut w) = self.input_size;
        if h < 8 || w < 8 {
            return Err(Error::Config(format!(
                "deep models need inputs of at least 8x8, got {}x{}",
                h, w
            )));
        }
        // stem conv 3x3 stride 2 pad 1
        h = conv_out(h, 3, 2, 1);
        w = conv_out(w, 3, 2, 1);
        if self.stem_pool {
            if h < 2 || w < 2 {
                return Err(Error::Config("stem pool does not fit".into()));
            }
            h = (h - 2) / 2 + 1;
            w = (w - 2) / 2 + 1;
        }
        // stages 2..4 downsample by 2 via their first block
        for _ in 0..3 {
            h = conv_out(h, 3, 2, 1);
            w = conv_out(w, 3, 2, 1);
        }
        let feat_len = self.backbone_channels[3];
        let (kh, kw) = self.hist_kernel;
        if kh > h || kw > w {
            return Err(Error::Config(format!(
                "histogram kernel {}x{} exceeds the {}x{} final feature map",
                kh, kw, h, w
            )));
        }
        let rows = (h - kh) / self.hist_stride.0 + 1;
        let cols = (w - kw) / self.hist_stride.1 + 1;
        let cells = rows * cols * self.bins;
        if self.kind.is_deep() && self.kind.has_histogram() {
            if feat_len % cells != 0 {
                return Err(Error::Config(format!(
                    "size contract rows*cols*bins*d' = F unsatisfiable: \
                     {}x{} grid with {} bins needs F divisible by {}, F is {}",
                    rows, cols, self.bins, cells, feat_len
                )));
            }
        }
        let dprime = if cells == 0 { 0 } else { feat_len / cells };
        Ok(DeepGeometry { feat: (h, w), feat_len, hist_grid: (rows, cols), dprime })
    }
}

enum InitKind {
    Xavier { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    HistCenters { bins: usize, channels: usize },
    HistWidths { bins: usize, channels: usize },
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

/// A built model: config plus named parameters and batch-norm buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<(String, Tensor)>,
    buffers: Vec<(String, Tensor)>,
}

/// Tape bindings for a model's parameters, aligned with its param order.
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Adopt an externally prepared var list (must align with the model's
    /// parameter order); the gradient checker uses this to rebind perturbed
    /// parameters.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self { vars }
    }
}

/// Logits plus the penultimate feature vector the evaluation pipeline
/// consumes.
pub struct ForwardOutput {
    pub logits: Var,
    pub features: Var,
}

/// Deferred running-statistics update from one train-mode batch norm.
pub struct BnUpdate {
    buffer_idx: usize, // index of the mean buffer; var is buffer_idx + 1
    mean: Vec<Elem>,
    var: Vec<Elem>,
}

impl Model {
    /// Build and initialize a model from its config.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let specs = param_specs(&config)?;
        let mut params = Vec::with_capacity(specs.len());
        for s in &specs {
            params.push((s.name.clone(), Tensor::zeros(&s.shape)));
        }
        let buffers = buffer_specs(&config)
            .into_iter()
            .map(|(name, shape, ones)| {
                let t = if ones { Tensor::ones(&shape) } else { Tensor::zeros(&shape) };
                (name, t)
            })
            .collect();
        let mut model = Self { config, params, buffers };
        let seed = model.config.seed;
        model.init_parameters(seed)?;
        Ok(model)
    }

    /// (Re-)initialize all parameters from a seed: Xavier-uniform weights,
    /// zero biases, unit batch-norm scales, equally spaced histogram bins
    /// over [0, 1]. Fully determined by the seed.
    pub fn init_parameters(&mut self, seed: u64) -> Result<()> {
        self.config.seed = seed;
        let specs = param_specs(&self.config)?;
        let mut rng = rng_from_seed(seed);
        for (spec, (_, tensor)) in specs.iter().zip(self.params.iter_mut()) {
            match spec.init {
                InitKind::Xavier { fan_in, fan_out } => {
                    let limit = (6.0 / (fan_in + fan_out) as Elem).sqrt();
                    for v in tensor.data_mut() {
                        *v = (2.0 * rng.gen::<f64>() as Elem - 1.0) * limit;
                    }
                }
                InitKind::Zeros => tensor.data_mut().fill(0.0),
                InitKind::Ones => tensor.data_mut().fill(1.0),
                InitKind::HistCenters { bins, channels } => {
                    let p = init_bins(bins, (0.0, 1.0), channels, (1, 1), (1, 1))?;
                    tensor.data_mut().copy_from_slice(p.centers.data());
                }
                InitKind::HistWidths { bins, channels } => {
                    let p = init_bins(bins, (0.0, 1.0), channels, (1, 1), (1, 1))?;
                    tensor.data_mut().copy_from_slice(p.width_coeffs.data());
                }
            }
        }
        for (name, tensor) in self.buffers.iter_mut() {
            if name.ends_with(".var") {
                tensor.data_mut().fill(1.0);
            } else {
                tensor.data_mut().fill(0.0);
            }
        }
        Ok(())
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn buffers(&self) -> &[(String, Tensor)] {
        &self.buffers
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(|(_, t)| t.numel()).sum()
    }

    /// Snapshot of (params, buffers) for best-epoch restoration.
    pub fn state(&self) -> (Vec<(String, Tensor)>, Vec<(String, Tensor)>) {
        (self.params.clone(), self.buffers.clone())
    }

    pub fn restore_state(&mut self, state: (Vec<(String, Tensor)>, Vec<(String, Tensor)>)) {
        self.params = state.0;
        self.buffers = state.1;
    }

    /// Replace parameter values (used by the optimizer loop).
    pub fn set_param_data(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::Usage("parameter count mismatch".into()));
        }
        for ((_, dst), src) in self.params.iter_mut().zip(values) {
            if dst.shape() != src.shape() {
                return Err(Error::Usage("parameter shape mismatch".into()));
            }
            *dst = src.clone();
        }
        Ok(())
    }

    pub fn param_tensors(&self) -> Vec<Tensor> {
        self.params.iter().map(|(_, t)| t.clone()).collect()
    }

    fn p(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown parameter '{}'", name))
    }

    fn buffer(&self, name: &str) -> (usize, &Tensor) {
        let idx = self
            .buffers
            .iter()
            .position(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("unknown buffer '{}'", name));
        (idx, &self.buffers[idx].1)
    }

    /// Insert the parameters on a tape as leaves.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
                .collect(),
        }
    }

    /// Forward pass without touching running statistics; returns the batch
    /// norm updates a training step would apply.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        train: bool,
    ) -> Result<(ForwardOutput, Vec<BnUpdate>)> {
        let xs = tape.value(x).shape().to_vec();
        if xs.len() != 4
            || xs[1] != self.config.in_channels
            || (xs[2], xs[3]) != self.config.input_size
        {
            return Err(Error::Dim(format!(
                "model expects [batch, {}, {}, {}] input, got {:?}",
                self.config.in_channels, self.config.input_size.0, self.config.input_size.1, xs
            )));
        }
        let mut updates = Vec::new();
        let out = match self.config.kind {
            ModelKind::ShallowCnn => {
                let w = bound.vars[self.p("feat.weight")];
                let b = bound.vars[self.p("feat.bias")];
                let f = tape.conv2d(x, w, b, self.config.stride, (0, 0))?;
                let r = tape.relu(f);
                let g = tape.global_average_pool(r)?;
                let logits = self.classifier(tape, bound, g)?;
                ForwardOutput { logits, features: g }
            }
            ModelKind::ShallowHist => {
                let c = bound.vars[self.p("hist.centers")];
                let wdt = bound.vars[self.p("hist.widths")];
                let h = histogram_forward_composed(
                    tape,
                    x,
                    c,
                    wdt,
                    self.config.kernel,
                    self.config.stride,
                )?;
                let g = tape.global_average_pool(h)?;
                let logits = self.classifier(tape, bound, g)?;
                ForwardOutput { logits, features: g }
            }
            ModelKind::DeepBaseline | ModelKind::DeepParallel | ModelKind::DeepSeries => {
                let feat_map = self.backbone(tape, bound, x, train, &mut updates)?;
                let gap_vec = tape.global_average_pool(feat_map)?;
                match self.config.kind {
                    ModelKind::DeepBaseline => {
                        let logits = self.classifier(tape, bound, gap_vec)?;
                        ForwardOutput { logits, features: gap_vec }
                    }
                    ModelKind::DeepParallel => {
                        let hist = self.hist_branch(tape, bound, feat_map)?;
                        let cat = tape.concat2(gap_vec, hist)?;
                        let logits = self.classifier(tape, bound, cat)?;
                        ForwardOutput { logits, features: cat }
                    }
                    ModelKind::DeepSeries => {
                        let hist = self.hist_branch(tape, bound, feat_map)?;
                        let logits = self.classifier(tape, bound, hist)?;
                        ForwardOutput { logits, features: hist }
                    }
                    _ => unreachable!(),
                }
            }
        };
        Ok((out, updates))
    }

    /// Training-mode forward; folds fresh batch statistics into the running
    /// averages.
    pub fn forward_train(&mut self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ForwardOutput> {
        let (out, updates) = self.forward_with(tape, bound, x, true)?;
        for u in updates {
            let mean = self.buffers[u.buffer_idx].1.data_mut();
            for (m, b) in mean.iter_mut().zip(&u.mean) {
                *m = (1.0 - BN_MOMENTUM) * *m + BN_MOMENTUM * b;
            }
            let var = self.buffers[u.buffer_idx + 1].1.data_mut();
            for (v, b) in var.iter_mut().zip(&u.var) {
                *v = (1.0 - BN_MOMENTUM) * *v + BN_MOMENTUM * b;
            }
        }
        Ok(out)
    }

    /// Inference-mode forward using running statistics.
    pub fn forward_eval(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<ForwardOutput> {
        Ok(self.forward_with(tape, bound, x, false)?.0)
    }

    fn classifier(&self, tape: &mut Tape, bound: &Bound, features: Var) -> Result<Var> {
        let w = bound.vars[self.p("fc.weight")];
        let b = bound.vars[self.p("fc.bias")];
        tape.linear(features, w, b)
    }

    fn bn(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        prefix: &str,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = bound.vars[self.p(&format!("{}.gamma", prefix))];
        let beta = bound.vars[self.p(&format!("{}.beta", prefix))];
        if train {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            let (idx, _) = self.buffer(&format!("{}.mean", prefix));
            updates.push(BnUpdate { buffer_idx: idx, mean, var });
            Ok(y)
        } else {
            let (_, mean) = self.buffer(&format!("{}.mean", prefix));
            let (_, var) = self.buffer(&format!("{}.var", prefix));
            let (mean, var) = (mean.data().to_vec(), var.data().to_vec());
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }

    fn conv_no_bias(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        name: &str,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let w = bound.vars[self.p(name)];
        let out_ch = tape.value(w).shape()[0];
        let zero = tape.constant(Tensor::zeros(&[out_ch]));
        tape.conv2d(x, w, zero, stride, padding)
    }

    fn backbone(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let mut h = self.conv_no_bias(tape, bound, x, "stem.conv.weight", (2, 2), (1, 1))?;
        h = self.bn(tape, bound, h, "stem.bn", train, updates)?;
        h = tape.relu(h);
        if self.config.stem_pool {
            h = tape.pool2d(h, PoolKind::Max, (2, 2), (2, 2))?;
        }
        let widths = self.config.backbone_channels;
        let mut in_ch = widths[0];
        for (si, &out_ch) in widths.iter().enumerate() {
            let stage_stride = if si == 0 { 1 } else { 2 };
            for bi in 0..self.config.blocks_per_stage {
                let stride = if bi == 0 { stage_stride } else { 1 };
                let prefix = format!("stage{}.block{}", si + 1, bi);
                h = self.basic_block(tape, bound, h, &prefix, in_ch, out_ch, stride, train, updates)?;
                in_ch = out_ch;
            }
        }
        Ok(h)
    }

    #[allow(clippy::too_many_arguments)]
    fn basic_block(
        &self,
        tape: &mut Tape,
        bound: &Bound,
        x: Var,
        prefix: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        train: bool,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let mut main = self.conv_no_bias(
            tape,
            bound,
            x,
            &format!("{}.conv1.weight", prefix),
            (stride, stride),
            (1, 1),
        )?;
        main = self.bn(tape, bound, main, &format!("{}.bn1", prefix), train, updates)?;
        main = tape.relu(main);
        main = self.conv_no_bias(
            tape,
            bound,
            main,
            &format!("{}.conv2.weight", prefix),
            (1, 1),
            (1, 1),
        )?;
        main = self.bn(tape, bound, main, &format!("{}.bn2", prefix), train, updates)?;

        let skip = if in_ch == out_ch && stride == 1 {
            x
        } else {
            let s = self.conv_no_bias(
                tape,
                bound,
                x,
                &format!("{}.down.weight", prefix),
                (stride, stride),
                (0, 0),
            )?;
            self.bn(tape, bound, s, &format!("{}.downbn", prefix), train, updates)?
        };
        let sum = tape.add(main, skip)?;
        Ok(tape.relu(sum))
    }

    fn hist_branch(&self, tape: &mut Tape, bound: &Bound, feat_map: Var) -> Result<Var> {
        let w = bound.vars[self.p("hist.reduce.weight")];
        let b = bound.vars[self.p("hist.reduce.bias")];
        let reduced = tape.conv2d(feat_map, w, b, (1, 1), (0, 0))?;
        let squashed = tape.sigmoid(reduced);
        let c = bound.vars[self.p("hist.centers")];
        let wd = bound.vars[self.p("hist.widths")];
        let h = histogram_forward_composed(
            tape,
            squashed,
            c,
            wd,
            self.config.hist_kernel,
            self.config.hist_stride,
        )?;
        let hs = tape.value(h).shape().to_vec();
        tape.reshape(h, &[hs[0], hs[1] * hs[2] * hs[3]])
    }
}

fn push_conv(specs: &mut Vec<ParamSpec>, name: &str, f: usize, c: usize, kh: usize, kw: usize) {
    specs.push(ParamSpec {
        name: name.to_string(),
        shape: vec![f, c, kh, kw],
        init: InitKind::Xavier { fan_in: c * kh * kw, fan_out: f * kh * kw },
    });
}

fn push_bn(specs: &mut Vec<ParamSpec>, prefix: &str, ch: usize) {
    specs.push(ParamSpec {
        name: format!("{}.gamma", prefix),
        shape: vec![ch],
        init: InitKind::Ones,
    });
    specs.push(ParamSpec {
        name: format!("{}.beta", prefix),
        shape: vec![ch],
        init: InitKind::Zeros,
    });
}

fn push_linear(specs: &mut Vec<ParamSpec>, prefix: &str, out_f: usize, in_f: usize) {
    specs.push(ParamSpec {
        name: format!("{}.weight", prefix),
        shape: vec![out_f, in_f],
        init: InitKind::Xavier { fan_in: in_f, fan_out: out_f },
    });
    specs.push(ParamSpec {
        name: format!("{}.bias", prefix),
        shape: vec![out_f],
        init: InitKind::Zeros,
    });
}

fn push_hist(specs: &mut Vec<ParamSpec>, bins: usize, channels: usize) {
    specs.push(ParamSpec {
        name: "hist.centers".into(),
        shape: vec![bins, channels],
        init: InitKind::HistCenters { bins, channels },
    });
    specs.push(ParamSpec {
        name: "hist.widths".into(),
        shape: vec![bins, channels],
        init: InitKind::HistWidths { bins, channels },
    });
}

fn param_specs(config: &ModelConfig) -> Result<Vec<ParamSpec>> {
    if config.num_classes < 2 {
        return Err(Error::Config("a classifier needs at least 2 classes".into()));
    }
    let mut specs = Vec::new();
    match config.kind {
        ModelKind::ShallowCnn | ModelKind::ShallowHist => {
            let (h, w) = config.input_size;
            let (kh, kw) = config.kernel;
            if kh > h || kw > w {
                return Err(Error::Config(format!(
                    "feature window {}x{} exceeds the {}x{} input",
                    kh, kw, h, w
                )));
            }
            if config.kind == ModelKind::ShallowCnn {
                push_conv(&mut specs, "feat.weight", config.filters, config.in_channels, kh, kw);
                specs.push(ParamSpec {
                    name: "feat.bias".into(),
                    shape: vec![config.filters],
                    init: InitKind::Zeros,
                });
                push_linear(&mut specs, "fc", config.num_classes, config.filters);
            } else {
                push_hist(&mut specs, config.bins, config.in_channels);
                push_linear(&mut specs, "fc", config.num_classes, config.bins * config.in_channels);
            }
        }
        ModelKind::DeepBaseline | ModelKind::DeepParallel | ModelKind::DeepSeries => {
            let geo = config.deep_geometry()?;
            let widths = config.backbone_channels;
            push_conv(&mut specs, "stem.conv.weight", widths[0], config.in_channels, 3, 3);
            push_bn(&mut specs, "stem.bn", widths[0]);
            let mut in_ch = widths[0];
            for (si, &out_ch) in widths.iter().enumerate() {
                let stage_stride = if si == 0 { 1 } else { 2 };
                for bi in 0..config.blocks_per_stage {
                    let stride = if bi == 0 { stage_stride } else { 1 };
                    let prefix = format!("stage{}.block{}", si + 1, bi);
                    push_conv(&mut specs, &format!("{}.conv1.weight", prefix), out_ch, in_ch, 3, 3);
                    push_bn(&mut specs, &format!("{}.bn1", prefix), out_ch);
                    push_conv(&mut specs, &format!("{}.conv2.weight", prefix), out_ch, out_ch, 3, 3);
                    push_bn(&mut specs, &format!("{}.bn2", prefix), out_ch);
                    if in_ch != out_ch || stride != 1 {
                        push_conv(&mut specs, &format!("{}.down.weight", prefix), out_ch, in_ch, 1, 1);
                        push_bn(&mut specs, &format!("{}.downbn", prefix), out_ch);
                    }
                    in_ch = out_ch;
                }
            }
            let feat_len = geo.feat_len;
            match config.kind {
                ModelKind::DeepBaseline => {
                    push_linear(&mut specs, "fc", config.num_classes, feat_len);
                }
                ModelKind::DeepParallel | ModelKind::DeepSeries => {
                    push_conv(&mut specs, "hist.reduce.weight", geo.dprime, feat_len, 1, 1);
                    specs.push(ParamSpec {
                        name: "hist.reduce.bias".into(),
                        shape: vec![geo.dprime],
                        init: InitKind::Zeros,
                    });
                    push_hist(&mut specs, config.bins, geo.dprime);
                    let fc_in = if config.kind == ModelKind::DeepParallel {
                        2 * feat_len
                    } else {
                        feat_len
                    };
                    push_linear(&mut specs, "fc", config.num_classes, fc_in);
                }
                _ => unreachable!(),
            }
        }
    }
    Ok(specs)
}

/// (name, shape, initialize-to-ones) for every batch-norm running buffer.
fn buffer_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>, bool)> {
    let mut out = Vec::new();
    if !config.kind.is_deep() {
        return out;
    }
    let mut push = |prefix: &str, ch: usize| {
        out.push((format!("{}.mean", prefix), vec![ch], false));
        out.push((format!("{}.var", prefix), vec![ch], true));
    };
    let widths = config.backbone_channels;
    push("stem.bn", widths[0]);
    let mut in_ch = widths[0];
    for (si, &out_ch) in widths.iter().enumerate() {
        let stage_stride = if si == 0 { 1 } else { 2 };
        for bi in 0..config.blocks_per_stage {
            let stride = if bi == 0 { stage_stride } else { 1 };
            let prefix = format!("stage{}.block{}", si + 1, bi);
            push(&format!("{}.bn1", prefix), out_ch);
            push(&format!("{}.bn2", prefix), out_ch);
            if in_ch != out_ch || stride != 1 {
                push(&format!("{}.downbn", prefix), out_ch);
            }
            in_ch = out_ch;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shallow_feature_map_size() {
        // 128x128 input, 7x7 kernel stride 3 -> 41x41 windows.
        assert_eq!(conv_out(128, 7, 3, 0), 41);
    }

    #[test]
    fn shallow_hist_feature_width_is_bins() {
        let cfg = ModelConfig::shallow(ModelKind::ShallowHist, 6, (32, 32));
        let model = Model::build(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[2, 1, 32, 32]));
        let out = model.forward_eval(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(out.features).shape(), &[2, 3]);
        assert_eq!(tape.value(out.logits).shape(), &[2, 6]);
    }

    #[test]
    fn shallow_cnn_logits_shape() {
        let cfg = ModelConfig::shallow(ModelKind::ShallowCnn, 4, (32, 32));
        let model = Model::build(cfg).unwrap();
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[3, 1, 32, 32]));
        let out = model.forward_eval(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.value(out.logits).shape(), &[3, 4]);
    }

    #[test]
    fn dprime_solves_size_contract() {
        // F=512 analog: final map 2x2, hist kernel 1x1 -> 2x2 grid.
        // bins=16 -> d'=8; bins=4 -> d'=32.
        let mut cfg = ModelConfig::deep(ModelKind::DeepParallel, 4, (64, 64), 16);
        cfg.backbone_channels = [64, 128, 256, 512];
        let geo = cfg.deep_geometry().unwrap();
        assert_eq!(geo.feat, (2, 2));
        assert_eq!(geo.hist_grid, (2, 2));
        assert_eq!(geo.dprime, 8);
        assert_eq!(geo.hist_grid.0 * geo.hist_grid.1 * cfg.bins * geo.dprime, 512);

        cfg.bins = 4;
        assert_eq!(cfg.deep_geometry().unwrap().dprime, 32);
    }

    #[test]
    fn unsatisfiable_size_contract_names_constraint() {
        let mut cfg = ModelConfig::deep(ModelKind::DeepSeries, 4, (64, 64), 16);
        cfg.backbone_channels = [16, 32, 64, 100]; // 100 not divisible by 2*2*16
        match Model::build(cfg) {
            Err(Error::Config(msg)) => assert!(msg.contains("size contract"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn baseline_has_no_histogram_parameters() {
        let cfg = ModelConfig::deep(ModelKind::DeepBaseline, 4, (32, 32), 16);
        let model = Model::build(cfg).unwrap();
        assert!(model.params().iter().all(|(n, _)| !n.starts_with("hist.")));
    }

    #[test]
    fn baseline_and_parallel_share_backbone_shapes() {
        let base =
            Model::build(ModelConfig::deep(ModelKind::DeepBaseline, 4, (32, 32), 16)).unwrap();
        let par =
            Model::build(ModelConfig::deep(ModelKind::DeepParallel, 4, (32, 32), 16)).unwrap();
        for (name, t) in base.params() {
            if name.starts_with("fc.") {
                continue; // classifier widths differ by design
            }
            let other = &par.params()[par.p(name)].1;
            assert_eq!(t.shape(), other.shape(), "backbone param {}", name);
        }
    }

    #[test]
    fn deep_forward_shapes_and_finiteness() {
        for (kind, feat_len) in [
            (ModelKind::DeepBaseline, 128),
            (ModelKind::DeepParallel, 256),
            (ModelKind::DeepSeries, 128),
        ] {
            let cfg = ModelConfig::deep(kind, 4, (32, 32), 16);
            let mut model = Model::build(cfg).unwrap();
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, false);
            let x = tape.constant(Tensor::zeros(&[2, 1, 32, 32]));
            let out = model.forward_train(&mut tape, &bound, x).unwrap();
            assert_eq!(tape.value(out.logits).shape(), &[2, 4], "{}", kind);
            assert_eq!(tape.value(out.features).shape(), &[2, feat_len], "{}", kind);
            assert!(tape.value(out.logits).is_finite(), "{} logits finite", kind);
        }
    }

    #[test]
    fn init_is_seed_deterministic_and_seed_sensitive() {
        let cfg = ModelConfig::deep(ModelKind::DeepParallel, 4, (32, 32), 8);
        let mut a = Model::build(cfg.clone()).unwrap();
        a.init_parameters(5).unwrap();
        let mut b = Model::build(cfg.clone()).unwrap();
        b.init_parameters(5).unwrap();
        assert_eq!(a.params(), b.params());

        let mut c = Model::build(cfg).unwrap();
        c.init_parameters(6).unwrap();
        assert!(a.params().iter().zip(c.params()).any(|((_, x), (_, y))| x != y));
    }

    #[test]
    fn xavier_weights_are_centered() {
        let mut cfg = ModelConfig::deep(ModelKind::DeepBaseline, 4, (32, 32), 4);
        cfg.seed = 12;
        let model = Model::build(cfg).unwrap();
        // The largest conv layer has thousands of weights; its sample mean
        // must sit near 0.
        let (name, t) = model
            .params()
            .iter()
            .max_by_key(|(_, t)| t.numel())
            .unwrap();
        let mean: Elem = t.data().iter().sum::<Elem>() / t.numel() as Elem;
        assert!(mean.abs() < 0.01, "{} weight mean {}", name, mean);
    }
}
