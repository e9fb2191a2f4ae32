//! Deterministic synthetic texture generation.
//!
//! A texture crosses a *structural* pattern (where the foreground is) with
//! a *statistical* fill (which gray values the foreground takes). The
//! structural axis carries simple geometric patterns plus sonar-flavored
//! proxies (sand ripple, rocky, craters, flat); the statistical axis offers
//! binomial, multinomial and constant foreground distributions whose means
//! sit in the same band so the distinguishing signal is distribution shape,
//! not brightness.
//!
//! Every generator is a pure function of its spec: the seed fully
//! determines the image, bit for bit, so datasets can be rebuilt or
//! rendered in parallel without changing a pixel.

use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from_seed, Rng};
use crate::tensor::Tensor;
use crate::Elem;
use rand::Rng as _;
use std::fmt;
use std::str::FromStr;

/// Grayscale image with pixels in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<Elem>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<Elem>) -> Result<Self> {
        if pixels.len() != height * width {
            return Err(Error::Dim(format!(
                "image {}x{} needs {} pixels, got {}",
                height,
                width,
                height * width,
                pixels.len()
            )));
        }
        Ok(Self { height, width, pixels })
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> Elem {
        self.pixels[y * self.width + x]
    }

    /// As a `[1, height, width]` tensor (single channel).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.height, self.width], self.pixels.clone()).expect("image shape")
    }
}

/// Structural pattern families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StructuralKind {
    Checkerboard,
    Cross,
    Stripe,
    SandRipple,
    Rocky,
    /// Sparse dark disk holes in an otherwise filled field.
    Craters,
    /// No foreground at all; background noise only.
    Flat,
}

impl StructuralKind {
    pub const ALL: [StructuralKind; 7] = [
        StructuralKind::Checkerboard,
        StructuralKind::Cross,
        StructuralKind::Stripe,
        StructuralKind::SandRipple,
        StructuralKind::Rocky,
        StructuralKind::Craters,
        StructuralKind::Flat,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            StructuralKind::Checkerboard => "checkerboard",
            StructuralKind::Cross => "cross",
            StructuralKind::Stripe => "stripe",
            StructuralKind::SandRipple => "sandripple",
            StructuralKind::Rocky => "rocky",
            StructuralKind::Craters => "craters",
            StructuralKind::Flat => "flat",
        }
    }
}

impl fmt::Display for StructuralKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StructuralKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StructuralKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown structural kind '{}'", s)))
    }
}

/// Statistical foreground distributions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum StatKind {
    Binomial,
    Multinomial,
    Constant,
}

impl StatKind {
    pub const ALL: [StatKind; 3] = [StatKind::Binomial, StatKind::Multinomial, StatKind::Constant];

    pub fn name(&self) -> &'static str {
        match self {
            StatKind::Binomial => "binomial",
            StatKind::Multinomial => "multinomial",
            StatKind::Constant => "constant",
        }
    }
}

impl fmt::Display for StatKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StatKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        StatKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown statistical kind '{}'", s)))
    }
}

/// Pattern scale/orientation knobs; one struct covers every kind, each kind
/// reads the fields it needs.
#[derive(Debug, Clone, PartialEq)]
pub struct StructuralParams {
    /// Checkerboard tile edge in pixels.
    pub tile: usize,
    /// Cross arm half-width as a fraction of the short image edge.
    pub cross_arm_frac: Elem,
    /// Stripe period in pixels; the band width is period/2.
    pub period: usize,
    /// Stripe orientation: vertical bands when true, horizontal otherwise.
    pub vertical: bool,
    /// Sand ripple wavelength in pixels.
    pub wavelength: Elem,
    /// Sand ripple orientation jitter in radians around vertical bands.
    pub orientation_jitter: Elem,
    /// Sand ripple per-row phase wobble amplitude.
    pub phase_jitter: Elem,
    /// Foreground coverage range sampled per image (sand ripple, rocky).
    pub coverage: (Elem, Elem),
    /// Rocky blob radius range in pixels.
    pub blob_radius: (usize, usize),
    /// Crater radius range in pixels.
    pub crater_radius: (Elem, Elem),
    /// Crater count range.
    pub crater_count: (usize, usize),
}

impl Default for StructuralParams {
    fn default() -> Self {
        Self {
            tile: 8,
            cross_arm_frac: 0.18,
            period: 8,
            vertical: false,
            wavelength: 8.0,
            orientation_jitter: 0.3,
            phase_jitter: 1.0,
            coverage: (0.38, 0.62),
            blob_radius: (2, 5),
            crater_radius: (2.5, 5.5),
            crater_count: (4, 9),
        }
    }
}

/// Distribution parameters for the statistical fills plus the background
/// noise ceiling.
#[derive(Debug, Clone, PartialEq)]
pub struct StatParams {
    pub binomial_n: u32,
    pub binomial_p: Elem,
    pub levels: Vec<Elem>,
    pub level_probs: Vec<Elem>,
    pub constant: Elem,
    /// Background pixels are i.i.d. uniform in [0, background_max].
    pub background_max: Elem,
}

impl Default for StatParams {
    fn default() -> Self {
        Self {
            binomial_n: 8,
            binomial_p: 0.5,
            levels: vec![0.3, 0.6, 0.9],
            level_probs: vec![1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0],
            constant: 0.8,
            background_max: 0.1,
        }
    }
}

impl StatParams {
    fn validate(&self) -> Result<()> {
        if self.binomial_n == 0 {
            return Err(Error::Config("binomial n must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.binomial_p) {
            return Err(Error::Config(format!("binomial p {} outside [0,1]", self.binomial_p)));
        }
        if self.levels.is_empty() || self.levels.len() != self.level_probs.len() {
            return Err(Error::Config(
                "multinomial levels and probabilities must be non-empty and equal length".into(),
            ));
        }
        if self.levels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Config("multinomial levels must lie in [0,1]".into()));
        }
        let psum: Elem = self.level_probs.iter().sum();
        if self.level_probs.iter().any(|&p| p < 0.0) || (psum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "multinomial probabilities must be non-negative and sum to 1, sum is {}",
                psum
            )));
        }
        if !(0.0..=1.0).contains(&self.constant) {
            return Err(Error::Config(format!("constant level {} outside [0,1]", self.constant)));
        }
        if !(0.0..=1.0).contains(&self.background_max) {
            return Err(Error::Config(format!(
                "background_max {} outside [0,1]",
                self.background_max
            )));
        }
        Ok(())
    }
}

/// Recipe for one synthetic image.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureSpec {
    pub structural: StructuralKind,
    pub statistical: StatKind,
    /// (height, width) in pixels.
    pub size: (usize, usize),
    pub structural_params: StructuralParams,
    pub statistical_params: StatParams,
    pub seed: u64,
}

/// Binary foreground mask; `true` pixels take the statistical fill.
pub fn structural_mask(
    kind: StructuralKind,
    size: (usize, usize),
    params: &StructuralParams,
    seed: u64,
) -> Result<Vec<bool>> {
    let (h, w) = size;
    if h == 0 || w == 0 {
        return Err(Error::Config("mask size must be positive".into()));
    }
    let mut rng = rng_from_seed(seed);
    match kind {
        StructuralKind::Checkerboard => {
            if params.tile == 0 || params.tile > h.min(w) {
                return Err(Error::Config(format!(
                    "checkerboard tile {} does not fit a {}x{} image",
                    params.tile, h, w
                )));
            }
            let t = params.tile;
            Ok((0..h * w)
                .map(|i| ((i / w) / t + (i % w) / t) % 2 == 0)
                .collect())
        }
        StructuralKind::Cross => {
            let arm = ((params.cross_arm_frac * h.min(w) as Elem).round() as isize).max(1);
            let (cy, cx) = (h as isize / 2, w as isize / 2);
            let mut mask = vec![false; h * w];
            for y in 0..h as isize {
                for x in 0..w as isize {
                    if (y - cy).abs() < arm || (x - cx).abs() < arm {
                        mask[(y * w as isize + x) as usize] = true;
                    }
                }
            }
            Ok(mask)
        }
        StructuralKind::Stripe => {
            if params.period < 2 || params.period > h.max(w) {
                return Err(Error::Config(format!(
                    "stripe period {} does not fit a {}x{} image",
                    params.period, h, w
                )));
            }
            let p = params.period;
            let band = p / 2;
            Ok((0..h * w)
                .map(|i| {
                    let coord = if params.vertical { i % w } else { i / w };
                    coord % p < band
                })
                .collect())
        }
        StructuralKind::SandRipple => {
            if params.wavelength < 2.0 || params.wavelength > h.max(w) as Elem {
                return Err(Error::Config(format!(
                    "ripple wavelength {} does not fit a {}x{} image",
                    params.wavelength, h, w
                )));
            }
            let coverage = sample_range(&mut rng, params.coverage);
            let tau = (core::f64::consts::PI as Elem * coverage).cos();
            let theta = (rng.gen::<f64>() as Elem - 0.5) * 2.0 * params.orientation_jitter;
            let (ct, st) = (theta.cos(), theta.sin());
            // Smooth per-row phase wobble: a small bounded random walk.
            let mut phases = Vec::with_capacity(h);
            let mut phase: Elem = 0.0;
            for _ in 0..h {
                phase += (rng.gen::<f64>() as Elem - 0.5) * 2.0 * params.phase_jitter
                    / (h as Elem).sqrt();
                phases.push(phase);
            }
            let k = 2.0 * core::f64::consts::PI as Elem / params.wavelength;
            let mut mask = vec![false; h * w];
            for y in 0..h {
                for x in 0..w {
                    let u = x as Elem * ct + y as Elem * st;
                    mask[y * w + x] = (k * u + phases[y]).sin() > tau;
                }
            }
            Ok(mask)
        }
        StructuralKind::Rocky => {
            let coverage = sample_range(&mut rng, params.coverage);
            let (rmin, rmax) = params.blob_radius;
            if rmin == 0 || rmax < rmin || 2 * rmax >= h.min(w) {
                return Err(Error::Config(format!(
                    "rocky blob radii {:?} do not fit a {}x{} image",
                    params.blob_radius, h, w
                )));
            }
            let mut canvas = vec![0.0 as Elem; h * w];
            // Enough random disks to over-cover, then blur and threshold at
            // the coverage quantile.
            let mean_r = (rmin + rmax) as Elem / 2.0;
            let disk_area = core::f64::consts::PI as Elem * mean_r * mean_r;
            let disks = ((h * w) as Elem / disk_area).ceil() as usize + 4;
            for _ in 0..disks {
                let cy = rng.gen_range(0..h) as isize;
                let cx = rng.gen_range(0..w) as isize;
                let r = rng.gen_range(rmin..=rmax) as isize;
                paint_disk(&mut canvas, h, w, cy, cx, r as Elem, 1.0);
            }
            box_blur(&mut canvas, h, w);
            box_blur(&mut canvas, h, w);
            let thresh = quantile(&canvas, 1.0 - coverage);
            Ok(canvas.iter().map(|&v| v > thresh).collect())
        }
        StructuralKind::Craters => {
            let (rlo, rhi) = params.crater_radius;
            if rlo <= 0.0 || rhi < rlo || 2.0 * rhi >= h.min(w) as Elem {
                return Err(Error::Config(format!(
                    "crater radii {:?} do not fit a {}x{} image",
                    params.crater_radius, h, w
                )));
            }
            let count = rng.gen_range(params.crater_count.0..=params.crater_count.1.max(params.crater_count.0));
            let mut craters = vec![0.0 as Elem; h * w];
            for _ in 0..count {
                let cy = rng.gen_range(0..h) as isize;
                let cx = rng.gen_range(0..w) as isize;
                let r = sample_range(&mut rng, (rlo, rhi));
                paint_disk(&mut craters, h, w, cy, cx, r, 1.0);
            }
            // Foreground is everything that is not a crater hole.
            Ok(craters.iter().map(|&v| v == 0.0).collect())
        }
        StructuralKind::Flat => Ok(vec![false; h * w]),
    }
}

fn sample_range(rng: &mut Rng, range: (Elem, Elem)) -> Elem {
    if range.1 <= range.0 {
        return range.0;
    }
    range.0 + (rng.gen::<f64>() as Elem) * (range.1 - range.0)
}

fn paint_disk(canvas: &mut [Elem], h: usize, w: usize, cy: isize, cx: isize, r: Elem, v: Elem) {
    let ri = r.ceil() as isize;
    for y in (cy - ri).max(0)..=(cy + ri).min(h as isize - 1) {
        for x in (cx - ri).max(0)..=(cx + ri).min(w as isize - 1) {
            let dy = (y - cy) as Elem;
            let dx = (x - cx) as Elem;
            if dy * dy + dx * dx <= r * r {
                canvas[(y * w as isize + x) as usize] = v;
            }
        }
    }
}

fn box_blur(canvas: &mut [Elem], h: usize, w: usize) {
    let src = canvas.to_vec();
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut cnt = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let yy = y as isize + dy;
                    let xx = x as isize + dx;
                    if yy >= 0 && yy < h as isize && xx >= 0 && xx < w as isize {
                        acc += src[(yy * w as isize + xx) as usize];
                        cnt += 1.0;
                    }
                }
            }
            canvas[y * w + x] = acc / cnt;
        }
    }
}

fn quantile(values: &[Elem], q: Elem) -> Elem {
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let idx = ((sorted.len() as Elem - 1.0) * q.clamp(0.0, 1.0)).round() as usize;
    sorted[idx]
}

/// Draw `count` values in `[0, 1]` from one of the statistical fills.
pub fn sample_statistical(
    dist: StatKind,
    count: usize,
    params: &StatParams,
    rng: &mut Rng,
) -> Result<Vec<Elem>> {
    params.validate()?;
    let mut out = Vec::with_capacity(count);
    match dist {
        StatKind::Constant => out.resize(count, params.constant),
        StatKind::Binomial => {
            let n = params.binomial_n;
            let p = params.binomial_p;
            for _ in 0..count {
                let mut k = 0u32;
                for _ in 0..n {
                    if (rng.gen::<f64>() as Elem) < p {
                        k += 1;
                    }
                }
                out.push(k as Elem / n as Elem);
            }
        }
        StatKind::Multinomial => {
            for _ in 0..count {
                let u = rng.gen::<f64>() as Elem;
                let mut acc = 0.0;
                let mut chosen = *params.levels.last().unwrap();
                for (lv, pr) in params.levels.iter().zip(&params.level_probs) {
                    acc += pr;
                    if u < acc {
                        chosen = *lv;
                        break;
                    }
                }
                out.push(chosen);
            }
        }
    }
    Ok(out)
}

/// Render one texture: foreground pixels take the statistical fill,
/// background pixels take uniform low-intensity noise. Bit-deterministic
/// per spec.
pub fn render_texture(spec: &TextureSpec) -> Result<Image> {
    spec.statistical_params.validate()?;
    let (h, w) = spec.size;
    let mask = structural_mask(
        spec.structural,
        spec.size,
        &spec.structural_params,
        derive_seed(spec.seed, &[1]),
    )?;
    let n_fg = mask.iter().filter(|&&m| m).count();
    let mut fill_rng = rng_from_seed(derive_seed(spec.seed, &[2]));
    let fg = sample_statistical(spec.statistical, n_fg, &spec.statistical_params, &mut fill_rng)?;
    let mut bg_rng = rng_from_seed(derive_seed(spec.seed, &[3]));
    let bmax = spec.statistical_params.background_max;

    let mut pixels = Vec::with_capacity(h * w);
    let mut fg_iter = fg.into_iter();
    for &m in &mask {
        if m {
            pixels.push(fg_iter.next().expect("foreground count"));
        } else {
            pixels.push((bg_rng.gen::<f64>() as Elem) * bmax);
        }
    }
    Image::new(h, w, pixels)
}

/// Uniformly random crop.
pub fn random_crop(image: &Image, crop: (usize, usize), rng: &mut Rng) -> Result<Image> {
    let (ch, cw) = crop;
    if ch == 0 || cw == 0 || ch > image.height || cw > image.width {
        return Err(Error::Config(format!(
            "crop {}x{} does not fit image {}x{}",
            ch, cw, image.height, image.width
        )));
    }
    let ty = rng.gen_range(0..=image.height - ch);
    let tx = rng.gen_range(0..=image.width - cw);
    Ok(crop_at(image, ty, tx, ch, cw))
}

/// Deterministic center crop (used at eval time).
pub fn center_crop(image: &Image, crop: (usize, usize)) -> Result<Image> {
    let (ch, cw) = crop;
    if ch == 0 || cw == 0 || ch > image.height || cw > image.width {
        return Err(Error::Config(format!(
            "crop {}x{} does not fit image {}x{}",
            ch, cw, image.height, image.width
        )));
    }
    Ok(crop_at(image, (image.height - ch) / 2, (image.width - cw) / 2, ch, cw))
}

fn crop_at(image: &Image, ty: usize, tx: usize, ch: usize, cw: usize) -> Image {
    let mut pixels = Vec::with_capacity(ch * cw);
    for y in 0..ch {
        let off = (ty + y) * image.width + tx;
        pixels.extend_from_slice(&image.pixels[off..off + cw]);
    }
    Image { height: ch, width: cw, pixels }
}

// ── dataset assembly ────────────────────────────────────────────────────

/// One structural x statistical class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClassSpec {
    pub structural: StructuralKind,
    pub statistical: StatKind,
}

impl ClassSpec {
    pub fn joint_name(&self) -> String {
        format!("{}-{}", self.structural, self.statistical)
    }
}

/// Joint classes with their factor projections. Factor ids follow first
/// appearance in the class list, so the table is a pure function of the
/// (ordered) class specs.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassTable {
    pub joint_names: Vec<String>,
    pub structural_names: Vec<String>,
    pub statistical_names: Vec<String>,
    pub joint_to_structural: Vec<usize>,
    pub joint_to_statistical: Vec<usize>,
}

impl ClassTable {
    pub fn from_specs(specs: &[ClassSpec]) -> Result<Self> {
        if specs.is_empty() {
            return Err(Error::Config("class list is empty".into()));
        }
        let mut joint_names = Vec::new();
        let mut structural_names: Vec<String> = Vec::new();
        let mut statistical_names: Vec<String> = Vec::new();
        let mut joint_to_structural = Vec::new();
        let mut joint_to_statistical = Vec::new();
        for spec in specs {
            let name = spec.joint_name();
            if joint_names.contains(&name) {
                return Err(Error::Config(format!("duplicate class '{}'", name)));
            }
            joint_names.push(name);
            joint_to_structural.push(intern(&mut structural_names, spec.structural.name()));
            joint_to_statistical.push(intern(&mut statistical_names, spec.statistical.name()));
        }
        Ok(Self {
            joint_names,
            structural_names,
            statistical_names,
            joint_to_structural,
            joint_to_statistical,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.joint_names.len()
    }
}

fn intern(names: &mut Vec<String>, name: &str) -> usize {
    if let Some(i) = names.iter().position(|n| n == name) {
        i
    } else {
        names.push(name.to_string());
        names.len() - 1
    }
}

/// One labeled example.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImage {
    pub image: Image,
    pub joint: usize,
    pub structural: usize,
    pub statistical: usize,
    pub seed: u64,
}

/// Stratified train/val/test partitions plus the class table.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplits {
    pub classes: ClassTable,
    pub train: Vec<LabeledImage>,
    pub val: Vec<LabeledImage>,
    pub test: Vec<LabeledImage>,
}

impl DatasetSplits {
    pub fn partition(&self, name: &str) -> Result<&[LabeledImage]> {
        match name {
            "train" => Ok(&self.train),
            "val" => Ok(&self.val),
            "test" => Ok(&self.test),
            other => Err(Error::Input(format!("unknown partition '{}'", other))),
        }
    }
}

/// Per-class partition sizes: floor each ratio, remainder goes to train.
/// A strictly positive ratio that floors to zero images is a configuration
/// error; a zero ratio legitimately empties its partition.
pub fn split_counts(n: usize, ratios: (Elem, Elem, Elem)) -> Result<(usize, usize, usize)> {
    let (rt, rv, rs) = ratios;
    for r in [rt, rv, rs] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::Config(format!("split ratio {} outside [0,1]", r)));
        }
    }
    if ((rt + rv + rs) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split ratios must sum to 1, got {}",
            rt + rv + rs
        )));
    }
    let n_train = (rt * n as Elem).floor() as usize;
    let n_val = (rv * n as Elem).floor() as usize;
    let n_test = (rs * n as Elem).floor() as usize;
    let rem = n - n_train - n_val - n_test;
    let n_train = n_train + rem;
    for (r, c, label) in [(rt, n_train, "train"), (rv, n_val, "val"), (rs, n_test, "test")] {
        if r > 0.0 && c == 0 {
            return Err(Error::Config(format!(
                "split ratio {} for '{}' yields zero images with {} per class",
                r, label, n
            )));
        }
    }
    Ok((n_train, n_val, n_test))
}

/// Build a stratified, deterministic dataset. Each template's `seed` field
/// is ignored; per-image seeds derive from `master_seed`, the class index
/// and the image index.
pub fn build_dataset(
    class_specs: &[TextureSpec],
    per_class: usize,
    split_ratios: (Elem, Elem, Elem),
    master_seed: u64,
) -> Result<DatasetSplits> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be >= 1".into()));
    }
    let specs: Vec<ClassSpec> = class_specs
        .iter()
        .map(|t| ClassSpec { structural: t.structural, statistical: t.statistical })
        .collect();
    let classes = ClassTable::from_specs(&specs)?;
    let (n_train, n_val, n_test) = split_counts(per_class, split_ratios)?;

    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (ci, template) in class_specs.iter().enumerate() {
        for i in 0..per_class {
            let seed = derive_seed(master_seed, &[ci as u64, i as u64]);
            let spec = TextureSpec { seed, ..template.clone() };
            let image = render_texture(&spec)?;
            let labeled = LabeledImage {
                image,
                joint: ci,
                structural: classes.joint_to_structural[ci],
                statistical: classes.joint_to_statistical[ci],
                seed,
            };
            if i < n_train {
                train.push(labeled);
            } else if i < n_train + n_val {
                val.push(labeled);
            } else {
                test.push(labeled);
            }
        }
    }
    debug_assert_eq!(test.len(), n_test * class_specs.len());
    Ok(DatasetSplits { classes, train, val, test })
}

/// The six-class structural x statistical grid used by the shallow
/// experiments: {sandripple, rocky} x {binomial, multinomial, constant}.
pub fn grid6_class_specs(size: (usize, usize)) -> Vec<TextureSpec> {
    let mut specs = Vec::new();
    for structural in [StructuralKind::SandRipple, StructuralKind::Rocky] {
        for statistical in StatKind::ALL {
            specs.push(TextureSpec {
                structural,
                statistical,
                size,
                structural_params: StructuralParams::default(),
                statistical_params: StatParams::default(),
                seed: 0,
            });
        }
    }
    specs
}

/// The four-class seafloor proxy used by the deep experiments:
/// {craters, flat, rocky, sandripple}, all statistically filled the same
/// way so the classes differ structurally.
pub fn multisite_class_specs(size: (usize, usize)) -> Vec<TextureSpec> {
    [
        StructuralKind::Craters,
        StructuralKind::Flat,
        StructuralKind::Rocky,
        StructuralKind::SandRipple,
    ]
    .into_iter()
    .map(|structural| TextureSpec {
        structural,
        statistical: StatKind::Multinomial,
        size,
        structural_params: StructuralParams::default(),
        statistical_params: StatParams::default(),
        seed: 0,
    })
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkerboard_quadrants() {
        let p = StructuralParams { tile: 4, ..Default::default() };
        let mask = structural_mask(StructuralKind::Checkerboard, (8, 8), &p, 0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = (y / 4 + x / 4) % 2 == 0;
                assert_eq!(mask[y * 8 + x], expect, "at ({}, {})", y, x);
            }
        }
    }

    #[test]
    fn stripe_rows() {
        // period 4, horizontal: rows 0-1 and 4-5 are foreground.
        let p = StructuralParams { period: 4, vertical: false, ..Default::default() };
        let mask = structural_mask(StructuralKind::Stripe, (8, 8), &p, 0).unwrap();
        for y in 0..8 {
            let expect = matches!(y, 0 | 1 | 4 | 5);
            for x in 0..8 {
                assert_eq!(mask[y * 8 + x], expect, "row {}", y);
            }
        }
    }

    #[test]
    fn masks_are_deterministic() {
        for kind in StructuralKind::ALL {
            let p = StructuralParams::default();
            let a = structural_mask(kind, (24, 24), &p, 99).unwrap();
            let b = structural_mask(kind, (24, 24), &p, 99).unwrap();
            assert_eq!(a, b, "{} mask must be seed-deterministic", kind);
        }
    }

    #[test]
    fn rocky_coverage_in_band() {
        let p = StructuralParams::default();
        for seed in 0..5 {
            let mask = structural_mask(StructuralKind::Rocky, (48, 48), &p, seed).unwrap();
            let cov = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
            assert!((0.3..0.7).contains(&cov), "rocky coverage {} out of band", cov);
        }
    }

    #[test]
    fn constant_fill() {
        let mut rng = rng_from_seed(0);
        let v = sample_statistical(StatKind::Constant, 5, &StatParams::default(), &mut rng).unwrap();
        assert_eq!(v, vec![0.8; 5]);
    }

    #[test]
    fn binomial_mean_matches_p() {
        let mut rng = rng_from_seed(1);
        let v =
            sample_statistical(StatKind::Binomial, 100_000, &StatParams::default(), &mut rng)
                .unwrap();
        let mean: Elem = v.iter().sum::<Elem>() / v.len() as Elem;
        assert!((mean - 0.5).abs() < 0.01, "binomial mean {}", mean);
        assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn multinomial_frequencies_match_probs() {
        let mut rng = rng_from_seed(2);
        let params = StatParams::default();
        let v = sample_statistical(StatKind::Multinomial, 100_000, &params, &mut rng).unwrap();
        for &level in &params.levels {
            let freq = v.iter().filter(|&&x| x == level).count() as Elem / v.len() as Elem;
            assert!((freq - 1.0 / 3.0).abs() < 0.02, "level {} freq {}", level, freq);
        }
    }

    #[test]
    fn invalid_probabilities_error() {
        let params = StatParams { level_probs: vec![0.5, 0.2, 0.1], ..Default::default() };
        let mut rng = rng_from_seed(0);
        assert!(matches!(
            sample_statistical(StatKind::Multinomial, 3, &params, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn render_constant_full_foreground() {
        // A cross is partly foreground; use stripes with period = height for
        // a known mask, then check the two-valued structure directly.
        let spec = TextureSpec {
            structural: StructuralKind::Checkerboard,
            statistical: StatKind::Constant,
            size: (8, 8),
            structural_params: StructuralParams { tile: 4, ..Default::default() },
            statistical_params: StatParams::default(),
            seed: 7,
        };
        let img = render_texture(&spec).unwrap();
        let mask =
            structural_mask(StructuralKind::Checkerboard, (8, 8), &spec.structural_params, derive_seed(7, &[1]))
                .unwrap();
        for (px, m) in img.pixels.iter().zip(mask) {
            if m {
                assert_eq!(*px, 0.8);
            } else {
                assert!((0.0..=0.1).contains(px));
            }
        }
    }

    #[test]
    fn render_is_bit_deterministic() {
        let spec = TextureSpec {
            structural: StructuralKind::Rocky,
            statistical: StatKind::Binomial,
            size: (32, 32),
            structural_params: StructuralParams::default(),
            statistical_params: StatParams::default(),
            seed: 123,
        };
        let a = render_texture(&spec).unwrap();
        let b = render_texture(&spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn render_pixels_in_unit_range() {
        for kind in StructuralKind::ALL {
            for stat in StatKind::ALL {
                let spec = TextureSpec {
                    structural: kind,
                    statistical: stat,
                    size: (24, 24),
                    structural_params: StructuralParams::default(),
                    statistical_params: StatParams::default(),
                    seed: 5,
                };
                let img = render_texture(&spec).unwrap();
                assert!(img.pixels.iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
        }
    }

    #[test]
    fn split_counts_examples() {
        // 10 per class at 70/10/20 -> 7/1/2.
        assert_eq!(split_counts(10, (0.7, 0.1, 0.2)).unwrap(), (7, 1, 2));
        // all-train ratios are legal.
        assert_eq!(split_counts(10, (1.0, 0.0, 0.0)).unwrap(), (10, 0, 0));
        // positive ratio flooring to zero is an error.
        assert!(split_counts(5, (0.8, 0.1, 0.1)).is_err());
        // ratios must sum to 1.
        assert!(split_counts(10, (0.5, 0.1, 0.2)).is_err());
    }

    #[test]
    fn dataset_split_sizes_and_determinism() {
        let specs = grid6_class_specs((16, 16));
        let a = build_dataset(&specs, 10, (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!(a.train.len(), 42);
        assert_eq!(a.val.len(), 6);
        assert_eq!(a.test.len(), 12);
        let b = build_dataset(&specs, 10, (0.7, 0.1, 0.2), 42).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factor_labels_are_bijective_with_joint() {
        let specs = grid6_class_specs((16, 16));
        let ds = build_dataset(&specs, 2, (0.5, 0.0, 0.5), 3).unwrap();
        let t = &ds.classes;
        assert_eq!(t.num_classes(), 6);
        assert_eq!(t.structural_names.len(), 2);
        assert_eq!(t.statistical_names.len(), 3);
        // joint -> (structural, statistical) must be injective.
        let mut seen = std::collections::HashSet::new();
        for j in 0..t.num_classes() {
            assert!(seen.insert((t.joint_to_structural[j], t.joint_to_statistical[j])));
        }
        // every image's factor labels agree with its joint label.
        for im in ds.train.iter().chain(&ds.test) {
            assert_eq!(im.structural, t.joint_to_structural[im.joint]);
            assert_eq!(im.statistical, t.joint_to_statistical[im.joint]);
        }
    }

    #[test]
    fn crop_identity_and_determinism() {
        let spec = TextureSpec {
            structural: StructuralKind::Stripe,
            statistical: StatKind::Constant,
            size: (6, 6),
            structural_params: StructuralParams { period: 2, ..Default::default() },
            statistical_params: StatParams::default(),
            seed: 1,
        };
        let img = render_texture(&spec).unwrap();
        let mut rng = rng_from_seed(0);
        let full = random_crop(&img, (6, 6), &mut rng).unwrap();
        assert_eq!(full, img);

        let mut r1 = rng_from_seed(5);
        let mut r2 = rng_from_seed(5);
        let a = random_crop(&img, (3, 3), &mut r1).unwrap();
        let b = random_crop(&img, (3, 3), &mut r2).unwrap();
        assert_eq!(a, b);

        assert!(random_crop(&img, (7, 7), &mut rng).is_err());
    }

    #[test]
    fn crop_corners_are_uniform() {
        let img = Image::new(3, 3, (0..9).map(|v| v as Elem).collect()).unwrap();
        let mut rng = rng_from_seed(10);
        let mut counts = [0usize; 4];
        let trials = 10_000;
        for _ in 0..trials {
            let c = random_crop(&img, (2, 2), &mut rng).unwrap();
            // identify the corner by the first pixel: 0, 1, 3 or 4.
            let idx = match c.pixels[0] as usize {
                0 => 0,
                1 => 1,
                3 => 2,
                4 => 3,
                other => panic!("unexpected corner pixel {}", other),
            };
            counts[idx] += 1;
        }
        for &c in &counts {
            let freq = c as f64 / trials as f64;
            assert!((freq - 0.25).abs() < 0.03, "corner frequency {}", freq);
        }
    }

    #[test]
    fn unknown_kind_parse_errors() {
        assert!("swirl".parse::<StructuralKind>().is_err());
        assert!("sandripple".parse::<StructuralKind>().is_ok());
        assert!("gaussian".parse::<StatKind>().is_err());
    }
}
