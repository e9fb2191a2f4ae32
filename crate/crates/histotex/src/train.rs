//! Training loop, evaluation and run reports.
//!
//! [`train`] runs seeded mini-batch Adam with optional random-crop
//! augmentation and early stopping on validation loss, then restores the
//! best-validation parameters and scores the test split. Everything is a
//! pure function of (dataset, init seed, train seed): two runs with the
//! same inputs produce identical reports, bit for bit.

use crate::autograd::Tape;
use crate::error::{Error, Result};
use crate::metrics::{calinski_harabasz, factor_accuracy, factor_confusion, ConfusionMatrix, Factor};
use crate::models::Model;
use crate::optim::{adam_step, AdamState};
use crate::rng::{rng_from_seed, Rng};
use crate::tensor::Tensor;
use crate::textures::{center_crop, random_crop, ClassTable, LabeledImage};
use crate::Elem;
use rand::seq::SliceRandom;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Augmentation {
    None,
    RandomCrop,
}

impl Augmentation {
    pub fn name(&self) -> &'static str {
        match self {
            Augmentation::None => "none",
            Augmentation::RandomCrop => "random_crop",
        }
    }
}

impl std::fmt::Display for Augmentation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Augmentation {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Augmentation::None),
            "random_crop" => Ok(Augmentation::RandomCrop),
            other => Err(Error::Config(format!("unknown augmentation '{}'", other))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: Elem,
    pub batch_size: usize,
    /// Consecutive non-improving validation epochs tolerated; `None`
    /// disables early stopping.
    pub patience: Option<usize>,
    pub augmentation: Augmentation,
    pub seed: u64,
    pub adam_betas: (Elem, Elem),
    pub adam_eps: Elem,
}

impl TrainConfig {
    /// Shallow protocol: 300 epochs, patience 10, batch 128.
    pub fn shallow_protocol(seed: u64) -> Self {
        Self {
            epochs: 300,
            learning_rate: 0.01,
            batch_size: 128,
            patience: Some(10),
            augmentation: Augmentation::None,
            seed,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }

    /// Deep protocol: 100 epochs, lr 0.001, batch 16, random crop, no early
    /// stopping.
    pub fn deep_protocol(seed: u64) -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.001,
            batch_size: 16,
            patience: None,
            augmentation: Augmentation::RandomCrop,
            seed,
            adam_betas: (0.9, 0.999),
            adam_eps: 1e-8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let Some(p) = self.patience {
            if p == 0 {
                return Err(Error::Config("patience, when set, must be >= 1".into()));
            }
        }
        Ok(())
    }
}

/// Accuracy or CH score per label factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FactorScores {
    pub both: Elem,
    pub statistical: Elem,
    pub structural: Elem,
}

impl FactorScores {
    pub fn get(&self, factor: Factor) -> Elem {
        match factor {
            Factor::Both => self.both,
            Factor::Statistical => self.statistical,
            Factor::Structural => self.structural,
        }
    }
}

/// Everything one training run reports.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub train_loss: Vec<Elem>,
    pub val_loss: Vec<Elem>,
    /// Number of epochs actually run (1-based).
    pub stopped_epoch: usize,
    /// Epoch whose parameters were restored (lowest validation loss).
    pub best_epoch: usize,
    pub test_accuracy: FactorScores,
    /// Joint-label confusion matrix on the test split.
    pub confusion: ConfusionMatrix,
    /// Calinski-Harabasz scores of the test features per factor.
    pub ch: FactorScores,
    /// Wall-clock seconds; informational only, never serialized, so report
    /// files stay byte-identical across reruns.
    pub wall_seconds: f64,
}

/// Early-stopping bookkeeping: stop after `patience` consecutive epochs
/// without strict improvement of the best validation loss.
struct EarlyStopper {
    patience: Option<usize>,
    best: Elem,
    best_epoch: usize,
    since_improve: usize,
}

enum StopAction {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopper {
    fn new(patience: Option<usize>) -> Self {
        Self { patience, best: Elem::INFINITY, best_epoch: 0, since_improve: 0 }
    }

    fn observe(&mut self, epoch: usize, val: Elem) -> StopAction {
        if val < self.best {
            self.best = val;
            self.best_epoch = epoch;
            self.since_improve = 0;
            StopAction::Improved
        } else {
            self.since_improve += 1;
            match self.patience {
                Some(p) if self.since_improve >= p => StopAction::Stop,
                _ => StopAction::Continue,
            }
        }
    }
}

/// Crop an image for training (random) or evaluation (center) down to the
/// model's input size; identity when sizes already match.
fn fit_image(
    image: &crate::textures::Image,
    target: (usize, usize),
    rng: Option<&mut Rng>,
) -> Result<crate::textures::Image> {
    if (image.height, image.width) == target {
        return Ok(image.clone());
    }
    if image.height < target.0 || image.width < target.1 {
        return Err(Error::Dim(format!(
            "image {}x{} smaller than model input {}x{}",
            image.height, image.width, target.0, target.1
        )));
    }
    match rng {
        Some(rng) => random_crop(image, target, rng),
        None => center_crop(image, target),
    }
}

fn assemble_batch(
    images: &[LabeledImage],
    indices: &[usize],
    target: (usize, usize),
    mut rng: Option<&mut Rng>,
) -> Result<(Tensor, Vec<usize>)> {
    let (h, w) = target;
    let mut data = Vec::with_capacity(indices.len() * h * w);
    let mut labels = Vec::with_capacity(indices.len());
    for &i in indices {
        let img = fit_image(&images[i].image, target, rng.as_deref_mut())?;
        data.extend_from_slice(&img.pixels);
        labels.push(images[i].joint);
    }
    Ok((Tensor::new(&[indices.len(), 1, h, w], data)?, labels))
}

/// Mean loss of a split under eval-mode forward (center crops, running
/// batch-norm statistics).
pub fn eval_loss(model: &Model, images: &[LabeledImage], batch_size: usize) -> Result<Elem> {
    if images.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let indices: Vec<usize> = (0..images.len()).collect();
    let mut total = 0.0;
    for chunk in indices.chunks(batch_size) {
        let (x, labels) = assemble_batch(images, chunk, model.config.input_size, None)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward_eval(&mut tape, &bound, xv)?;
        let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
        total += tape.value(loss).item()? * chunk.len() as Elem;
    }
    Ok(total / images.len() as Elem)
}

/// Predicted joint classes and penultimate features for a split.
pub fn infer(
    model: &Model,
    images: &[LabeledImage],
    batch_size: usize,
) -> Result<(Vec<usize>, Vec<Vec<Elem>>)> {
    let indices: Vec<usize> = (0..images.len()).collect();
    let mut preds = Vec::with_capacity(images.len());
    let mut features = Vec::with_capacity(images.len());
    for chunk in indices.chunks(batch_size) {
        let (x, _) = assemble_batch(images, chunk, model.config.input_size, None)?;
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let xv = tape.constant(x);
        let out = model.forward_eval(&mut tape, &bound, xv)?;
        let logits = tape.value(out.logits);
        let k = logits.shape()[1];
        for b in 0..chunk.len() {
            let row = &logits.data()[b * k..(b + 1) * k];
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            preds.push(argmax);
        }
        let feats = tape.value(out.features);
        let fw = feats.shape()[1];
        for b in 0..chunk.len() {
            features.push(feats.data()[b * fw..(b + 1) * fw].to_vec());
        }
    }
    Ok((preds, features))
}

/// Accuracy and confusion matrix of a trained model on a split, projected
/// onto a label factor.
pub fn evaluate(
    model: &Model,
    images: &[LabeledImage],
    classes: &ClassTable,
    factor: Factor,
) -> Result<(Elem, ConfusionMatrix)> {
    if images.is_empty() {
        return Err(Error::Input("cannot evaluate an empty split".into()));
    }
    let (preds, _) = infer(model, images, 64)?;
    let truths: Vec<usize> = images.iter().map(|im| im.joint).collect();
    let acc = factor_accuracy(&truths, &preds, classes, factor)?;
    let cm = factor_confusion(&truths, &preds, classes, factor)?;
    Ok((acc, cm))
}

fn ch_per_factor(
    features: &[Vec<Elem>],
    images: &[LabeledImage],
    classes: &ClassTable,
) -> FactorScores {
    let score = |factor: Factor| -> Elem {
        let labels: Vec<usize> = images
            .iter()
            .map(|im| factor.project(im.joint, classes))
            .collect();
        // Degenerate label sets (a single distinct factor value) simply
        // yield NaN rather than failing the run.
        calinski_harabasz(features, &labels).unwrap_or(Elem::NAN)
    };
    FactorScores {
        both: score(Factor::Both),
        statistical: score(Factor::Statistical),
        structural: score(Factor::Structural),
    }
}

/// Train a model in place and report its history and test metrics.
pub fn train(
    model: &mut Model,
    data: &crate::textures::DatasetSplits,
    config: &TrainConfig,
) -> Result<RunReport> {
    config.validate()?;
    if data.train.is_empty() || data.val.is_empty() {
        return Err(Error::Input("training needs non-empty train and val partitions".into()));
    }
    if data.classes.num_classes() != model.config.num_classes {
        return Err(Error::Input(format!(
            "model has {} classes, dataset has {}",
            model.config.num_classes,
            data.classes.num_classes()
        )));
    }
    let started = Instant::now();
    let mut rng = rng_from_seed(config.seed);
    let mut adam = AdamState::new(&model.param_tensors());
    let mut stopper = EarlyStopper::new(config.patience);
    let mut best_state = model.state();
    let mut train_losses = Vec::new();
    let mut val_losses = Vec::new();
    let mut stopped_epoch = config.epochs;

    let target = model.config.input_size;
    let n_train = data.train.len();
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..n_train).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let crop_rng = match config.augmentation {
                Augmentation::RandomCrop => Some(&mut rng),
                Augmentation::None => None,
            };
            let (x, labels) = assemble_batch(&data.train, chunk, target, crop_rng)?;
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let xv = tape.constant(x);
            let out = model.forward_train(&mut tape, &bound, xv)?;
            let loss = tape.softmax_cross_entropy(out.logits, &labels)?;
            let lv = tape.value(loss).item()?;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!(
                    "training diverged (non-finite loss) at epoch {}",
                    epoch
                )));
            }
            tape.backward(loss)?;
            let grads: Vec<Vec<Elem>> = bound
                .vars()
                .iter()
                .zip(model.params())
                .map(|(v, (_, t))| {
                    tape.grad(*v).map(<[Elem]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()])
                })
                .collect();
            let mut tensors = model.param_tensors();
            adam_step(
                &mut tensors,
                &grads,
                &mut adam,
                config.learning_rate,
                config.adam_betas,
                config.adam_eps,
            )?;
            model.set_param_data(&tensors)?;
            epoch_loss += lv * chunk.len() as Elem;
        }
        train_losses.push(epoch_loss / n_train as Elem);

        let val = eval_loss(model, &data.val, config.batch_size)?;
        if !val.is_finite() {
            return Err(Error::Numeric(format!(
                "validation loss became non-finite at epoch {}",
                epoch
            )));
        }
        val_losses.push(val);
        match stopper.observe(epoch, val) {
            StopAction::Improved => best_state = model.state(),
            StopAction::Continue => {}
            StopAction::Stop => {
                stopped_epoch = epoch;
                break;
            }
        }
    }
    model.restore_state(best_state);

    let truths: Vec<usize> = data.test.iter().map(|im| im.joint).collect();
    let (preds, features) = infer(model, &data.test, 64)?;
    let accuracy = FactorScores {
        both: factor_accuracy(&truths, &preds, &data.classes, Factor::Both)?,
        statistical: factor_accuracy(&truths, &preds, &data.classes, Factor::Statistical)?,
        structural: factor_accuracy(&truths, &preds, &data.classes, Factor::Structural)?,
    };
    let confusion = factor_confusion(&truths, &preds, &data.classes, Factor::Both)?;
    let ch = ch_per_factor(&features, &data.test, &data.classes);

    Ok(RunReport {
        train_loss: train_losses,
        val_loss: val_losses,
        stopped_epoch,
        best_epoch: stopper.best_epoch,
        test_accuracy: accuracy,
        confusion,
        ch,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Write one CSV row per image: id (the image seed), labels, and the
/// penultimate feature vector.
pub fn export_features(
    model: &Model,
    images: &[LabeledImage],
    classes: &ClassTable,
    path: &Path,
) -> Result<()> {
    let (_, features) = infer(model, images, 64)?;
    let width = features.first().map(|f| f.len()).unwrap_or(0);
    let mut out = String::from("id,joint,structural,statistical");
    for j in 0..width {
        write!(out, ",f{}", j).unwrap();
    }
    out.push('\n');
    for (im, feat) in images.iter().zip(&features) {
        write!(
            out,
            "{:016x},{},{},{}",
            im.seed,
            classes.joint_names[im.joint],
            classes.structural_names[im.structural],
            classes.statistical_names[im.statistical]
        )
        .unwrap();
        for v in feat {
            write!(out, ",{:.16e}", v).unwrap();
        }
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}

impl RunReport {
    /// `key = value` serialization; floats carry 17 significant digits so
    /// the file parses back to exactly the same numbers. Wall-clock time is
    /// deliberately absent.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "stopped_epoch = {}", self.stopped_epoch).unwrap();
        writeln!(out, "best_epoch = {}", self.best_epoch).unwrap();
        writeln!(out, "test_accuracy_both = {:.16e}", self.test_accuracy.both).unwrap();
        writeln!(out, "test_accuracy_statistical = {:.16e}", self.test_accuracy.statistical)
            .unwrap();
        writeln!(out, "test_accuracy_structural = {:.16e}", self.test_accuracy.structural)
            .unwrap();
        writeln!(out, "ch_both = {:.16e}", self.ch.both).unwrap();
        writeln!(out, "ch_statistical = {:.16e}", self.ch.statistical).unwrap();
        writeln!(out, "ch_structural = {:.16e}", self.ch.structural).unwrap();
        for (i, v) in self.train_loss.iter().enumerate() {
            writeln!(out, "train_loss_{} = {:.16e}", i + 1, v).unwrap();
        }
        for (i, v) in self.val_loss.iter().enumerate() {
            writeln!(out, "val_loss_{} = {:.16e}", i + 1, v).unwrap();
        }
        out
    }

    /// Parse the scalar metrics back (the confusion matrix lives in its own
    /// CSV file and is not round-tripped here).
    pub fn metrics_from_text(text: &str) -> Result<(usize, usize, FactorScores, FactorScores)> {
        let mut stopped = None;
        let mut best = None;
        let mut acc = [None; 3];
        let mut ch = [None; 3];
        for line in text.lines() {
            let Some((k, v)) = line.split_once('=') else { continue };
            let (k, v) = (k.trim(), v.trim());
            let fv = || -> Result<Elem> {
                v.parse::<f64>()
                    .map(|x| x as Elem)
                    .map_err(|_| Error::Format(format!("bad float '{}'", v)))
            };
            match k {
                "stopped_epoch" => stopped = v.parse().ok(),
                "best_epoch" => best = v.parse().ok(),
                "test_accuracy_both" => acc[0] = Some(fv()?),
                "test_accuracy_statistical" => acc[1] = Some(fv()?),
                "test_accuracy_structural" => acc[2] = Some(fv()?),
                "ch_both" => ch[0] = Some(fv()?),
                "ch_statistical" => ch[1] = Some(fv()?),
                "ch_structural" => ch[2] = Some(fv()?),
                _ => {}
            }
        }
        let missing = || Error::Format("report is missing metric lines".into());
        Ok((
            stopped.ok_or_else(missing)?,
            best.ok_or_else(missing)?,
            FactorScores {
                both: acc[0].ok_or_else(missing)?,
                statistical: acc[1].ok_or_else(missing)?,
                structural: acc[2].ok_or_else(missing)?,
            },
            FactorScores {
                both: ch[0].ok_or_else(missing)?,
                statistical: ch[1].ok_or_else(missing)?,
                structural: ch[2].ok_or_else(missing)?,
            },
        ))
    }
}
