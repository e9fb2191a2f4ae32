//! Line-oriented experiment configuration.
//!
//! The file format is flat `section.key = value` lines (`#` comments and
//! blank lines allowed) across four sections: `dataset.*`, `model.*`,
//! `train.*` and `run.*`. Every key has a default, unknown keys are
//! rejected by name, and `parse(serialize(c)) == c` holds exactly (floats
//! print in shortest-round-trip form).

use crate::error::{Error, Result};
use crate::models::checkpoint::{config_from_kv, config_to_kv};
use crate::models::{ModelConfig, ModelKind};
use crate::pgm::BitDepth;
use crate::textures::{ClassSpec, StatParams, StructuralParams, TextureSpec};
use crate::train::{Augmentation, TrainConfig};
use crate::Elem;
use std::fmt::Write as _;

/// Dataset generation block.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub classes: Vec<ClassSpec>,
    pub per_class: usize,
    /// Generated image size (height, width).
    pub size: (usize, usize),
    pub split: (Elem, Elem, Elem),
    pub seed: u64,
    pub depth: BitDepth,
    pub structural: StructuralParams,
    pub statistical: StatParams,
}

impl DatasetConfig {
    /// The six-class shallow-protocol grid.
    pub fn grid6() -> Self {
        let templates = crate::textures::grid6_class_specs((64, 64));
        Self {
            classes: templates
                .iter()
                .map(|t| ClassSpec { structural: t.structural, statistical: t.statistical })
                .collect(),
            per_class: 150,
            size: (64, 64),
            split: (0.7, 0.1, 0.2),
            seed: 42,
            depth: BitDepth::Sixteen,
            structural: StructuralParams::default(),
            statistical: StatParams::default(),
        }
    }

    /// The four-class deep-protocol seafloor proxy.
    pub fn multisite() -> Self {
        let templates = crate::textures::multisite_class_specs((40, 40));
        Self {
            classes: templates
                .iter()
                .map(|t| ClassSpec { structural: t.structural, statistical: t.statistical })
                .collect(),
            // 94/12/12 totals scaled x5 are 470/60/60; the closest balanced
            // stratification over 4 classes is 480/60/60.
            per_class: 150,
            size: (40, 40),
            split: (0.8, 0.1, 0.1),
            seed: 42,
            depth: BitDepth::Sixteen,
            structural: StructuralParams::default(),
            statistical: StatParams::default(),
        }
    }

    /// Expand the class list into render templates.
    pub fn texture_specs(&self) -> Vec<TextureSpec> {
        self.classes
            .iter()
            .map(|c| TextureSpec {
                structural: c.structural,
                statistical: c.statistical,
                size: self.size,
                structural_params: self.structural.clone(),
                statistical_params: self.statistical.clone(),
                seed: 0,
            })
            .collect()
    }
}

/// Full experiment description: dataset, model, training, run plumbing.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub out_dir: String,
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// Shallow histogram-vs-CNN experiment on the six-class grid.
    pub fn shallow_grid6(kind: ModelKind) -> Self {
        let dataset = DatasetConfig::grid6();
        let model = ModelConfig::shallow(kind, dataset.classes.len(), dataset.size);
        Self {
            dataset,
            model,
            train: TrainConfig::shallow_protocol(0),
            out_dir: "runs/shallow".into(),
            seeds: vec![1, 2, 3],
        }
    }

    /// Deep parallel/series experiment on the seafloor proxy.
    pub fn deep_multisite(kind: ModelKind, bins: usize) -> Self {
        let dataset = DatasetConfig::multisite();
        let model = ModelConfig::deep(kind, dataset.classes.len(), (32, 32), bins);
        let mut train = TrainConfig::deep_protocol(0);
        train.epochs = 30;
        Self { dataset, model, train, out_dir: "runs/deep".into(), seeds: vec![1, 2, 3] }
    }

    /// Cross-field sanity checks that individual setters cannot see.
    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("run.seeds must name at least one seed".into()));
        }
        if self.model.num_classes != self.dataset.classes.len() {
            return Err(Error::Config(format!(
                "model.num_classes = {} but the dataset defines {} classes",
                self.model.num_classes,
                self.dataset.classes.len()
            )));
        }
        match self.train.augmentation {
            Augmentation::None => {
                if self.model.input_size != self.dataset.size {
                    return Err(Error::Config(format!(
                        "without augmentation, model.input_size {:?} must equal dataset.size {:?}",
                        self.model.input_size, self.dataset.size
                    )));
                }
            }
            Augmentation::RandomCrop => {
                if self.model.input_size.0 > self.dataset.size.0
                    || self.model.input_size.1 > self.dataset.size.1
                {
                    return Err(Error::Config(format!(
                        "random crop needs dataset.size {:?} >= model.input_size {:?}",
                        self.dataset.size, self.model.input_size
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn serialize(&self) -> String {
        let mut out = String::new();
        let d = &self.dataset;
        let classes = d
            .classes
            .iter()
            .map(|c| format!("{}:{}", c.structural, c.statistical))
            .collect::<Vec<_>>()
            .join(",");
        writeln!(out, "dataset.classes = {}", classes).unwrap();
        writeln!(out, "dataset.per_class = {}", d.per_class).unwrap();
        writeln!(out, "dataset.size = {}x{}", d.size.0, d.size.1).unwrap();
        writeln!(out, "dataset.split = {},{},{}", d.split.0, d.split.1, d.split.2).unwrap();
        writeln!(out, "dataset.seed = {}", d.seed).unwrap();
        writeln!(
            out,
            "dataset.depth = {}",
            match d.depth {
                BitDepth::Eight => 8,
                BitDepth::Sixteen => 16,
            }
        )
        .unwrap();
        let s = &d.structural;
        writeln!(out, "dataset.tile = {}", s.tile).unwrap();
        writeln!(out, "dataset.cross_arm_frac = {}", s.cross_arm_frac).unwrap();
        writeln!(out, "dataset.period = {}", s.period).unwrap();
        writeln!(out, "dataset.vertical = {}", s.vertical).unwrap();
        writeln!(out, "dataset.wavelength = {}", s.wavelength).unwrap();
        writeln!(out, "dataset.orientation_jitter = {}", s.orientation_jitter).unwrap();
        writeln!(out, "dataset.phase_jitter = {}", s.phase_jitter).unwrap();
        writeln!(out, "dataset.coverage = {},{}", s.coverage.0, s.coverage.1).unwrap();
        writeln!(out, "dataset.blob_radius = {},{}", s.blob_radius.0, s.blob_radius.1).unwrap();
        writeln!(out, "dataset.crater_radius = {},{}", s.crater_radius.0, s.crater_radius.1)
            .unwrap();
        writeln!(out, "dataset.crater_count = {},{}", s.crater_count.0, s.crater_count.1)
            .unwrap();
        let t = &d.statistical;
        writeln!(out, "dataset.binomial_n = {}", t.binomial_n).unwrap();
        writeln!(out, "dataset.binomial_p = {}", t.binomial_p).unwrap();
        writeln!(out, "dataset.levels = {}", join_floats(&t.levels)).unwrap();
        writeln!(out, "dataset.level_probs = {}", join_floats(&t.level_probs)).unwrap();
        writeln!(out, "dataset.constant = {}", t.constant).unwrap();
        writeln!(out, "dataset.background_max = {}", t.background_max).unwrap();

        for (k, v) in config_to_kv(&self.model) {
            writeln!(out, "model.{} = {}", k, v).unwrap();
        }

        let tr = &self.train;
        writeln!(out, "train.epochs = {}", tr.epochs).unwrap();
        writeln!(out, "train.learning_rate = {}", tr.learning_rate).unwrap();
        writeln!(out, "train.batch_size = {}", tr.batch_size).unwrap();
        writeln!(
            out,
            "train.patience = {}",
            tr.patience.map(|p| p.to_string()).unwrap_or_else(|| "none".into())
        )
        .unwrap();
        writeln!(out, "train.augmentation = {}", tr.augmentation).unwrap();
        writeln!(out, "train.seed = {}", tr.seed).unwrap();
        writeln!(out, "train.adam_beta1 = {}", tr.adam_betas.0).unwrap();
        writeln!(out, "train.adam_beta2 = {}", tr.adam_betas.1).unwrap();
        writeln!(out, "train.adam_eps = {}", tr.adam_eps).unwrap();

        writeln!(out, "run.out = {}", self.out_dir).unwrap();
        writeln!(
            out,
            "run.seeds = {}",
            self.seeds.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",")
        )
        .unwrap();
        out
    }

    /// Parse a config file. Starts from the shallow grid defaults and
    /// applies each line; unknown keys are rejected by name.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::shallow_grid6(ModelKind::ShallowHist);
        let mut model_kv: Vec<(String, String)> = config_to_kv(&cfg.model);
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').map(|(k, v)| (k.trim(), v.trim())).ok_or_else(
                || Error::Config(format!("line {}: expected 'key = value', got '{}'", lineno + 1, line)),
            )?;
            if let Some(mk) = key.strip_prefix("model.") {
                // Validate the key name now, value semantics at the end.
                if !model_kv.iter().any(|(k, _)| k == mk) {
                    return Err(Error::Config(format!("unknown key '{}'", key)));
                }
                if let Some(slot) = model_kv.iter_mut().find(|(k, _)| k == mk) {
                    slot.1 = value.to_string();
                }
                continue;
            }
            cfg.apply(key, value)?;
        }
        cfg.model = config_from_kv(&model_kv).map_err(|e| match e {
            Error::Format(msg) => Error::Config(msg),
            other => other,
        })?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let d = &mut self.dataset;
        match key {
            "dataset.classes" => {
                let mut classes = Vec::new();
                for part in value.split(',') {
                    let part = part.trim();
                    let (st, sa) = part.split_once(':').ok_or_else(|| {
                        Error::Config(format!(
                            "class '{}' must be structural:statistical",
                            part
                        ))
                    })?;
                    classes.push(ClassSpec { structural: st.parse()?, statistical: sa.parse()? });
                }
                d.classes = classes;
            }
            "dataset.per_class" => d.per_class = num(key, value)?,
            "dataset.size" => d.size = pair_x(key, value)?,
            "dataset.split" => {
                let v = float_list(key, value, 3)?;
                d.split = (v[0], v[1], v[2]);
            }
            "dataset.seed" => d.seed = num(key, value)?,
            "dataset.depth" => {
                d.depth = match value {
                    "8" => BitDepth::Eight,
                    "16" => BitDepth::Sixteen,
                    other => {
                        return Err(Error::Config(format!("dataset.depth must be 8 or 16, got '{}'", other)))
                    }
                }
            }
            "dataset.tile" => d.structural.tile = num(key, value)?,
            "dataset.cross_arm_frac" => d.structural.cross_arm_frac = fnum(key, value)?,
            "dataset.period" => d.structural.period = num(key, value)?,
            "dataset.vertical" => d.structural.vertical = boolean(key, value)?,
            "dataset.wavelength" => d.structural.wavelength = fnum(key, value)?,
            "dataset.orientation_jitter" => d.structural.orientation_jitter = fnum(key, value)?,
            "dataset.phase_jitter" => d.structural.phase_jitter = fnum(key, value)?,
            "dataset.coverage" => {
                let v = float_list(key, value, 2)?;
                d.structural.coverage = (v[0], v[1]);
            }
            "dataset.blob_radius" => {
                let v = int_list(key, value, 2)?;
                d.structural.blob_radius = (v[0], v[1]);
            }
            "dataset.crater_radius" => {
                let v = float_list(key, value, 2)?;
                d.structural.crater_radius = (v[0], v[1]);
            }
            "dataset.crater_count" => {
                let v = int_list(key, value, 2)?;
                d.structural.crater_count = (v[0], v[1]);
            }
            "dataset.binomial_n" => d.statistical.binomial_n = num(key, value)?,
            "dataset.binomial_p" => d.statistical.binomial_p = fnum(key, value)?,
            "dataset.levels" => d.statistical.levels = float_list_any(key, value)?,
            "dataset.level_probs" => d.statistical.level_probs = float_list_any(key, value)?,
            "dataset.constant" => d.statistical.constant = fnum(key, value)?,
            "dataset.background_max" => d.statistical.background_max = fnum(key, value)?,
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = fnum(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.patience" => {
                self.train.patience =
                    if value == "none" { None } else { Some(num(key, value)?) }
            }
            "train.augmentation" => self.train.augmentation = value.parse()?,
            "train.seed" => self.train.seed = num(key, value)?,
            "train.adam_beta1" => self.train.adam_betas.0 = fnum(key, value)?,
            "train.adam_beta2" => self.train.adam_betas.1 = fnum(key, value)?,
            "train.adam_eps" => self.train.adam_eps = fnum(key, value)?,
            "run.out" => self.out_dir = value.to_string(),
            "run.seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|p| p.trim().parse())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| Error::Config(format!("bad seed list '{}'", value)))?;
            }
            other => return Err(Error::Config(format!("unknown key '{}'", other))),
        }
        Ok(())
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", value, key)))
}

fn fnum(key: &str, value: &str) -> Result<Elem> {
    value
        .parse::<f64>()
        .map(|v| v as Elem)
        .map_err(|_| Error::Config(format!("bad value '{}' for key '{}'", value, key)))
}

fn boolean(key: &str, value: &str) -> Result<bool> {
    num(key, value)
}

fn pair_x(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once('x')
        .ok_or_else(|| Error::Config(format!("key '{}' expects AxB, got '{}'", key, value)))?;
    Ok((num(key, a.trim())?, num(key, b.trim())?))
}

fn float_list(key: &str, value: &str, want: usize) -> Result<Vec<Elem>> {
    let v = float_list_any(key, value)?;
    if v.len() != want {
        return Err(Error::Config(format!(
            "key '{}' expects {} comma-separated numbers, got {}",
            key,
            want,
            v.len()
        )));
    }
    Ok(v)
}

fn float_list_any(key: &str, value: &str) -> Result<Vec<Elem>> {
    value.split(',').map(|p| fnum(key, p.trim())).collect()
}

fn int_list(key: &str, value: &str, want: usize) -> Result<Vec<usize>> {
    let v: Vec<usize> = value
        .split(',')
        .map(|p| num(key, p.trim()))
        .collect::<Result<_>>()?;
    if v.len() != want {
        return Err(Error::Config(format!(
            "key '{}' expects {} comma-separated integers, got {}",
            key,
            want,
            v.len()
        )));
    }
    Ok(v)
}

fn join_floats(values: &[Elem]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn serialize_parse_round_trip() {
        for cfg in [
            ExperimentConfig::shallow_grid6(ModelKind::ShallowHist),
            ExperimentConfig::shallow_grid6(ModelKind::ShallowCnn),
            ExperimentConfig::deep_multisite(ModelKind::DeepParallel, 16),
            ExperimentConfig::deep_multisite(ModelKind::DeepSeries, 4),
        ] {
            let text = cfg.serialize();
            let back = ExperimentConfig::parse(&text).unwrap();
            assert_eq!(back, cfg);
            // Serialization is canonical.
            assert_eq!(back.serialize(), text);
        }
    }

    #[test]
    fn unknown_key_is_named() {
        let mut text = ExperimentConfig::shallow_grid6(ModelKind::ShallowHist).serialize();
        text.push_str("dataset.sparkle = 3\n");
        match ExperimentConfig::parse(&text) {
            Err(Error::Config(msg)) => assert!(msg.contains("dataset.sparkle"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn unknown_model_key_is_named() {
        match ExperimentConfig::parse("model.magic = 1\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("model.magic"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let text = "# a comment\n\ntrain.epochs = 7\n";
        let cfg = ExperimentConfig::parse(text).unwrap();
        assert_eq!(cfg.train.epochs, 7);
    }

    #[test]
    fn validate_checks_class_count_and_sizes() {
        let mut cfg = ExperimentConfig::shallow_grid6(ModelKind::ShallowHist);
        cfg.model.num_classes = 5;
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::shallow_grid6(ModelKind::ShallowHist);
        cfg.model.input_size = (32, 32); // dataset is 64x64, no augmentation
        assert!(cfg.validate().is_err());

        let mut cfg = ExperimentConfig::deep_multisite(ModelKind::DeepBaseline, 8);
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn bad_class_entry_reports_kind() {
        let text = "dataset.classes = swirl:binomial\n";
        match ExperimentConfig::parse(text) {
            Err(Error::Config(msg)) => assert!(msg.contains("swirl"), "{}", msg),
            other => panic!("expected config error, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn patience_none_round_trips() {
        let mut cfg = ExperimentConfig::shallow_grid6(ModelKind::ShallowCnn);
        cfg.train.patience = None;
        let back = ExperimentConfig::parse(&cfg.serialize()).unwrap();
        assert_eq!(back.train.patience, None);
    }
}
