//! Flat `section.key=value` experiment configuration with strict key
//! validation and CLI overrides.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::data::{load_idx, make_blob_dataset, ClassSchedule, Dataset};
use crate::error::{BicError, Result};
use crate::exemplar::SelectionStrategy;
use crate::pipeline::TrainConfig;

/// Where the samples come from.
#[derive(Debug, Clone)]
pub enum DataSpec {
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
    Blobs {
        classes: usize,
        per_class: usize,
        per_class_test: usize,
        dim: usize,
        spread: f64,
    },
}

/// Everything a run needs: data selector, schedule spec, training
/// hyperparameters and output directory.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub data: DataSpec,
    pub schedule_steps: usize,
    pub order_file: Option<PathBuf>,
    pub train: TrainConfig,
    pub out_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSpec::Blobs {
                classes: 10,
                per_class: 500,
                per_class_test: 100,
                dim: 64,
                spread: 0.18,
            },
            schedule_steps: 5,
            order_file: None,
            train: TrainConfig::default(),
            out_dir: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| BicError::Config(format!("field '{key}': cannot parse '{value}'")))
}

fn parse_ratio(key: &str, value: &str) -> Result<(usize, usize)> {
    let (a, b) = value
        .split_once(':')
        .ok_or_else(|| BicError::Config(format!("field '{key}': expected train:val, got '{value}'")))?;
    Ok((parse_num(key, a)?, parse_num(key, b)?))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v)).collect()
}

impl ExperimentConfig {
    /// Parses the flat key=value format. Lines starting with `#` and
    /// blank lines are ignored; unknown keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                BicError::Config(format!("line {}: expected key=value, got '{line}'", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| BicError::io(path.display().to_string(), e))?;
        Self::parse(&text)
    }

    fn blob_field(&mut self, key: &str) -> Result<&mut DataSpec> {
        if !matches!(self.data, DataSpec::Blobs { .. }) {
            return Err(BicError::Config(format!(
                "field '{key}' requires data.kind=blobs"
            )));
        }
        Ok(&mut self.data)
    }

    fn idx_paths(&mut self) -> (&mut PathBuf, &mut PathBuf, &mut PathBuf, &mut PathBuf) {
        if !matches!(self.data, DataSpec::Idx { .. }) {
            self.data = DataSpec::Idx {
                train_images: PathBuf::new(),
                train_labels: PathBuf::new(),
                test_images: PathBuf::new(),
                test_labels: PathBuf::new(),
            };
        }
        match &mut self.data {
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => (train_images, train_labels, test_images, test_labels),
            DataSpec::Blobs { .. } => unreachable!(),
        }
    }

    /// Sets one field; shared by file parsing and `--set` flags.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "data.kind" => match value {
                "blobs" => {
                    if !matches!(self.data, DataSpec::Blobs { .. }) {
                        self.data = ExperimentConfig::default().data;
                    }
                }
                "idx" => {
                    self.idx_paths();
                }
                other => {
                    return Err(BicError::Config(format!(
                        "field 'data.kind': expected idx or blobs, got '{other}'"
                    )))
                }
            },
            "data.train_images" => *self.idx_paths().0 = value.into(),
            "data.train_labels" => *self.idx_paths().1 = value.into(),
            "data.test_images" => *self.idx_paths().2 = value.into(),
            "data.test_labels" => *self.idx_paths().3 = value.into(),
            "data.blob_classes" => {
                let v = parse_num(key, value)?;
                if let DataSpec::Blobs { classes, .. } = self.blob_field(key)? {
                    *classes = v;
                }
            }
            "data.blob_per_class" => {
                let v = parse_num(key, value)?;
                if let DataSpec::Blobs { per_class, .. } = self.blob_field(key)? {
                    *per_class = v;
                }
            }
            "data.blob_per_class_test" => {
                let v = parse_num(key, value)?;
                if let DataSpec::Blobs { per_class_test, .. } = self.blob_field(key)? {
                    *per_class_test = v;
                }
            }
            "data.blob_dim" => {
                let v = parse_num(key, value)?;
                if let DataSpec::Blobs { dim, .. } = self.blob_field(key)? {
                    *dim = v;
                }
            }
            "data.blob_spread" => {
                let v = parse_num(key, value)?;
                if let DataSpec::Blobs { spread, .. } = self.blob_field(key)? {
                    *spread = v;
                }
            }
            "schedule.steps" => self.schedule_steps = parse_num(key, value)?,
            "schedule.order_file" => self.order_file = Some(value.into()),
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.base_lr" => self.train.base_lr = parse_num(key, value)?,
            "train.lr_decay_epochs" => self.train.lr_decay_epochs = parse_list(key, value)?,
            "train.lr_decay_factor" => self.train.lr_decay_factor = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.weight_decay" => self.train.weight_decay = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.temperature" => self.train.temperature = parse_num(key, value)?,
            "train.hidden_dim" => self.train.hidden_dim = parse_num(key, value)?,
            "train.split_ratio" => self.train.split_ratio = parse_ratio(key, value)?,
            "store.budget" => self.train.exemplar_budget = parse_num(key, value)?,
            "store.selection" => {
                self.train.selection = match value {
                    "herding" => SelectionStrategy::Herding,
                    "random" => SelectionStrategy::Random,
                    other => {
                        return Err(BicError::Config(format!(
                            "field 'store.selection': expected herding or random, got '{other}'"
                        )))
                    }
                }
            }
            "bias.epochs" => self.train.bias_fit.epochs = parse_num(key, value)?,
            "bias.learning_rate" => self.train.bias_fit.learning_rate = parse_num(key, value)?,
            "run.variant" => self.train.variant = value.parse()?,
            "run.seed" => self.train.seed = parse_num(key, value)?,
            "run.out_dir" => self.out_dir = Some(value.into()),
            other => {
                return Err(BicError::Config(format!("unknown field '{other}'")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.schedule_steps == 0 {
            return Err(BicError::Config("schedule.steps must be >= 1".into()));
        }
        if let DataSpec::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
        } = &self.data
        {
            for (field, p) in [
                ("data.train_images", train_images),
                ("data.train_labels", train_labels),
                ("data.test_images", test_images),
                ("data.test_labels", test_labels),
            ] {
                if p.as_os_str().is_empty() {
                    return Err(BicError::Config(format!("field '{field}' is required for data.kind=idx")));
                }
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                let train = load_idx(train_images, train_labels, 0)?;
                let test = load_idx(test_images, test_labels, train.len() as u64)?;
                Dataset::from_parts(train, test)
            }
            DataSpec::Blobs {
                classes,
                per_class,
                per_class_test,
                dim,
                spread,
            } => make_blob_dataset(
                *classes,
                *per_class,
                *per_class_test,
                *dim,
                *spread,
                // Blob data is part of the experiment and follows the seed.
                self.train.seed,
            ),
        }
    }

    pub fn build_schedule(&self, num_classes: usize) -> Result<ClassSchedule> {
        if num_classes % self.schedule_steps != 0 {
            return Err(BicError::Config(format!(
                "{} classes cannot be split into {} equal increments",
                num_classes, self.schedule_steps
            )));
        }
        let order = match &self.order_file {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| BicError::io(path.display().to_string(), e))?;
                text.lines()
                    .map(str::trim)
                    .filter(|l| !l.is_empty())
                    .map(|l| parse_num("schedule.order_file", l))
                    .collect::<Result<Vec<usize>>>()?
            }
            None => return ClassSchedule::random(num_classes, self.schedule_steps, self.train.seed),
        };
        let per_step = num_classes / self.schedule_steps;
        ClassSchedule::new(order, vec![per_step; self.schedule_steps])
    }

    /// Full key=value echo; re-parsing it reproduces this configuration.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, v: String| {
            m.insert(k.to_string(), v);
        };
        match &self.data {
            DataSpec::Idx {
                train_images,
                train_labels,
                test_images,
                test_labels,
            } => {
                put("data.kind", "idx".into());
                put("data.train_images", train_images.display().to_string());
                put("data.train_labels", train_labels.display().to_string());
                put("data.test_images", test_images.display().to_string());
                put("data.test_labels", test_labels.display().to_string());
            }
            DataSpec::Blobs {
                classes,
                per_class,
                per_class_test,
                dim,
                spread,
            } => {
                put("data.kind", "blobs".into());
                put("data.blob_classes", classes.to_string());
                put("data.blob_per_class", per_class.to_string());
                put("data.blob_per_class_test", per_class_test.to_string());
                put("data.blob_dim", dim.to_string());
                put("data.blob_spread", spread.to_string());
            }
        }
        put("schedule.steps", self.schedule_steps.to_string());
        if let Some(p) = &self.order_file {
            put("schedule.order_file", p.display().to_string());
        }
        let t = &self.train;
        put("train.epochs", t.epochs.to_string());
        put("train.base_lr", t.base_lr.to_string());
        put(
            "train.lr_decay_epochs",
            t.lr_decay_epochs
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        put("train.lr_decay_factor", t.lr_decay_factor.to_string());
        put("train.momentum", t.momentum.to_string());
        put("train.weight_decay", t.weight_decay.to_string());
        put("train.batch_size", t.batch_size.to_string());
        put("train.temperature", t.temperature.to_string());
        put("train.hidden_dim", t.hidden_dim.to_string());
        put(
            "train.split_ratio",
            format!("{}:{}", t.split_ratio.0, t.split_ratio.1),
        );
        put("store.budget", t.exemplar_budget.to_string());
        put(
            "store.selection",
            match t.selection {
                SelectionStrategy::Herding => "herding".into(),
                SelectionStrategy::Random => "random".into(),
            },
        );
        put("bias.epochs", t.bias_fit.epochs.to_string());
        put("bias.learning_rate", t.bias_fit.learning_rate.to_string());
        put("run.variant", t.variant.name().into());
        put("run.seed", t.seed.to_string());
        m
    }
}

impl std::str::FromStr for ExperimentConfig {
    type Err = BicError;

    fn from_str(s: &str) -> Result<Self> {
        Self::parse(s)
    }
}
