//! Experiment configuration: a TOML file (or a named preset) describing the
//! dataset, every network width, and the optimizer settings of each phase.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use planting::data::SyntheticSpec;
use planting::model::{ArchitectureSpec, Variant, CONV_LAYERS};
use planting::{
    CandidateMode, ChannelConfig, KlForm, LossKind, LrSchedule, PlantInit, SearchConfig, SplitSpec,
    TrainConfig,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Cifar10,
    Cifar100,
    Stl10,
    Synthetic,
}

impl DatasetKind {
    pub fn classes(self, synthetic: Option<&SyntheticConfig>) -> usize {
        match self {
            DatasetKind::Cifar10 | DatasetKind::Stl10 => 10,
            DatasetKind::Cifar100 => 100,
            DatasetKind::Synthetic => synthetic.map_or(2, |s| s.classes),
        }
    }
}

/// Generated Gaussian-blob data, used for smoke runs and tests.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticConfig {
    pub classes: usize,
    pub per_class: usize,
    pub height: usize,
    pub width: usize,
    pub separation: f64,
    pub val_count: usize,
    pub test_count: usize,
}

/// Caps on the number of images taken from each split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub kind: DatasetKind,
    /// Directory holding the binary files. Not part of the config hash.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub split_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subset: Option<SubsetConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticConfig>,
}

/// Learning-rate decay rule of one phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    Constant,
    Milestones {
        milestones: Vec<usize>,
        factor: f64,
    },
    /// Decay at a third and two thirds of the epoch budget.
    Thirds {
        factor: f64,
    },
}

/// Optimizer settings of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: ScheduleConfig,
}

impl PhaseConfig {
    pub fn schedule(&self) -> LrSchedule {
        match &self.schedule {
            ScheduleConfig::Constant => LrSchedule::constant(),
            ScheduleConfig::Milestones { milestones, factor } => LrSchedule {
                milestones: milestones.clone(),
                factor: *factor,
            },
            ScheduleConfig::Thirds { factor } => LrSchedule::thirds(self.epochs, *factor),
        }
    }

    pub fn train_config(&self, seed: u64, loss: LossKind) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            batch_size: self.batch_size,
            epochs: self.epochs,
            schedule: self.schedule(),
            seed,
            loss,
        }
    }

    fn scaled(&self, scale: f64) -> Self {
        let epochs = scale_count(self.epochs, scale);
        let schedule = match &self.schedule {
            ScheduleConfig::Milestones { milestones, factor } => {
                let mut m: Vec<usize> = milestones
                    .iter()
                    .map(|&m| m * epochs / self.epochs.max(1))
                    .filter(|&m| m > 0)
                    .collect();
                m.dedup();
                ScheduleConfig::Milestones {
                    milestones: m,
                    factor: *factor,
                }
            }
            other => other.clone(),
        };
        PhaseConfig {
            epochs,
            schedule,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantingConfig {
    pub groups: usize,
    pub plant_count: usize,
    pub candidate_mode: CandidateMode,
    pub lambda_train: f64,
    pub lambda_select: f64,
    pub max_steps: usize,
    /// Training of the planted channels in each candidate.
    pub step: PhaseConfig,
    #[serde(default)]
    pub plant_init: PlantInit,
    #[serde(default)]
    pub kl_form: KlForm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub trials: usize,
    pub dataset: DatasetConfig,
    pub teacher_channels: [usize; CONV_LAYERS],
    pub initial_channels: [usize; CONV_LAYERS],
    /// Uniform conv widths of the fixed-width students.
    pub baseline_widths: Vec<usize>,
    pub teacher: PhaseConfig,
    pub initial: PhaseConfig,
    pub baseline: PhaseConfig,
    pub planting: PlantingConfig,
}

fn scale_count(n: usize, scale: f64) -> usize {
    ((n as f64 * scale).round() as usize).max(1)
}

fn cifar_phase(weight_decay: f64) -> PhaseConfig {
    PhaseConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay,
        batch_size: 128,
        epochs: 150,
        schedule: ScheduleConfig::Milestones {
            milestones: vec![40, 80, 120],
            factor: 0.2,
        },
    }
}

fn stl_phase(weight_decay: f64) -> PhaseConfig {
    PhaseConfig {
        learning_rate: 0.01,
        momentum: 0.9,
        weight_decay,
        batch_size: 128,
        epochs: 100,
        schedule: ScheduleConfig::Thirds { factor: 0.1 },
    }
}

fn planting(step: PhaseConfig, lambda_select: f64) -> PlantingConfig {
    PlantingConfig {
        groups: 5,
        plant_count: 4,
        candidate_mode: CandidateMode::BruteForce,
        lambda_train: 0.0,
        lambda_select,
        max_steps: 32,
        step,
        plant_init: PlantInit::Preserving,
        kl_form: KlForm::Standard,
    }
}

pub const PRESETS: [&str; 4] = ["cifar10", "cifar100", "stl10", "synthetic"];

impl ExperimentConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let dataset = |kind| DatasetConfig {
            kind,
            dir: None,
            split_seed: 0,
            subset: None,
            synthetic: None,
        };
        let widths = vec![8, 16, 32, 64, 128];
        Ok(match name {
            "cifar10" => ExperimentConfig {
                seed: 0,
                trials: 3,
                dataset: dataset(DatasetKind::Cifar10),
                teacher_channels: [128; 5],
                initial_channels: [8; 5],
                baseline_widths: widths,
                teacher: cifar_phase(5e-4),
                initial: cifar_phase(5e-4),
                baseline: cifar_phase(5e-4),
                planting: planting(cifar_phase(5e-5), 1.0),
            },
            "cifar100" => ExperimentConfig {
                dataset: dataset(DatasetKind::Cifar100),
                initial_channels: [16; 5],
                planting: planting(cifar_phase(5e-5), 0.0),
                ..Self::preset("cifar10")?
            },
            "stl10" => ExperimentConfig {
                seed: 0,
                trials: 3,
                dataset: dataset(DatasetKind::Stl10),
                teacher_channels: [64; 5],
                initial_channels: [8; 5],
                baseline_widths: widths,
                teacher: stl_phase(5e-4),
                initial: stl_phase(5e-4),
                baseline: stl_phase(5e-4),
                planting: planting(stl_phase(5e-4), 0.0),
            },
            "synthetic" => {
                let phase = PhaseConfig {
                    learning_rate: 0.02,
                    momentum: 0.9,
                    weight_decay: 5e-4,
                    batch_size: 16,
                    epochs: 5,
                    schedule: ScheduleConfig::Constant,
                };
                ExperimentConfig {
                    seed: 0,
                    trials: 1,
                    dataset: DatasetConfig {
                        synthetic: Some(SyntheticConfig {
                            classes: 2,
                            per_class: 200,
                            height: 8,
                            width: 8,
                            separation: 0.5,
                            val_count: 60,
                            test_count: 100,
                        }),
                        ..dataset(DatasetKind::Synthetic)
                    },
                    teacher_channels: [16; 5],
                    initial_channels: [2; 5],
                    baseline_widths: vec![2, 4],
                    teacher: phase.clone(),
                    initial: phase.clone(),
                    baseline: phase.clone(),
                    planting: PlantingConfig {
                        plant_count: 2,
                        max_steps: 4,
                        ..planting(phase, 1.0)
                    },
                }
            }
            other => bail!(
                "unknown preset `{other}`; expected one of {}",
                PRESETS.join(", ")
            ),
        })
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).context("parsing experiment config")?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn classes(&self) -> usize {
        self.dataset.kind.classes(self.dataset.synthetic.as_ref())
    }

    pub fn architecture(&self) -> Result<ArchitectureSpec> {
        Ok(match self.dataset.kind {
            DatasetKind::Cifar10 | DatasetKind::Cifar100 => ArchitectureSpec::cifar(),
            DatasetKind::Stl10 => ArchitectureSpec::stl(),
            DatasetKind::Synthetic => {
                let s = self.synthetic()?;
                ArchitectureSpec::with_input(Variant::Cifar, s.height, s.width)?
            }
        })
    }

    pub fn synthetic(&self) -> Result<&SyntheticConfig> {
        self.dataset
            .synthetic
            .as_ref()
            .context("synthetic dataset needs a [dataset.synthetic] table")
    }

    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        let s = self.synthetic()?;
        Ok(SyntheticSpec {
            classes: s.classes,
            per_class: s.per_class,
            dims: [3, s.height, s.width],
            separation: s.separation,
            seed: self.dataset.split_seed,
        })
    }

    pub fn split_spec(&self) -> SplitSpec {
        let seed = self.dataset.split_seed;
        match self.dataset.kind {
            DatasetKind::Cifar10 | DatasetKind::Synthetic => SplitSpec::cifar10(seed),
            DatasetKind::Cifar100 => SplitSpec::cifar100(seed),
            DatasetKind::Stl10 => SplitSpec::stl10(seed),
        }
    }

    pub fn channels(&self, conv: [usize; CONV_LAYERS]) -> ChannelConfig {
        ChannelConfig::new(conv, self.classes())
    }

    pub fn search_config(&self, seed: u64) -> SearchConfig {
        let p = &self.planting;
        SearchConfig {
            groups: p.groups,
            plant_count: p.plant_count,
            candidate_mode: p.candidate_mode,
            lambda_train: p.lambda_train,
            lambda_select: p.lambda_select,
            train: p.step.train_config(seed, LossKind::distill(p.lambda_train)),
            max_steps: p.max_steps,
            seed,
            plant_init: p.plant_init,
            kl_form: p.kl_form,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.trials >= 1, "trials must be at least 1");
        let classes = self.classes();
        for conv in [self.teacher_channels, self.initial_channels] {
            self.channels(conv).validate()?;
        }
        for &w in &self.baseline_widths {
            ChannelConfig::uniform(w, classes).validate()?;
        }
        for phase in [&self.teacher, &self.initial, &self.baseline] {
            phase.train_config(0, LossKind::CrossEntropy).validate()?;
        }
        self.search_config(0).validate()?;
        self.architecture()?;
        if self.dataset.kind == DatasetKind::Synthetic {
            let s = self.synthetic()?;
            ensure!(
                s.val_count + s.test_count < s.classes * s.per_class,
                "synthetic pool of {} images cannot hold {} validation and {} test images",
                s.classes * s.per_class,
                s.val_count,
                s.test_count
            );
        }
        Ok(())
    }

    /// Shrinks every epoch budget and dataset split by `scale` in `(0, 1]`.
    pub fn scaled(&self, scale: f64) -> Result<Self> {
        ensure!(scale > 0.0 && scale <= 1.0, "scale {scale} outside (0, 1]");
        if scale == 1.0 {
            return Ok(self.clone());
        }
        let mut c = self.clone();
        c.teacher = self.teacher.scaled(scale);
        c.initial = self.initial.scaled(scale);
        c.baseline = self.baseline.scaled(scale);
        c.planting.step = self.planting.step.scaled(scale);
        match c.dataset.kind {
            DatasetKind::Synthetic => {
                let s = c
                    .dataset
                    .synthetic
                    .as_mut()
                    .context("missing synthetic table")?;
                s.per_class = scale_count(s.per_class, scale);
                s.val_count = scale_count(s.val_count, scale);
                s.test_count = scale_count(s.test_count, scale);
            }
            _ => {
                let full = self.dataset.subset.unwrap_or_else(|| {
                    let s = self.split_spec();
                    SubsetConfig {
                        train: s.train_count,
                        val: s.val_count,
                        test: s.test_count,
                    }
                });
                c.dataset.subset = Some(SubsetConfig {
                    train: scale_count(full.train, scale),
                    val: scale_count(full.val, scale),
                    test: scale_count(full.test, scale),
                });
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Identity of everything that shapes results: the first eight bytes
    /// of the SHA-256 of the canonical JSON form, with the trial count and
    /// dataset directory left out.
    pub fn hash(&self) -> u64 {
        let mut c = self.clone();
        c.trials = 0;
        c.dataset.dir = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
