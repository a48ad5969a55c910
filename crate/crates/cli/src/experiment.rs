//! The run modes. Each one reads and writes artifacts under one output
//! directory:
//!
//! ```text
//! out/config.toml
//! out/teacher/trial-0/{network.ckpt, epochs.csv, result.csv}
//! out/initial/trial-0/...
//! out/baseline/w16-kd/trial-0/...
//! out/plant/trial-0/{state.bin, current.ckpt, steps/step-000.ckpt, steps.csv, steps.json, network.ckpt, result.csv}
//! out/report.{csv,txt}
//! ```

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use planting::data::{load_cifar10, load_cifar100, load_stl10, make_synthetic};
use planting::io::write_atomic;
use planting::model::{checkpoint, CONV_LAYERS};
use planting::search::{load_state, save_state, step_log_csv, step_log_json, PlantingRun};
use planting::trainer::evaluate;
use planting::{seed, DistillLoss, LossKind, PlantableNetwork, SearchConfig, Splits};

use crate::config::{DatasetKind, ExperimentConfig, PhaseConfig};
use crate::report::{NetworkKind, ResultRow};

const TEACHER: u64 = 1;
const INITIAL: u64 = 2;
const BASELINE: u64 = 3;
const PLANT: u64 = 4;
const INIT_STREAM: u64 = 0;
const TRAIN_STREAM: u64 = 1;

pub const NETWORK_FILE: &str = "network.ckpt";
pub const RESULT_FILE: &str = "result.csv";

/// Loss used to train a fixed-width student.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineLoss {
    CrossEntropy,
    /// Pure distillation from the teacher of the same trial.
    Distill,
}

impl BaselineLoss {
    fn tag(self) -> &'static str {
        match self {
            BaselineLoss::CrossEntropy => "ce",
            BaselineLoss::Distill => "kd",
        }
    }

    fn loss_kind(self) -> LossKind {
        match self {
            BaselineLoss::CrossEntropy => LossKind::CrossEntropy,
            BaselineLoss::Distill => LossKind::distill(0.0),
        }
    }
}

pub fn load_splits(config: &ExperimentConfig) -> Result<Splits> {
    let dir = || {
        config
            .dataset
            .dir
            .as_deref()
            .context("this dataset needs a directory: set dataset.dir or pass --dataset-dir")
    };
    let split = config.split_spec();
    let splits = match config.dataset.kind {
        DatasetKind::Cifar10 => load_cifar10(dir()?, &split)?,
        DatasetKind::Cifar100 => load_cifar100(dir()?, &split)?,
        DatasetKind::Stl10 => load_stl10(dir()?, &split)?,
        DatasetKind::Synthetic => {
            let s = config.synthetic()?;
            let pool = make_synthetic(&config.synthetic_spec()?)?;
            Splits::carve(&pool, s.val_count, s.test_count, config.dataset.split_seed)?
        }
    };
    Ok(match config.dataset.subset {
        Some(s) => splits.limit(s.train, s.val, s.test)?,
        None => splits,
    })
}

fn label(prefix: &str, conv: [usize; CONV_LAYERS]) -> String {
    if conv.iter().all(|&c| c == conv[0]) {
        format!("{prefix}[{}]", conv[0])
    } else {
        let parts: Vec<String> = conv.iter().map(|c| c.to_string()).collect();
        format!("{prefix}[{}]", parts.join(","))
    }
}

fn trial_dir(base: PathBuf, trial: usize) -> PathBuf {
    base.join(format!("trial-{trial}"))
}

/// One experiment bound to an output directory and its loaded data.
pub struct Experiment {
    config: ExperimentConfig,
    hash: u64,
    out: PathBuf,
    splits: Splits,
}

impl Experiment {
    /// Loads the dataset and claims `out` for this config. An output
    /// directory already holding a different config is refused.
    pub fn open(config: ExperimentConfig, out: &Path) -> Result<Self> {
        config.validate()?;
        let hash = config.hash();
        let path = out.join("config.toml");
        if path.exists() {
            let existing = ExperimentConfig::load(&path)?;
            ensure!(
                existing.hash() == hash,
                "{} holds a different experiment (config hash {:016x}, this run {:016x})",
                out.display(),
                existing.hash(),
                hash
            );
        }
        let mut stored = config.clone();
        stored.dataset.dir = None;
        write_atomic(&path, stored.to_toml()?.as_bytes())?;
        let splits = load_splits(&config)?;
        eprintln!(
            "data: {} train / {} val / {} test images",
            splits.train.len(),
            splits.val.len(),
            splits.test.len()
        );
        Ok(Experiment {
            config,
            hash,
            out: out.to_owned(),
            splits,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn hash(&self) -> u64 {
        self.hash
    }

    pub fn splits(&self) -> &Splits {
        &self.splits
    }

    pub fn teacher_dir(&self, trial: usize) -> PathBuf {
        trial_dir(self.out.join("teacher"), trial)
    }

    pub fn initial_dir(&self, trial: usize) -> PathBuf {
        trial_dir(self.out.join("initial"), trial)
    }

    pub fn baseline_dir(&self, width: usize, loss: BaselineLoss, trial: usize) -> PathBuf {
        trial_dir(
            self.out
                .join("baseline")
                .join(format!("w{width}-{}", loss.tag())),
            trial,
        )
    }

    pub fn plant_dir(&self, trial: usize) -> PathBuf {
        trial_dir(self.out.join("plant"), trial)
    }

    fn trial_seed(&self, parts: &[u64]) -> u64 {
        seed::derive(self.config.seed, parts)
    }

    fn load_network(&self, dir: &Path, what: &str) -> Result<PlantableNetwork> {
        let path = dir.join(NETWORK_FILE);
        ensure!(
            path.exists(),
            "{what} checkpoint {} not found; train it first",
            path.display()
        );
        let ckpt = checkpoint::load(&path)?;
        ensure!(
            ckpt.config_hash == self.hash,
            "{} was written under config {:016x}, not the current {:016x}",
            path.display(),
            ckpt.config_hash,
            self.hash
        );
        Ok(ckpt.network)
    }

    fn row(
        &self,
        kind: NetworkKind,
        label: String,
        net: &PlantableNetwork,
        loss: LossKind,
        trial: usize,
    ) -> Result<ResultRow> {
        let eval = evaluate(net, &self.splits.test, None, &DistillLoss::new(1.0)?)?;
        Ok(ResultRow {
            kind,
            network: label,
            loss_func: loss.label().to_owned(),
            trial,
            params: net.param_count(),
            test_loss: eval.loss,
            test_acc: eval.accuracy * 100.0,
            config_hash: format!("{:016x}", self.hash),
        })
    }

    fn write_row(&self, dir: &Path, row: &ResultRow) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.serialize(row)?;
        write_atomic(&dir.join(RESULT_FILE), &w.into_inner()?)?;
        eprintln!(
            "{} ({}, trial {}): {} params, test loss {:.4}, test acc {:.2}%",
            row.network, row.loss_func, row.trial, row.params, row.test_loss, row.test_acc
        );
        Ok(())
    }

    /// Builds and trains one network, then writes its checkpoint, epoch log
    /// and result row to `dir`.
    #[allow(clippy::too_many_arguments)]
    fn fit(
        &self,
        dir: &Path,
        kind: NetworkKind,
        label: String,
        conv: [usize; CONV_LAYERS],
        phase: &PhaseConfig,
        loss: LossKind,
        teacher: Option<&PlantableNetwork>,
        seed: u64,
        trial: usize,
    ) -> Result<PlantableNetwork> {
        let net = PlantableNetwork::build(
            self.config.architecture()?,
            self.config.channels(conv),
            seed::derive(seed, &[INIT_STREAM]),
        )?;
        let cfg = phase.train_config(seed::derive(seed, &[TRAIN_STREAM]), loss);
        eprintln!(
            "training {label} ({}, trial {trial}) for {} epochs",
            loss.label(),
            cfg.epochs
        );
        let (net, log) = planting::train(
            &net,
            teacher,
            &self.splits.train,
            Some(&self.splits.val),
            &cfg,
        )?;
        checkpoint::save(&dir.join(NETWORK_FILE), &net, self.hash)?;
        write_atomic(&dir.join("epochs.csv"), &log.to_csv()?)?;
        let row = self.row(kind, label, &net, loss, trial)?;
        self.write_row(dir, &row)?;
        Ok(net)
    }

    pub fn train_teacher(&self) -> Result<()> {
        for trial in 0..self.config.trials {
            let conv = self.config.teacher_channels;
            self.fit(
                &self.teacher_dir(trial),
                NetworkKind::Teacher,
                label("Teacher", conv),
                conv,
                &self.config.teacher,
                LossKind::CrossEntropy,
                None,
                self.trial_seed(&[TEACHER, trial as u64]),
                trial,
            )?;
        }
        Ok(())
    }

    pub fn train_initial(&self) -> Result<()> {
        for trial in 0..self.config.trials {
            let conv = self.config.initial_channels;
            self.fit(
                &self.initial_dir(trial),
                NetworkKind::Initial,
                label("Initial", conv),
                conv,
                &self.config.initial,
                LossKind::CrossEntropy,
                None,
                self.trial_seed(&[INITIAL, trial as u64]),
                trial,
            )?;
        }
        Ok(())
    }

    /// Trains uniform-width students. Widths default to the configured
    /// list.
    pub fn train_baseline(&self, widths: Option<&[usize]>, losses: &[BaselineLoss]) -> Result<()> {
        let widths = widths.unwrap_or(&self.config.baseline_widths);
        ensure!(!widths.is_empty(), "no baseline widths given");
        for trial in 0..self.config.trials {
            let teacher = if losses.contains(&BaselineLoss::Distill) {
                Some(self.load_network(&self.teacher_dir(trial), "teacher")?)
            } else {
                None
            };
            for &width in widths {
                for &loss in losses {
                    let conv = [width; CONV_LAYERS];
                    self.fit(
                        &self.baseline_dir(width, loss, trial),
                        NetworkKind::Student,
                        label("Student", conv),
                        conv,
                        &self.config.baseline,
                        loss.loss_kind(),
                        teacher.as_ref(),
                        self.trial_seed(&[
                            BASELINE,
                            width as u64,
                            (loss == BaselineLoss::Distill) as u64,
                            trial as u64,
                        ]),
                        trial,
                    )?;
                }
            }
        }
        Ok(())
    }

    /// Runs the planting search for every trial, resuming from `state.bin`
    /// when a previous run of the same config left one.
    pub fn plant(&self) -> Result<()> {
        for trial in 0..self.config.trials {
            self.plant_trial(trial)?;
        }
        Ok(())
    }

    /// Search settings of one trial, with its derived seed.
    pub fn search_config(&self, trial: usize) -> SearchConfig {
        self.config
            .search_config(self.trial_seed(&[PLANT, trial as u64]))
    }

    fn plant_trial(&self, trial: usize) -> Result<PlantableNetwork> {
        let dir = self.plant_dir(trial);
        let teacher = self.load_network(&self.teacher_dir(trial), "teacher")?;
        let initial = self.load_network(&self.initial_dir(trial), "initial network")?;
        initial.compatible_with(&teacher)?;
        let search = self.search_config(trial);
        let run = PlantingRun::new(&teacher, &self.splits.train, &self.splits.val, &search)?;

        let state_path = dir.join("state.bin");
        let state = if state_path.exists() {
            let (state, hash) = load_state(&state_path)?;
            if hash != self.hash {
                bail!(
                    "{} belongs to config {hash:016x}, not {:016x}; remove the directory to start over",
                    state_path.display(),
                    self.hash
                );
            }
            eprintln!(
                "resuming planting trial {trial} at step {}",
                state.next_step
            );
            state
        } else {
            let state = run.initial_state(initial)?;
            save_state(&dir, &state, "current.ckpt", self.hash)?;
            state
        };

        eprintln!(
            "planting trial {trial}: start {:?}, val loss {:.4}",
            state.current.channels().conv,
            state.current_loss
        );
        let state = run.run(state, |s| {
            let r = s.step_log.last().expect("a step was taken");
            eprintln!(
                "  step {}: candidates {:?} -> {} {:?}, val loss {:.4}",
                r.step,
                r.candidate_losses,
                if r.accepted { "accepted" } else { "rejected" },
                r.channels,
                r.val_loss
            );
            checkpoint::save(
                &dir.join("steps").join(format!("step-{:03}.ckpt", r.step)),
                &s.current,
                self.hash,
            )?;
            write_atomic(&dir.join("steps.csv"), &step_log_csv(&s.step_log)?)?;
            write_atomic(&dir.join("steps.json"), &step_log_json(&s.step_log)?)?;
            save_state(&dir, s, "current.ckpt", self.hash).map(|_| ())
        })?;

        write_atomic(&dir.join("steps.csv"), &step_log_csv(&state.step_log)?)?;
        write_atomic(&dir.join("steps.json"), &step_log_json(&state.step_log)?)?;
        checkpoint::save(&dir.join(NETWORK_FILE), &state.current, self.hash)?;
        let loss = LossKind::distill(self.config.planting.lambda_train);
        let row = self.row(
            NetworkKind::Planted,
            "Ours".into(),
            &state.current,
            loss,
            trial,
        )?;
        self.write_row(&dir, &row)?;
        Ok(state.current)
    }
}
