//! The planting loop. Each step plants `n` channels into every candidate
//! group on a copy of the current network, trains only the new parameters
//! against the teacher, and keeps the candidate with the lowest validation
//! loss if it beats the current network. The loop ends at the first step
//! with no improvement.

mod state;

use rand::seq::index;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use state::{load_state, save_state, step_log_csv, step_log_json, STATE_MAGIC, STATE_VERSION};

use crate::data::LabeledDataset;
use crate::distill::{DistillLoss, KlForm};
use crate::error::{Error, Result};
use crate::gradcore::Tensor4;
use crate::model::{PlantInit, PlantableNetwork, CONV_LAYERS};
use crate::seed;
use crate::trainer::{self, dataset_logits, LossKind, Supervision, TrainConfig};

const CANDIDATE_STREAM: u64 = 0x0070_6c61_6e74;
const SELECT_STREAM: u64 = 0x7365_6c65_6374;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum CandidateMode {
    /// Evaluate every group each step.
    BruteForce,
    /// Evaluate `k` distinct groups drawn per step.
    Random { k: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    /// Number of layer groups `G`.
    pub groups: usize,
    /// Channels planted per layer per step.
    pub plant_count: usize,
    pub candidate_mode: CandidateMode,
    /// λ of the distillation loss used to train planted channels.
    pub lambda_train: f64,
    /// λ of the loss compared on the validation split.
    pub lambda_select: f64,
    /// Per-candidate training; its `loss` and `seed` are overridden.
    pub train: TrainConfig,
    pub max_steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub plant_init: PlantInit,
    #[serde(default)]
    pub kl_form: KlForm,
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.groups == 0 || self.groups > CONV_LAYERS {
            return Err(Error::invalid(format!(
                "group count {} outside 1..={CONV_LAYERS}",
                self.groups
            )));
        }
        if self.plant_count == 0 {
            return Err(Error::invalid("plant count must be at least 1"));
        }
        if let CandidateMode::Random { k } = self.candidate_mode {
            if k == 0 || k > self.groups {
                return Err(Error::invalid(format!(
                    "random search over {k} of {} groups",
                    self.groups
                )));
            }
        }
        DistillLoss::new(self.lambda_train)?;
        DistillLoss::new(self.lambda_select)?;
        self.train.validate()
    }

    fn train_objective(&self) -> LossKind {
        LossKind::Distill {
            lambda: self.lambda_train,
            form: self.kl_form,
        }
    }

    fn select_objective(&self) -> Result<DistillLoss> {
        DistillLoss::with_form(self.lambda_select, self.kl_form)
    }
}

/// Contiguous 1-based layer groups: group `g` holds the layers `l` with
/// `g·L/G ≤ l − 1 < (g + 1)·L/G`.
pub fn group_partition(layers: usize, groups: usize) -> Result<Vec<Vec<usize>>> {
    if groups == 0 || groups > layers {
        return Err(Error::invalid(format!(
            "group count {groups} outside 1..={layers}"
        )));
    }
    Ok((0..groups)
        .map(|g| {
            (1..=layers)
                .filter(|&l| g * layers <= (l - 1) * groups && (l - 1) * groups < (g + 1) * layers)
                .collect()
        })
        .collect())
}

/// Group indices to evaluate at `step`, ascending.
pub fn select_candidates(
    groups: usize,
    mode: CandidateMode,
    seed: u64,
    step: usize,
) -> Result<Vec<usize>> {
    match mode {
        CandidateMode::BruteForce => Ok((0..groups).collect()),
        CandidateMode::Random { k } => {
            if k > groups {
                return Err(Error::invalid(format!(
                    "cannot pick {k} of {groups} groups"
                )));
            }
            let mut rng = seed::rng(seed::derive(seed, &[SELECT_STREAM, step as u64]));
            let mut picked = index::sample(&mut rng, groups, k).into_vec();
            picked.sort_unstable();
            Ok(picked)
        }
    }
}

/// Mean combined loss of `net` on `val` at `lambda`.
pub fn selection_loss(
    net: &PlantableNetwork,
    teacher: &PlantableNetwork,
    val: &LabeledDataset,
    lambda: f64,
) -> Result<f64> {
    let objective = DistillLoss::new(lambda)?;
    let logits = if objective.needs_teacher() {
        net.compatible_with(teacher)?;
        Some(dataset_logits(teacher, val)?)
    } else {
        None
    };
    Ok(trainer::evaluate(net, val, logits.as_ref(), &objective)?.loss)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub evaluated_groups: Vec<usize>,
    /// Validation loss per evaluated group; `None` for a diverged candidate.
    pub candidate_losses: Vec<Option<f64>>,
    pub chosen_group: Option<usize>,
    pub accepted: bool,
    /// Channels of the chosen candidate.
    pub channels: [usize; CONV_LAYERS],
    pub param_count: usize,
    /// Validation loss of the chosen candidate.
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchState {
    pub current: PlantableNetwork,
    pub current_loss: f64,
    pub initial_loss: f64,
    pub step_log: Vec<StepRecord>,
    pub next_step: usize,
    /// Set once a step fails to improve on the current network.
    pub finished: bool,
}

impl SearchState {
    /// Validation losses of the initial network and every accepted step.
    pub fn accepted_losses(&self) -> Vec<f64> {
        std::iter::once(self.initial_loss)
            .chain(
                self.step_log
                    .iter()
                    .filter(|r| r.accepted)
                    .map(|r| r.val_loss),
            )
            .collect()
    }
}

struct Candidate {
    group: usize,
    network: Option<PlantableNetwork>,
    loss: Option<f64>,
}

/// Data and teacher outputs shared by every step of one search.
pub struct PlantingRun<'a> {
    config: &'a SearchConfig,
    groups: Vec<Vec<usize>>,
    train: &'a LabeledDataset,
    val: &'a LabeledDataset,
    train_logits: Option<Tensor4>,
    val_logits: Option<Tensor4>,
}

impl<'a> PlantingRun<'a> {
    pub fn new(
        teacher: &PlantableNetwork,
        train: &'a LabeledDataset,
        val: &'a LabeledDataset,
        config: &'a SearchConfig,
    ) -> Result<Self> {
        config.validate()?;
        if val.is_empty() || train.is_empty() {
            return Err(Error::EmptyDataset);
        }
        let train_logits = (config.lambda_train < 1.0)
            .then(|| dataset_logits(teacher, train))
            .transpose()?;
        let val_logits = (config.lambda_select < 1.0)
            .then(|| dataset_logits(teacher, val))
            .transpose()?;
        Ok(PlantingRun {
            config,
            groups: group_partition(CONV_LAYERS, config.groups)?,
            train,
            val,
            train_logits,
            val_logits,
        })
    }

    pub fn selection_loss(&self, net: &PlantableNetwork) -> Result<f64> {
        let objective = self.config.select_objective()?;
        Ok(trainer::evaluate(net, self.val, self.val_logits.as_ref(), &objective)?.loss)
    }

    pub fn initial_state(&self, initial: PlantableNetwork) -> Result<SearchState> {
        let loss = self.selection_loss(&initial)?;
        Ok(SearchState {
            current: initial,
            current_loss: loss,
            initial_loss: loss,
            step_log: Vec::new(),
            next_step: 0,
            finished: false,
        })
    }

    fn candidate(
        &self,
        current: &PlantableNetwork,
        step: usize,
        group: usize,
    ) -> Result<Candidate> {
        let cseed = seed::derive(
            self.config.seed,
            &[CANDIDATE_STREAM, step as u64, group as u64],
        );
        let planted = current.plant_channels(
            &self.groups[group],
            self.config.plant_count,
            cseed,
            self.config.plant_init,
        )?;
        let train_cfg = TrainConfig {
            seed: cseed,
            loss: self.config.train_objective(),
            ..self.config.train.clone()
        };
        let trained = trainer::train_supervised(
            &planted,
            Supervision {
                data: self.train,
                teacher_logits: self.train_logits.as_ref(),
            },
            None,
            &train_cfg,
        );
        let diverged = Candidate {
            group,
            network: None,
            loss: None,
        };
        let (net, _) = match trained {
            Ok(t) => t,
            Err(Error::NonFinite(_)) => return Ok(diverged),
            Err(e) => return Err(e),
        };
        match self.selection_loss(&net) {
            Ok(loss) if loss.is_finite() => Ok(Candidate {
                group,
                network: Some(net),
                loss: Some(loss),
            }),
            Ok(_) | Err(Error::NonFinite(_)) => Ok(diverged),
            Err(e) => Err(e),
        }
    }

    /// Runs one planting step. Returns `false` once the search is over.
    pub fn step(&self, state: &mut SearchState) -> Result<bool> {
        if state.finished || state.next_step >= self.config.max_steps {
            return Ok(false);
        }
        let step = state.next_step;
        let picked = select_candidates(
            self.config.groups,
            self.config.candidate_mode,
            self.config.seed,
            step,
        )?;
        let current = &state.current;
        let candidates = picked
            .par_iter()
            .map(|&g| self.candidate(current, step, g))
            .collect::<Result<Vec<_>>>()?;

        let best = candidates
            .iter()
            .filter_map(|c| c.loss.map(|l| (l, c.group)))
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let losses = candidates.iter().map(|c| c.loss).collect();

        let Some((loss, group)) = best else {
            state.step_log.push(StepRecord {
                step,
                evaluated_groups: picked,
                candidate_losses: losses,
                chosen_group: None,
                accepted: false,
                channels: state.current.channels().conv,
                param_count: state.current.param_count(),
                val_loss: f64::INFINITY,
            });
            state.finished = true;
            state.next_step += 1;
            return Ok(false);
        };
        let winner = candidates
            .into_iter()
            .find(|c| c.group == group)
            .and_then(|c| c.network)
            .expect("winner has a network");
        let accepted = loss < state.current_loss;
        state.step_log.push(StepRecord {
            step,
            evaluated_groups: picked,
            candidate_losses: losses,
            chosen_group: Some(group),
            accepted,
            channels: winner.channels().conv,
            param_count: winner.param_count(),
            val_loss: loss,
        });
        state.next_step += 1;
        if accepted {
            state.current = winner;
            state.current_loss = loss;
        } else {
            state.finished = true;
        }
        Ok(accepted && state.next_step < self.config.max_steps)
    }

    /// Steps until the search stops, calling `observer` after every step.
    pub fn run(
        &self,
        mut state: SearchState,
        mut observer: impl FnMut(&SearchState) -> Result<()>,
    ) -> Result<SearchState> {
        while !state.finished && state.next_step < self.config.max_steps {
            self.step(&mut state)?;
            observer(&state)?;
        }
        Ok(state)
    }
}

/// Full search from `initial`. Returns the final network and the search
/// state, including the step log.
pub fn run_planting(
    initial: &PlantableNetwork,
    teacher: &PlantableNetwork,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &SearchConfig,
) -> Result<(PlantableNetwork, SearchState)> {
    initial.compatible_with(teacher)?;
    let run = PlantingRun::new(teacher, train, val, config)?;
    let state = run.run(run.initial_state(initial.clone())?, |_| Ok(()))?;
    Ok((state.current.clone(), state))
}
