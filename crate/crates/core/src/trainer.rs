//! Minibatch SGD with classical momentum, coupled weight decay, step
//! learning-rate schedules and freeze-mask enforcement.

use serde::{Deserialize, Serialize};

use crate::data::{self, LabeledDataset};
use crate::distill::{DistillLoss, KlForm};
use crate::error::{Error, Result};
use crate::gradcore::{Tape, Tensor4};
use crate::model::PlantableNetwork;
use crate::seed;

const EPOCH_STREAM: u64 = 0x0065_706f_6368;
/// Upper bound on the activation elements of one conv layer during
/// evaluation; sets the evaluation batch size.
const EVAL_BUDGET: usize = 1 << 22;

/// Multiply the learning rate by `factor` at each milestone epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl LrSchedule {
    pub fn constant() -> Self {
        LrSchedule {
            milestones: Vec::new(),
            factor: 1.0,
        }
    }

    /// Milestones at `⌊E/3⌋` and `2⌊E/3⌋`.
    pub fn thirds(epochs: usize, factor: f64) -> Self {
        let third = epochs / 3;
        let milestones = if third == 0 {
            Vec::new()
        } else {
            vec![third, 2 * third]
        };
        LrSchedule { milestones, factor }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Distill {
        lambda: f64,
        #[serde(default)]
        form: KlForm,
    },
}

impl LossKind {
    pub fn distill(lambda: f64) -> Self {
        LossKind::Distill {
            lambda,
            form: KlForm::Standard,
        }
    }

    pub fn objective(&self) -> Result<DistillLoss> {
        match *self {
            LossKind::CrossEntropy => DistillLoss::new(1.0),
            LossKind::Distill { lambda, form } => DistillLoss::with_form(lambda, form),
        }
    }

    /// Report label: `CELoss` or `KLLoss`.
    pub fn label(&self) -> &'static str {
        match self {
            LossKind::CrossEntropy => "CELoss",
            LossKind::Distill { .. } => "KLLoss",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub schedule: LrSchedule,
    pub seed: u64,
    pub loss: LossKind,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning rate {} must be positive",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!(
                "weight decay {} must be non-negative",
                self.weight_decay
            ));
        }
        if !(self.schedule.factor > 0.0 && self.schedule.factor <= 1.0) {
            return bad(format!(
                "schedule factor {} outside (0, 1]",
                self.schedule.factor
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        self.loss.objective().map(|_| ())
    }
}

/// `base_lr · factor^(number of milestones ≤ epoch)`.
pub fn lr_at_epoch(config: &TrainConfig, epoch: usize) -> f64 {
    let passed = config
        .schedule
        .milestones
        .iter()
        .filter(|&&m| m <= epoch)
        .count();
    config.learning_rate * config.schedule.factor.powi(passed as i32)
}

/// Momentum buffers, one per parameter tensor that has trainable elements.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Option<Vec<f64>>>,
}

impl OptimizerState {
    pub fn new(net: &PlantableNetwork) -> Self {
        OptimizerState {
            velocity: net
                .params()
                .map(|p| p.has_trainable().then(|| vec![0.0; p.value().len()]))
                .collect(),
        }
    }

    pub fn buffer(&self, param: usize) -> Option<&[f64]> {
        self.velocity.get(param)?.as_deref()
    }
}

/// One SGD step: `g' = g + wd·w; v = μ·v + g'; w = w − lr·v` on trainable
/// elements. Frozen elements are never written.
pub fn sgd_step(
    net: &mut PlantableNetwork,
    grads: &[Tensor4],
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let count = net.params().count();
    if grads.len() != count || state.velocity.len() != count {
        return Err(Error::shape(format!(
            "{count} parameters, {} gradients, {} buffers",
            grads.len(),
            state.velocity.len()
        )));
    }
    for (p, g) in net.params().zip(grads) {
        if p.value().dims() != g.dims() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {:?}",
                g.dims(),
                p.value().dims()
            )));
        }
    }
    let (mu, wd) = (config.momentum, config.weight_decay);
    for ((p, g), v) in net.params_mut().zip(grads).zip(&mut state.velocity) {
        let Some(v) = v else { continue };
        let frozen = p.frozen().to_vec();
        let w = p.value_mut().data_mut();
        for i in 0..w.len() {
            if frozen[i] {
                continue;
            }
            let gi = g.data()[i] + wd * w[i];
            v[i] = mu * v[i] + gi;
            w[i] -= lr * v[i];
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: Option<f64>,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub records: Vec<EpochRecord>,
}

impl EpochLog {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    /// Sample-weighted mean loss.
    pub loss: f64,
    /// Fraction of correctly classified samples.
    pub accuracy: f64,
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn correct(logits: &Tensor4, labels: &[usize]) -> usize {
    labels
        .iter()
        .enumerate()
        .filter(|&(b, &y)| argmax(logits.row(b)) == y)
        .count()
}

/// Evaluation batch size for `net`, bounded by activation memory.
pub fn eval_batch_size(net: &PlantableNetwork) -> usize {
    let [_, h, w] = net.spec().input;
    let widest = net.channels().conv.iter().copied().max().unwrap_or(1);
    (EVAL_BUDGET / (widest * h * w)).clamp(1, 256)
}

/// Rows `indices` of a `(N, classes)` logit table.
pub fn gather_rows(table: &Tensor4, indices: &[usize]) -> Tensor4 {
    let k = table.item_len();
    let mut data = Vec::with_capacity(indices.len() * k);
    for &i in indices {
        data.extend_from_slice(table.row(i));
    }
    Tensor4::from_rows(indices.len(), k, data).expect("non-empty rows")
}

/// Logits of `net` for every image in `data`, as `(N, classes, 1, 1)`.
pub fn dataset_logits(net: &PlantableNetwork, data: &LabeledDataset) -> Result<Tensor4> {
    let k = net.classes();
    let mut out = Vec::with_capacity(data.len() * k);
    for idx in data::sequential_batches(data.len(), eval_batch_size(net)) {
        out.extend_from_slice(net.forward(&data.images(&idx))?.data());
    }
    Tensor4::from_rows(data.len(), k, out)
}

/// Loss and accuracy of `net` on `data`. `teacher` holds precomputed
/// teacher logits for the same images, required when the loss uses them.
pub fn evaluate(
    net: &PlantableNetwork,
    data: &LabeledDataset,
    teacher: Option<&Tensor4>,
    loss: &DistillLoss,
) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut total = 0.0;
    let mut hits = 0;
    for idx in data::sequential_batches(data.len(), eval_batch_size(net)) {
        let logits = net.forward(&data.images(&idx))?;
        let labels = data.labels_at(&idx);
        let t = teacher.map(|t| gather_rows(t, &idx));
        total += loss.value(&logits, t.as_ref(), &labels)? * idx.len() as f64;
        hits += correct(&logits, &labels);
    }
    let n = data.len() as f64;
    Ok(Evaluation {
        loss: total / n,
        accuracy: hits as f64 / n,
    })
}

/// A dataset split together with cached teacher logits, if any.
#[derive(Clone, Copy, Debug)]
pub struct Supervision<'a> {
    pub data: &'a LabeledDataset,
    pub teacher_logits: Option<&'a Tensor4>,
}

impl<'a> Supervision<'a> {
    pub fn labels_only(data: &'a LabeledDataset) -> Self {
        Supervision {
            data,
            teacher_logits: None,
        }
    }
}

/// Trains a copy of `net`. With a distillation loss the teacher is run
/// forward once per split and never updated.
pub fn train(
    net: &PlantableNetwork,
    teacher: Option<&PlantableNetwork>,
    train_set: &LabeledDataset,
    val_set: Option<&LabeledDataset>,
    config: &TrainConfig,
) -> Result<(PlantableNetwork, EpochLog)> {
    let objective = config.loss.objective()?;
    let teacher = if objective.needs_teacher() {
        let t = teacher.ok_or(Error::MissingTeacher)?;
        net.compatible_with(t)?;
        Some(t)
    } else {
        None
    };
    let train_logits = teacher.map(|t| dataset_logits(t, train_set)).transpose()?;
    let val_logits = match (teacher, val_set) {
        (Some(t), Some(v)) => Some(dataset_logits(t, v)?),
        _ => None,
    };
    train_supervised(
        net,
        Supervision {
            data: train_set,
            teacher_logits: train_logits.as_ref(),
        },
        val_set.map(|data| Supervision {
            data,
            teacher_logits: val_logits.as_ref(),
        }),
        config,
    )
}

/// [`train`] with teacher logits already computed.
pub fn train_supervised(
    net: &PlantableNetwork,
    train_set: Supervision<'_>,
    val_set: Option<Supervision<'_>>,
    config: &TrainConfig,
) -> Result<(PlantableNetwork, EpochLog)> {
    config.validate()?;
    let objective = config.loss.objective()?;
    if train_set.data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if objective.needs_teacher() && train_set.teacher_logits.is_none() {
        return Err(Error::MissingTeacher);
    }
    if train_set.data.dims() != net.spec().input {
        return Err(Error::shape(format!(
            "dataset images {:?} vs network input {:?}",
            train_set.data.dims(),
            net.spec().input
        )));
    }

    let mut net = net.clone();
    let mut state = OptimizerState::new(&net);
    let mut log = EpochLog::default();
    let data = train_set.data;
    for epoch in 0..config.epochs {
        let lr = lr_at_epoch(config, epoch);
        let order = data::batches(
            data.len(),
            config.batch_size,
            seed::derive(config.seed, &[EPOCH_STREAM, epoch as u64]),
        )?;
        let mut loss_sum = 0.0;
        let mut hits = 0;
        for idx in order {
            let labels = data.labels_at(&idx);
            let soft = train_set.teacher_logits.map(|t| gather_rows(t, &idx));
            let mut tape = Tape::new();
            let (logits, params) = net.forward_taped(&mut tape, data.images(&idx))?;
            let loss = objective.record(&mut tape, logits, soft.as_ref(), &labels)?;
            loss_sum += tape.value(loss)?.data()[0] * idx.len() as f64;
            hits += correct(tape.value(logits)?, &labels);
            let mut grads = tape.backward(loss)?;
            let grads = params
                .iter()
                .map(|&p| grads.take(p))
                .collect::<Result<Vec<_>>>()?;
            drop(tape);
            sgd_step(&mut net, &grads, &mut state, lr, config)?;
        }
        let n = data.len() as f64;
        let val = val_set
            .map(|v| evaluate(&net, v.data, v.teacher_logits, &objective))
            .transpose()?;
        log.records.push(EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / n,
            train_acc: hits as f64 / n,
            val_loss: val.map(|e| e.loss),
            val_acc: val.map(|e| e.accuracy),
        });
    }
    Ok((net, log))
}
