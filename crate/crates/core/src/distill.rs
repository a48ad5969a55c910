//! Teacher-student distillation loss: cross-entropy mixed with the KL
//! divergence between teacher and student softmax outputs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradcore::{ops, Tape, Tensor4, Var};

/// Which divergence term to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlForm {
    /// `Σ p_T (log p_T − log p_S)`.
    #[default]
    Standard,
    /// `Σ p_T log p_S`, kept only to compare against the unnormalized
    /// cross term. It is not a divergence and is minimized by pushing the
    /// student away from the teacher.
    Literal,
}

fn check_pair(teacher: &Tensor4, student: &Tensor4) -> Result<()> {
    if teacher.batch() != student.batch() || teacher.item_len() != student.item_len() {
        return Err(Error::shape(format!(
            "teacher logits {:?} vs student logits {:?}",
            teacher.dims(),
            student.dims()
        )));
    }
    Ok(())
}

/// Batch-mean divergence term and its gradient w.r.t. the student logits.
pub fn kl_term_with_grad(
    teacher: &Tensor4,
    student: &Tensor4,
    form: KlForm,
) -> Result<(f64, Tensor4)> {
    check_pair(teacher, student)?;
    let n = teacher.batch();
    let classes = teacher.item_len();
    let scale = 1.0 / n as f64;
    let mut grad = Tensor4::zeros(student.dims());
    let mut total = 0.0;
    for b in 0..n {
        let lt = ops::log_softmax(teacher.row(b));
        let ls = ops::log_softmax(student.row(b));
        let g = &mut grad.data_mut()[b * classes..][..classes];
        for i in 0..classes {
            let pt = lt[i].exp();
            let ps = ls[i].exp();
            match form {
                KlForm::Standard => {
                    // 0·log 0 = 0
                    if pt > 0.0 {
                        total += pt * (lt[i] - ls[i]);
                    }
                    g[i] = (ps - pt) * scale;
                }
                KlForm::Literal => {
                    total += pt * ls[i];
                    g[i] = (pt - ps) * scale;
                }
            }
        }
    }
    let value = total * scale;
    if !value.is_finite() {
        return Err(Error::NonFinite("kl_term"));
    }
    // rounding can leave a tiny negative value when the distributions agree
    let value = if form == KlForm::Standard {
        value.max(0.0)
    } else {
        value
    };
    Ok((value, grad))
}

/// Mean over the batch of `KL(softmax(teacher) ‖ softmax(student))`.
pub fn kl_term(teacher: &Tensor4, student: &Tensor4) -> Result<f64> {
    Ok(kl_term_with_grad(teacher, student, KlForm::Standard)?.0)
}

/// `λ·CE + (1 − λ)·KL` with `λ ∈ [0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistillLoss {
    lambda: f64,
    #[serde(default)]
    form: KlForm,
}

impl DistillLoss {
    pub fn new(lambda: f64) -> Result<Self> {
        Self::with_form(lambda, KlForm::Standard)
    }

    pub fn with_form(lambda: f64, form: KlForm) -> Result<Self> {
        if !(0.0..=1.0).contains(&lambda) {
            return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
        }
        Ok(DistillLoss { lambda, form })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn form(&self) -> KlForm {
        self.form
    }

    /// Whether this loss reads teacher logits at all.
    pub fn needs_teacher(&self) -> bool {
        self.lambda < 1.0
    }

    /// Loss value and gradient w.r.t. the student logits. At the endpoints
    /// only the active term is evaluated, so λ = 1 returns the cross-entropy
    /// and λ = 0 the divergence exactly.
    pub fn value_and_grad(
        &self,
        student: &Tensor4,
        teacher: Option<&Tensor4>,
        targets: &[usize],
    ) -> Result<(f64, Tensor4)> {
        let ce = (self.lambda > 0.0)
            .then(|| ops::softmax_cross_entropy(student, targets))
            .transpose()?;
        let kl = if self.needs_teacher() {
            let teacher = teacher.ok_or(Error::MissingTeacher)?;
            Some(kl_term_with_grad(teacher, student, self.form)?)
        } else {
            None
        };
        match (ce, kl) {
            (Some(ce), None) => Ok(ce),
            (None, Some(kl)) => Ok(kl),
            (Some((ce, mut g)), Some((kl, gk))) => {
                let (a, b) = (self.lambda, 1.0 - self.lambda);
                for (x, y) in g.data_mut().iter_mut().zip(gk.data()) {
                    *x = a * *x + b * y;
                }
                let v = a * ce + b * kl;
                if !v.is_finite() {
                    return Err(Error::NonFinite("combined_loss"));
                }
                Ok((v, g))
            }
            (None, None) => unreachable!("lambda is in [0, 1]"),
        }
    }

    pub fn value(
        &self,
        student: &Tensor4,
        teacher: Option<&Tensor4>,
        targets: &[usize],
    ) -> Result<f64> {
        Ok(self.value_and_grad(student, teacher, targets)?.0)
    }

    /// Records the loss on `tape`. Teacher logits enter as a constant.
    pub fn record(
        &self,
        tape: &mut Tape,
        student: Var,
        teacher: Option<&Tensor4>,
        targets: &[usize],
    ) -> Result<Var> {
        let (value, grad) = self.value_and_grad(tape.value(student)?, teacher, targets)?;
        tape.loss(student, value, grad)
    }
}

/// `λ·CE(student, targets) + (1 − λ)·KL(teacher ‖ student)`.
pub fn combined_loss(
    student: &Tensor4,
    teacher: &Tensor4,
    targets: &[usize],
    lambda: f64,
) -> Result<f64> {
    DistillLoss::new(lambda)?.value(student, Some(teacher), targets)
}
