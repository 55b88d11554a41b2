use serde::{Deserialize, Serialize};

use farskip_core::model::{ActivationCache, Bound, Forward, Model};
use farskip_core::{ops, Tape, Tensor, Var};

use crate::corpus::Batch;
use crate::error::{DistillError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LossKind {
    /// Cross-entropy on the supervised tokens.
    Sft,
    /// Token-level KL(teacher ‖ student).
    Kl,
    /// KL plus `lambda` times the per-token squared residual mismatch.
    KlL2 { lambda: f64 },
}

impl LossKind {
    pub fn needs_teacher(self) -> bool {
        !matches!(self, LossKind::Sft)
    }
}

/// Teacher outputs on one batch, computed without gradients.
pub struct TeacherTargets {
    pub probs: Tensor,
    pub residuals: Vec<Tensor>,
}

pub fn check_compatible(teacher: &Model, student: &Model) -> Result<()> {
    let (t, s) = (&teacher.config, &student.config);
    if t.vocab != s.vocab || t.n_layers != s.n_layers || t.d_model != s.d_model {
        return Err(DistillError::Contract(format!(
            "teacher (V={}, L={}, d={}) and student (V={}, L={}, d={}) differ",
            t.vocab, t.n_layers, t.d_model, s.vocab, s.n_layers, s.d_model
        )));
    }
    Ok(())
}

pub fn teacher_targets(teacher: &Model, batch: &Batch) -> Result<TeacherTargets> {
    let mut tape = Tape::new();
    let p = teacher.bind(&mut tape, |_| false);
    let fwd = teacher.forward(&mut tape, &p, &batch.tokens, batch.seq_len)?;
    let probs = ops::softmax_rows(tape.value(fwd.logits))?;
    let residuals = fwd.layers.iter().map(|l| tape.value(l.residual).clone()).collect();
    Ok(TeacherTargets { probs, residuals })
}

/// `Σ_k Σ (o_k(student) − o_k(teacher))²` divided by the token count.
pub fn l2_intermediate(student: &ActivationCache, teacher: &ActivationCache) -> Result<f64> {
    if student.layers.len() != teacher.layers.len() {
        return Err(DistillError::Contract(format!(
            "{} student layers vs {} teacher layers",
            student.layers.len(),
            teacher.layers.len()
        )));
    }
    let tokens = student.embed.rows() as f64;
    let mut total = 0.0;
    for (s, t) in student.layers.iter().zip(&teacher.layers) {
        if s.residual.shape() != t.residual.shape() {
            return Err(DistillError::Contract("residual shapes differ".into()));
        }
        total += s.residual.data().iter().zip(t.residual.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / tokens)
}

/// Records the training loss of `kind` on `tape`; returns the loss node and
/// the student forward.
pub fn record_loss(
    tape: &mut Tape,
    student: &Model,
    params: &Bound,
    batch: &Batch,
    kind: LossKind,
    teacher: Option<&TeacherTargets>,
) -> Result<(Var, Forward)> {
    let fwd = student.forward(tape, params, &batch.tokens, batch.seq_len)?;
    let loss = match kind {
        LossKind::Sft => tape.cross_entropy(fwd.logits, &batch.targets, &batch.mask)?,
        LossKind::Kl | LossKind::KlL2 { .. } => {
            let t = teacher.ok_or_else(|| DistillError::Contract("distillation loss needs a teacher".into()))?;
            let kl = tape.kl_rows(&t.probs, fwd.logits, &batch.mask)?;
            match kind {
                LossKind::KlL2 { lambda } => {
                    if t.residuals.len() != fwd.layers.len() {
                        return Err(DistillError::Contract("layer count mismatch".into()));
                    }
                    let mut l2 = None;
                    for (layer, target) in fwd.layers.iter().zip(&t.residuals) {
                        let d = tape.sq_dist(layer.residual, target)?;
                        l2 = Some(match l2 {
                            None => d,
                            Some(acc) => tape.add(acc, d)?,
                        });
                    }
                    let l2 = l2.expect("at least one layer");
                    let scaled = tape.scale(l2, lambda / batch.n_tokens() as f64);
                    tape.add(kl, scaled)?
                }
                _ => kl,
            }
        }
    };
    Ok((loss, fwd))
}

/// Supervised cross-entropy of `student` on `batch`.
pub fn sft_step(student: &Model, batch: &Batch) -> Result<f64> {
    let mut tape = Tape::new();
    let p = student.bind(&mut tape, |_| false);
    let (loss, _) = record_loss(&mut tape, student, &p, batch, LossKind::Sft, None)?;
    Ok(tape.value(loss).item())
}

/// Mean KL(teacher ‖ student) on `batch`.
pub fn kl_step(student: &Model, teacher: &Model, batch: &Batch) -> Result<f64> {
    check_compatible(teacher, student)?;
    let targets = teacher_targets(teacher, batch)?;
    let mut tape = Tape::new();
    let p = student.bind(&mut tape, |_| false);
    let (loss, _) = record_loss(&mut tape, student, &p, batch, LossKind::Kl, Some(&targets))?;
    Ok(tape.value(loss).item())
}
