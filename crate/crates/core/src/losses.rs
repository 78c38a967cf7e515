//! Training objectives. All of them consume probability rows and targets as
//! one-hot rows, use the natural log, and guard `log 0` with [`EPS_CLAMP`].

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const EPS_CLAMP: f32 = 1e-7;
const ROW_SUM_TOL: f32 = 1e-4;

/// A scalar loss on the tape plus the value it had when computed.
#[derive(Clone, Copy, Debug)]
pub struct LossValue {
    pub var: Var,
    pub value: f32,
}

impl LossValue {
    fn new(tape: &Tape, var: Var) -> Result<Self> {
        let value = tape.value(var).item().expect("losses are scalars");
        if !value.is_finite() {
            return Err(Error::InvalidArgument(format!("loss is not finite: {value}")));
        }
        Ok(Self { var, value })
    }
}

fn check_one_hot(op: &'static str, targets: &Tensor) -> Result<()> {
    let c = *targets.shape().last().unwrap_or(&0);
    if c == 0 {
        return Err(shape_err(op, "targets have no classes"));
    }
    for (i, row) in targets.data().chunks(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        if ones != 1 || row.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("{op}: target row {i} is not one-hot")));
        }
    }
    Ok(())
}

fn check_rows(op: &'static str, probs: &Tensor) -> Result<()> {
    let c = probs.shape()[1];
    for (i, row) in probs.data().chunks(c).enumerate() {
        let s: f32 = row.iter().sum();
        if row.iter().any(|&v| v < 0.0 || v.is_nan()) || (s - 1.0).abs() > ROW_SUM_TOL {
            return Err(Error::InvalidArgument(format!("{op}: row {i} is not a probability vector (sum {s})")));
        }
    }
    Ok(())
}

/// `−(1/B) Σ_i Σ_k t_ik · ln max(p_ik, ε)`.
///
/// When `probs` came straight from [`Tape::softmax`] the log is taken from the
/// logits. The value is the same; the gradient is that of the unclamped log,
/// so samples whose target probability has underflowed still get a signal.
pub fn cross_entropy(tape: &mut Tape, probs: Var, targets: Var) -> Result<LossValue> {
    let (ps, ts) = (tape.shape(probs), tape.shape(targets));
    if ps.len() != 2 || ps != ts {
        return Err(shape_err("cross_entropy", format!("probs {ps:?} vs targets {ts:?}")));
    }
    let b = ps[0];
    if b == 0 {
        return Err(shape_err("cross_entropy", "empty batch"));
    }
    check_one_hot("cross_entropy", tape.value(targets))?;
    check_rows("cross_entropy", tape.value(probs))?;

    let log_p = match tape.softmax_input(probs) {
        Some(logits) => {
            let lp = tape.log_softmax(logits)?;
            let floor = EPS_CLAMP.ln();
            let fix = tape.value(lp).data().iter().map(|&v| v.max(floor) - v).collect();
            let fix = tape.constant(Tensor::new(tape.shape(lp), fix)?);
            tape.add(lp, fix)?
        }
        None => {
            let clamped = tape.clamp_min(probs, EPS_CLAMP);
            tape.log(clamped)?
        }
    };
    let picked = tape.mul(targets, log_p)?;
    let total = tape.sum(picked);
    let loss = tape.scale(total, -1.0 / b as f32);
    LossValue::new(tape, loss)
}

/// Column means of a `(B, C)` probability batch.
pub fn average_prediction(tape: &mut Tape, probs: Var) -> Result<Var> {
    let s = tape.shape(probs);
    if s.len() != 2 || s[0] == 0 {
        return Err(shape_err("average_prediction", format!("need a non-empty (B, C) batch, got {s:?}")));
    }
    tape.mean_axis(probs, 0)
}

/// `(1/C) Σ_k a_k · ln max(a_k, ε)`: minimal (`ln(1/C)/C`) at the uniform
/// vector, zero at any one-hot vector.
pub fn information_entropy_loss(tape: &mut Tape, avg: Var) -> Result<LossValue> {
    let s = tape.shape(avg);
    if s.len() != 1 || s[0] == 0 {
        return Err(shape_err("information_entropy_loss", format!("need a (C) vector, got {s:?}")));
    }
    let c = s[0];
    if let Some(v) = tape.value(avg).data().iter().find(|&&v| v < 0.0 || v.is_nan()) {
        return Err(Error::InvalidArgument(format!("information_entropy_loss: negative entry {v}")));
    }
    let clamped = tape.clamp_min(avg, EPS_CLAMP);
    let log = tape.log(clamped)?;
    let terms = tape.mul(avg, log)?;
    let total = tape.sum(terms);
    let loss = tape.scale(total, 1.0 / c as f32);
    LossValue::new(tape, loss)
}

/// `L_ce + λ·L_info` together with its two parts.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorLoss {
    pub total: LossValue,
    pub ce: LossValue,
    pub info: LossValue,
}

pub fn generator_loss(tape: &mut Tape, probs: Var, targets: Var, lambda: f32) -> Result<GeneratorLoss> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidArgument(format!("lambda must be finite and non-negative, got {lambda}")));
    }
    let ce = cross_entropy(tape, probs, targets)?;
    let avg = average_prediction(tape, probs)?;
    let info = information_entropy_loss(tape, avg)?;
    let weighted = tape.scale(info.var, lambda);
    let total = tape.add(ce.var, weighted)?;
    Ok(GeneratorLoss {
        total: LossValue::new(tape, total)?,
        ce,
        info,
    })
}

/// Student objective on teacher hard labels; the same function as
/// [`cross_entropy`].
pub fn distill_loss(tape: &mut Tape, student_probs: Var, teacher_labels: Var) -> Result<LossValue> {
    cross_entropy(tape, student_probs, teacher_labels)
}
