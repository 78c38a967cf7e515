//! Supervised training of the networks that stand behind an oracle.

use crate::data::{LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::losses::cross_entropy;
use crate::nn::{Arch, Classifier, Module, OptimizerKind, OptimizerState, TeacherNet};
use crate::tensor::{one_hot, SeededRng, Tape};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TeacherConfig {
    pub arch: Arch,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            arch: Arch::LeNet,
            epochs: 10,
            batch_size: 128,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Adam on cross-entropy over shuffled mini-batches of a train split.
/// `on_epoch` receives the epoch index and its mean training loss.
pub fn train_teacher(
    data: &LabeledDataset,
    config: &TeacherConfig,
    on_epoch: &mut dyn FnMut(usize, f32, &TeacherNet),
) -> Result<TeacherNet> {
    if data.split() != Split::Train {
        return Err(Error::InvalidArgument("teachers are trained on a train split".into()));
    }
    if data.is_empty() || config.batch_size == 0 {
        return Err(Error::InvalidArgument("need a non-empty dataset and batch size".into()));
    }
    let mut init = SeededRng::new(config.seed, "teacher-init");
    let mut order_rng = SeededRng::new(config.seed, "teacher-order");
    let mut net = Classifier::new(config.arch, data.image_shape(), data.classes(), &mut init)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(config.lr), &net.params());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order_rng.shuffle(&mut order);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let (x, labels) = data.select(chunk)?;
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let xv = tape.constant(x);
            let yv = tape.constant(one_hot(&labels, data.classes())?);
            let p = net.probs(&mut tape, &bound, xv)?;
            let loss = cross_entropy(&mut tape, p, yv)?;
            tape.backward(loss.var)?;
            let grads = bound.grads(&tape);
            opt.step(net.params_mut(), &grads)?;
            total += loss.value as f64;
            batches += 1;
        }
        let mean = (total / batches as f64) as f32;
        log::info!("teacher epoch {epoch}: mean loss {mean:.4}");
        on_epoch(epoch, mean, &net);
    }
    Ok(net)
}
