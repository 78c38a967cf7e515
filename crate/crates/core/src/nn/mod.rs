//! Networks, optimizers and the weight-file format.

mod classifier;
mod generator;
mod layers;
mod optim;
mod weights;

pub use classifier::{Arch, Classifier, StudentNet, TeacherNet};
pub use generator::{GeneratorNet, GeneratorSpec, NormMode, DEFAULT_LATENT_DIM, DEFAULT_WIDTHS};
pub use layers::ParamCursor;
pub use optim::{OptimizerKind, OptimizerState};
pub use weights::{read_weight_file, write_weight_file, WeightFile, WEIGHT_MAGIC, WEIGHT_VERSION};

use crate::tensor::{Tape, Tensor, Var};

/// A network with an ordered list of parameter tensors.
pub trait Module {
    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    fn param_names(&self) -> Vec<String>;

    /// Copies every parameter onto `tape`, as gradient-collecting leaves when
    /// `trainable`, as constants otherwise.
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .params()
            .into_iter()
            .map(|p| tape.leaf(p.clone(), trainable))
            .collect();
        Bound { vars }
    }

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// All parameters concatenated, for equality checks and distances.
    fn flat_params(&self) -> Vec<f32> {
        self.params().iter().flat_map(|p| p.data().iter().copied()).collect()
    }
}

/// Tape handles of a network's parameters for one forward/backward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn cursor(&self) -> ParamCursor<'_> {
        ParamCursor::new(&self.vars)
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Parameter gradients after `tape.backward`, zero where none flowed.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars
            .iter()
            .map(|&v| tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.shape(v))))
            .collect()
    }
}
