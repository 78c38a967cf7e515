use crate::error::Result;
use crate::tensor::{BatchNormStats, SeededRng, Tape, Tensor, Var};

/// Fully connected layer, `y = x·W + b` with `W: (in, out)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs]),
            bias: Tensor::zeros(&[outputs]),
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let (w, b) = (p.next(), p.next());
        let y = tape.matmul(x, w)?;
        tape.add(y, b)
    }
}

/// Square-kernel convolution, `weight: (out, in, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[outputs, inputs, kernel, kernel]),
            bias: Tensor::zeros(&[outputs]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let (w, b) = (p.next(), p.next());
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        let out = self.bias.len();
        let b = tape.reshape(b, &[1, out, 1, 1])?;
        tape.add(y, b)
    }
}

/// Transposed convolution, `weight: (in, out, k, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvTranspose2d {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn zeros(inputs: usize, outputs: usize, kernel: usize, stride: usize, pad: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[inputs, outputs, kernel, kernel]),
            bias: Tensor::zeros(&[outputs]),
            stride,
            pad,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &mut ParamCursor<'_>, x: Var) -> Result<Var> {
        let (w, b) = (p.next(), p.next());
        let y = tape.conv_transpose2d(x, w, self.stride, self.pad)?;
        let out = self.bias.len();
        let b = tape.reshape(b, &[1, out, 1, 1])?;
        tape.add(y, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &mut ParamCursor<'_>,
        x: Var,
        stats: Option<&BatchNormStats>,
    ) -> Result<(Var, BatchNormStats)> {
        let (g, b) = (p.next(), p.next());
        tape.batch_norm(x, g, b, stats)
    }
}

/// Walks the tape handles of a network's parameters in declaration order.
pub struct ParamCursor<'a> {
    vars: &'a [Var],
    pos: usize,
}

impl<'a> ParamCursor<'a> {
    pub fn new(vars: &'a [Var]) -> Self {
        Self { vars, pos: 0 }
    }

    fn next(&mut self) -> Var {
        let v = self.vars[self.pos];
        self.pos += 1;
        v
    }
}

/// `U(−1/√fan_in, 1/√fan_in)` for weights and biases alike.
pub(crate) fn fan_in_uniform(t: &mut Tensor, fan_in: usize, rng: &mut SeededRng) {
    let bound = 1.0 / (fan_in as f32).sqrt();
    *t = rng.uniform(t.shape(), -bound, bound);
}
