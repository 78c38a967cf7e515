use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::layers::{fan_in_uniform, Conv2d, Linear, ParamCursor};
use super::weights::{read_weight_file, write_weight_file, WeightFile};
use super::{Bound, Module};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{SeededRng, Tape, Tensor, Var};

/// Classifier architectures usable as student or teacher.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// `in → 512 → 256 → C`, relu.
    Mlp,
    /// conv 6@5×5 (pad 2) → pool → conv 16@5×5 → pool → 120 → 84 → C, relu.
    LeNet,
    /// Three 3×3 conv/pool stages (32, 64, 64 channels) → 128 → C, relu.
    SmallCnn,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Mlp, Arch::LeNet, Arch::SmallCnn];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::Mlp => "mlp",
            Arch::LeNet => "lenet",
            Arch::SmallCnn => "smallcnn",
        }
    }
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown architecture {s:?} (mlp, lenet, smallcnn)")))
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Layer {
    Linear(Linear),
    Conv(Conv2d),
    Relu,
    MaxPool,
    Flatten,
}

/// An image classifier whose forward pass ends in a softmax over `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    arch: Arch,
    classes: usize,
    input: [usize; 3],
    layers: Vec<Layer>,
}

/// The network being distilled.
pub type StudentNet = Classifier;
/// The network behind the oracle. Only the oracle and teacher training touch it.
pub type TeacherNet = Classifier;

const PREDICT_CHUNK: usize = 500;

impl Classifier {
    /// Builds `arch` for `input = (channels, height, width)` images with
    /// fan-in scaled uniform initialization.
    pub fn new(arch: Arch, input: [usize; 3], classes: usize, rng: &mut SeededRng) -> Result<Self> {
        let mut net = Self::skeleton(arch, input, classes)?;
        net.reinitialize(rng);
        Ok(net)
    }

    /// The architecture with every parameter zero.
    pub fn skeleton(arch: Arch, input: [usize; 3], classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {classes}")));
        }
        let [c, h, w] = input;
        let bad = || Error::InvalidArgument(format!("input {input:?} too small for {arch}"));
        let layers = match arch {
            Arch::Mlp => vec![
                Layer::Flatten,
                Layer::Linear(Linear::zeros(c * h * w, 512)),
                Layer::Relu,
                Layer::Linear(Linear::zeros(512, 256)),
                Layer::Relu,
                Layer::Linear(Linear::zeros(256, classes)),
            ],
            Arch::LeNet => {
                // conv1 pads by 2, as LeNet-5 does on 28×28 digits.
                let side = |n: usize| (n / 2).checked_sub(4).map(|n| n / 2);
                let (fh, fw) = (side(h).filter(|&v| v > 0).ok_or_else(bad)?, side(w).filter(|&v| v > 0).ok_or_else(bad)?);
                vec![
                    Layer::Conv(Conv2d::zeros(c, 6, 5, 1, 2)),
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Conv(Conv2d::zeros(6, 16, 5, 1, 0)),
                    Layer::Relu,
                    Layer::MaxPool,
                    Layer::Flatten,
                    Layer::Linear(Linear::zeros(16 * fh * fw, 120)),
                    Layer::Relu,
                    Layer::Linear(Linear::zeros(120, 84)),
                    Layer::Relu,
                    Layer::Linear(Linear::zeros(84, classes)),
                ]
            }
            Arch::SmallCnn => {
                let (fh, fw) = (h / 8, w / 8);
                if fh == 0 || fw == 0 {
                    return Err(bad());
                }
                let mut layers = Vec::new();
                for (i, o) in [(c, 32), (32, 64), (64, 64)] {
                    layers.extend([Layer::Conv(Conv2d::zeros(i, o, 3, 1, 1)), Layer::Relu, Layer::MaxPool]);
                }
                layers.extend([
                    Layer::Flatten,
                    Layer::Linear(Linear::zeros(64 * fh * fw, 128)),
                    Layer::Relu,
                    Layer::Linear(Linear::zeros(128, classes)),
                ]);
                layers
            }
        };
        Ok(Self {
            arch,
            classes,
            input,
            layers,
        })
    }

    pub fn reinitialize(&mut self, rng: &mut SeededRng) {
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => {
                    let fan_in = l.weight.shape()[0];
                    fan_in_uniform(&mut l.weight, fan_in, rng);
                    fan_in_uniform(&mut l.bias, fan_in, rng);
                }
                Layer::Conv(c) => {
                    let s = c.weight.shape();
                    let fan_in = s[1] * s[2] * s[3];
                    fan_in_uniform(&mut c.weight, fan_in, rng);
                    fan_in_uniform(&mut c.bias, fan_in, rng);
                }
                _ => {}
            }
        }
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `(channels, height, width)` of accepted images.
    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    fn check_images(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(shape_err(
                "classifier",
                format!("{} expects (B, {}, {}, {}) images, got {shape:?}", self.arch, self.input[0], self.input[1], self.input[2]),
            ));
        }
        Ok(())
    }

    /// Pre-softmax scores, `(B, classes)`.
    pub fn logits(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        self.check_images(tape.shape(images))?;
        let mut p: ParamCursor<'_> = bound.cursor();
        let mut x = images;
        for layer in &self.layers {
            x = match layer {
                Layer::Linear(l) => l.forward(tape, &mut p, x)?,
                Layer::Conv(c) => c.forward(tape, &mut p, x)?,
                Layer::Relu => tape.relu(x),
                Layer::MaxPool => tape.max_pool2d(x, 2)?,
                Layer::Flatten => {
                    let s = tape.shape(x);
                    let (b, rest) = (s[0], s[1..].iter().product::<usize>());
                    tape.reshape(x, &[b, rest])?
                }
            };
        }
        Ok(x)
    }

    /// Prediction scores: softmax over [`Classifier::logits`].
    pub fn probs(&self, tape: &mut Tape, bound: &Bound, images: Var) -> Result<Var> {
        let z = self.logits(tape, bound, images)?;
        tape.softmax(z)
    }

    /// Probability rows for a batch of images, `(B, classes)`.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        self.check_images(images.shape())?;
        let n = images.shape()[0];
        let mut out = Vec::with_capacity(n * self.classes);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let mut tape = Tape::new();
            let bound = self.bind(&mut tape, false);
            let x = tape.constant(images.slice_rows(start, end)?);
            let p = self.probs(&mut tape, &bound, x)?;
            out.extend_from_slice(tape.value(p).data());
            start = end;
        }
        Tensor::new(&[n, self.classes], out)
    }

    /// Top-1 class per image, ties to the lowest index.
    pub fn predict_labels(&self, images: &Tensor) -> Result<Vec<usize>> {
        Ok(self.predict(images)?.argmax_rows())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let [c, h, w] = self.input;
        let meta = Tensor::new(&[4], vec![c as f32, h as f32, w as f32, self.classes as f32]).expect("4 values");
        let mut tensors = vec![("meta.input_and_classes".to_string(), meta)];
        tensors.extend(self.param_names().into_iter().zip(self.params().into_iter().cloned()));
        WeightFile {
            arch_id: self.arch.as_str().to_string(),
            tensors,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        let arch: Arch = file
            .arch_id
            .parse()
            .map_err(|_| Error::WeightFormat(format!("arch_id {:?} is not a classifier", file.arch_id)))?;
        let meta = file.get("meta.input_and_classes")?;
        let m: Vec<usize> = meta.data().iter().map(|&v| v as usize).collect();
        if m.len() != 4 {
            return Err(Error::WeightFormat("malformed meta tensor".into()));
        }
        let mut net = Self::skeleton(arch, [m[0], m[1], m[2]], m[3])?;
        let names = net.param_names();
        let expected = names.len() + 1;
        if file.tensors.len() != expected {
            return Err(Error::WeightFormat(format!("{arch} needs {expected} tensors, file has {}", file.tensors.len())));
        }
        for (name, slot) in names.iter().zip(net.params_mut()) {
            let t = file.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::WeightFormat(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weight_file(path, &self.to_weight_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&read_weight_file(path)?)
    }

    /// Loads and insists on a particular architecture.
    pub fn load_as(path: &Path, arch: Arch) -> Result<Self> {
        let file = read_weight_file(path)?;
        if file.arch_id != arch.as_str() {
            return Err(Error::WeightFormat(format!("file holds {:?}, expected {:?}", file.arch_id, arch.as_str())));
        }
        Self::from_weight_file(&file)
    }
}

impl Module for Classifier {
    fn params(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&l.weight, &l.bias]),
                Layer::Conv(c) => out.extend([&c.weight, &c.bias]),
                _ => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            match layer {
                Layer::Linear(l) => out.extend([&mut l.weight, &mut l.bias]),
                Layer::Conv(c) => out.extend([&mut c.weight, &mut c.bias]),
                _ => {}
            }
        }
        out
    }

    fn param_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Linear(_) | Layer::Conv(_)) {
                out.push(format!("layers.{i}.weight"));
                out.push(format!("layers.{i}.bias"));
            }
        }
        out
    }
}
