use std::path::Path;

use super::layers::{BatchNorm, Conv2d, ConvTranspose2d, Linear};
use super::weights::{read_weight_file, write_weight_file, WeightFile};
use super::{Bound, Module};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{BatchNormStats, SeededRng, Tape, Tensor, Var};

pub const DEFAULT_LATENT_DIM: usize = 100;
const GENERATOR_ARCH: &str = "dcgan-generator";
const BASE_CHANNELS: usize = 128;
pub const DEFAULT_WIDTHS: [usize; 2] = [64, 32];
const INIT_STD: f32 = 0.02;
/// The one-hot label enters the first layer scaled up so that 100 noise
/// coordinates do not drown it out.
const LABEL_SCALE: f32 = 10.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeneratorSpec {
    pub latent_dim: usize,
    pub classes: usize,
    /// Concatenate the one-hot target label to `z`.
    pub conditional: bool,
    /// `(channels, height, width)` of generated images.
    pub output: [usize; 3],
    /// Channels after the first and second upsampling blocks.
    pub widths: [usize; 2],
}

impl GeneratorSpec {
    pub fn new(output: [usize; 3], classes: usize) -> Self {
        Self {
            latent_dim: DEFAULT_LATENT_DIM,
            classes,
            conditional: true,
            output,
            widths: DEFAULT_WIDTHS,
        }
    }

    fn input_dim(&self) -> usize {
        self.latent_dim + if self.conditional { self.classes } else { 0 }
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.output;
        if self.latent_dim == 0 {
            return Err(Error::InvalidArgument("latent_dim must be at least 1".into()));
        }
        if c == 0 || h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::InvalidArgument(format!(
                "generator output {:?} needs nonzero channels and height/width divisible by 4",
                self.output
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("generator widths {:?} must be nonzero", self.widths)));
        }
        if self.classes < 2 {
            return Err(Error::InvalidArgument(format!("need at least 2 classes, got {}", self.classes)));
        }
        Ok(())
    }
}

/// Which statistics the generator's batch-norm layers normalize with.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Statistics of the current batch; they are remembered for `LastBatch`.
    Batch,
    /// Statistics from the most recent `Batch` forward. Rows are independent.
    LastBatch,
}

/// DCGAN-style generator: fc → 128×(H/4)×(W/4) → BN → 2 × (convT stride 2,
/// leaky relu, BN) → 3×3 conv → tanh.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorNet {
    spec: GeneratorSpec,
    fc: Linear,
    bn0: BatchNorm,
    up1: ConvTranspose2d,
    bn1: BatchNorm,
    up2: ConvTranspose2d,
    bn2: BatchNorm,
    out: Conv2d,
    last_stats: [BatchNormStats; 3],
}

fn identity_stats(channels: usize) -> BatchNormStats {
    BatchNormStats {
        mean: vec![0.0; channels],
        var: vec![1.0; channels],
    }
}

impl GeneratorNet {
    pub fn build(spec: GeneratorSpec, rng: &mut SeededRng) -> Result<Self> {
        let mut g = Self::skeleton(spec)?;
        g.reinitialize(rng);
        Ok(g)
    }

    fn skeleton(spec: GeneratorSpec) -> Result<Self> {
        spec.validate()?;
        let [c, h, w] = spec.output;
        let [c1, c2] = spec.widths;
        Ok(Self {
            spec,
            fc: Linear::zeros(spec.input_dim(), BASE_CHANNELS * (h / 4) * (w / 4)),
            bn0: BatchNorm::new(BASE_CHANNELS),
            up1: ConvTranspose2d::zeros(BASE_CHANNELS, c1, 4, 2, 1),
            bn1: BatchNorm::new(c1),
            up2: ConvTranspose2d::zeros(c1, c2, 4, 2, 1),
            bn2: BatchNorm::new(c2),
            out: Conv2d::zeros(c2, c, 3, 1, 1),
            last_stats: [
                identity_stats(BASE_CHANNELS),
                identity_stats(c1),
                identity_stats(c2),
            ],
        })
    }

    /// Redraws every parameter: weights `N(0, 0.02)`, batch-norm scales
    /// `N(1, 0.02)`, biases and shifts zero. Remembered statistics are reset.
    pub fn reinitialize(&mut self, rng: &mut SeededRng) {
        for w in [&mut self.fc.weight, &mut self.up1.weight, &mut self.up2.weight, &mut self.out.weight] {
            *w = rng.normal(w.shape(), 0.0, INIT_STD);
        }
        for b in [&mut self.fc.bias, &mut self.up1.bias, &mut self.up2.bias, &mut self.out.bias] {
            b.data_mut().fill(0.0);
        }
        for bn in [&mut self.bn0, &mut self.bn1, &mut self.bn2] {
            bn.gamma = rng.normal(bn.gamma.shape(), 1.0, INIT_STD);
            bn.beta.data_mut().fill(0.0);
        }
        for s in &mut self.last_stats {
            *s = identity_stats(s.mean.len());
        }
    }

    pub fn spec(&self) -> &GeneratorSpec {
        &self.spec
    }

    fn check_inputs(&self, z: &[usize], labels: Option<&[usize]>) -> Result<()> {
        if z.len() != 2 || z[1] != self.spec.latent_dim {
            return Err(shape_err("generate", format!("z must be (B, {}), got {z:?}", self.spec.latent_dim)));
        }
        match (self.spec.conditional, labels) {
            (true, None) => Err(Error::InvalidArgument("conditional generator needs labels".into())),
            (false, Some(_)) => Err(Error::InvalidArgument("unconditional generator takes no labels".into())),
            (true, Some(l)) if l != [z[0], self.spec.classes] => Err(shape_err(
                "generate",
                format!("labels must be ({}, {}), got {l:?}", z[0], self.spec.classes),
            )),
            _ => Ok(()),
        }
    }

    /// `x̂ = G(z [, y])` on the tape, shape `(B, channels, H, W)`.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        bound: &Bound,
        z: Var,
        labels: Option<Var>,
        mode: NormMode,
    ) -> Result<Var> {
        self.check_inputs(tape.shape(z), labels.map(|l| tape.shape(l)))?;
        if let Some(l) = labels {
            let rows = tape.value(l).data().chunks(self.spec.classes);
            if rows.into_iter().any(|r| r.iter().filter(|&&v| v == 1.0).count() != 1 || r.iter().any(|&v| v != 0.0 && v != 1.0)) {
                return Err(Error::InvalidArgument("labels must be one-hot rows".into()));
            }
        }
        let b = tape.shape(z)[0];
        let [_, h, w] = self.spec.output;
        let mut p = bound.cursor();

        let input = match labels {
            Some(l) => concat_cols(tape, z, l, LABEL_SCALE)?,
            None => z,
        };
        let x = self.fc.forward(tape, &mut p, input)?;
        let x = tape.reshape(x, &[b, BASE_CHANNELS, h / 4, w / 4])?;
        let mut new_stats = Vec::with_capacity(3);
        let mut norm = |tape: &mut Tape, p: &mut _, bn: &BatchNorm, x, i: usize| -> Result<Var> {
            let given = match mode {
                NormMode::Batch => None,
                NormMode::LastBatch => Some(&self.last_stats[i]),
            };
            let (y, s) = bn.forward(tape, p, x, given)?;
            new_stats.push(s);
            Ok(y)
        };
        let x = norm(tape, &mut p, &self.bn0, x, 0)?;
        let x = self.up1.forward(tape, &mut p, x)?;
        let x = tape.leaky_relu(x);
        let x = norm(tape, &mut p, &self.bn1, x, 1)?;
        let x = self.up2.forward(tape, &mut p, x)?;
        let x = tape.leaky_relu(x);
        let x = norm(tape, &mut p, &self.bn2, x, 2)?;
        let x = self.out.forward(tape, &mut p, x)?;
        let x = tape.tanh(x);
        if mode == NormMode::Batch {
            for (slot, s) in self.last_stats.iter_mut().zip(new_stats) {
                *slot = s;
            }
        }
        Ok(x)
    }

    /// Forward pass without gradients.
    pub fn generate(&mut self, z: &Tensor, labels: Option<&Tensor>, mode: NormMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let lv = labels.map(|l| tape.constant(l.clone()));
        let x = self.forward(&mut tape, &bound, zv, lv, mode)?;
        Ok(tape.value(x).clone())
    }

    pub fn to_weight_file(&self) -> WeightFile {
        let s = &self.spec;
        let meta = vec![
            s.latent_dim as f32,
            s.classes as f32,
            if s.conditional { 1.0 } else { 0.0 },
            s.output[0] as f32,
            s.output[1] as f32,
            s.output[2] as f32,
            s.widths[0] as f32,
            s.widths[1] as f32,
        ];
        let mut tensors = vec![("meta.generator".to_string(), Tensor::new(&[8], meta).expect("8 values"))];
        tensors.extend(self.param_names().into_iter().zip(self.params().into_iter().cloned()));
        for (i, st) in self.last_stats.iter().enumerate() {
            let n = st.mean.len();
            tensors.push((format!("stats{i}.mean"), Tensor::new(&[n], st.mean.clone()).expect("len")));
            tensors.push((format!("stats{i}.var"), Tensor::new(&[n], st.var.clone()).expect("len")));
        }
        WeightFile {
            arch_id: GENERATOR_ARCH.into(),
            tensors,
        }
    }

    pub fn from_weight_file(file: &WeightFile) -> Result<Self> {
        if file.arch_id != GENERATOR_ARCH {
            return Err(Error::WeightFormat(format!("arch_id {:?} is not {GENERATOR_ARCH:?}", file.arch_id)));
        }
        let m = file.get("meta.generator")?.data();
        if m.len() != 8 {
            return Err(Error::WeightFormat("malformed generator meta tensor".into()));
        }
        let spec = GeneratorSpec {
            latent_dim: m[0] as usize,
            classes: m[1] as usize,
            conditional: m[2] != 0.0,
            output: [m[3] as usize, m[4] as usize, m[5] as usize],
            widths: [m[6] as usize, m[7] as usize],
        };
        let mut g = Self::skeleton(spec).map_err(|e| Error::WeightFormat(e.to_string()))?;
        let names = g.param_names();
        for (name, slot) in names.iter().zip(g.params_mut()) {
            let t = file.get(name)?;
            if t.shape() != slot.shape() {
                return Err(Error::WeightFormat(format!("{name}: shape {:?}, expected {:?}", t.shape(), slot.shape())));
            }
            *slot = t.clone();
        }
        for (i, st) in g.last_stats.iter_mut().enumerate() {
            let (mean, var) = (file.get(&format!("stats{i}.mean"))?, file.get(&format!("stats{i}.var"))?);
            if mean.len() != st.mean.len() || var.len() != st.var.len() {
                return Err(Error::WeightFormat(format!("stats{i} has the wrong channel count")));
            }
            st.mean = mean.data().to_vec();
            st.var = var.data().to_vec();
        }
        Ok(g)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_weight_file(path, &self.to_weight_file())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_weight_file(&read_weight_file(path)?)
    }
}

/// `[a | scale_b·b]` along columns for 2-D vars, as a product with selection matrices
/// so gradients reach both sides.
fn concat_cols(tape: &mut Tape, a: Var, b: Var, scale_b: f32) -> Result<Var> {
    let (na, nb) = (tape.shape(a)[1], tape.shape(b)[1]);
    let n = na + nb;
    let left = Tensor::from_fn(&[na, n], |i| if i / n == i % n { 1.0 } else { 0.0 });
    let right = Tensor::from_fn(&[nb, n], |i| if i / n + na == i % n { scale_b } else { 0.0 });
    let (l, r) = (tape.constant(left), tape.constant(right));
    let pa = tape.matmul(a, l)?;
    let pb = tape.matmul(b, r)?;
    tape.add(pa, pb)
}

impl Module for GeneratorNet {
    fn params(&self) -> Vec<&Tensor> {
        vec![
            &self.fc.weight,
            &self.fc.bias,
            &self.bn0.gamma,
            &self.bn0.beta,
            &self.up1.weight,
            &self.up1.bias,
            &self.bn1.gamma,
            &self.bn1.beta,
            &self.up2.weight,
            &self.up2.bias,
            &self.bn2.gamma,
            &self.bn2.beta,
            &self.out.weight,
            &self.out.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.fc.weight,
            &mut self.fc.bias,
            &mut self.bn0.gamma,
            &mut self.bn0.beta,
            &mut self.up1.weight,
            &mut self.up1.bias,
            &mut self.bn1.gamma,
            &mut self.bn1.beta,
            &mut self.up2.weight,
            &mut self.up2.bias,
            &mut self.bn2.gamma,
            &mut self.bn2.beta,
            &mut self.out.weight,
            &mut self.out.bias,
        ]
    }

    fn param_names(&self) -> Vec<String> {
        ["fc", "bn0", "up1", "bn1", "up2", "bn2", "out"]
            .iter()
            .flat_map(|l| {
                let (a, b) = if l.starts_with("bn") { ("gamma", "beta") } else { ("weight", "bias") };
                [format!("{l}.{a}"), format!("{l}.{b}")]
            })
            .collect()
    }
}
