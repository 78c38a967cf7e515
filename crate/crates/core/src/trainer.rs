//! The distillation loop. Every epoch first fits a freshly initialized
//! generator against the frozen student (no oracle in scope), then buys hard
//! labels for one new synthetic batch and takes student steps on it.
//!
//! Real data reaches this module only as an [`EvalSet`], for reporting.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{evaluate_accuracy, stratified_one_hot_labels, EvalSet};
use crate::error::{Error, Result};
use crate::losses::{average_prediction, cross_entropy, distill_loss, generator_loss, information_entropy_loss, LossValue};
use crate::nn::{
    Arch, Classifier, GeneratorNet, GeneratorSpec, Module, NormMode, OptimizerKind, OptimizerState, StudentNet,
    DEFAULT_LATENT_DIM, DEFAULT_WIDTHS,
};
use crate::oracle::HardLabelOracle;
use crate::tensor::{one_hot, SeededRng, Tape, Tensor};

/// What the generator minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorObjective {
    /// `L_ce + λ·L_info`.
    Full,
    /// `λ·L_info` alone.
    WithoutCe,
    /// `L_ce` alone.
    WithoutInfo,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub budget: usize,
    pub batch_size: usize,
    pub gen_rounds: usize,
    pub lambda: f32,
    pub lr_gen: f32,
    pub lr_student: f32,
    pub momentum: f32,
    pub seed: u64,
    pub student_arch: Arch,
    /// Student steps per purchased batch.
    pub inner_distill_steps: usize,
    /// Keep every purchased batch and replay one alongside each student step.
    pub replay: bool,
    /// Evaluate every this many epochs (and always after the last); 0 for
    /// the last epoch only.
    pub eval_every: usize,
    pub conditional: bool,
    pub latent_dim: usize,
    pub generator_widths: [usize; 2],
    pub objective: GeneratorObjective,
    /// `(channels, height, width)` the teacher accepts.
    pub input_shape: [usize; 3],
    pub classes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            budget: 25_000,
            batch_size: 250,
            gen_rounds: 5,
            lambda: 5.0,
            lr_gen: 1e-3,
            lr_student: 1e-2,
            momentum: 0.9,
            seed: 0,
            student_arch: Arch::LeNet,
            inner_distill_steps: 5,
            replay: false,
            eval_every: 10,
            conditional: true,
            latent_dim: DEFAULT_LATENT_DIM,
            generator_widths: DEFAULT_WIDTHS,
            objective: GeneratorObjective::Full,
            input_shape: [1, 28, 28],
            classes: 10,
        }
    }
}

impl TrainConfig {
    /// Checks the invariants and returns the epoch count `Q / B`.
    pub fn validate(&self) -> Result<usize> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch size must be positive".into());
        }
        if self.budget == 0 || self.budget % self.batch_size != 0 {
            return bad(format!(
                "budget {} must be a positive multiple of the batch size {}",
                self.budget, self.batch_size
            ));
        }
        if self.gen_rounds == 0 {
            return bad("generator rounds must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be finite and non-negative, got {}", self.lambda));
        }
        if self.inner_distill_steps == 0 {
            return bad("inner distillation steps must be at least 1".into());
        }
        for (name, v) in [("lr_gen", self.lr_gen), ("lr_student", self.lr_student)] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(self.budget / self.batch_size)
    }

    pub fn epochs(&self) -> Result<usize> {
        self.validate()
    }

    fn generator_spec(&self) -> GeneratorSpec {
        GeneratorSpec {
            latent_dim: self.latent_dim,
            classes: self.classes,
            conditional: self.conditional,
            output: self.input_shape,
            widths: self.generator_widths,
        }
    }
}

/// Independent random streams of one run.
pub struct RunRngs {
    pub student_init: SeededRng,
    pub generator_init: SeededRng,
    pub noise: SeededRng,
    pub labels: SeededRng,
    pub replay: SeededRng,
}

impl RunRngs {
    pub fn new(seed: u64) -> Self {
        Self {
            student_init: SeededRng::new(seed, "student-init"),
            generator_init: SeededRng::new(seed, "generator-init"),
            noise: SeededRng::new(seed, "noise"),
            labels: SeededRng::new(seed, "labels"),
            replay: SeededRng::new(seed, "replay"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage1Report {
    pub first_l_gen: f32,
    pub last_l_gen: f32,
    pub mean_l_ce: f32,
    pub mean_l_info: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stage2Report {
    /// Loss on the purchased batch before the first student step.
    pub l_md_before: f32,
    /// Loss on the same batch after the last step.
    pub l_md_after: f32,
    pub queries: usize,
}

/// One synthetic batch and the labels paid for it.
#[derive(Default)]
pub struct ReplayBuffer {
    batches: Vec<(Tensor, Tensor)>,
}

impl ReplayBuffer {
    pub fn len(&self) -> usize {
        self.batches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batches.is_empty()
    }
}

/// Fresh noise and stratified target labels for one batch.
fn draw_inputs(config: &TrainConfig, rngs: &mut RunRngs) -> Result<(Tensor, Tensor)> {
    let z = rngs.noise.gaussian(&[config.batch_size, config.latent_dim]);
    let y = stratified_one_hot_labels(config.batch_size, config.classes, &mut rngs.labels)?.matrix;
    Ok((z, y))
}

/// Trains a freshly initialized generator against the frozen student for
/// `gen_rounds` Adam steps. Takes no oracle.
pub fn stage1_generate(
    student: &StudentNet,
    config: &TrainConfig,
    rngs: &mut RunRngs,
) -> Result<(GeneratorNet, Stage1Report)> {
    let mut generator = GeneratorNet::build(config.generator_spec(), &mut rngs.generator_init)?;
    let mut opt = OptimizerState::new(OptimizerKind::adam(config.lr_gen), &generator.params());
    let mut report = Stage1Report {
        first_l_gen: 0.0,
        last_l_gen: 0.0,
        mean_l_ce: 0.0,
        mean_l_info: 0.0,
    };
    for round in 0..config.gen_rounds {
        let (z, y) = draw_inputs(config, rngs)?;
        let mut tape = Tape::new();
        let gb = generator.bind(&mut tape, true);
        let sb = student.bind(&mut tape, false);
        let zv = tape.constant(z);
        let yv = tape.constant(y);
        let labels = config.conditional.then_some(yv);
        let x = generator.forward(&mut tape, &gb, zv, labels, NormMode::Batch)?;
        let p = student.probs(&mut tape, &sb, x)?;
        let (loss, ce, info) = match config.objective {
            GeneratorObjective::Full => {
                let l = generator_loss(&mut tape, p, yv, config.lambda)?;
                (l.total, l.ce.value, l.info.value)
            }
            GeneratorObjective::WithoutCe => {
                let avg = average_prediction(&mut tape, p)?;
                let info = information_entropy_loss(&mut tape, avg)?;
                let scaled = tape.scale(info.var, config.lambda);
                let value = tape.value(scaled).item().expect("scalar");
                let ce = cross_entropy(&mut tape, p, yv)?.value;
                (LossValue { var: scaled, value }, ce, info.value)
            }
            GeneratorObjective::WithoutInfo => {
                let ce = cross_entropy(&mut tape, p, yv)?;
                let avg = average_prediction(&mut tape, p)?;
                let info = information_entropy_loss(&mut tape, avg)?.value;
                (ce, ce.value, info)
            }
        };
        tape.backward(loss.var)?;
        let grads = gb.grads(&tape);
        opt.step(generator.params_mut(), &grads)?;
        if round == 0 {
            report.first_l_gen = loss.value;
        }
        report.last_l_gen = loss.value;
        report.mean_l_ce += ce / config.gen_rounds as f32;
        report.mean_l_info += info / config.gen_rounds as f32;
    }
    Ok((generator, report))
}

fn student_step(
    student: &mut StudentNet,
    opt: &mut OptimizerState,
    batches: &[(&Tensor, &Tensor)],
) -> Result<f32> {
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape, true);
    let mut total = None;
    let mut first = 0.0;
    for (i, (x, y)) in batches.iter().enumerate() {
        let xv = tape.constant((*x).clone());
        let yv = tape.constant((*y).clone());
        let p = student.probs(&mut tape, &sb, xv)?;
        let l = distill_loss(&mut tape, p, yv)?;
        if i == 0 {
            first = l.value;
        }
        total = Some(match total {
            None => l.var,
            Some(t) => tape.add(t, l.var)?,
        });
    }
    let total = total.expect("at least one batch");
    let loss = tape.scale(total, 1.0 / batches.len() as f32);
    tape.backward(loss)?;
    let grads = sb.grads(&tape);
    opt.step(student.params_mut(), &grads)?;
    Ok(first)
}

fn batch_loss(student: &StudentNet, x: &Tensor, y: &Tensor) -> Result<f32> {
    let mut tape = Tape::new();
    let sb = student.bind(&mut tape, false);
    let xv = tape.constant(x.clone());
    let yv = tape.constant(y.clone());
    let p = student.probs(&mut tape, &sb, xv)?;
    Ok(distill_loss(&mut tape, p, yv)?.value)
}

/// Generates one fresh batch, buys its labels with a single oracle call, and
/// takes `inner_distill_steps` student steps on it.
pub fn stage2_distill(
    generator: &mut GeneratorNet,
    student: &mut StudentNet,
    opt: &mut OptimizerState,
    oracle: &mut dyn HardLabelOracle,
    config: &TrainConfig,
    rngs: &mut RunRngs,
    mut replay: Option<&mut ReplayBuffer>,
) -> Result<Stage2Report> {
    let (z, y) = draw_inputs(config, rngs)?;
    let labels = config.conditional.then_some(&y);
    let x = generator.generate(&z, labels, NormMode::Batch)?;
    let before = oracle.ledger().used();
    let teacher_labels = oracle.query(&x)?;
    let queries = oracle.ledger().used() - before;
    let y_t = one_hot(&teacher_labels, config.classes)?;

    let mut l_md_before = 0.0;
    for step in 0..config.inner_distill_steps {
        let mut batches = vec![(&x, &y_t)];
        if let Some(buf) = replay.as_deref() {
            if !buf.is_empty() {
                let (rx, ry) = &buf.batches[rngs.replay.below(buf.len())];
                batches.push((rx, ry));
            }
        }
        let l = student_step(student, opt, &batches)?;
        if step == 0 {
            l_md_before = l;
        }
    }
    let l_md_after = batch_loss(student, &x, &y_t)?;
    if let Some(buf) = replay.as_deref_mut() {
        buf.batches.push((x, y_t));
    }
    Ok(Stage2Report {
        l_md_before,
        l_md_after,
        queries,
    })
}

/// One row of the metrics file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_ce: f32,
    pub l_info: f32,
    /// Generator loss at the last round.
    pub l_gen: f32,
    /// Student loss on the purchased batch after the inner steps.
    pub l_md: f32,
    pub queries_used: usize,
    pub test_acc: Option<f32>,
    pub seconds: f64,
    /// Generator loss at the first round (not written to the CSV).
    #[serde(default)]
    pub l_gen_first: f32,
    /// Student loss on the purchased batch before the inner steps (not
    /// written to the CSV).
    #[serde(default)]
    pub l_md_before: f32,
}

pub const METRICS_HEADER: &str = "epoch,l_ce,l_info,l_gen,l_md,queries_used,test_acc,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let acc = self.test_acc.map(|a| a.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.epoch, self.l_ce, self.l_info, self.l_gen, self.l_md, self.queries_used, acc, self.seconds
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub epochs: Vec<EpochRecord>,
}

impl RunMetrics {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.epochs {
            s.push_str(&r.csv_row());
            s.push('\n');
        }
        s
    }

    /// The last evaluated accuracy.
    pub fn final_accuracy(&self) -> Option<f32> {
        self.epochs.iter().rev().find_map(|r| r.test_acc)
    }
}

pub struct RunOutput {
    pub student: StudentNet,
    /// The generator fitted in the final epoch.
    pub generator: GeneratorNet,
    pub metrics: RunMetrics,
}

/// A run that stopped early. `metrics` holds every completed epoch.
#[derive(Debug)]
pub struct RunFailure {
    pub error: Error,
    pub metrics: RunMetrics,
}

impl std::fmt::Display for RunFailure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "run stopped after {} epochs: {}", self.metrics.epochs.len(), self.error)
    }
}

impl std::error::Error for RunFailure {}

/// Runs `Q / B` epochs of generator fitting and distillation.
///
/// `on_epoch` sees each record as soon as it is complete.
pub fn run_ideal(
    config: &TrainConfig,
    oracle: &mut dyn HardLabelOracle,
    eval: Option<&EvalSet>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &StudentNet),
) -> std::result::Result<RunOutput, RunFailure> {
    let mut metrics = RunMetrics::default();
    match run_epochs(config, oracle, eval, on_epoch, &mut metrics) {
        Ok((student, generator)) => Ok(RunOutput {
            student,
            generator,
            metrics,
        }),
        Err(error) => Err(RunFailure { error, metrics }),
    }
}

fn run_epochs(
    config: &TrainConfig,
    oracle: &mut dyn HardLabelOracle,
    eval: Option<&EvalSet>,
    on_epoch: &mut dyn FnMut(&EpochRecord, &StudentNet),
    metrics: &mut RunMetrics,
) -> Result<(StudentNet, GeneratorNet)> {
    let epochs = config.validate()?;
    if let Some(e) = eval {
        let d = e.dataset();
        if d.classes() != config.classes || d.image_shape() != config.input_shape {
            return Err(Error::Config(format!(
                "evaluation data has {} classes of {:?} images, config expects {} of {:?}",
                d.classes(),
                d.image_shape(),
                config.classes,
                config.input_shape
            )));
        }
    }
    let mut rngs = RunRngs::new(config.seed);
    let mut student = Classifier::new(config.student_arch, config.input_shape, config.classes, &mut rngs.student_init)?;
    let mut opt = OptimizerState::new(
        OptimizerKind::sgd_momentum(config.lr_student, config.momentum),
        &student.params(),
    );
    let mut replay = config.replay.then(ReplayBuffer::default);
    let start = Instant::now();
    let mut last_generator = None;

    for epoch in 0..epochs {
        let used = oracle.ledger().used();
        let (mut generator, s1) = stage1_generate(&student, config, &mut rngs)?;
        if oracle.ledger().used() != used {
            return Err(Error::InvalidArgument("oracle was charged during generator training".into()));
        }
        let s2 = stage2_distill(
            &mut generator,
            &mut student,
            &mut opt,
            oracle,
            config,
            &mut rngs,
            replay.as_mut(),
        )?;
        if s2.queries != config.batch_size {
            return Err(Error::Protocol(format!(
                "oracle charged {} for a batch of {}",
                s2.queries, config.batch_size
            )));
        }
        let last = epoch + 1 == epochs;
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let test_acc = match eval {
            Some(e) if last || due => Some(evaluate_accuracy(&student, e.dataset(), 1000)?),
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            l_ce: s1.mean_l_ce,
            l_info: s1.mean_l_info,
            l_gen: s1.last_l_gen,
            l_md: s2.l_md_after,
            queries_used: oracle.ledger().used(),
            test_acc,
            seconds: start.elapsed().as_secs_f64(),
            l_gen_first: s1.first_l_gen,
            l_md_before: s2.l_md_before,
        };
        log::info!(
            "epoch {epoch}: l_gen {:.4} -> {:.4}, l_md {:.4} -> {:.4}, queries {}{}",
            s1.first_l_gen,
            s1.last_l_gen,
            s2.l_md_before,
            s2.l_md_after,
            record.queries_used,
            test_acc.map(|a| format!(", acc {a:.4}")).unwrap_or_default()
        );
        on_epoch(&record, &student);
        metrics.epochs.push(record);
        last_generator = Some(generator);
    }
    Ok((student, last_generator.expect("at least one epoch")))
}
