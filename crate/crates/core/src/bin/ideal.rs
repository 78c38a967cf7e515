use std::collections::HashMap;
use std::fs;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ideal::data::{evaluate_accuracy, load_idx_dir, EvalSet, Split};
use ideal::nn::{Arch, Classifier, GeneratorNet};
use ideal::oracle::{make_http_oracle, make_local_oracle, HardLabelOracle};
use ideal::report::{
    generator_path, visualize, write_failure, MetricsWriter, OracleSource, RunManifest, GENERATOR_FILE, METRICS_FILE,
    STUDENT_FILE,
};
use ideal::service::{serve, ServiceConfig};
use ideal::teacher::{train_teacher, TeacherConfig};
use ideal::trainer::{run_ideal, GeneratorObjective, TrainConfig};
use ideal::Error;

#[derive(Parser)]
#[command(name = "ideal", version, about = "Data-free distillation from a hard-label teacher under a query budget")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a classifier on an IDX train split and save it as a teacher.
    TrainTeacher(TrainTeacherArgs),
    /// Serve a teacher's hard labels over HTTP with a metered budget.
    ServeTeacher(ServeArgs),
    /// Distill a student from a local or remote teacher.
    Distill(DistillArgs),
    /// Top-1 accuracy of saved weights on an IDX test split.
    Eval(EvalArgs),
    /// Render generator samples to a PGM image.
    Visualize(VisualizeArgs),
}

#[derive(Args)]
struct TrainTeacherArgs {
    #[arg(long, value_enum, default_value = "lenet")]
    arch: ArchArg,
    /// Directory with {train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz].
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Accuracy report (JSON); defaults to OUT with a .json extension.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: SocketAddr,
    #[arg(long)]
    budget: usize,
    #[arg(long, env = "IDEAL_API_KEY", hide_env_values = true)]
    api_key: String,
    /// Append-only record of charges, replayed on start.
    #[arg(long)]
    usage_log: Option<PathBuf>,
}

#[derive(Args)]
struct DistillArgs {
    /// Teacher weights for an in-process oracle.
    #[arg(long, conflicts_with = "oracle_url", required_unless_present_any = ["oracle_url", "manifest"])]
    teacher_weights: Option<PathBuf>,
    /// Base URL of a running `serve-teacher`.
    #[arg(long)]
    oracle_url: Option<String>,
    #[arg(long, env = "IDEAL_API_KEY", hide_env_values = true)]
    api_key: Option<String>,
    #[arg(long, required_unless_present = "manifest")]
    out: Option<PathBuf>,
    /// IDX directory whose test split is used for reporting accuracy.
    #[arg(long)]
    eval_data: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    eval_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 25_000)]
    budget: usize,
    #[arg(long, default_value_t = 250)]
    batch_size: usize,
    /// Generator rounds per epoch.
    #[arg(long, default_value_t = 5)]
    gen_rounds: usize,
    #[arg(long, default_value_t = 5.0)]
    lambda: f32,
    #[arg(long, default_value_t = 1e-3)]
    lr_gen: f32,
    #[arg(long, default_value_t = 1e-2)]
    lr_student: f32,
    /// Student steps per purchased batch.
    #[arg(long, default_value_t = 5)]
    inner_steps: usize,
    #[arg(long)]
    replay: bool,
    #[arg(long)]
    unconditional: bool,
    #[arg(long, value_enum, default_value = "lenet")]
    student_arch: ArchArg,
    #[arg(long, value_enum, default_value = "full")]
    objective: ObjectiveArg,
    /// Re-run the configuration recorded in a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
}

#[derive(Args)]
struct VisualizeArgs {
    /// A generator snapshot or a run directory.
    #[arg(long)]
    generator: PathBuf,
    #[arg(long, default_value_t = 10)]
    rows: usize,
    #[arg(long, default_value_t = 10)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Mlp,
    Lenet,
    Smallcnn,
}

impl From<ArchArg> for Arch {
    fn from(a: ArchArg) -> Self {
        match a {
            ArchArg::Mlp => Arch::Mlp,
            ArchArg::Lenet => Arch::LeNet,
            ArchArg::Smallcnn => Arch::SmallCnn,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ObjectiveArg {
    Full,
    WithoutCe,
    WithoutInfo,
}

impl From<ObjectiveArg> for GeneratorObjective {
    fn from(o: ObjectiveArg) -> Self {
        match o {
            ObjectiveArg::Full => GeneratorObjective::Full,
            ObjectiveArg::WithoutCe => GeneratorObjective::WithoutCe,
            ObjectiveArg::WithoutInfo => GeneratorObjective::WithoutInfo,
        }
    }
}

const EXIT_FAILURE: u8 = 1;
const EXIT_BUDGET: u8 = 3;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::TrainTeacher(a) => cmd_train_teacher(a),
        Command::ServeTeacher(a) => cmd_serve(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Visualize(a) => cmd_visualize(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::BudgetExhausted { .. } => ExitCode::from(EXIT_BUDGET),
                _ => ExitCode::from(EXIT_FAILURE),
            }
        }
    }
}

fn cmd_train_teacher(a: TrainTeacherArgs) -> ideal::Result<()> {
    let train = load_idx_dir(&a.data, Split::Train)?;
    let test = load_idx_dir(&a.data, Split::Test)?;
    let config = TeacherConfig {
        arch: a.arch.into(),
        epochs: a.epochs,
        seed: a.seed,
        ..TeacherConfig::default()
    };
    let teacher = train_teacher(&train, &config, &mut |_, _, _| {})?;
    teacher.save(&a.out)?;
    let acc = evaluate_accuracy(&teacher, &test, 1000)?;
    println!("test accuracy: {acc:.4}");
    let report = serde_json::json!({
        "arch": teacher.arch().as_str(),
        "epochs": a.epochs,
        "seed": a.seed,
        "test_accuracy": acc,
        "weights": a.out,
    });
    let path = a.report.unwrap_or_else(|| a.out.with_extension("json"));
    fs::write(path, serde_json::to_string_pretty(&report).expect("plain json") + "\n")?;
    Ok(())
}

fn cmd_serve(a: ServeArgs) -> ideal::Result<()> {
    let config = ServiceConfig {
        bind: a.bind,
        teacher_weights: a.weights,
        budgets: HashMap::from([(a.api_key, a.budget)]),
        usage_log: a.usage_log,
    };
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(serve(config, async {
        let _ = tokio::signal::ctrl_c().await;
    }))
}

fn manifest_from_args(a: &DistillArgs) -> ideal::Result<RunManifest> {
    if let Some(path) = &a.manifest {
        let mut m = RunManifest::read(path)?;
        if let Some(out) = &a.out {
            m.out_dir = out.clone();
        }
        return Ok(m);
    }
    let config = TrainConfig {
        budget: a.budget,
        batch_size: a.batch_size,
        gen_rounds: a.gen_rounds,
        lambda: a.lambda,
        lr_gen: a.lr_gen,
        lr_student: a.lr_student,
        seed: a.seed,
        student_arch: a.student_arch.into(),
        inner_distill_steps: a.inner_steps,
        replay: a.replay,
        eval_every: a.eval_every,
        conditional: !a.unconditional,
        objective: a.objective.into(),
        ..TrainConfig::default()
    };
    let oracle = match (&a.teacher_weights, &a.oracle_url) {
        (Some(w), None) => OracleSource::Local { teacher_weights: w.clone() },
        (None, Some(u)) => OracleSource::Remote { url: u.clone() },
        _ => return Err(Error::Config("give exactly one of --teacher-weights or --oracle-url".into())),
    };
    let out = a.out.clone().ok_or_else(|| Error::Config("--out is required".into()))?;
    Ok(RunManifest::new(config, oracle, a.eval_data.clone(), out))
}

fn cmd_distill(a: DistillArgs) -> ideal::Result<()> {
    let manifest = manifest_from_args(&a)?;
    let config = &manifest.config;
    config.validate()?;
    let dir = &manifest.out_dir;
    fs::create_dir_all(dir)?;

    let mut oracle: Box<dyn HardLabelOracle> = match &manifest.oracle {
        OracleSource::Local { teacher_weights } => Box::new(make_local_oracle(teacher_weights, config.budget)?),
        OracleSource::Remote { url } => {
            let key = a
                .api_key
                .as_deref()
                .ok_or_else(|| Error::Config("a remote oracle needs --api-key or IDEAL_API_KEY".into()))?;
            Box::new(make_http_oracle(url, key)?)
        }
    };
    let eval = match &manifest.eval_data {
        Some(d) => Some(EvalSet::new(load_idx_dir(d, Split::Test)?)?),
        None => None,
    };
    manifest.write(dir)?;
    let mut metrics = MetricsWriter::create(&dir.join(METRICS_FILE))?;
    let mut write_error = None;
    let result = run_ideal(config, oracle.as_mut(), eval.as_ref(), &mut |record, _| {
        if let Err(e) = metrics.append(record) {
            write_error.get_or_insert(e);
        }
    });
    if let Some(e) = write_error {
        write_failure(dir, &e)?;
        return Err(e);
    }
    match result {
        Ok(out) => {
            out.student.save(&dir.join(STUDENT_FILE))?;
            out.generator.save(&dir.join(GENERATOR_FILE))?;
            if let Some(acc) = out.metrics.final_accuracy() {
                println!("student test accuracy: {acc:.4}");
            }
            println!("queries used: {}", oracle.ledger().used());
            Ok(())
        }
        Err(failure) => {
            write_failure(dir, &failure)?;
            Err(failure.error)
        }
    }
}

fn cmd_eval(a: EvalArgs) -> ideal::Result<()> {
    let net = Classifier::load(&a.weights)?;
    let test = load_idx_dir(&a.data, Split::Test)?;
    if test.image_shape() != net.input_shape() {
        return Err(Error::InvalidArgument(format!(
            "weights expect {:?} images, data has {:?}",
            net.input_shape(),
            test.image_shape()
        )));
    }
    if net.classes() != test.classes() {
        return Err(Error::InvalidArgument(format!(
            "weights have {} classes, data has {}",
            net.classes(),
            test.classes()
        )));
    }
    let acc = evaluate_accuracy(&net, &test, 1000)?;
    println!("{acc:.4}");
    Ok(())
}

fn cmd_visualize(a: VisualizeArgs) -> ideal::Result<()> {
    let path = generator_path(&a.generator);
    if !Path::new(&path).is_file() {
        return Err(Error::Config(format!("no generator snapshot at {}", path.display())));
    }
    let mut g = GeneratorNet::load(&path)?;
    let (w, h) = visualize(&mut g, a.rows, a.cols, a.seed, &a.out)?;
    println!("wrote {w}x{h} image to {}", a.out.display());
    Ok(())
}
