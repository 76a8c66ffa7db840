//! Command-line driver: dataset generation, training, evaluation, gradient
//! checking and augmentation preview.
//!
//! Human-readable progress goes to stderr; stdout ends with a single
//! machine-parseable `RESULT key=value ...` line. Exit codes: 2 bad
//! config/flags, 3 I/O, 4 non-finite loss, 5 checkpoint magic mismatch,
//! 6 gradient-check failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ioodg::autodiff::CheckpointError;
use ioodg::config::{ConfigError, RunConfig};
use ioodg::data::{build_benchmark, load_benchmark, load_xyz, save_benchmark, save_xyz, DataError};
use ioodg::geometry::{compose_augment, sample_param_transform, NonParamKind, NonParamTransform, ParamTransform};
use ioodg::train::{
    evaluate_detailed, fit, load_checkpoint, Ablation, TrainConfig, TrainError,
};
use ioodg::verify::{gradcheck_dims, model_gradient_check};

const EXIT_BAD_CONFIG: u8 = 2;
const EXIT_IO: u8 = 3;
const EXIT_NON_FINITE: u8 = 4;
const EXIT_BAD_MAGIC: u8 = 5;
const EXIT_GRADCHECK: u8 = 6;

struct CliError {
    code: u8,
    message: String,
}

impl CliError {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::new(EXIT_BAD_CONFIG, e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        let code = match &e {
            DataError::BadConfig(_) | DataError::BadCount { .. } => EXIT_BAD_CONFIG,
            _ => EXIT_IO,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        let code = match &e {
            TrainError::BadConfig(_) => EXIT_BAD_CONFIG,
            TrainError::NonFinite(_) => EXIT_NON_FINITE,
            TrainError::Checkpoint(CheckpointError::BadMagic) => EXIT_BAD_MAGIC,
            TrainError::Checkpoint(_) | TrainError::Io(_) => EXIT_IO,
            TrainError::Data(DataError::BadConfig(_) | DataError::BadCount { .. }) => {
                EXIT_BAD_CONFIG
            }
            TrainError::Data(_) => EXIT_IO,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(EXIT_IO, e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ioodg",
    about = "Invariance-trained point-cloud classification pipeline",
    version
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat key = value run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Inline config overrides, e.g. --set epochs=5 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Run seed override.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)?;
                RunConfig::parse(&text)?
            }
            None => RunConfig::default(),
        };
        for kv in &self.set {
            let (key, value) = kv.split_once('=').ok_or_else(|| {
                CliError::new(EXIT_BAD_CONFIG, format!("--set expects KEY=VALUE, got `{kv}`"))
            })?;
            config.apply(key.trim(), value.trim(), 0)?;
        }
        if let Some(seed) = self.seed {
            config.train.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic benchmark (clean train split, corrupted test
    /// split) under --out.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on a generated dataset; writes metrics.csv and checkpoint.bin.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset directory produced by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Run output directory.
        #[arg(long)]
        out: PathBuf,
        /// Epoch-count override.
        #[arg(long)]
        epochs: Option<usize>,
        /// Ablation mode.
        #[arg(long, value_parser = clap::value_parser!(Ablation))]
        ablation: Option<Ablation>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on a dataset split.
    Eval {
        /// Checkpoint file written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Split to report: train, test or both.
        #[arg(long, default_value = "both")]
        split: String,
        /// Ablation mode the checkpoint was trained with.
        #[arg(long, value_parser = clap::value_parser!(Ablation))]
        ablation: Option<Ablation>,
    },
    /// Verify analytic gradients of the total loss on a tiny model.
    Gradcheck {
        /// Seed for the checked scenario.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Finite-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Relative-error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Test fixture: corrupt the named parameter group's analytic
        /// gradient to prove detection works.
        #[arg(long, hide = true)]
        corrupt_grad: Option<String>,
    },
    /// Apply a parameterized + point-drop augmentation to one XYZ file.
    Augment {
        /// Input XYZ file.
        #[arg(long)]
        input: PathBuf,
        /// Output XYZ file; a `<out>.json` sidecar records the transform.
        #[arg(long)]
        out: PathBuf,
        /// Rotation about X in degrees.
        #[arg(long, default_value_t = 0.0)]
        rotate_x: f64,
        /// Rotation about Y in degrees.
        #[arg(long, default_value_t = 0.0)]
        rotate_y: f64,
        /// Rotation about Z in degrees.
        #[arg(long, default_value_t = 0.0)]
        rotate_z: f64,
        /// Uniform scale factor.
        #[arg(long, default_value_t = 1.0)]
        scale: f64,
        /// Translation as `x,y,z`.
        #[arg(long)]
        translate: Option<String>,
        /// Keep ratio of the random point drop.
        #[arg(long, default_value_t = 1.0)]
        keep: f64,
        /// Seed for the point drop.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Instead of explicit flags, sample the parameterized transform
        /// from the training distribution with this seed.
        #[arg(long, conflicts_with_all = ["rotate_x", "rotate_y", "rotate_z", "scale", "translate"])]
        random_seed: Option<u64>,
    },
}

fn cmd_gen(config: &ConfigArgs, out: &Path) -> Result<(), CliError> {
    let run = config.load()?;
    let (train, test) = build_benchmark(&run.benchmark, run.train.seed)?;
    save_benchmark(out, &run.benchmark, &train, &test)?;
    std::fs::write(out.join("run.cfg"), run.serialize())?;
    eprintln!(
        "generated {} train / {} test samples across {} classes into {}",
        train.len(),
        test.len(),
        run.benchmark.classes.len(),
        out.display()
    );
    println!(
        "RESULT train={} test={} classes={} out={}",
        train.len(),
        test.len(),
        run.benchmark.classes.len(),
        out.display()
    );
    Ok(())
}

fn check_labels(config: &TrainConfig, samples: &[ioodg::data::LabeledCloud]) -> Result<(), CliError> {
    if let Some(max) = samples.iter().map(|s| s.label).max() {
        if max >= config.dims.n_classes {
            return Err(CliError::new(
                EXIT_BAD_CONFIG,
                format!(
                    "dataset contains class index {max} but the model has {} classes",
                    config.dims.n_classes
                ),
            ));
        }
    }
    Ok(())
}

fn cmd_train(
    config: &ConfigArgs,
    data: &Path,
    out: &Path,
    epochs: Option<usize>,
    ablation: Option<Ablation>,
    resume: Option<&Path>,
) -> Result<(), CliError> {
    let mut run = config.load()?;
    if let Some(e) = epochs {
        run.train.epochs = e;
    }
    if let Some(a) = ablation {
        run.train.ablation = a;
    }
    let (train, test) = load_benchmark(data)?;
    check_labels(&run.train, &train)?;
    check_labels(&run.train, &test)?;
    eprintln!(
        "training {} epochs on {} samples (ablation: {})",
        run.train.epochs,
        train.len(),
        run.train.ablation.name()
    );
    let report = fit(&run.train, &train, &test, out, resume)?;
    eprintln!(
        "done: train_acc={:.4} test_acc={:.4} loss_total={:.6}",
        report.final_train_acc, report.final_test_acc, report.final_loss.total
    );
    println!(
        "RESULT epochs={} train_acc={:.4} test_acc={:.4} loss_total={:.6} ablation={}",
        report.epochs_run,
        report.final_train_acc,
        report.final_test_acc,
        report.final_loss.total,
        run.train.ablation.name()
    );
    Ok(())
}

fn cmd_eval(
    checkpoint: &Path,
    data: &Path,
    config: &ConfigArgs,
    split: &str,
    ablation: Option<Ablation>,
) -> Result<(), CliError> {
    // Dims come from an explicit config, or from the config.json the train
    // command leaves beside its checkpoint.
    let mut train_config = if config.config.is_some() || !config.set.is_empty() {
        config.load()?.train
    } else {
        let sidecar = checkpoint
            .parent()
            .unwrap_or(Path::new("."))
            .join("config.json");
        let text = std::fs::read_to_string(&sidecar).map_err(|e| {
            CliError::new(
                EXIT_IO,
                format!(
                    "cannot read {} (pass --config instead): {e}",
                    sidecar.display()
                ),
            )
        })?;
        serde_json::from_str::<TrainConfig>(&text).map_err(|e| {
            CliError::new(EXIT_BAD_CONFIG, format!("{}: {e}", sidecar.display()))
        })?
    };
    if let Some(a) = ablation {
        train_config.ablation = a;
    }
    let state = load_checkpoint(checkpoint, train_config.dims.clone())?;
    let (train, test) = load_benchmark(data)?;
    let opts = train_config.forward_options();

    let mut result = String::from("RESULT");
    let mut eps: f64 = 0.0;
    if split == "train" || split == "both" {
        let s = evaluate_detailed(&state.params, &train, opts)?;
        eprintln!("train: {}/{} correct ({:.4})", s.correct, s.total, s.accuracy());
        write!(result, " train_acc={:.4}", s.accuracy()).unwrap();
        eps = eps.max(s.s_row_err).max(s.attn_sum_err);
    }
    if split == "test" || split == "both" {
        let s = evaluate_detailed(&state.params, &test, opts)?;
        eprintln!("test: {}/{} correct ({:.4})", s.correct, s.total, s.accuracy());
        write!(result, " test_acc={:.4}", s.accuracy()).unwrap();
        eps = eps.max(s.s_row_err).max(s.attn_sum_err);
    }
    if !matches!(split, "train" | "test" | "both") {
        return Err(CliError::new(
            EXIT_BAD_CONFIG,
            format!("--split must be train, test or both, got `{split}`"),
        ));
    }
    write!(result, " eps={eps:.3e} epoch={}", state.epoch).unwrap();
    println!("{result}");
    Ok(())
}

fn cmd_gradcheck(
    seed: u64,
    step: f64,
    tol: f64,
    corrupt_grad: Option<&str>,
) -> Result<(), CliError> {
    let reports = model_gradient_check(gradcheck_dims(), seed, step, tol, corrupt_grad)?;
    let mut worst: Option<&ioodg::verify::GroupReport> = None;
    for r in &reports {
        eprintln!(
            "group {:5} max_rel_err {:.3e} (worst: {}, skipped {})",
            r.group,
            r.max_rel_err,
            if r.worst_param.is_empty() { "-" } else { &r.worst_param },
            r.skipped
        );
        if worst.map(|w| r.max_rel_err > w.max_rel_err).unwrap_or(true) {
            worst = Some(r);
        }
    }
    let worst = worst.expect("at least one parameter group");
    let pass = worst.max_rel_err < tol;
    println!(
        "RESULT pass={pass} max_rel_err={:.3e} worst_group={} worst_param={}",
        worst.max_rel_err, worst.group, worst.worst_param
    );
    if !pass {
        return Err(CliError::new(
            EXIT_GRADCHECK,
            format!(
                "gradient check failed: group {} param {} rel err {:.3e}",
                worst.group, worst.worst_param, worst.max_rel_err
            ),
        ));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_augment(
    input: &Path,
    out: &Path,
    rotate: [f64; 3],
    scale: f64,
    translate: Option<&str>,
    keep: f64,
    seed: u64,
    random_seed: Option<u64>,
) -> Result<(), CliError> {
    if !(0.0 < keep && keep <= 1.0) {
        return Err(CliError::new(
            EXIT_BAD_CONFIG,
            format!("--keep must be in (0, 1], got {keep}"),
        ));
    }
    let cloud = load_xyz(input)?;
    let t1 = match random_seed {
        Some(s) => sample_param_transform(&TrainConfig::default().augment, s)
            .map_err(|e| CliError::new(EXIT_BAD_CONFIG, e.to_string()))?,
        None => {
            let deg = std::f64::consts::PI / 180.0;
            let mut t = ParamTransform::rotation_x(rotate[0] * deg)
                .then(&ParamTransform::rotation_y(rotate[1] * deg))
                .then(&ParamTransform::rotation_z(rotate[2] * deg))
                .then(&ParamTransform::scaling(scale));
            if let Some(spec) = translate {
                let parts: Vec<&str> = spec.split(',').collect();
                if parts.len() != 3 {
                    return Err(CliError::new(
                        EXIT_BAD_CONFIG,
                        format!("--translate expects x,y,z, got `{spec}`"),
                    ));
                }
                for (k, p) in parts.iter().enumerate() {
                    t.translation[k] = p.trim().parse::<f64>().map_err(|e| {
                        CliError::new(EXIT_BAD_CONFIG, format!("--translate: {e}"))
                    })?;
                }
            }
            t
        }
    };
    let t2 = NonParamTransform {
        kind: NonParamKind::DropRandom { keep_ratio: keep },
        seed,
    };
    let result = compose_augment(&cloud, &t1, &t2)
        .map_err(|e| CliError::new(EXIT_BAD_CONFIG, e.to_string()))?;
    save_xyz(&result, out)?;

    // Sidecar: enough to invert the parameterized part and replay the drop.
    let mut sidecar = String::from("{\n  \"matrix\": [\n");
    for (i, row) in t1.matrix.iter().enumerate() {
        let sep = if i < 2 { "," } else { "" };
        writeln!(sidecar, "    [{}, {}, {}]{sep}", row[0], row[1], row[2]).unwrap();
    }
    writeln!(sidecar, "  ],").unwrap();
    writeln!(
        sidecar,
        "  \"translation\": [{}, {}, {}],",
        t1.translation[0], t1.translation[1], t1.translation[2]
    )
    .unwrap();
    writeln!(sidecar, "  \"keep_ratio\": {keep},").unwrap();
    writeln!(sidecar, "  \"drop_seed\": {seed}").unwrap();
    sidecar.push_str("}\n");
    let sidecar_path = PathBuf::from(format!("{}.json", out.display()));
    std::fs::write(&sidecar_path, sidecar)?;

    eprintln!(
        "{} points in, {} points out; transform recorded in {}",
        cloud.len(),
        result.len(),
        sidecar_path.display()
    );
    println!(
        "RESULT points_in={} points_out={} out={}",
        cloud.len(),
        result.len(),
        out.display()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Gen { config, out } => cmd_gen(&config, &out),
        Cmd::Train {
            config,
            data,
            out,
            epochs,
            ablation,
            resume,
        } => cmd_train(&config, &data, &out, epochs, ablation, resume.as_deref()),
        Cmd::Eval {
            checkpoint,
            data,
            config,
            split,
            ablation,
        } => cmd_eval(&checkpoint, &data, &config, &split, ablation),
        Cmd::Gradcheck {
            seed,
            step,
            tol,
            corrupt_grad,
        } => cmd_gradcheck(seed, step, tol, corrupt_grad.as_deref()),
        Cmd::Augment {
            input,
            out,
            rotate_x,
            rotate_y,
            rotate_z,
            scale,
            translate,
            keep,
            seed,
            random_seed,
        } => cmd_augment(
            &input,
            &out,
            [rotate_x, rotate_y, rotate_z],
            scale,
            translate.as_deref(),
            keep,
            seed,
            random_seed,
        ),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
