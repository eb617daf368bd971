//! Subcommand definitions and their implementations.

use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use s2svc::autodiff::Eager;
use s2svc::data::container::{load_checkpoint, load_corpus, load_features, save_checkpoint, save_corpus, save_features};
use s2svc::data::mcd::mcd_dtw;
use s2svc::data::mel::{mel_extract, read_wav, MelConfig};
use s2svc::data::synth::synth_corpus_generate;
use s2svc::data::{stack_frames, unstack_frames, ParallelCorpus};
use s2svc::model::{build_student_from_teacher, standard_normal, ModelConfig, OutputLength, StudentModel, TeacherModel};
use s2svc::scalar::Scalar;
use s2svc::stream::{measure_stream, measure_stream_with, stream_init, HOP_SECONDS};
use s2svc::tensor::Tensor;
use s2svc::train::{
    corpus_pairs, evaluate_student_loss, evaluate_teacher_loss, prepare_student_targets, student_grad_check, train_student,
    train_teacher, TrainConfig, TrainPair,
};

use crate::config::{Precision, RunConfig};
use crate::raw;
use crate::Failure;

/// Relative error above which `grad-check` fails.
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(name = "s2svc", version, about = "Non-autoregressive feature conversion with Gaussian attention")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options every subcommand accepts.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Run configuration file (`key = value`, `#` comments).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Arithmetic precision: f32 or f64.
    #[arg(long)]
    pub precision: Option<String>,
    /// Extra `key=value` setting; repeatable, applied last.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    /// Where to write the effective configuration (default: next to the
    /// output file, else standard error).
    #[arg(long)]
    pub echo: Option<PathBuf>,
}

/// Streaming and conversion switches.
#[derive(Args, Debug, Clone, Default)]
pub struct StreamFlags {
    /// Identity alignment instead of the predicted attention.
    #[arg(long)]
    pub identity: bool,
    /// Inference noise: zeros or sample.
    #[arg(long = "noise-mode")]
    pub noise_mode: Option<String>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic parallel corpus with known warps.
    GenCorpus {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        classes: Option<usize>,
        /// Pairs per ordered class pair.
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the autoregressive teacher.
    TrainTeacher {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV.
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Distil the attention predictor from a trained teacher.
    TrainStudent {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long = "batch-size")]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
    },
    /// Convert a whole feature file at once.
    Convert {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: StreamFlags,
        /// Student or teacher checkpoint.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long = "source-class", default_value_t = 1)]
        source_class: usize,
        #[arg(long = "target-class", default_value_t = 2)]
        target_class: usize,
        /// Output length in frames, or `auto`.
        #[arg(long, default_value = "auto")]
        length: String,
    },
    /// Convert window by window with per-layer caches.
    Stream {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: StreamFlags,
        #[arg(long)]
        model: PathBuf,
        /// Feature file; omit with --raw.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Read and write raw frames on standard input and output.
        #[arg(long)]
        raw: bool,
        /// Window length in stacked frames.
        #[arg(long, visible_alias = "chunk")]
        window: Option<usize>,
        /// Attention lookback.
        #[arg(long)]
        lookback: Option<usize>,
        /// Per-window timing CSV.
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long = "source-class", default_value_t = 1)]
        source_class: usize,
        #[arg(long = "target-class", default_value_t = 2)]
        target_class: usize,
    },
    /// Time batch student conversion against teacher autoregressive inference.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        student: Option<PathBuf>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Input length in stacked frames.
        #[arg(long, default_value_t = 60)]
        frames: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        /// Window length for the streaming measurement.
        #[arg(long, visible_alias = "chunk")]
        window: Option<usize>,
    },
    /// Compare analytic and finite-difference gradients of the student objective.
    GradCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
    },
    /// Mel-cepstral distortion between feature files, or of a model over a corpus.
    EvalMcd {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        converted: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Teacher decoding: ar or forced.
        #[arg(long = "teacher-mode", default_value = "ar")]
        teacher_mode: String,
        /// Per-pair CSV report.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Log-mel features of a 16 kHz mono WAV file, stacked by the reduction factor.
    ExtractMel {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        wav: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        reduction: Option<usize>,
    },
}

/// Builds the effective configuration: defaults, then the config file, then
/// flags, then `--set` overrides.
fn resolve(common: &Common, flags: &[(&str, Option<String>)]) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(p) = &common.precision {
        cfg.set("precision", p)?;
    }
    for (key, value) in flags {
        if let Some(v) = value {
            cfg.set(key, v)?;
        }
    }
    for kv in &common.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn stream_flags(flags: &StreamFlags) -> Vec<(&'static str, Option<String>)> {
    vec![("stream.identity", flags.identity.then(|| "true".to_string())), ("stream.noise_mode", flags.noise_mode.clone())]
}

fn write_echo(common: &Common, cfg: &RunConfig, out: Option<&Path>) -> Result<(), Failure> {
    let text = cfg.echo();
    match (&common.echo, out) {
        (Some(p), _) => std::fs::write(p, text)?,
        (None, Some(o)) => std::fs::write(echo_path(o), text)?,
        (None, None) => eprint!("{text}"),
    }
    Ok(())
}

/// Default location of the configuration echo for an output file.
pub fn echo_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".cfg");
    PathBuf::from(s)
}

fn summary(cmd: &str, cfg: &RunConfig, metrics: Value, to_stderr: bool) {
    let line = json!({ "cmd": cmd, "seed": cfg.seed, "metrics": metrics }).to_string();
    if to_stderr {
        eprintln!("{line}");
    } else {
        println!("{line}");
    }
}

fn require(path: &Path) -> Result<(), Failure> {
    if path.exists() {
        Ok(())
    } else {
        Err(Failure::Missing(format!("{} does not exist", path.display())))
    }
}

macro_rules! with_precision {
    ($cfg:expr, $f:ident($($arg:expr),*)) => {
        match $cfg.precision {
            Precision::F32 => $f::<f32>($($arg),*),
            Precision::F64 => $f::<f64>($($arg),*),
        }
    };
}

pub fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::GenCorpus { common, classes, pairs, out } => {
            let cfg = resolve(
                &common,
                &[("classes", classes.map(|v| v.to_string())), ("corpus.pairs_per_class_pair", pairs.map(|v| v.to_string()))],
            )?;
            write_echo(&common, &cfg, Some(&out))?;
            let corpus = synth_corpus_generate(&cfg.synth())?;
            save_corpus(&out, &corpus, cfg.model.hash())?;
            let frames: usize = corpus.pairs.iter().map(|(s, _)| s.features.cols()).sum();
            summary("gen-corpus", &cfg, json!({ "pairs": corpus.pairs.len(), "source_frames": frames }), false);
            Ok(())
        }
        Command::TrainTeacher { common, corpus, out, curve, iterations, batch_size, lr } => {
            require(&corpus)?;
            let cfg = resolve(&common, &train_flags("train.teacher_iterations", iterations, batch_size, lr))?;
            write_echo(&common, &cfg, Some(&out))?;
            with_precision!(cfg, cmd_train_teacher(&cfg, &corpus, &out, curve.as_deref()))
        }
        Command::TrainStudent { common, corpus, teacher, out, curve, iterations, batch_size, lr } => {
            require(&corpus)?;
            require(&teacher)?;
            let cfg = resolve(&common, &train_flags("train.student_iterations", iterations, batch_size, lr))?;
            write_echo(&common, &cfg, Some(&out))?;
            with_precision!(cfg, cmd_train_student(&cfg, &corpus, &teacher, &out, curve.as_deref()))
        }
        Command::Convert { common, flags, model, input, out, source_class, target_class, length } => {
            require(&model)?;
            require(&input)?;
            let cfg = resolve(&common, &stream_flags(&flags))?;
            let length = match length.as_str() {
                "auto" => OutputLength::Auto,
                n => OutputLength::Fixed(n.parse().map_err(|_| Failure::Usage(format!("--length expects a number or auto, got {n:?}")))?),
            };
            write_echo(&common, &cfg, Some(&out))?;
            with_precision!(cfg, cmd_convert(&cfg, &model, &input, &out, source_class, target_class, length))
        }
        Command::Stream { common, flags, model, input, out, raw, window, lookback, timing, source_class, target_class } => {
            require(&model)?;
            let mut f = stream_flags(&flags);
            f.push(("stream.window", window.map(|v| v.to_string())));
            f.push(("stream.lookback", lookback.map(|v| v.to_string())));
            let cfg = resolve(&common, &f)?;
            let io = if raw {
                if input.is_some() || out.is_some() {
                    return Err(Failure::Usage("--raw reads standard input and writes standard output; drop --input/--out".into()));
                }
                None
            } else {
                let input = input.ok_or_else(|| Failure::Usage("stream needs --input and --out, or --raw".into()))?;
                let out = out.ok_or_else(|| Failure::Usage("stream needs --out".into()))?;
                require(&input)?;
                Some((input, out))
            };
            write_echo(&common, &cfg, io.as_ref().map(|p| p.1.as_path()))?;
            with_precision!(cfg, cmd_stream(&cfg, &model, io.as_ref(), timing.as_deref(), source_class, target_class))
        }
        Command::Bench { common, student, teacher, frames, repeats, window } => {
            for p in student.iter().chain(teacher.iter()) {
                require(p)?;
            }
            let cfg = resolve(&common, &[("stream.window", window.map(|v| v.to_string()))])?;
            write_echo(&common, &cfg, None)?;
            with_precision!(cfg, cmd_bench(&cfg, student.as_deref(), teacher.as_deref(), frames, repeats))
        }
        Command::GradCheck { common, step } => {
            let cfg = resolve(&common, &[])?;
            write_echo(&common, &cfg, None)?;
            cmd_grad_check(&cfg, step)
        }
        Command::EvalMcd { common, reference, converted, model, corpus, teacher_mode, csv } => {
            let cfg = resolve(&common, &[])?;
            write_echo(&common, &cfg, None)?;
            match (reference, converted, model, corpus) {
                (Some(r), Some(c), None, None) => {
                    require(&r)?;
                    require(&c)?;
                    let (a, ra) = load_features::<f64>(&r)?;
                    let (b, rb) = load_features::<f64>(&c)?;
                    let mcd = mcd_dtw(&unstack_frames(&a, ra)?, &unstack_frames(&b, rb)?)?;
                    summary("eval-mcd", &cfg, json!({ "mcd_db": mcd, "pairs": 1 }), false);
                    Ok(())
                }
                (None, None, Some(m), Some(c)) => {
                    require(&m)?;
                    require(&c)?;
                    let forced = match teacher_mode.as_str() {
                        "ar" => false,
                        "forced" => true,
                        other => return Err(Failure::Usage(format!("--teacher-mode expects ar or forced, got {other:?}"))),
                    };
                    with_precision!(cfg, cmd_eval_model(&cfg, &m, &c, forced, csv.as_deref()))
                }
                _ => Err(Failure::Usage("eval-mcd needs --reference and --converted, or --model and --corpus".into())),
            }
        }
        Command::ExtractMel { common, wav, out, reduction } => {
            require(&wav)?;
            let cfg = resolve(&common, &[("model.reduction", reduction.map(|v| v.to_string()))])?;
            write_echo(&common, &cfg, Some(&out))?;
            let (samples, rate) = read_wav(&wav)?;
            let mel_cfg = MelConfig { bands: cfg.model.bands, reduction: cfg.model.reduction, ..MelConfig::default() };
            let mel = mel_extract(&samples, rate, &mel_cfg)?;
            let stacked = stack_frames(&mel, cfg.model.reduction)?;
            save_features(&out, &stacked, cfg.model.reduction)?;
            summary(
                "extract-mel",
                &cfg,
                json!({ "mel_frames": mel.cols(), "stacked_frames": stacked.cols(), "dim": stacked.rows() }),
                false,
            );
            Ok(())
        }
    }
}

fn train_flags(iter_key: &'static str, iterations: Option<usize>, batch: Option<usize>, lr: Option<f64>) -> Vec<(&'static str, Option<String>)> {
    vec![
        (iter_key, iterations.map(|v| v.to_string())),
        ("train.batch_size", batch.map(|v| v.to_string())),
        ("adam.lr", lr.map(|v| format!("{v:?}"))),
    ]
}

/// Training split of a corpus: everything except the last `held_out` pairs.
pub fn training_split(corpus: &ParallelCorpus, held_out: usize) -> Result<(ParallelCorpus, ParallelCorpus), Failure> {
    if held_out >= corpus.pairs.len() {
        return Err(Failure::Usage(format!("cannot hold out {held_out} of {} pairs", corpus.pairs.len())));
    }
    Ok(corpus.split(corpus.pairs.len() - held_out))
}

fn check_dims(corpus: &ParallelCorpus, model: &ModelConfig) -> Result<(), Failure> {
    let dim = model.feature_dim();
    if let Some((s, _)) = corpus.pairs.iter().find(|(s, t)| s.features.rows() != dim || t.features.rows() != dim) {
        return Err(Failure::Invariant(format!(
            "pair {} has {} channels but the model expects {dim}",
            s.id,
            s.features.rows()
        )));
    }
    if corpus.classes > model.classes {
        return Err(Failure::Invariant(format!("corpus has {} classes, model {}", corpus.classes, model.classes)));
    }
    Ok(())
}

fn train_config(cfg: &RunConfig, iterations: usize) -> TrainConfig {
    let seeds = cfg.sub_seeds();
    TrainConfig {
        iterations,
        batch_size: cfg.train.batch_size,
        adam: cfg.adam.clone(),
        weights: cfg.loss,
        shuffle_seed: seeds.shuffle,
        noise_seed: seeds.noise,
    }
}

fn progress(tag: &'static str, every: usize) -> impl FnMut(usize, &s2svc::loss::LossParts) {
    move |it, p| {
        if it % every == 0 {
            eprintln!("{tag} {it}: total {:.5} L0 {:.5} L1 {:.5} L2 {:.6} L3 {:.6}", p.total, p.l0, p.l1, p.l2, p.l3);
        }
    }
}

fn parts_json(p: &s2svc::loss::LossParts) -> Value {
    json!({ "total": p.total, "L0": p.l0, "L1": p.l1, "L2": p.l2, "L3": p.l3 })
}

fn cmd_train_teacher<T: Scalar>(cfg: &RunConfig, corpus: &Path, out: &Path, curve: Option<&Path>) -> Result<(), Failure> {
    let corpus = load_corpus(corpus)?;
    check_dims(&corpus, &cfg.model)?;
    let (train, _) = training_split(&corpus, cfg.corpus.held_out)?;
    let pairs = corpus_pairs::<T>(&train)?;
    let mut teacher = TeacherModel::<T>::new(cfg.model.clone(), cfg.sub_seeds().teacher_init)?;
    let before = evaluate_teacher_loss(&teacher, &pairs, &cfg.loss)?;
    let losses = train_teacher(&mut teacher, &pairs, &train_config(cfg, cfg.train.teacher_iterations), progress("teacher", 100))?;
    let after = evaluate_teacher_loss(&teacher, &pairs, &cfg.loss)?;
    save_checkpoint(out, "teacher", &teacher.config, &teacher.store)?;
    if let Some(p) = curve {
        std::fs::write(p, losses.to_csv())?;
    }
    summary(
        "train-teacher",
        cfg,
        json!({ "pairs": pairs.len(), "iterations": cfg.train.teacher_iterations, "initial": parts_json(&before), "final": parts_json(&after) }),
        false,
    );
    Ok(())
}

fn cmd_train_student<T: Scalar>(
    cfg: &RunConfig,
    corpus: &Path,
    teacher: &Path,
    out: &Path,
    curve: Option<&Path>,
) -> Result<(), Failure> {
    let corpus = load_corpus(corpus)?;
    check_dims(&corpus, &cfg.model)?;
    let ckpt = load_checkpoint::<T>(teacher, Some(&cfg.model))?;
    if ckpt.kind != "teacher" {
        return Err(Failure::Invariant(format!("{} holds a {} checkpoint, not a teacher", teacher.display(), ckpt.kind)));
    }
    let teacher = TeacherModel::from_store(ckpt.config, ckpt.store)?;
    let (train, _) = training_split(&corpus, cfg.corpus.held_out)?;
    let pairs = corpus_pairs::<T>(&train)?;
    let mut student = build_student_from_teacher(&teacher, &cfg.model, cfg.sub_seeds().student_init)?;
    let targets = prepare_student_targets(&teacher, &student, &pairs)?;
    let before = evaluate_student_loss(&student, &pairs, &targets, &cfg.loss)?;
    let losses = train_student(&mut student, &pairs, &targets, &train_config(cfg, cfg.train.student_iterations), progress("student", 100))?;
    let after = evaluate_student_loss(&student, &pairs, &targets, &cfg.loss)?;
    save_checkpoint(out, "student", &student.config, &student.store)?;
    if let Some(p) = curve {
        std::fs::write(p, losses.to_csv())?;
    }
    summary(
        "train-student",
        cfg,
        json!({ "pairs": pairs.len(), "iterations": cfg.train.student_iterations, "initial": parts_json(&before), "final": parts_json(&after) }),
        false,
    );
    Ok(())
}

/// A loaded checkpoint of either kind.
pub enum AnyModel<T> {
    Teacher(TeacherModel<T>),
    Student(StudentModel<T>),
}

pub fn load_model<T: Scalar>(path: &Path) -> Result<AnyModel<T>, Failure> {
    let ckpt = load_checkpoint::<T>(path, None)?;
    match ckpt.kind.as_str() {
        "teacher" => Ok(AnyModel::Teacher(TeacherModel::from_store(ckpt.config, ckpt.store)?)),
        "student" => Ok(AnyModel::Student(StudentModel::from_store(ckpt.config, ckpt.store)?)),
        other => Err(Failure::Other(format!("{} holds an unknown checkpoint kind {other:?}", path.display()))),
    }
}

fn load_student<T: Scalar>(path: &Path) -> Result<StudentModel<T>, Failure> {
    match load_model(path)? {
        AnyModel::Student(s) => Ok(s),
        AnyModel::Teacher(_) => Err(Failure::Usage(format!("{} is a teacher checkpoint; a student is required", path.display()))),
    }
}

fn load_input<T: Scalar>(path: &Path, config: &ModelConfig) -> Result<Tensor<T>, Failure> {
    let (x, r) = load_features::<T>(path)?;
    if r != config.reduction || x.rows() != config.feature_dim() {
        return Err(Failure::Invariant(format!(
            "{} holds {}-channel features stacked by {r}; the model expects {} stacked by {}",
            path.display(),
            x.rows(),
            config.feature_dim(),
            config.reduction
        )));
    }
    Ok(x)
}

fn cmd_convert<T: Scalar>(
    cfg: &RunConfig,
    model: &Path,
    input: &Path,
    out: &Path,
    k: usize,
    kt: usize,
    length: OutputLength,
) -> Result<(), Failure> {
    let model = load_model::<T>(model)?;
    let (y, metrics) = match &model {
        AnyModel::Student(s) => {
            let x = load_input::<T>(input, &s.config)?;
            if cfg.identity {
                (s.identity_forward(&x, k, kt)?, json!({ "frames_in": x.cols(), "mode": "identity" }))
            } else {
                let o = s.convert(&x, k, kt, length, cfg.noise_mode())?;
                let end = o.params.mean_centers().last().map(|v| v.to_f64_lossy()).unwrap_or(0.0);
                (o.y, json!({ "frames_in": x.cols(), "mode": "gaussian", "final_center": end }))
            }
        }
        AnyModel::Teacher(t) => {
            if cfg.identity {
                return Err(Failure::Usage("--identity applies to student checkpoints".into()));
            }
            let x = load_input::<T>(input, &t.config)?;
            let max_len = match length {
                OutputLength::Auto => None,
                OutputLength::Fixed(m) => Some(m),
            };
            (t.teacher_infer_ar(&x, k, kt, max_len)?, json!({ "frames_in": x.cols(), "mode": "autoregressive" }))
        }
    };
    let r = match &model {
        AnyModel::Student(s) => s.config.reduction,
        AnyModel::Teacher(t) => t.config.reduction,
    };
    save_features(out, &y, r)?;
    let mut metrics = metrics;
    metrics["frames_out"] = json!(y.cols());
    summary("convert", cfg, metrics, false);
    Ok(())
}

fn cmd_stream<T: Scalar>(
    cfg: &RunConfig,
    model: &Path,
    io: Option<&(PathBuf, PathBuf)>,
    timing: Option<&Path>,
    k: usize,
    kt: usize,
) -> Result<(), Failure> {
    let student = load_student::<T>(model)?;
    let mut state = stream_init(&student, cfg.stream_config(), k, kt)?;
    let window = cfg.window;
    let frame_seconds = student.config.reduction as f64 * HOP_SECONDS;
    let report = match io {
        Some((input, out)) => {
            let x = load_input::<T>(input, &student.config)?;
            let mut start = 0;
            let report = measure_stream(&mut state, frame_seconds, || {
                if start >= x.cols() {
                    return None;
                }
                let w = window.min(x.cols() - start);
                let chunk = x.cols_range(start, w);
                start += w;
                Some(chunk)
            })?;
            save_features(out, &report.output, student.config.reduction)?;
            report
        }
        None => {
            let dim = student.config.feature_dim();
            let mut reader = BufReader::new(io::stdin().lock());
            let mut writer = BufWriter::new(io::stdout().lock());
            let mut emitted = 0u32;
            let mut bad: Option<Failure> = None;
            let report = measure_stream_with(
                &mut state,
                frame_seconds,
                || {
                    let mut cols: Vec<Vec<f32>> = Vec::with_capacity(window);
                    while cols.len() < window {
                        match raw::read_frame(&mut reader) {
                            Ok(Some((_, v))) if v.len() == dim => cols.push(v),
                            Ok(Some((i, v))) => {
                                bad = Some(Failure::Invariant(format!("frame {i} has {} values, expected {dim}", v.len())));
                                return None;
                            }
                            Ok(None) => break,
                            Err(e) => {
                                bad = Some(e.into());
                                return None;
                            }
                        }
                    }
                    if cols.is_empty() {
                        return None;
                    }
                    Some(Ok(Tensor::from_fn(dim, cols.len(), |r, c| T::of(cols[c][r] as f64))))
                },
                |y| {
                    raw::write_columns(&mut writer, emitted, y)?;
                    writer.flush()?;
                    emitted += y.cols() as u32;
                    Ok(())
                },
            );
            if let Some(b) = bad {
                return Err(b);
            }
            let report = report?;
            report
        }
    };
    if let Some(p) = timing {
        std::fs::write(p, report.timing_csv())?;
    }
    summary(
        "stream",
        cfg,
        json!({
            "frames": report.output.cols(),
            "windows": report.windows.len(),
            "rtf": report.rtf,
            "mapping_rtf": report.mapping_rtf,
            "steady_rtf": report.steady_rtf,
            "mean_window_ms": report.mean_window_ms,
            "window_ms_variance": report.window_ms_variance,
        }),
        io.is_none(),
    );
    Ok(())
}

/// Wall-clock of student batch conversion and teacher autoregressive
/// inference producing the same number of frames; the best of `repeats` runs.
pub fn time_conversion<T: Scalar>(
    student: &StudentModel<T>,
    teacher: &TeacherModel<T>,
    x: &Tensor<T>,
    repeats: usize,
) -> Result<(f64, f64), Failure> {
    let n = x.cols();
    let (mut best_s, mut best_t) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..repeats.max(1) {
        let t0 = Instant::now();
        let y = student.convert(x, 1, 2, OutputLength::Fixed(n), s2svc::model::NoiseMode::Zeros)?;
        best_s = best_s.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(y);
        let t0 = Instant::now();
        let y = teacher.teacher_infer_ar(x, 1, 2, Some(n))?;
        best_t = best_t.min(t0.elapsed().as_secs_f64());
        std::hint::black_box(y);
    }
    Ok((best_s * 1e3, best_t * 1e3))
}

fn cmd_bench<T: Scalar>(
    cfg: &RunConfig,
    student: Option<&Path>,
    teacher: Option<&Path>,
    frames: usize,
    repeats: usize,
) -> Result<(), Failure> {
    let seeds = cfg.sub_seeds();
    let teacher = match teacher {
        Some(p) => match load_model::<T>(p)? {
            AnyModel::Teacher(t) => t,
            AnyModel::Student(_) => return Err(Failure::Usage(format!("{} is not a teacher checkpoint", p.display()))),
        },
        None => TeacherModel::new(cfg.model.clone(), seeds.teacher_init)?,
    };
    let student = match student {
        Some(p) => load_student::<T>(p)?,
        None => build_student_from_teacher(&teacher, &teacher.config, seeds.student_init)?,
    };
    if student.config.hash() != teacher.config.hash() {
        return Err(Failure::Invariant("student and teacher layer dimensions differ".into()));
    }
    if frames == 0 {
        return Err(Failure::Usage("--frames must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let x: Tensor<T> = standard_normal(&mut rng, student.config.feature_dim(), frames);
    let (student_ms, teacher_ms) = time_conversion(&student, &teacher, &x, repeats)?;
    let mut state = stream_init(&student, cfg.stream_config(), 1, 2)?;
    let frame_seconds = student.config.reduction as f64 * HOP_SECONDS;
    let mut start = 0;
    let report = measure_stream(&mut state, frame_seconds, || {
        if start >= x.cols() {
            return None;
        }
        let w = cfg.window.min(x.cols() - start);
        let chunk = x.cols_range(start, w);
        start += w;
        Some(chunk)
    })?;
    summary(
        "bench",
        cfg,
        json!({
            "frames": frames,
            "precision": T::NAME,
            "student_ms": student_ms,
            "teacher_ar_ms": teacher_ms,
            "speedup": teacher_ms / student_ms,
            "student_rtf": student_ms / 1e3 / (frames as f64 * frame_seconds),
            "teacher_rtf": teacher_ms / 1e3 / (frames as f64 * frame_seconds),
            "stream_rtf": report.rtf,
            "stream_mean_window_ms": report.mean_window_ms,
            "stream_window_ms_variance": report.window_ms_variance,
        }),
        false,
    );
    Ok(())
}

fn cmd_grad_check(cfg: &RunConfig, step: f64) -> Result<(), Failure> {
    let seeds = cfg.sub_seeds();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.corpus);
    let (n, m) = (rng.gen_range(2..=6), rng.gen_range(2..=6));
    let dim = cfg.model.feature_dim();
    let mut random = |cols: usize| Tensor::<f64>::from_fn(dim, cols, |_, _| rng.gen_range(-1.0..1.0));
    let pair = TrainPair::new("check", random(n), 1, &random(m), cfg.model.classes.min(2))?;
    let teacher = TeacherModel::<f64>::new(cfg.model.clone(), seeds.teacher_init)?;
    let student = StudentModel::<f64>::new(cfg.model.clone(), seeds.student_init)?;
    let (_, a) = teacher.teacher_forward_forced(&mut Eager, &pair.source, pair.source_class, &pair.target, pair.target_class)?;
    let mut noise_rng = ChaCha8Rng::seed_from_u64(seeds.noise);
    let noise = standard_normal(&mut noise_rng, cfg.model.noise_dim, n);
    let report = student_grad_check(&student, &pair, &a, &noise, &cfg.loss, step)?;
    let worst = report.worst_entry.map(|(p, e)| format!("{}[{e}]", student.store.entries()[p].name));
    summary(
        "grad-check",
        cfg,
        json!({
            "max_relative_error": report.max_relative_error,
            "worst_entry": worst,
            "entries_checked": report.entries_checked,
            "source_frames": n,
            "target_frames": m,
            "tolerance": GRAD_CHECK_TOLERANCE,
        }),
        false,
    );
    if report.max_relative_error <= GRAD_CHECK_TOLERANCE {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("gradient relative error {} exceeds {GRAD_CHECK_TOLERANCE}", report.max_relative_error)))
    }
}

/// Converts `source` with `model` for comparison against a reference of
/// `reference_len` frames.
pub fn convert_for_eval<T: Scalar>(
    model: &AnyModel<T>,
    pair: &TrainPair<T>,
    forced: bool,
    noise: s2svc::model::NoiseMode,
) -> Result<Tensor<T>, Failure> {
    Ok(match model {
        AnyModel::Student(s) => s.convert(&pair.source, pair.source_class, pair.target_class, OutputLength::Auto, noise)?.y,
        AnyModel::Teacher(t) if forced => {
            t.teacher_forward_forced(&mut Eager, &pair.source, pair.source_class, &pair.target, pair.target_class)?.0
        }
        AnyModel::Teacher(t) => t.teacher_infer_ar(&pair.source, pair.source_class, pair.target_class, Some(pair.target_len()))?,
    })
}

fn cmd_eval_model<T: Scalar>(cfg: &RunConfig, model: &Path, corpus: &Path, forced: bool, csv: Option<&Path>) -> Result<(), Failure> {
    let model = load_model::<T>(model)?;
    let config = match &model {
        AnyModel::Student(s) => s.config.clone(),
        AnyModel::Teacher(t) => t.config.clone(),
    };
    let corpus = load_corpus(corpus)?;
    check_dims(&corpus, &config)?;
    let eval = if cfg.corpus.held_out == 0 { corpus } else { training_split(&corpus, cfg.corpus.held_out)?.1 };
    let pairs = corpus_pairs::<T>(&eval)?;
    let mut report = String::from("pair_id,MCD\n");
    let mut total = 0.0;
    for p in &pairs {
        let y = convert_for_eval(&model, p, forced, cfg.noise_mode())?;
        let reference = p.target.cols_range(1, p.target_len())?;
        let a = unstack_frames(&y.cast::<f64>(), config.reduction)?;
        let b = unstack_frames(&reference.cast::<f64>(), config.reduction)?;
        let mcd = mcd_dtw(&a, &b)?;
        total += mcd;
        report.push_str(&format!("{},{mcd}\n", p.id));
    }
    if let Some(path) = csv {
        std::fs::write(path, report)?;
    }
    summary("eval-mcd", cfg, json!({ "mcd_db": total / pairs.len() as f64, "pairs": pairs.len() }), false);
    Ok(())
}
