//! Run configuration: `key = value` text with `#` comments.

use std::fmt::Write as _;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2svc::data::synth::SynthConfig;
use s2svc::loss::LossWeights;
use s2svc::model::{ModelConfig, NoiseMode};
use s2svc::optim::AdamConfig;
use s2svc::stream::StreamConfig;

use crate::Failure;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

/// Inference noise setting; the seed comes from the run's noise sub-seed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseSetting {
    Zeros,
    Sample,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSettings {
    pub pairs_per_class_pair: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub latent_dim: usize,
    pub slope_min: f64,
    pub slope_max: f64,
    pub max_segments: usize,
    pub period_min: f64,
    pub period_max: f64,
    /// Pairs at the end of the corpus kept out of training.
    pub held_out: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainSettings {
    pub teacher_iterations: usize,
    pub student_iterations: usize,
    pub batch_size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub precision: Precision,
    pub corpus: CorpusSettings,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub adam: AdamConfig,
    pub train: TrainSettings,
    pub window: usize,
    pub lookback: usize,
    pub identity: bool,
    pub noise: NoiseSetting,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            seed: 0,
            precision: Precision::F64,
            corpus: CorpusSettings {
                pairs_per_class_pair: synth.pairs_per_class_pair,
                min_len: synth.length_range.0,
                max_len: synth.length_range.1,
                latent_dim: synth.latent_dim,
                slope_min: synth.slope_range.0,
                slope_max: synth.slope_range.1,
                max_segments: synth.max_segments,
                period_min: synth.period_range.0,
                period_max: synth.period_range.1,
                held_out: 0,
            },
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            adam: AdamConfig::default(),
            train: TrainSettings { teacher_iterations: 3000, student_iterations: 8000, batch_size: 16 },
            window: StreamConfig::default().window,
            lookback: StreamConfig::default().lookback,
            identity: false,
            noise: NoiseSetting::Zeros,
        }
    }
}

/// Seeds derived from the master seed, one per random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SubSeeds {
    pub corpus: u64,
    pub teacher_init: u64,
    pub student_init: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl SubSeeds {
    pub fn from_master(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            corpus: rng.next_u64(),
            teacher_init: rng.next_u64(),
            student_init: rng.next_u64(),
            noise: rng.next_u64(),
            shuffle: rng.next_u64(),
        }
    }
}

fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V, Failure> {
    value.parse().map_err(|_| Failure::Usage(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, Failure> {
    match value {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Failure::Usage(format!("bad value {value:?} for {key}; expected true or false"))),
    }
}

impl RunConfig {
    pub fn sub_seeds(&self) -> SubSeeds {
        SubSeeds::from_master(self.seed)
    }

    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.sub_seeds().corpus,
            classes: self.model.classes,
            pairs_per_class_pair: self.corpus.pairs_per_class_pair,
            length_range: (self.corpus.min_len, self.corpus.max_len),
            bands: self.model.bands,
            reduction: self.model.reduction,
            latent_dim: self.corpus.latent_dim,
            slope_range: (self.corpus.slope_min, self.corpus.slope_max),
            max_segments: self.corpus.max_segments,
            period_range: (self.corpus.period_min, self.corpus.period_max),
        }
    }

    pub fn noise_mode(&self) -> NoiseMode {
        match self.noise {
            NoiseSetting::Zeros => NoiseMode::Zeros,
            NoiseSetting::Sample => NoiseMode::Sample(self.sub_seeds().noise),
        }
    }

    pub fn stream_config(&self) -> StreamConfig {
        StreamConfig { window: self.window, lookback: self.lookback, identity: self.identity, timing: true, noise: self.noise_mode() }
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), Failure> {
        let v = value.trim();
        match key.trim() {
            "seed" => self.seed = parse(key, v)?,
            "precision" => {
                self.precision = match v {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(Failure::Usage(format!("precision must be f32 or f64, got {v:?}"))),
                }
            }
            "classes" => self.model.classes = parse(key, v)?,
            "corpus.pairs_per_class_pair" => self.corpus.pairs_per_class_pair = parse(key, v)?,
            "corpus.min_len" => self.corpus.min_len = parse(key, v)?,
            "corpus.max_len" => self.corpus.max_len = parse(key, v)?,
            "corpus.latent_dim" => self.corpus.latent_dim = parse(key, v)?,
            "corpus.slope_min" => self.corpus.slope_min = parse(key, v)?,
            "corpus.slope_max" => self.corpus.slope_max = parse(key, v)?,
            "corpus.max_segments" => self.corpus.max_segments = parse(key, v)?,
            "corpus.period_min" => self.corpus.period_min = parse(key, v)?,
            "corpus.period_max" => self.corpus.period_max = parse(key, v)?,
            "corpus.held_out" => self.corpus.held_out = parse(key, v)?,
            "model.bands" => self.model.bands = parse(key, v)?,
            "model.reduction" => self.model.reduction = parse(key, v)?,
            "model.context" => self.model.context = parse(key, v)?,
            "model.embedding" => self.model.embedding = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.kernel_size" => self.model.kernel_size = parse(key, v)?,
            "model.dilations" => {
                self.model.dilations = v.split(',').map(|d| parse(key, d.trim())).collect::<Result<_, _>>()?;
            }
            "model.noise_dim" => self.model.noise_dim = parse(key, v)?,
            "model.lookback" => self.model.lookback = parse(key, v)?,
            "model.residual" => self.model.residual = parse_bool(key, v)?,
            "model.weight_norm" => self.model.weight_norm = parse_bool(key, v)?,
            "loss.lambda1" => self.loss.l1 = parse(key, v)?,
            "loss.lambda2" => self.loss.l2 = parse(key, v)?,
            "loss.lambda3" => self.loss.l3 = parse(key, v)?,
            "loss.nu" => self.loss.nu = parse(key, v)?,
            "loss.rho" => self.loss.rho = parse(key, v)?,
            "adam.lr" => self.adam.lr = parse(key, v)?,
            "adam.beta1" => self.adam.beta1 = parse(key, v)?,
            "adam.beta2" => self.adam.beta2 = parse(key, v)?,
            "adam.eps" => self.adam.eps = parse(key, v)?,
            "train.teacher_iterations" => self.train.teacher_iterations = parse(key, v)?,
            "train.student_iterations" => self.train.student_iterations = parse(key, v)?,
            "train.batch_size" => self.train.batch_size = parse(key, v)?,
            "stream.window" => self.window = parse(key, v)?,
            "stream.lookback" => self.lookback = parse(key, v)?,
            "stream.identity" => self.identity = parse_bool(key, v)?,
            "stream.noise_mode" => {
                self.noise = match v {
                    "zeros" => NoiseSetting::Zeros,
                    "sample" => NoiseSetting::Sample,
                    _ => return Err(Failure::Usage(format!("noise mode must be zeros or sample, got {v:?}"))),
                }
            }
            other => return Err(Failure::Usage(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies every setting of a config text on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), Failure> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("config line {}: expected key = value, got {raw:?}", i + 1)))?;
            self.set(key, value)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, Failure> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = std::fs::read_to_string(path).map_err(|e| Failure::Missing(format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let usage = |e: s2svc::error::Error| Failure::Usage(e.to_string());
        self.model.validate().map_err(usage)?;
        self.loss.validate().map_err(usage)?;
        self.synth().validate().map_err(usage)?;
        self.stream_config().validate().map_err(usage)?;
        if self.train.batch_size == 0 {
            return Err(Failure::Usage("train.batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// Every setting in `key = value` form; [`RunConfig::from_text`] reads it back.
    pub fn echo(&self) -> String {
        let s = self.sub_seeds();
        let m = &self.model;
        let mut out = String::from("# effective configuration\n");
        let _ = writeln!(
            out,
            "# sub-seeds: corpus={} teacher_init={} student_init={} noise={} shuffle={}",
            s.corpus, s.teacher_init, s.student_init, s.noise, s.shuffle
        );
        let dilations: Vec<String> = m.dilations.iter().map(|d| d.to_string()).collect();
        let entries: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("precision", match self.precision { Precision::F32 => "f32", Precision::F64 => "f64" }.into()),
            ("classes", m.classes.to_string()),
            ("corpus.pairs_per_class_pair", self.corpus.pairs_per_class_pair.to_string()),
            ("corpus.min_len", self.corpus.min_len.to_string()),
            ("corpus.max_len", self.corpus.max_len.to_string()),
            ("corpus.latent_dim", self.corpus.latent_dim.to_string()),
            ("corpus.slope_min", format!("{:?}", self.corpus.slope_min)),
            ("corpus.slope_max", format!("{:?}", self.corpus.slope_max)),
            ("corpus.max_segments", self.corpus.max_segments.to_string()),
            ("corpus.period_min", format!("{:?}", self.corpus.period_min)),
            ("corpus.period_max", format!("{:?}", self.corpus.period_max)),
            ("corpus.held_out", self.corpus.held_out.to_string()),
            ("model.bands", m.bands.to_string()),
            ("model.reduction", m.reduction.to_string()),
            ("model.context", m.context.to_string()),
            ("model.embedding", m.embedding.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.kernel_size", m.kernel_size.to_string()),
            ("model.dilations", dilations.join(",")),
            ("model.noise_dim", m.noise_dim.to_string()),
            ("model.lookback", m.lookback.to_string()),
            ("model.residual", m.residual.to_string()),
            ("model.weight_norm", m.weight_norm.to_string()),
            ("loss.lambda1", format!("{:?}", self.loss.l1)),
            ("loss.lambda2", format!("{:?}", self.loss.l2)),
            ("loss.lambda3", format!("{:?}", self.loss.l3)),
            ("loss.nu", format!("{:?}", self.loss.nu)),
            ("loss.rho", format!("{:?}", self.loss.rho)),
            ("adam.lr", format!("{:?}", self.adam.lr)),
            ("adam.beta1", format!("{:?}", self.adam.beta1)),
            ("adam.beta2", format!("{:?}", self.adam.beta2)),
            ("adam.eps", format!("{:?}", self.adam.eps)),
            ("train.teacher_iterations", self.train.teacher_iterations.to_string()),
            ("train.student_iterations", self.train.student_iterations.to_string()),
            ("train.batch_size", self.train.batch_size.to_string()),
            ("stream.window", self.window.to_string()),
            ("stream.lookback", self.lookback.to_string()),
            ("stream.identity", self.identity.to_string()),
            ("stream.noise_mode", match self.noise { NoiseSetting::Zeros => "zeros", NoiseSetting::Sample => "sample" }.into()),
        ];
        for (k, v) in entries {
            let _ = writeln!(out, "{k} = {v}");
        }
        out
    }
}
