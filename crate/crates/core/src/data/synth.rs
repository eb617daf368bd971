//! Synthetic parallel corpus with known time warps.
//!
//! Each sentence is a smooth latent curve over source time. One latent channel
//! carries the log2 slope of the warp segment in force, so the alignment is a
//! function of what the source contains. A class renders the latent through
//! its own fixed linear map and offset.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{ParallelCorpus, Utterance};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub pairs_per_class_pair: usize,
    /// Inclusive source length range in stacked frames.
    pub length_range: (usize, usize),
    pub bands: usize,
    pub reduction: usize,
    pub latent_dim: usize,
    /// Inclusive slope range of the warp segments.
    pub slope_range: (f64, f64),
    pub max_segments: usize,
    /// Period range of the latent sinusoids, in stacked frames.
    pub period_range: (f64, f64),
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 2,
            pairs_per_class_pair: 50,
            length_range: (40, 80),
            bands: 80,
            reduction: 4,
            latent_dim: 6,
            slope_range: (0.5, 2.0),
            max_segments: 4,
            period_range: (4.0, 24.0),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::InvalidArgument("synthetic corpus needs at least 2 classes".into()));
        }
        let (lo, hi) = self.length_range;
        if lo == 0 || hi < lo {
            return Err(Error::InvalidArgument(format!("bad length range {lo}..={hi}")));
        }
        let (a, b) = self.slope_range;
        if !(a > 0.0 && b >= a) {
            return Err(Error::InvalidArgument(format!("bad slope range {a}..={b}")));
        }
        let (p0, p1) = self.period_range;
        if !(p0 > 0.0 && p1 >= p0) {
            return Err(Error::InvalidArgument(format!("bad period range {p0}..={p1}")));
        }
        if self.latent_dim < 2 || self.bands == 0 || self.reduction == 0 || self.max_segments == 0 {
            return Err(Error::InvalidArgument("latent_dim ≥ 2, bands, reduction and max_segments ≥ 1".into()));
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "seed={};classes={};pairs={};len={:?};bands={};reduction={};latent={};slopes={:?};segments={};periods={:?}",
            self.seed,
            self.classes,
            self.pairs_per_class_pair,
            self.length_range,
            self.bands,
            self.reduction,
            self.latent_dim,
            self.slope_range,
            self.max_segments,
            self.period_range
        )
    }
}

/// Piecewise-linear, strictly increasing map from source time to target time.
#[derive(Clone, Debug, PartialEq)]
pub struct PiecewiseWarp {
    /// Segment start times in source time, first is 0.
    starts: Vec<f64>,
    slopes: Vec<f64>,
    /// Target time at each segment start.
    offsets: Vec<f64>,
    end: f64,
}

impl PiecewiseWarp {
    pub fn new(mut breaks: Vec<f64>, slopes: Vec<f64>, end: f64) -> Result<Self> {
        breaks.insert(0, 0.0);
        if breaks.len() != slopes.len() || slopes.iter().any(|s| *s <= 0.0) || breaks.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("warp needs increasing breaks and positive slopes".into()));
        }
        let mut offsets = vec![0.0];
        for i in 1..breaks.len() {
            offsets.push(offsets[i - 1] + slopes[i - 1] * (breaks[i] - breaks[i - 1]));
        }
        Ok(Self { starts: breaks, slopes, offsets, end })
    }

    fn segment_at(&self, tau: f64) -> usize {
        self.starts.iter().rposition(|s| *s <= tau).unwrap_or(0)
    }

    pub fn slope_at(&self, tau: f64) -> f64 {
        self.slopes[self.segment_at(tau)]
    }

    pub fn forward(&self, tau: f64) -> f64 {
        let i = self.segment_at(tau);
        self.offsets[i] + self.slopes[i] * (tau - self.starts[i])
    }

    pub fn inverse(&self, t: f64) -> f64 {
        let i = self.offsets.iter().rposition(|o| *o <= t).unwrap_or(0);
        self.starts[i] + (t - self.offsets[i]) / self.slopes[i]
    }

    pub fn total(&self) -> f64 {
        self.forward(self.end)
    }
}

struct Sentence {
    amps: Vec<[f64; 3]>,
    periods: Vec<[f64; 3]>,
    phases: Vec<[f64; 3]>,
    warp: PiecewiseWarp,
}

impl Sentence {
    fn latent(&self, tau: f64) -> Vec<f64> {
        let mut v: Vec<f64> = (0..self.amps.len())
            .map(|i| {
                (0..3)
                    .map(|j| self.amps[i][j] * (std::f64::consts::TAU * tau / self.periods[i][j] + self.phases[i][j]).sin())
                    .sum()
            })
            .collect();
        v.push(self.warp.slope_at(tau).log2());
        v
    }
}

struct ClassRender {
    weights: Vec<Vec<f64>>,
    offsets: Vec<f64>,
}

impl ClassRender {
    fn render(&self, latent: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.offsets)
            .map(|(w, b)| b + w.iter().zip(latent).map(|(a, x)| a * x).sum::<f64>())
            .collect()
    }
}

fn normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Renders stacked frames: stacked frame `n` holds sub-frames at source times
/// `(n−1) + (j+½)/r` mapped through `time`.
fn render(cfg: &SynthConfig, class: &ClassRender, sentence: &Sentence, frames: usize, time: impl Fn(f64) -> f64) -> Tensor<f64> {
    let (b, r) = (cfg.bands, cfg.reduction);
    let mut out = Tensor::zeros(&[b * r, frames]);
    for n in 0..frames {
        for j in 0..r {
            let t = n as f64 + (j as f64 + 0.5) / r as f64;
            let col = class.render(&sentence.latent(time(t)));
            for (row, v) in col.into_iter().enumerate() {
                out.set(j * b + row, n, v);
            }
        }
    }
    out
}

/// Generates a parallel corpus; identical configs give bit-identical corpora.
pub fn synth_corpus_generate(cfg: &SynthConfig) -> Result<ParallelCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let latent = cfg.latent_dim;
    let renders: Vec<ClassRender> = (0..cfg.classes)
        .map(|_| ClassRender {
            weights: (0..cfg.bands)
                .map(|_| (0..latent).map(|_| normal(&mut rng) / (latent as f64).sqrt()).collect())
                .collect(),
            offsets: (0..cfg.bands).map(|_| normal(&mut rng)).collect(),
        })
        .collect();
    let mut class_pairs = Vec::new();
    for k in 1..=cfg.classes {
        for kt in 1..=cfg.classes {
            if k != kt {
                class_pairs.push((k, kt));
            }
        }
    }
    let total = class_pairs.len() * cfg.pairs_per_class_pair;
    let (lo_slope, hi_slope) = (cfg.slope_range.0.log2(), cfg.slope_range.1.log2());
    let mut pairs = Vec::with_capacity(total);
    for i in 0..total {
        let (k, kt) = class_pairs[i % class_pairs.len()];
        let n = rng.gen_range(cfg.length_range.0..=cfg.length_range.1);
        let segments = rng.gen_range(1..=cfg.max_segments);
        let mut breaks: Vec<f64> = (1..segments).map(|_| rng.gen_range(0.1..0.9) * n as f64).collect();
        breaks.sort_by(|a, b| a.partial_cmp(b).expect("finite breaks"));
        breaks.dedup();
        let slopes: Vec<f64> = (0..=breaks.len())
            .map(|_| if hi_slope > lo_slope { 2f64.powf(rng.gen_range(lo_slope..=hi_slope)) } else { cfg.slope_range.0 })
            .collect();
        let warp = PiecewiseWarp::new(breaks, slopes, n as f64)?;
        let sentence = Sentence {
            amps: (0..latent - 1).map(|_| [0; 3].map(|_| rng.gen_range(0.5..1.0) / 3f64.sqrt())).collect(),
            periods: (0..latent - 1).map(|_| [0; 3].map(|_| rng.gen_range(cfg.period_range.0..=cfg.period_range.1))).collect(),
            phases: (0..latent - 1).map(|_| [0; 3].map(|_| rng.gen_range(0.0..std::f64::consts::TAU))).collect(),
            warp,
        };
        let m = (sentence.warp.total().round() as usize).max(1);
        let source = render(cfg, &renders[k - 1], &sentence, n, |t| t);
        let end = sentence.warp.total();
        let target = render(cfg, &renders[kt - 1], &sentence, m, |t| sentence.warp.inverse(t.min(end)));
        let gt: Vec<f64> = (0..n).map(|j| sentence.warp.forward(j as f64 + 0.5) + 0.5).collect();
        let id = format!("pair{i:05}");
        pairs.push((
            Utterance { id: id.clone(), class: k, features: source, warp: None },
            Utterance { id, class: kt, features: target, warp: Some(gt) },
        ));
    }
    let corpus = ParallelCorpus { classes: cfg.classes, pairs };
    corpus.validate()?;
    Ok(corpus)
}
