//! Sliding-window conversion with per-layer left-context caches.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::gaussian::{self, GaussianAttentionParams};
use crate::model::{standard_normal, CompiledStack, NoiseMode, StudentModel};
use crate::nn::{self, CompiledSelfAttention, ConvWeights, LinearWeights};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

/// Audio hop between mel frames, in seconds.
pub const HOP_SECONDS: f64 = 0.008;

#[derive(Clone, Debug, PartialEq)]
pub struct StreamConfig {
    /// Window length `S` in stacked frames.
    pub window: usize,
    /// Attention lookback `J`.
    pub lookback: usize,
    /// Bypass the predictor and use the identity alignment.
    pub identity: bool,
    pub timing: bool,
    pub noise: NoiseMode,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self { window: 4, lookback: 32, identity: false, timing: true, noise: NoiseMode::Zeros }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window == 0 || self.lookback == 0 {
            return Err(Error::InvalidArgument("window and lookback must be at least 1".into()));
        }
        Ok(())
    }
}

/// Columns `[a ‖ b]` of two matrices with equal row counts.
pub fn hcat<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, ca) = a.expect_matrix("hcat")?;
    let (rb, cb) = b.expect_matrix("hcat")?;
    if ra != rb {
        return Err(Error::shape("hcat", format!("{ra} rows vs {rb} rows")));
    }
    let w = ca + cb;
    let mut data = Vec::with_capacity(ra * w);
    for r in 0..ra {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Tensor::new(vec![ra, w], data)
}

/// Causal convolution + GLU over one chunk. `cache` holds the previous
/// `δ(κ−1)` input frames and is advanced to end at the chunk's last frame.
pub fn causal_conv_chunked<T: Scalar>(cache: &mut Tensor<T>, conv: &ConvWeights<T>, chunk: &Tensor<T>) -> Result<Tensor<T>> {
    let pad = conv.padding();
    if cache.cols() != pad {
        return Err(Error::shape("causal_conv_chunked", format!("cache has {} frames, layer needs {pad}", cache.cols())));
    }
    let ctx = hcat(cache, chunk)?;
    let y = conv.apply_with_context(&ctx)?;
    *cache = ctx.cols_range(ctx.cols() - pad, pad)?;
    Ok(y)
}

/// Banded self-attention over one chunk; `cache` holds the last `J` inputs.
pub fn banded_attention_chunked<T: Scalar>(
    cache: &mut Tensor<T>,
    layer: &CompiledSelfAttention<T>,
    chunk: &Tensor<T>,
) -> Result<Tensor<T>> {
    let j = layer.lookback;
    if cache.cols() != j {
        return Err(Error::shape("banded_attention_chunked", format!("cache has {} frames, lookback is {j}", cache.cols())));
    }
    let ctx = hcat(cache, chunk)?;
    let y = layer.attend(&ctx, chunk.cols())?;
    *cache = ctx.cols_range(ctx.cols() - j, j)?;
    Ok(y)
}

/// Student weights materialised for one class pair.
#[derive(Clone, Debug)]
struct CompiledStudent<T> {
    source_cond: Vec<T>,
    prenet: LinearWeights<T>,
    encoder: CompiledStack<T>,
    predictor_cond: Vec<T>,
    predictor_input: LinearWeights<T>,
    predictor_stack: CompiledStack<T>,
    predictor_head: LinearWeights<T>,
    postdecoder: CompiledStack<T>,
    postnet: LinearWeights<T>,
    noise_dim: usize,
    context: usize,
    feature_dim: usize,
}

/// Per-stream state: compiled weights, per-layer caches and frame counters.
#[derive(Clone, Debug)]
pub struct StreamState<T> {
    pub config: StreamConfig,
    model: CompiledStudent<T>,
    encoder_cache: Vec<Tensor<T>>,
    predictor_cache: Vec<Tensor<T>>,
    postdecoder_cache: Vec<Tensor<T>>,
    noise_rng: Option<ChaCha8Rng>,
    pub frames_consumed: usize,
    pub frames_emitted: usize,
    finished: bool,
    last_params: Option<GaussianAttentionParams<T>>,
}

pub fn stream_init<T: Scalar>(model: &StudentModel<T>, cfg: StreamConfig, k: usize, k_target: usize) -> Result<StreamState<T>> {
    cfg.validate()?;
    let store = &model.store;
    let bb = &model.backbone;
    let pred = &model.predictor;
    let mut predictor_cond = pred.source_embedding.compile(store, k)?;
    predictor_cond.extend(pred.target_embedding.compile(store, k_target)?);
    let compiled = CompiledStudent {
        source_cond: bb.source_embedding.compile(store, k)?,
        prenet: bb.source_prenet.compile(store),
        encoder: bb.encoder.compile(store, &[k])?,
        predictor_cond,
        predictor_input: pred.input.compile(store),
        predictor_stack: pred.stack.compile(store, &[k, k_target])?,
        predictor_head: pred.head.compile(store),
        postdecoder: bb.postdecoder.compile(store, &[k_target])?,
        postnet: bb.postnet.compile(store),
        noise_dim: pred.noise_dim,
        context: model.config.context,
        feature_dim: model.config.feature_dim(),
    };
    let noise_rng = match cfg.noise {
        NoiseMode::Zeros => None,
        NoiseMode::Sample(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
    };
    Ok(StreamState {
        encoder_cache: compiled.encoder.fresh_caches(),
        predictor_cache: compiled.predictor_stack.fresh_caches(),
        postdecoder_cache: compiled.postdecoder.fresh_caches(),
        model: compiled,
        config: cfg,
        noise_rng,
        frames_consumed: 0,
        frames_emitted: 0,
        finished: false,
        last_params: None,
    })
}

impl<T: Scalar> StreamState<T> {
    /// Left-context buffer length of every cached convolution, in layer order
    /// (encoder, predictor, postdecoder).
    pub fn cache_lengths(&self) -> Vec<usize> {
        self.encoder_cache
            .iter()
            .chain(&self.predictor_cache)
            .chain(&self.postdecoder_cache)
            .map(|c| c.cols())
            .collect()
    }

    /// Window-rescaled parameters of the most recent Gaussian-mode window.
    pub fn last_params(&self) -> Option<&GaussianAttentionParams<T>> {
        self.last_params.as_ref()
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    /// Converts one chunk of exactly `S` frames. A shorter chunk ends the
    /// stream: it is zero-padded to `S` and the output cropped back.
    pub fn push_chunk(&mut self, chunk: &Tensor<T>) -> Result<Tensor<T>> {
        let s = self.config.window;
        let w = chunk.cols();
        if w > s {
            return Err(Error::shape("push_chunk", format!("chunk of {w} frames exceeds window {s}")));
        }
        if w == 0 {
            return Err(Error::Empty("chunk"));
        }
        if w == s {
            return self.push_window(chunk);
        }
        let padded = hcat(chunk, &Tensor::zeros(&[chunk.rows(), s - w]))?;
        let y = self.push_window(&padded)?;
        self.finished = true;
        self.frames_consumed -= s - w;
        self.frames_emitted -= s - w;
        y.cols_range(0, w)
    }

    /// Converts a window of any positive width; the Gaussian alignment is
    /// evaluated over exactly that width.
    pub fn push_window(&mut self, chunk: &Tensor<T>) -> Result<Tensor<T>> {
        if self.finished {
            return Err(Error::InvalidArgument("stream already ended with a short chunk".into()));
        }
        let m = &self.model;
        let (rows, s) = chunk.expect_matrix("push_chunk")?;
        if rows != m.feature_dim {
            return Err(Error::shape("push_chunk", format!("chunk has {rows} channels, model expects {}", m.feature_dim)));
        }
        if s == 0 {
            return Err(Error::Empty("chunk"));
        }
        let start = self.frames_consumed;
        let check = |t: &Tensor<T>, stage: &str| -> Result<()> {
            if t.is_finite() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!("{stage} in window starting at frame {}", start + 1)))
            }
        };
        check(chunk, "input")?;
        let x = nn::append_column(chunk, &m.source_cond)?;
        let h = m.prenet.apply(&x)?;
        let z = m.encoder.step(&mut self.encoder_cache, &h)?;
        check(&z, "encoder output")?;
        let half = m.context / 2;
        let values = z.rows_range(half, half)?;
        let r = if self.config.identity {
            values
        } else {
            let noise = match self.noise_rng.as_mut() {
                Some(rng) => standard_normal(rng, m.noise_dim, s),
                None => Tensor::zeros(&[m.noise_dim, s]),
            };
            let with_noise = if m.noise_dim == 0 { z.clone() } else { ops::concat_rows(&[&z, &noise])? };
            let px = nn::append_column(&with_noise, &m.predictor_cond)?;
            let ph = m.predictor_input.apply(&px)?;
            let ph = m.predictor_stack.step(&mut self.predictor_cache, &ph)?;
            let raw = m.predictor_head.apply(&ph)?;
            check(&raw, "predictor output")?;
            let params = gaussian::constrain_params(&raw)?;
            let params = gaussian::rescale_to_window(&params, s)?;
            let alpha = gaussian::normalize_attention(&gaussian::evaluate_attention(&params, s)?)?;
            self.last_params = Some(params);
            gaussian::apply_attention(&values, &alpha)?
        };
        let d = m.postdecoder.step(&mut self.postdecoder_cache, &r)?;
        let y = m.postnet.apply(&d)?;
        check(&y, "output")?;
        self.frames_consumed += s;
        self.frames_emitted += y.cols();
        Ok(y)
    }
}

/// Timing of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowTiming {
    pub index: usize,
    pub ms_feature: f64,
    pub ms_mapping: f64,
    pub ms_total: f64,
}

#[derive(Clone, Debug)]
pub struct StreamReport<T> {
    pub output: Tensor<T>,
    pub windows: Vec<WindowTiming>,
    /// Audio duration covered by the input, seconds.
    pub input_seconds: f64,
    pub rtf: f64,
    pub mapping_rtf: f64,
    /// RTF over windows after the first.
    pub steady_rtf: f64,
    pub mean_window_ms: f64,
    pub window_ms_variance: f64,
}

impl<T> StreamReport<T> {
    pub fn timing_csv(&self) -> String {
        let mut s = String::from("window_index,ms_feature,ms_mapping,ms_total\n");
        for w in &self.windows {
            s.push_str(&format!("{},{:.6},{:.6},{:.6}\n", w.index, w.ms_feature, w.ms_mapping, w.ms_total));
        }
        s
    }
}

/// Runs a stream to completion, timing each window. `next_chunk` produces the
/// next input chunk (its cost is reported as feature time) or `None` at the end.
pub fn measure_stream<T: Scalar>(
    state: &mut StreamState<T>,
    frame_seconds: f64,
    next_chunk: impl FnMut() -> Option<Result<Tensor<T>>>,
) -> Result<StreamReport<T>> {
    measure_stream_with(state, frame_seconds, next_chunk, |_| Ok(()))
}

/// As [`measure_stream`], handing each window's output to `sink` as soon as
/// it is produced. Sink time is not counted.
pub fn measure_stream_with<T: Scalar>(
    state: &mut StreamState<T>,
    frame_seconds: f64,
    mut next_chunk: impl FnMut() -> Option<Result<Tensor<T>>>,
    mut sink: impl FnMut(&Tensor<T>) -> Result<()>,
) -> Result<StreamReport<T>> {
    let dim = state.model.feature_dim;
    let mut columns: Vec<Tensor<T>> = Vec::new();
    let mut windows = Vec::new();
    let mut frames = 0usize;
    loop {
        let t0 = Instant::now();
        let chunk = match next_chunk() {
            Some(c) => c?,
            None => break,
        };
        let t1 = Instant::now();
        let y = state.push_chunk(&chunk)?;
        let t2 = Instant::now();
        frames += chunk.cols();
        let ms_feature = (t1 - t0).as_secs_f64() * 1e3;
        let ms_mapping = (t2 - t1).as_secs_f64() * 1e3;
        windows.push(WindowTiming { index: windows.len(), ms_feature, ms_mapping, ms_total: ms_feature + ms_mapping });
        sink(&y)?;
        columns.push(y);
        if state.is_finished() {
            break;
        }
    }
    let mut output = Tensor::zeros(&[dim, 0]);
    for c in &columns {
        output = hcat(&output, c)?;
    }
    let input_seconds = frames as f64 * frame_seconds;
    let total_ms: f64 = windows.iter().map(|w| w.ms_total).sum();
    let mapping_ms: f64 = windows.iter().map(|w| w.ms_mapping).sum();
    let n = windows.len().max(1) as f64;
    let mean = total_ms / n;
    let variance = windows.iter().map(|w| (w.ms_total - mean).powi(2)).sum::<f64>() / n;
    let steady_ms: f64 = windows.iter().skip(1).map(|w| w.ms_total).sum();
    let steady_seconds = input_seconds - windows.first().map(|_| columns[0].cols() as f64 * frame_seconds).unwrap_or(0.0);
    let rate = |ms: f64, secs: f64| if secs > 0.0 { ms / 1e3 / secs } else { 0.0 };
    Ok(StreamReport {
        output,
        rtf: rate(total_ms, input_seconds),
        mapping_rtf: rate(mapping_ms, input_seconds),
        steady_rtf: rate(steady_ms, steady_seconds),
        windows,
        input_seconds,
        mean_window_ms: mean,
        window_ms_variance: variance,
    })
}

/// Streams a whole feature sequence in windows of `S` and returns the
/// concatenated output.
pub fn stream_sequence<T: Scalar>(state: &mut StreamState<T>, xs: &Tensor<T>) -> Result<Tensor<T>> {
    let s = state.config.window;
    let mut out = Tensor::zeros(&[state.model.feature_dim, 0]);
    let mut start = 0;
    while start < xs.cols() {
        let w = s.min(xs.cols() - start);
        let y = state.push_chunk(&xs.cols_range(start, w)?)?;
        out = hcat(&out, &y)?;
        start += w;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use crate::model::ModelConfig;
    use crate::nn::CausalConvGluLayer;
    use crate::params::ParamStore;
    use rand::Rng;

    fn tiny() -> ModelConfig {
        ModelConfig { bands: 3, reduction: 2, context: 6, embedding: 2, dilations: vec![1, 3, 2], ..ModelConfig::default() }
    }

    fn random_seq(rows: usize, cols: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn cache_length_is_dilated_receptive_padding() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let layer = CausalConvGluLayer::new(&mut store, "c", 2, 2, 5, 3, false, &mut rng);
        assert_eq!(layer.compile(&store).unwrap().padding(), 12);
    }

    #[test]
    fn chunked_conv_matches_full_sequence() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let layer = CausalConvGluLayer::new(&mut store, "c", 3, 2, 5, 3, true, &mut rng);
        let x = random_seq(3, 64, 5);
        let full = layer.forward(&mut Eager, &store, &x).unwrap();
        let compiled = layer.compile(&store).unwrap();
        for s in [1, 4, 16, 64] {
            let mut cache = Tensor::zeros(&[3, compiled.padding()]);
            let mut out = Tensor::zeros(&[2, 0]);
            for start in (0..64).step_by(s) {
                let y = causal_conv_chunked(&mut cache, &compiled, &x.cols_range(start, s).unwrap()).unwrap();
                out = hcat(&out, &y).unwrap();
            }
            assert_eq!(out, full);
        }
    }

    #[test]
    fn identity_stream_equals_identity_batch() {
        let model = StudentModel::<f64>::new(tiny(), 4).unwrap();
        let x = random_seq(6, 23, 9);
        let batch = model.identity_forward(&x, 1, 2).unwrap();
        for s in [1, 4, 5] {
            let cfg = StreamConfig { window: s, identity: true, ..StreamConfig::default() };
            let mut st = stream_init(&model, cfg, 1, 2).unwrap();
            let out = stream_sequence(&mut st, &x).unwrap();
            assert_eq!(out, batch);
            assert_eq!(st.frames_consumed, 23);
            assert_eq!(st.frames_emitted, 23);
        }
    }

    #[test]
    fn gaussian_window_centres_span_the_window() {
        let model = StudentModel::<f64>::new(tiny(), 4).unwrap();
        let x = random_seq(6, 8, 3);
        let mut st = stream_init(&model, StreamConfig::default(), 2, 1).unwrap();
        for start in [0, 4] {
            st.push_chunk(&x.cols_range(start, 4).unwrap()).unwrap();
            let p = st.last_params().unwrap();
            let mean = p.mean_centers();
            assert_eq!(mean[0], 1.0);
            assert_eq!(mean[3], 4.0);
        }
    }

    #[test]
    fn short_final_chunk_ends_the_stream() {
        let model = StudentModel::<f64>::new(tiny(), 4).unwrap();
        let mut st = stream_init(&model, StreamConfig::default(), 1, 1).unwrap();
        let y = st.push_chunk(&random_seq(6, 3, 1)).unwrap();
        assert_eq!(y.cols(), 3);
        assert_eq!(st.frames_consumed, 3);
        assert!(st.push_chunk(&random_seq(6, 4, 1)).is_err());
        assert!(stream_init(&model, StreamConfig::default(), 1, 1).unwrap().push_chunk(&random_seq(6, 5, 1)).is_err());
    }
}
