//! Teacher (autoregressive convolutional seq2seq) and student (non-autoregressive
//! Gaussian-attention) networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::autodiff::{Eager, Ops};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianAttentionParams, PHI_FLOOR, PHI_RANGE, SIGMA_MAX, SIGMA_MIN};
use crate::nn::{self, CausalConvGluLayer, ClassEmbeddingTable, LinearLayer};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Network dimensions shared by teacher and student.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Mel bands per frame before stacking (80 for real features).
    pub bands: usize,
    /// Reduction factor `r`: mel frames stacked into one model frame.
    pub reduction: usize,
    /// Context channel width `d` (even).
    pub context: usize,
    pub classes: usize,
    pub embedding: usize,
    pub heads: usize,
    pub kernel_size: usize,
    pub dilations: Vec<usize>,
    pub noise_dim: usize,
    pub lookback: usize,
    pub residual: bool,
    pub weight_norm: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            bands: 80,
            reduction: 4,
            context: 32,
            classes: 2,
            embedding: 8,
            heads: 1,
            kernel_size: 5,
            dilations: vec![1, 3, 9, 27, 1, 3, 9, 27],
            noise_dim: 4,
            lookback: 32,
            residual: true,
            weight_norm: false,
        }
    }
}

impl ModelConfig {
    /// Stacked feature dimension `D = bands · r`.
    pub fn feature_dim(&self) -> usize {
        self.bands * self.reduction
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("bands", self.bands),
            ("reduction", self.reduction),
            ("context", self.context),
            ("classes", self.classes),
            ("embedding", self.embedding),
            ("heads", self.heads),
            ("kernel_size", self.kernel_size),
            ("lookback", self.lookback),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.context % 2 != 0 {
            return Err(Error::InvalidArgument(format!("context width {} must be even", self.context)));
        }
        if self.heads != 1 {
            return Err(Error::InvalidArgument("only single-head attention is supported".into()));
        }
        if self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::InvalidArgument("dilations must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; the basis of [`ModelConfig::hash`].
    pub fn canonical(&self) -> String {
        format!(
            "bands={};reduction={};context={};classes={};embedding={};heads={};kernel_size={};dilations={:?};noise_dim={};lookback={};residual={};weight_norm={}",
            self.bands,
            self.reduction,
            self.context,
            self.classes,
            self.embedding,
            self.heads,
            self.kernel_size,
            self.dilations,
            self.noise_dim,
            self.lookback,
            self.residual,
            self.weight_norm
        )
    }

    pub fn from_canonical(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Format(format!("bad model config field {what}"));
        let mut cfg = ModelConfig::default();
        for field in text.split(';') {
            let (key, value) = field.split_once('=').ok_or_else(|| bad(field))?;
            let int = || value.parse::<usize>().map_err(|_| bad(key));
            let flag = || value.parse::<bool>().map_err(|_| bad(key));
            match key {
                "bands" => cfg.bands = int()?,
                "reduction" => cfg.reduction = int()?,
                "context" => cfg.context = int()?,
                "classes" => cfg.classes = int()?,
                "embedding" => cfg.embedding = int()?,
                "heads" => cfg.heads = int()?,
                "kernel_size" => cfg.kernel_size = int()?,
                "noise_dim" => cfg.noise_dim = int()?,
                "lookback" => cfg.lookback = int()?,
                "residual" => cfg.residual = flag()?,
                "weight_norm" => cfg.weight_norm = flag()?,
                "dilations" => {
                    let inner = value.trim_start_matches('[').trim_end_matches(']');
                    cfg.dilations = inner
                        .split(',')
                        .map(|s| s.trim().parse::<usize>().map_err(|_| bad(key)))
                        .collect::<Result<_>>()?;
                }
                other => return Err(bad(other)),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// First 8 bytes (little endian) of the SHA-256 of the canonical form.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("digest is 32 bytes"))
    }
}

/// Stack of dilated causal GLU convolutions, each fed its input with the class
/// embeddings appended.
#[derive(Clone, Debug)]
pub struct ConvStack {
    pub layers: Vec<CausalConvGluLayer>,
    pub embeddings: Vec<ClassEmbeddingTable>,
    pub residual: bool,
}

impl ConvStack {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        cfg: &ModelConfig,
        embeddings: Vec<ClassEmbeddingTable>,
        rng: &mut R,
    ) -> Self {
        let extra: usize = embeddings.iter().map(|e| e.width).sum();
        let layers = cfg
            .dilations
            .iter()
            .enumerate()
            .map(|(i, &dil)| {
                let cin = if i == 0 { in_channels } else { cfg.context } + extra;
                CausalConvGluLayer::new(
                    store,
                    &format!("{name}.layer{i}"),
                    cin,
                    cfg.context,
                    cfg.kernel_size,
                    dil,
                    cfg.weight_norm,
                    rng,
                )
            })
            .collect();
        Self { layers, embeddings, residual: cfg.residual }
    }

    fn check_classes(&self, classes: &[usize]) -> Result<()> {
        if classes.len() != self.embeddings.len() {
            return Err(Error::InvalidArgument(format!(
                "{} class indices for {} embedding tables",
                classes.len(),
                self.embeddings.len()
            )));
        }
        for (t, &k) in self.embeddings.iter().zip(classes) {
            t.check_class(k)?;
        }
        Ok(())
    }

    pub fn forward<T: Scalar, O: Ops<T>>(
        &self,
        ops: &mut O,
        store: &ParamStore<T>,
        x: &O::Val,
        classes: &[usize],
    ) -> Result<O::Val> {
        self.check_classes(classes)?;
        let t = ops.value(x).cols();
        let mut conds = Vec::with_capacity(self.embeddings.len());
        for (table, &k) in self.embeddings.iter().zip(classes) {
            conds.push(table.repeated(ops, store, k, t)?);
        }
        let mut h = x.clone();
        for layer in &self.layers {
            let input = if conds.is_empty() {
                h.clone()
            } else {
                let mut parts = vec![h.clone()];
                parts.extend(conds.iter().cloned());
                ops.concat_rows(&parts)?
            };
            let y = layer.forward(ops, store, &input)?;
            h = if self.residual && ops.value(&h).rows() == ops.value(&y).rows() {
                let s = ops.add(&h, &y)?;
                ops.scale(&s, residual_scale())?
            } else {
                y
            };
        }
        Ok(h)
    }

    pub fn compile<T: Scalar>(&self, store: &ParamStore<T>, classes: &[usize]) -> Result<CompiledStack<T>> {
        self.check_classes(classes)?;
        let mut cond = Vec::new();
        for (table, &k) in self.embeddings.iter().zip(classes) {
            cond.extend(table.compile(store, k)?);
        }
        let convs = self.layers.iter().map(|l| l.compile(store)).collect::<Result<_>>()?;
        Ok(CompiledStack { convs, cond, residual: self.residual })
    }
}

fn residual_scale<T: Scalar>() -> T {
    T::of(0.5f64.sqrt())
}

/// A [`ConvStack`] with its weights materialised and class pair fixed.
#[derive(Clone, Debug)]
pub struct CompiledStack<T> {
    pub convs: Vec<nn::ConvWeights<T>>,
    pub cond: Vec<T>,
    pub residual: bool,
}

impl<T: Scalar> CompiledStack<T> {
    /// One step of sliding-window evaluation: each layer sees its cached input
    /// history followed by the new frames; caches are advanced in place.
    pub fn step(&self, caches: &mut [Tensor<T>], x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (conv, cache) in self.convs.iter().zip(caches.iter_mut()) {
            let input = nn::append_column(&h, &self.cond)?;
            let y = crate::stream::causal_conv_chunked(cache, conv, &input)?;
            h = if self.residual && h.rows() == y.rows() {
                crate::tensor::ops::scale(&crate::tensor::ops::add(&h, &y)?, residual_scale())
            } else {
                y
            };
        }
        Ok(h)
    }

    /// Zeroed left-context buffers, one per layer.
    pub fn fresh_caches(&self) -> Vec<Tensor<T>> {
        self.convs
            .iter()
            .map(|c| Tensor::zeros(&[c.kernel.shape()[1], c.padding()]))
            .collect()
    }
}

/// Source-side and output-side subnets shared by teacher and student.
#[derive(Clone, Debug)]
pub struct Backbone {
    pub source_embedding: ClassEmbeddingTable,
    pub source_prenet: LinearLayer,
    pub encoder: ConvStack,
    pub post_embedding: ClassEmbeddingTable,
    pub postdecoder: ConvStack,
    pub postnet: LinearLayer,
}

impl Backbone {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (dim, d, e) = (cfg.feature_dim(), cfg.context, cfg.embedding);
        let source_embedding = ClassEmbeddingTable::new(store, "source_embedding", cfg.classes, e, rng);
        let source_prenet = LinearLayer::new(store, "source_prenet", dim + e, d, rng);
        let encoder = ConvStack::new(store, "encoder", d, cfg, vec![source_embedding.clone()], rng);
        let post_embedding = ClassEmbeddingTable::new(store, "post_embedding", cfg.classes, e, rng);
        let postdecoder = ConvStack::new(store, "postdecoder", d / 2, cfg, vec![post_embedding.clone()], rng);
        let postnet = LinearLayer::new(store, "postnet", d, dim, rng);
        Self { source_embedding, source_prenet, encoder, post_embedding, postdecoder, postnet }
    }

    /// `Z = encoder(prenet(X ⊕ e_k) ⊕ e_k)`, `d×N`.
    pub fn encode<T: Scalar, O: Ops<T>>(
        &self,
        ops: &mut O,
        store: &ParamStore<T>,
        xs: &O::Val,
        k: usize,
    ) -> Result<O::Val> {
        let cols = ops.value(xs).cols();
        if cols == 0 {
            return Err(Error::Empty("source sequence"));
        }
        let x = nn::embed_and_concat(ops, store, xs, k, &self.source_embedding)?;
        let h = self.source_prenet.forward(ops, store, &x)?;
        self.encoder.forward(ops, store, &h, &[k])
    }

    /// `Y = postnet(postdecoder(R ⊕ e_k′))`.
    pub fn decode<T: Scalar, O: Ops<T>>(
        &self,
        ops: &mut O,
        store: &ParamStore<T>,
        r: &O::Val,
        k_target: usize,
    ) -> Result<O::Val> {
        let h = self.postdecoder.forward(ops, store, r, &[k_target])?;
        self.postnet.forward(ops, store, &h)
    }
}

/// Splits `Z` into keys (first half) and values (second half).
pub fn split_context<T: Scalar, O: Ops<T>>(ops: &mut O, z: &O::Val) -> Result<(O::Val, O::Val)> {
    let d = ops.value(z).rows();
    let keys = ops.slice(z, 0, 0, d / 2)?;
    let values = ops.slice(z, 0, d / 2, d / 2)?;
    Ok((keys, values))
}

/// Autoregressive convolutional teacher.
#[derive(Clone, Debug)]
pub struct TeacherModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub target_embedding: ClassEmbeddingTable,
    pub target_prenet: LinearLayer,
    pub predecoder: ConvStack,
    pub query: LinearLayer,
}

impl<T: Scalar> TeacherModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng);
        let (dim, d, e) = (config.feature_dim(), config.context, config.embedding);
        let target_embedding = ClassEmbeddingTable::new(&mut store, "target_embedding", config.classes, e, &mut rng);
        let target_prenet = LinearLayer::new(&mut store, "target_prenet", dim + e, d, &mut rng);
        let predecoder = ConvStack::new(&mut store, "predecoder", d, &config, vec![target_embedding.clone()], &mut rng);
        let query = LinearLayer::new(&mut store, "query", d, d / 2, &mut rng);
        Ok(Self { config, store, backbone, target_embedding, target_prenet, predecoder, query })
    }

    /// Rebuilds the architecture for `config` and loads `store` into it.
    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.load_values_from(&store)?;
        Ok(model)
    }

    pub fn encode_source<O: Ops<T>>(&self, ops: &mut O, xs: &O::Val, k: usize) -> Result<O::Val> {
        self.check_input(ops.value(xs))?;
        self.backbone.encode(ops, &self.store, xs, k)
    }

    fn check_input(&self, xs: &Tensor<T>) -> Result<()> {
        let dim = self.config.feature_dim();
        if xs.rank() != 2 || xs.rows() != dim {
            return Err(Error::shape("model input", format!("expected {dim} channels, got {:?}", xs.shape())));
        }
        Ok(())
    }

    /// Target side on the first `M` columns of `xt` (SOS followed by the
    /// target frames fed back): projected queries, `d/2 × M`.
    fn queries<O: Ops<T>>(&self, ops: &mut O, xt_in: &O::Val, k_target: usize) -> Result<O::Val> {
        let x = nn::embed_and_concat(ops, &self.store, xt_in, k_target, &self.target_embedding)?;
        let h = self.target_prenet.forward(ops, &self.store, &x)?;
        let q = self.predecoder.forward(ops, &self.store, &h, &[k_target])?;
        self.query.forward(ops, &self.store, &q)
    }

    /// Decoder pass given the encoded source; returns `(Y: D×M, A: N×M)`.
    pub fn decode_with_context<O: Ops<T>>(
        &self,
        ops: &mut O,
        z: &O::Val,
        xt_in: &O::Val,
        k_target: usize,
    ) -> Result<(O::Val, O::Val)> {
        let (keys, values) = split_context(ops, z)?;
        let q = self.queries(ops, xt_in, k_target)?;
        let (r, a) = nn::scaled_dot_attention(ops, &q, &keys, &values, None)?;
        let y = self.backbone.decode(ops, &self.store, &r, k_target)?;
        Ok((y, a))
    }

    /// Teacher-forced pass. `xt` is `D×(M+1)` with the all-zero SOS frame first.
    pub fn teacher_forward_forced<O: Ops<T>>(
        &self,
        ops: &mut O,
        xs: &O::Val,
        k: usize,
        xt: &O::Val,
        k_target: usize,
    ) -> Result<(O::Val, O::Val)> {
        let target = ops.value(xt);
        self.check_input(target)?;
        let m = target.cols().checked_sub(1).filter(|&m| m > 0).ok_or(Error::Empty("target sequence"))?;
        if target.col(0).iter().any(|v| *v != T::zero()) {
            return Err(Error::InvalidArgument("target sequence must start with the all-zero SOS frame".into()));
        }
        self.backbone.source_embedding.check_class(k)?;
        self.target_embedding.check_class(k_target)?;
        let z = self.encode_source(ops, xs, k)?;
        let xt_in = ops.slice(xt, 1, 0, m)?;
        self.decode_with_context(ops, &z, &xt_in, k_target)
    }

    /// Autoregressive generation: every step re-runs the decoder over all
    /// frames generated so far and appends the newest output.
    pub fn teacher_infer_ar(&self, xs: &Tensor<T>, k: usize, k_target: usize, max_len: Option<usize>) -> Result<Tensor<T>> {
        self.check_input(xs)?;
        let n = xs.cols();
        if n == 0 {
            return Err(Error::Empty("source sequence"));
        }
        let max_len = max_len.unwrap_or(2 * n);
        if max_len == 0 {
            return Err(Error::InvalidArgument("max_len must be at least 1".into()));
        }
        self.target_embedding.check_class(k_target)?;
        let mut ops = Eager;
        let z = self.encode_source(&mut ops, xs, k)?;
        let dim = self.config.feature_dim();
        let mut fed = Tensor::zeros(&[dim, 1]);
        let mut out: Vec<Vec<T>> = Vec::with_capacity(max_len);
        for step in 0..max_len {
            let (y, _) = self.decode_with_context(&mut ops, &z, &fed, k_target)?;
            let newest = y.col(step);
            out.push(newest.clone());
            if step + 1 < max_len {
                fed = Tensor::from_fn(dim, step + 2, |r, c| if c == 0 { T::zero() } else { out[c - 1][r] });
            }
        }
        Ok(Tensor::from_fn(dim, max_len, |r, c| out[c][r]))
    }
}

/// Inference-time noise fed to the attention predictor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NoiseMode {
    Zeros,
    Sample(u64),
}

impl NoiseMode {
    pub fn draw<T: Scalar>(&self, channels: usize, frames: usize) -> Tensor<T> {
        match *self {
            NoiseMode::Zeros => Tensor::zeros(&[channels, frames]),
            NoiseMode::Sample(seed) => standard_normal(&mut ChaCha8Rng::seed_from_u64(seed), channels, frames),
        }
    }
}

pub fn standard_normal<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor<T> {
    Tensor::from_fn(rows, cols, |_, _| {
        let z: f64 = StandardNormal.sample(rng);
        T::of(z)
    })
}

/// How many output frames a batch conversion produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputLength {
    /// `max(1, ⌈mean_h μ_{h,N}⌉)`.
    Auto,
    Fixed(usize),
}

/// Learned map from source context and class pair to Gaussian attention parameters.
#[derive(Clone, Debug)]
pub struct AttentionPredictor {
    pub source_embedding: ClassEmbeddingTable,
    pub target_embedding: ClassEmbeddingTable,
    pub input: LinearLayer,
    pub stack: ConvStack,
    pub head: LinearLayer,
    pub noise_dim: usize,
    pub heads: usize,
}

impl AttentionPredictor {
    fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut R) -> Self {
        let (d, e) = (cfg.context, cfg.embedding);
        let source_embedding = ClassEmbeddingTable::new(store, "predictor.source_embedding", cfg.classes, e, rng);
        let target_embedding = ClassEmbeddingTable::new(store, "predictor.target_embedding", cfg.classes, e, rng);
        let input = LinearLayer::new(store, "predictor.input", d + cfg.noise_dim + 2 * e, d, rng);
        let stack = ConvStack::new(
            store,
            "predictor.stack",
            d,
            cfg,
            vec![source_embedding.clone(), target_embedding.clone()],
            rng,
        );
        let head = LinearLayer::new(store, "predictor.head", d, 3 * cfg.heads, rng);
        let bias = store.get_mut(head.bias);
        for h in 0..cfg.heads {
            bias.data_mut()[h] = T::one();
        }
        Self { source_embedding, target_embedding, input, stack, head, noise_dim: cfg.noise_dim, heads: cfg.heads }
    }

    pub fn param_count(&self) -> usize {
        let stack: usize = self.stack.layers.iter().map(|l| l.param_count()).sum();
        let tables = (self.source_embedding.classes * self.source_embedding.width)
            + (self.target_embedding.classes * self.target_embedding.width);
        self.input.param_count() + stack + self.head.param_count() + tables
    }

    /// Unconstrained `3H×N` output.
    pub fn raw<T: Scalar, O: Ops<T>>(
        &self,
        ops: &mut O,
        store: &ParamStore<T>,
        z: &O::Val,
        k: usize,
        k_target: usize,
        noise: &O::Val,
    ) -> Result<O::Val> {
        let (zn, nn_) = (ops.value(z).cols(), ops.value(noise).shape().to_vec());
        if nn_ != [self.noise_dim, zn] {
            return Err(Error::shape("attention predictor", format!("noise {nn_:?} for {} channels × {zn}", self.noise_dim)));
        }
        let src = self.source_embedding.repeated(ops, store, k, zn)?;
        let tgt = self.target_embedding.repeated(ops, store, k_target, zn)?;
        let x = if self.noise_dim == 0 {
            ops.concat_rows(&[z.clone(), src, tgt])?
        } else {
            ops.concat_rows(&[z.clone(), noise.clone(), src, tgt])?
        };
        let h = self.input.forward(ops, store, &x)?;
        let h = self.stack.forward(ops, store, &h, &[k, k_target])?;
        self.head.forward(ops, store, &h)
    }
}

/// Differentiable constraint layer: `Δ=|·|`, `σ=clip(|·|)`, `φ=0.2·sigmoid(·)+0.8`, `μ=cumsum(Δ)`.
pub struct ConstrainedParams<V> {
    pub deltas: V,
    pub sigmas: V,
    pub phis: V,
    pub centers: V,
}

pub fn constrain<T: Scalar, O: Ops<T>>(ops: &mut O, raw: &O::Val) -> Result<ConstrainedParams<O::Val>> {
    let rows = ops.value(raw).rows();
    if rows == 0 || rows % 3 != 0 {
        return Err(Error::shape("constrain_params", format!("expected 3H rows, got {rows}")));
    }
    let h = rows / 3;
    let d = ops.slice(raw, 0, 0, h)?;
    let s = ops.slice(raw, 0, h, h)?;
    let p = ops.slice(raw, 0, 2 * h, h)?;
    let deltas = ops.abs(&d)?;
    let s_abs = ops.abs(&s)?;
    let sigmas = ops.clamp(&s_abs, T::of(SIGMA_MIN), T::of(SIGMA_MAX))?;
    let p_sig = ops.sigmoid(&p)?;
    let p_scaled = ops.scale(&p_sig, T::of(PHI_RANGE))?;
    let phis = ops.add_scalar(&p_scaled, T::of(PHI_FLOOR))?;
    let centers = ops.cumsum_cols(&deltas)?;
    Ok(ConstrainedParams { deltas, sigmas, phis, centers })
}

impl<V> ConstrainedParams<V> {
    pub fn to_params<T: Scalar, O: Ops<T, Val = V>>(&self, ops: &O) -> GaussianAttentionParams<T> {
        GaussianAttentionParams {
            deltas: ops.value(&self.deltas).clone(),
            sigmas: ops.value(&self.sigmas).clone(),
            phis: ops.value(&self.phis).clone(),
            centers: ops.value(&self.centers).clone(),
        }
    }
}

/// `max(1, ⌈mean_h μ_{h,N}⌉)`.
pub fn auto_length<T: Scalar>(params: &GaussianAttentionParams<T>) -> usize {
    let mean = params.mean_centers();
    let last = mean.last().map(|v| v.to_f64_lossy()).unwrap_or(0.0);
    (last.ceil() as usize).max(1)
}

/// Output of one student forward pass.
pub struct StudentOutput<V, T> {
    pub y: V,
    pub alpha: V,
    pub params: GaussianAttentionParams<T>,
    pub constrained: ConstrainedParams<V>,
}

/// Non-autoregressive Gaussian-attention student.
#[derive(Clone, Debug)]
pub struct StudentModel<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub backbone: Backbone,
    pub predictor: AttentionPredictor,
}

impl<T: Scalar> StudentModel<T> {
    /// Fresh student with untrained backbone (for tests); see [`build_student_from_teacher`].
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &config, &mut rng);
        let mut pred_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
        let predictor = AttentionPredictor::new(&mut store, &config, &mut pred_rng);
        Ok(Self { config, store, backbone, predictor })
    }

    pub fn from_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.store.load_values_from(&store)?;
        model.freeze_backbone();
        Ok(model)
    }

    fn freeze_backbone(&mut self) {
        let ids: Vec<_> = self.store.ids().collect();
        for id in ids {
            let frozen = !self.store.entry(id).name.starts_with("predictor.");
            self.store.set_trainable(id, !frozen);
        }
    }

    pub fn predictor_param_count(&self) -> usize {
        self.predictor.param_count()
    }

    pub fn encode_source<O: Ops<T>>(&self, ops: &mut O, xs: &O::Val, k: usize) -> Result<O::Val> {
        let dim = self.config.feature_dim();
        let x = ops.value(xs);
        if x.rank() != 2 || x.rows() != dim {
            return Err(Error::shape("model input", format!("expected {dim} channels, got {:?}", x.shape())));
        }
        self.backbone.encode(ops, &self.store, xs, k)
    }

    pub fn attention_predictor_forward<O: Ops<T>>(
        &self,
        ops: &mut O,
        z: &O::Val,
        k: usize,
        k_target: usize,
        noise: &O::Val,
    ) -> Result<ConstrainedParams<O::Val>> {
        let raw = self.predictor.raw(ops, &self.store, z, k, k_target, noise)?;
        constrain(ops, &raw)
    }

    /// Warp and decode given the encoded source and predicted parameters.
    pub fn convert_from_context<O: Ops<T>>(
        &self,
        ops: &mut O,
        z: &O::Val,
        constrained: ConstrainedParams<O::Val>,
        k_target: usize,
        length: OutputLength,
    ) -> Result<StudentOutput<O::Val, T>> {
        let params = constrained.to_params(ops);
        let m = match length {
            OutputLength::Auto => auto_length(&params),
            OutputLength::Fixed(m) if m > 0 => m,
            OutputLength::Fixed(_) => return Err(Error::InvalidArgument("output length must be at least 1".into())),
        };
        let n = params.len();
        let g = ops.gaussian(&constrained.centers, &constrained.sigmas, &constrained.phis, m)?;
        let a3 = ops.normalize(&g)?;
        let alpha = ops.reshape(&a3, &[n, m])?;
        let (_, values) = split_context(ops, z)?;
        let r = ops.matmul(&values, &alpha)?;
        let y = self.backbone.decode(ops, &self.store, &r, k_target)?;
        Ok(StudentOutput { y, alpha, params, constrained })
    }

    pub fn student_forward<O: Ops<T>>(
        &self,
        ops: &mut O,
        xs: &O::Val,
        k: usize,
        k_target: usize,
        length: OutputLength,
        noise: NoiseMode,
    ) -> Result<StudentOutput<O::Val, T>> {
        self.backbone.post_embedding.check_class(k_target)?;
        let z = self.encode_source(ops, xs, k)?;
        let n = ops.value(xs).cols();
        let noise = ops.constant(noise.draw(self.config.noise_dim, n))?;
        let constrained = self.attention_predictor_forward(ops, &z, k, k_target, &noise)?;
        self.convert_from_context(ops, &z, constrained, k_target, length)
    }

    /// Identity-alignment cascade: `Y = postnet(postdecoder(V ⊕ e_k′))`, `M = N`.
    pub fn identity_forward(&self, xs: &Tensor<T>, k: usize, k_target: usize) -> Result<Tensor<T>> {
        let mut ops = Eager;
        let z = self.encode_source(&mut ops, xs, k)?;
        let (_, values) = split_context(&mut ops, &z)?;
        self.backbone.decode(&mut ops, &self.store, &values, k_target)
    }

    /// Batch conversion with the default deterministic noise.
    pub fn convert(&self, xs: &Tensor<T>, k: usize, k_target: usize, length: OutputLength, noise: NoiseMode) -> Result<StudentOutput<Tensor<T>, T>> {
        self.student_forward(&mut Eager, xs, k, k_target, length, noise)
    }
}

/// Student whose backbone is copied by value from `teacher` and frozen; the
/// attention predictor is freshly initialised from `seed`.
pub fn build_student_from_teacher<T: Scalar>(teacher: &TeacherModel<T>, config: &ModelConfig, seed: u64) -> Result<StudentModel<T>> {
    if teacher.config.hash() != config.hash() {
        return Err(Error::ConfigMismatch(format!(
            "teacher config hash {:016x} does not match {:016x}",
            teacher.config.hash(),
            config.hash()
        )));
    }
    let mut student = StudentModel::new(config.clone(), seed)?;
    let ids: Vec<_> = student.store.ids().collect();
    for id in ids {
        let name = student.store.entry(id).name.clone();
        if name.starts_with("predictor.") {
            continue;
        }
        let src = teacher
            .store
            .find(&name)
            .ok_or_else(|| Error::ConfigMismatch(format!("teacher has no parameter {name}")))?;
        let value = teacher.store.get(src);
        if value.shape() != student.store.get(id).shape() {
            return Err(Error::ConfigMismatch(format!("parameter {name} shape differs")));
        }
        *student.store.get_mut(id) = value.clone();
    }
    student.freeze_backbone();
    Ok(student)
}
