//! Layer vocabulary: per-frame linear maps, dilated causal convolutions with
//! GLU gating, class-embedding conditioning and scaled dot-product attention.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use crate::autodiff::Ops;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

fn uniform_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    let dist = Uniform::new_inclusive(-bound, bound);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(dist.sample(rng))).collect())
        .expect("shape product matches generated length")
}

/// `N(0, gain/fan_in)`; gain 4 keeps activations at unit scale through a GLU.
fn normal_init<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, gain: f64) -> Tensor<T> {
    let std = (gain / fan_in.max(1) as f64).sqrt();
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); T::of(std * z) }).collect())
        .expect("shape product matches generated length")
}

/// Fully-connected map applied independently at every time step.
#[derive(Clone, Debug)]
pub struct LinearLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl LinearLayer {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), uniform_init(rng, &[out_channels, in_channels], in_channels));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels, 1]));
        Self { weight, bias, in_channels, out_channels }
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels + self.out_channels
    }

    pub fn forward<T: Scalar, O: Ops<T>>(&self, ops: &mut O, store: &ParamStore<T>, x: &O::Val) -> Result<O::Val> {
        let rows = ops.value(x).rows();
        if rows != self.in_channels {
            return Err(Error::shape("linear", format!("{rows} input channels, layer expects {}", self.in_channels)));
        }
        let t = ops.value(x).cols();
        let w = ops.param(store, self.weight)?;
        let b = ops.param(store, self.bias)?;
        let y = ops.matmul(&w, x)?;
        let bias = ops.repeat_cols(&b, t)?;
        ops.add(&y, &bias)
    }

    pub fn compile<T: Scalar>(&self, store: &ParamStore<T>) -> LinearWeights<T> {
        LinearWeights { weight: store.get(self.weight).clone(), bias: store.get(self.bias).data().to_vec() }
    }
}

/// Materialised weights of a [`LinearLayer`] for direct kernel evaluation.
#[derive(Clone, Debug)]
pub struct LinearWeights<T> {
    pub weight: Tensor<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LinearWeights<T> {
    /// Same arithmetic as [`LinearLayer::forward`]: `W x` then `+ b`.
    pub fn apply(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut y = ops::matmul(&self.weight, x)?;
        for (r, &b) in self.bias.iter().enumerate() {
            for v in y.row_mut(r) {
                *v = *v + b;
            }
        }
        Ok(y)
    }
}

/// Dilated causal convolution producing `2·C_out` channels, gated down to `C_out` by a GLU.
#[derive(Clone, Debug)]
pub struct CausalConvGluLayer {
    /// Kernel `2·C_out × C_in × κ` (the direction tensor when weight normalisation is on).
    pub kernel: ParamId,
    /// Per-output-channel gain, present only with weight normalisation.
    pub gain: Option<ParamId>,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl CausalConvGluLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        dilation: usize,
        weight_norm: bool,
        rng: &mut R,
    ) -> Self {
        let shape = [2 * out_channels, in_channels, kernel_size];
        let init: Tensor<T> = normal_init(rng, &shape, in_channels * kernel_size, 4.0);
        let gain = weight_norm.then(|| {
            let per = in_channels * kernel_size;
            let norms = (0..2 * out_channels)
                .map(|o| init.data()[o * per..(o + 1) * per].iter().map(|v| *v * *v).sum::<T>().sqrt())
                .collect();
            store.add(format!("{name}.gain"), Tensor::new(vec![2 * out_channels], norms).expect("gain shape"))
        });
        let kernel = store.add(format!("{name}.kernel"), init);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[2 * out_channels]));
        Self { kernel, gain, bias, in_channels, out_channels, kernel_size, dilation }
    }

    pub fn param_count(&self) -> usize {
        let k = 2 * self.out_channels * self.in_channels * self.kernel_size + 2 * self.out_channels;
        k + if self.gain.is_some() { 2 * self.out_channels } else { 0 }
    }

    /// Left-context length the layer needs: `δ(κ−1)`.
    pub fn receptive_padding(&self) -> usize {
        ops::causal_padding(self.kernel_size, self.dilation)
    }

    fn effective_kernel<T: Scalar, O: Ops<T>>(&self, ops: &mut O, store: &ParamStore<T>) -> Result<O::Val> {
        let v = ops.param(store, self.kernel)?;
        match self.gain {
            Some(g) => {
                let g = ops.param(store, g)?;
                ops.weight_norm(&v, &g)
            }
            None => Ok(v),
        }
    }

    /// `y_n = GLU(Σ_j W_j x_{n−jδ} + b)` with zeros before the first frame.
    pub fn forward<T: Scalar, O: Ops<T>>(&self, ops: &mut O, store: &ParamStore<T>, x: &O::Val) -> Result<O::Val> {
        let w = self.effective_kernel(ops, store)?;
        let b = ops.param(store, self.bias)?;
        let u = ops.conv1d(x, &w, &b, self.dilation)?;
        glu(ops, &u)
    }

    pub fn compile<T: Scalar>(&self, store: &ParamStore<T>) -> Result<ConvWeights<T>> {
        let mut eager = crate::autodiff::Eager;
        let kernel = self.effective_kernel(&mut eager, store)?;
        Ok(ConvWeights { kernel, bias: store.get(self.bias).clone(), dilation: self.dilation })
    }
}

/// Gated linear unit over the channel axis: `[a; b] ↦ a ⊙ sigmoid(b)`.
pub fn glu<T: Scalar, O: Ops<T>>(ops: &mut O, u: &O::Val) -> Result<O::Val> {
    let rows = ops.value(u).rows();
    if rows % 2 != 0 {
        return Err(Error::shape("glu", format!("odd channel count {rows}")));
    }
    let half = rows / 2;
    let a = ops.slice(u, 0, 0, half)?;
    let b = ops.slice(u, 0, half, half)?;
    let gate = ops.sigmoid(&b)?;
    ops.mul(&a, &gate)
}

/// Materialised convolution weights for chunked evaluation.
#[derive(Clone, Debug)]
pub struct ConvWeights<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub dilation: usize,
}

impl<T: Scalar> ConvWeights<T> {
    pub fn padding(&self) -> usize {
        ops::causal_padding(self.kernel.shape()[2], self.dilation)
    }

    /// Convolution + GLU over an input that already carries `δ(κ−1)` frames of history.
    pub fn apply_with_context(&self, xp: &Tensor<T>) -> Result<Tensor<T>> {
        let u = ops::conv1d_valid(xp, &self.kernel, &self.bias, self.dilation)?;
        let half = u.rows() / 2;
        let a = ops::slice(&u, 0, 0, half)?;
        let b = ops::slice(&u, 0, half, half)?;
        ops::mul(&a, &ops::sigmoid(&b))
    }
}

/// Learnable per-class vectors appended to a layer's input along the channel axis.
#[derive(Clone, Debug)]
pub struct ClassEmbeddingTable {
    pub table: ParamId,
    pub classes: usize,
    pub width: usize,
}

impl ClassEmbeddingTable {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, classes: usize, width: usize, rng: &mut R) -> Self {
        let data = (0..classes * width)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                T::of(0.1 * z)
            })
            .collect();
        let table = store.add(format!("{name}.table"), Tensor::new(vec![classes, width], data).expect("table shape"));
        Self { table, classes, width }
    }

    pub fn check_class(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.classes {
            return Err(Error::ClassOutOfRange { index: k, classes: self.classes });
        }
        Ok(())
    }

    /// Row `k` (1-based) as an `e×1` column.
    pub fn row<T: Scalar, O: Ops<T>>(&self, ops: &mut O, store: &ParamStore<T>, k: usize) -> Result<O::Val> {
        self.check_class(k)?;
        let table = ops.param(store, self.table)?;
        let r = ops.slice(&table, 0, k - 1, 1)?;
        ops.transpose(&r)
    }

    /// The class row repeated over `t` frames: `e×t`.
    pub fn repeated<T: Scalar, O: Ops<T>>(&self, ops: &mut O, store: &ParamStore<T>, k: usize, t: usize) -> Result<O::Val> {
        let r = self.row(ops, store, k)?;
        ops.repeat_cols(&r, t)
    }

    pub fn compile<T: Scalar>(&self, store: &ParamStore<T>, k: usize) -> Result<Vec<T>> {
        self.check_class(k)?;
        Ok(store.get(self.table).row(k - 1).to_vec())
    }
}

/// Appends the embedding of class `k`, repeated over time, below `x`.
pub fn embed_and_concat<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    store: &ParamStore<T>,
    x: &O::Val,
    k: usize,
    table: &ClassEmbeddingTable,
) -> Result<O::Val> {
    let t = ops.value(x).cols();
    let rep = table.repeated(ops, store, k, t)?;
    if ops.value(x).rows() == 0 {
        return Ok(rep);
    }
    ops.concat_rows(&[x.clone(), rep])
}

/// Appends a fixed column vector, repeated over the columns of `x`, below `x`.
pub fn append_column<T: Scalar>(x: &Tensor<T>, column: &[T]) -> Result<Tensor<T>> {
    let t = x.cols();
    let rep = Tensor::from_fn(column.len(), t, |r, _| column[r]);
    if x.rows() == 0 {
        return Ok(rep);
    }
    ops::concat_rows(&[x, &rep])
}

/// Binary `keys×queries` mask; `true` marks an allowed key for a query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    keys: usize,
    queries: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(keys: usize, queries: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != keys * queries {
            return Err(Error::shape("mask", format!("{} entries for {keys}x{queries}", allowed.len())));
        }
        for q in 0..queries {
            if !(0..keys).any(|k| allowed[k * queries + q]) {
                return Err(Error::InvalidArgument(format!("query {} has no allowed key", q + 1)));
            }
        }
        Ok(Self { keys, queries, allowed })
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// Whether key `n′` may feed query `n` (both 1-based).
    pub fn allows(&self, key: usize, query: usize) -> bool {
        self.allowed[(key - 1) * self.queries + (query - 1)]
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.allowed
    }
}

/// Self-attention band: query `n` sees keys `n−J..=n` (itself plus `J` past positions).
pub fn build_band_mask(n: usize, lookback: usize) -> Result<AttentionMask> {
    if lookback == 0 {
        return Err(Error::InvalidArgument("lookback J must be at least 1".into()));
    }
    let mut allowed = vec![false; n * n];
    for key in 1..=n {
        for query in 1..=n {
            allowed[(key - 1) * n + (query - 1)] = key <= query && key + lookback >= query;
        }
    }
    AttentionMask::new(n, n, allowed)
}

/// Scaled dot-product attention.
///
/// `A[:, m] = softmax_n(Kᵀ Q[:, m] / √d_k)` over the allowed keys, `R = V A`.
/// Returns `(R: d_v×M, A: N×M)`.
pub fn scaled_dot_attention<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    queries: &O::Val,
    keys: &O::Val,
    values: &O::Val,
    mask: Option<&AttentionMask>,
) -> Result<(O::Val, O::Val)> {
    let (dk, m) = ops.value(queries).expect_matrix("attention")?;
    let (dk2, n) = ops.value(keys).expect_matrix("attention")?;
    let (_, nv) = ops.value(values).expect_matrix("attention")?;
    if dk != dk2 || n != nv {
        return Err(Error::shape("attention", format!("Q {dk}x{m}, K {dk2}x{n}, V with {nv} columns")));
    }
    if let Some(mk) = mask {
        if mk.keys != n || mk.queries != m {
            return Err(Error::shape("attention", format!("mask {}x{} for {n}x{m}", mk.keys, mk.queries)));
        }
    }
    let kt = ops.transpose(keys)?;
    let logits = ops.matmul(&kt, queries)?;
    let scaled = ops.scale(&logits, T::one() / T::of(dk as f64).sqrt())?;
    let attn = ops.softmax(&scaled, 0, mask.map(|mk| mk.as_slice()))?;
    let r = ops.matmul(values, &attn)?;
    Ok((r, attn))
}

/// Single-head self-attention with learned query/key/value projections and a
/// lookback band. The full-sequence form treats the sequence as preceded by
/// `J` zero frames, which is exactly what a fresh streaming cache holds.
#[derive(Clone, Debug)]
pub struct BandedSelfAttention {
    pub query: LinearLayer,
    pub key: LinearLayer,
    pub value: LinearLayer,
    pub lookback: usize,
}

impl BandedSelfAttention {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        key_channels: usize,
        lookback: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            query: LinearLayer::new(store, &format!("{name}.query"), channels, key_channels, rng),
            key: LinearLayer::new(store, &format!("{name}.key"), channels, key_channels, rng),
            value: LinearLayer::new(store, &format!("{name}.value"), channels, channels, rng),
            lookback,
        }
    }

    pub fn compile<T: Scalar>(&self, store: &ParamStore<T>) -> CompiledSelfAttention<T> {
        CompiledSelfAttention {
            query: self.query.compile(store),
            key: self.key.compile(store),
            value: self.value.compile(store),
            lookback: self.lookback,
        }
    }

    pub fn forward<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.compile(store).forward(x)
    }
}

#[derive(Clone, Debug)]
pub struct CompiledSelfAttention<T> {
    pub query: LinearWeights<T>,
    pub key: LinearWeights<T>,
    pub value: LinearWeights<T>,
    pub lookback: usize,
}

impl<T: Scalar> CompiledSelfAttention<T> {
    /// Attends over `context` (history followed by new frames) and returns the
    /// outputs for the last `emit` positions.
    pub fn attend(&self, context: &Tensor<T>, emit: usize) -> Result<Tensor<T>> {
        let len = context.cols();
        let q = self.query.apply(context)?;
        let k = self.key.apply(context)?;
        let v = self.value.apply(context)?;
        let mask = build_band_mask(len, self.lookback)?;
        let mut eager = crate::autodiff::Eager;
        let (r, _) = scaled_dot_attention(&mut eager, &q, &k, &v, Some(&mask))?;
        r.cols_range(len - emit, emit)
    }

    /// Full-sequence output with `J` zero frames of start-of-stream history.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let padded = ops::left_pad(x, self.lookback)?;
        self.attend(&padded, x.cols())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn identity_linear_passes_input_through() {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearLayer::new(&mut store, "l", 3, 3, &mut rng());
        *store.get_mut(layer.weight) = Tensor::identity(3);
        let x = Tensor::from_fn(3, 4, |r, c| (r * 4 + c) as f64 * 0.1);
        assert_eq!(layer.forward(&mut Eager, &store, &x).unwrap(), x);
    }

    #[test]
    fn linear_on_zeros_repeats_bias() {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearLayer::new(&mut store, "l", 2, 3, &mut rng());
        *store.get_mut(layer.bias) = Tensor::from_f64(3, 1, &[1.0, -2.0, 0.5]).unwrap();
        let y = layer.forward(&mut Eager, &store, &Tensor::zeros(&[2, 4])).unwrap();
        for c in 0..4 {
            assert_eq!(y.col(c), vec![1.0, -2.0, 0.5]);
        }
    }

    #[test]
    fn linear_matches_per_column_loop() {
        let mut store = ParamStore::<f64>::new();
        let layer = LinearLayer::new(&mut store, "l", 3, 4, &mut rng());
        *store.get_mut(layer.bias) = Tensor::from_f64(4, 1, &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let x = Tensor::from_fn(3, 5, |r, c| ((r + 2 * c) as f64).sin());
        let y = layer.forward(&mut Eager, &store, &x).unwrap();
        let w = store.get(layer.weight);
        for c in 0..5 {
            for o in 0..4 {
                let mut acc = 0.0;
                for i in 0..3 {
                    acc += w.at(o, i) * x.at(i, c);
                }
                acc += store.get(layer.bias).data()[o];
                assert!((acc - y.at(o, c)).abs() < 1e-12);
            }
        }
        assert!(layer.forward(&mut Eager, &store, &Tensor::zeros(&[2, 5])).is_err());
    }

    #[test]
    fn pointwise_identity_glu_halves_input() {
        let mut store = ParamStore::<f64>::new();
        let layer = CausalConvGluLayer::new(&mut store, "c", 2, 2, 1, 1, false, &mut rng());
        let mut k = Tensor::zeros(&[4, 2, 1]);
        k.data_mut()[0] = 1.0; // out 0 <- in 0
        k.data_mut()[3] = 1.0; // out 1 <- in 1
        *store.get_mut(layer.kernel) = k;
        let x = Tensor::from_fn(2, 3, |r, c| (r as f64 + 1.0) * (c as f64 - 1.0));
        let y = layer.forward(&mut Eager, &store, &x).unwrap();
        assert_eq!(y, x.map(|v| 0.5 * v));
    }

    #[test]
    fn conv_glu_is_causal_bit_exact() {
        let mut store = ParamStore::<f64>::new();
        let layer = CausalConvGluLayer::new(&mut store, "c", 3, 2, 5, 3, false, &mut rng());
        let x = Tensor::from_fn(3, 20, |r, c| ((r * 31 + c * 17) % 13) as f64 / 6.0 - 1.0);
        let y = layer.forward(&mut Eager, &store, &x).unwrap();
        for t in [0, 7, 19] {
            let mut z = x.clone();
            for r in 0..3 {
                z.set(r, t, z.at(r, t) + 3.0);
            }
            let yz = layer.forward(&mut Eager, &store, &z).unwrap();
            for c in 0..t {
                for r in 0..2 {
                    assert_eq!(y.at(r, c).to_bits(), yz.at(r, c).to_bits());
                }
            }
        }
    }

    #[test]
    fn weight_norm_starts_at_the_plain_kernel() {
        let mut store = ParamStore::<f64>::new();
        let layer = CausalConvGluLayer::new(&mut store, "c", 3, 2, 3, 1, true, &mut rng());
        let compiled = layer.compile(&store).unwrap();
        assert!(compiled.kernel.max_abs_diff(store.get(layer.kernel)) < 1e-15);
        assert_eq!(layer.param_count(), store.trainable_count());
    }

    #[test]
    fn embedding_block_is_repeated_row() {
        let mut store = ParamStore::<f64>::new();
        let table = ClassEmbeddingTable::new(&mut store, "e", 2, 2, &mut rng());
        *store.get_mut(table.table) = Tensor::from_f64(2, 2, &[0.1, 0.2, 0.7, 0.8]).unwrap();
        let x = Tensor::from_fn(1, 3, |_, c| c as f64);
        let y = embed_and_concat(&mut Eager, &store, &x, 1, &table).unwrap();
        assert_eq!(y.row(1), &[0.1, 0.1, 0.1]);
        assert_eq!(y.row(2), &[0.2, 0.2, 0.2]);
        let other = embed_and_concat(&mut Eager, &store, &x, 2, &table).unwrap();
        assert_eq!(other.row(0), y.row(0));
        assert_ne!(other.row(1), y.row(1));
        let empty = embed_and_concat(&mut Eager, &store, &Tensor::zeros(&[0, 3]), 1, &table).unwrap();
        assert_eq!(empty.shape(), &[2, 3]);
        assert!(matches!(
            embed_and_concat(&mut Eager, &store, &x, 3, &table),
            Err(Error::ClassOutOfRange { .. })
        ));
        assert!(embed_and_concat(&mut Eager, &store, &x, 0, &table).is_err());
    }

    #[test]
    fn band_mask_examples() {
        let m = build_band_mask(4, 1).unwrap();
        let mut pairs = Vec::new();
        for k in 1..=4 {
            for q in 1..=4 {
                if m.allows(k, q) {
                    pairs.push((k, q));
                }
            }
        }
        assert_eq!(pairs, vec![(1, 1), (1, 2), (2, 2), (2, 3), (3, 3), (3, 4), (4, 4)]);
        let tri = build_band_mask(5, 9).unwrap();
        for k in 1..=5 {
            for q in 1..=5 {
                assert_eq!(tri.allows(k, q), k <= q);
            }
        }
        assert!(build_band_mask(3, 0).is_err());
    }

    #[test]
    fn attention_single_key_and_tied_keys() {
        let q = Tensor::from_f64(2, 3, &[0.3, -1.0, 2.0, 0.5, 0.1, -0.4]).unwrap();
        let k = Tensor::from_f64(2, 1, &[1.0, 2.0]).unwrap();
        let v = Tensor::from_f64(2, 1, &[7.0, -3.0]).unwrap();
        let (r, a) = scaled_dot_attention(&mut Eager, &q, &k, &v, None).unwrap();
        assert_eq!(a.data(), &[1.0, 1.0, 1.0]);
        assert_eq!(r.row(0), &[7.0, 7.0, 7.0]);
        let k2 = Tensor::from_f64(2, 2, &[1.0, 1.0, 2.0, 2.0]).unwrap();
        let v2 = Tensor::from_f64(1, 2, &[1.0, 3.0]).unwrap();
        let (_, a2): (Tensor<f64>, Tensor<f64>) = scaled_dot_attention(&mut Eager, &q, &k2, &v2, None).unwrap();
        for x in a2.data() {
            assert!((x - 0.5f64).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_matches_naive_double_loop() {
        let (dk, dv, n, m) = (3, 2, 5, 4);
        let q = Tensor::from_fn(dk, m, |r, c| ((r * 3 + c) as f64 * 0.71).sin());
        let k = Tensor::from_fn(dk, n, |r, c| ((r * 5 + c) as f64 * 0.37).cos());
        let v = Tensor::from_fn(dv, n, |r, c| (r as f64 - c as f64) * 0.3);
        let (r, a) = scaled_dot_attention(&mut Eager, &q, &k, &v, None).unwrap();
        for mm in 0..m {
            let logits: Vec<f64> = (0..n)
                .map(|nn| (0..dk).map(|i| k.at(i, nn) * q.at(i, mm)).sum::<f64>() / (dk as f64).sqrt())
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
            for nn in 0..n {
                assert!(((logits[nn] - mx).exp() / z - a.at(nn, mm)).abs() < 1e-12);
            }
            for c in 0..dv {
                let want: f64 = (0..n).map(|nn| v.at(c, nn) * a.at(nn, mm)).sum();
                assert!((want - r.at(c, mm)).abs() < 1e-12);
            }
            let col: f64 = (0..n).map(|nn| a.at(nn, mm)).sum();
            assert!((col - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_mismatched_mask() {
        let q = Tensor::<f64>::zeros(&[2, 3]);
        let k = Tensor::<f64>::zeros(&[2, 4]);
        let v = Tensor::<f64>::zeros(&[1, 4]);
        let mask = build_band_mask(3, 1).unwrap();
        assert!(scaled_dot_attention(&mut Eager, &q, &k, &v, Some(&mask)).is_err());
        assert!(AttentionMask::new(2, 1, vec![false, false]).is_err());
    }
}
