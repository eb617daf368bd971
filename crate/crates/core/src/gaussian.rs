//! Monotonic Gaussian attention.
//!
//! Each source position `n` owns an unnormalised Gaussian over target time
//! `m = 1..M` with amplitude `φ`, width `σ` and centre `μ`. Centres are running
//! sums of nonnegative increments `Δ`, so they can only move forward. Formulas
//! use 1-based time; storage is 0-based, so column `c` is time `c + 1`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ops, Tensor};

pub const SIGMA_MIN: f64 = 0.001;
pub const SIGMA_MAX: f64 = 1.0;
pub const PHI_FLOOR: f64 = 0.8;
pub const PHI_RANGE: f64 = 0.2;
/// Columns whose total mass falls below this are replaced by a uniform column.
pub const NORMALIZE_FLOOR: f64 = 1e-12;
/// Smallest head-mean centre span that window rescaling accepts.
pub const RESCALE_MIN_SPAN: f64 = 1e-6;

/// Constrained predictor output `θ = (Δ, Σ, Φ)` plus the derived centres, each `H×N`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianAttentionParams<T> {
    pub deltas: Tensor<T>,
    pub sigmas: Tensor<T>,
    pub phis: Tensor<T>,
    pub centers: Tensor<T>,
}

impl<T: Scalar> GaussianAttentionParams<T> {
    pub fn heads(&self) -> usize {
        self.deltas.rows()
    }

    pub fn len(&self) -> usize {
        self.deltas.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Head-mean of the centres at each source position.
    pub fn mean_centers(&self) -> Vec<T> {
        let h = T::of(self.heads() as f64);
        (0..self.len())
            .map(|n| (0..self.heads()).map(|k| self.centers.at(k, n)).sum::<T>() / h)
            .collect()
    }
}

/// Splits a raw `3H×N` predictor output into its three `H×N` blocks.
pub fn split_raw<T: Scalar>(raw: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (rows, _) = raw.expect_matrix("constrain_params")?;
    if rows == 0 || rows % 3 != 0 {
        return Err(Error::shape("constrain_params", format!("expected 3H rows, got {rows}")));
    }
    let h = rows / 3;
    Ok((raw.rows_range(0, h)?, raw.rows_range(h, h)?, raw.rows_range(2 * h, h)?))
}

pub fn constrain_sigma<T: Scalar>(v: T) -> T {
    v.abs().max(T::of(SIGMA_MIN)).min(T::of(SIGMA_MAX))
}

pub fn constrain_phi<T: Scalar>(v: T) -> T {
    T::of(PHI_RANGE) * ops::sigmoid_scalar(v) + T::of(PHI_FLOOR)
}

/// Applies the nonnegativity/width/amplitude constraints and derives centres.
pub fn constrain_params<T: Scalar>(raw: &Tensor<T>) -> Result<GaussianAttentionParams<T>> {
    raw.ensure_finite("constrain_params input")?;
    let (d, s, p) = split_raw(raw)?;
    let deltas = ops::abs(&d);
    let sigmas = s.map(constrain_sigma);
    let phis = p.map(constrain_phi);
    let centers = centers_from_deltas(&deltas)?;
    Ok(GaussianAttentionParams { deltas, sigmas, phis, centers })
}

/// `μ_{h,n} = Σ_{i≤n} Δ_{h,i}`, i.e. `μ_h = Δ_h U` with `U` upper-triangular ones.
pub fn centers_from_deltas<T: Scalar>(deltas: &Tensor<T>) -> Result<Tensor<T>> {
    ops::cumsum_cols(deltas)
}

/// Raw Gaussian kernel over `m = 1..=M`, shape `H×N×M`.
pub fn gaussian_kernel<T: Scalar>(
    centers: &Tensor<T>,
    sigmas: &Tensor<T>,
    phis: &Tensor<T>,
    m: usize,
) -> Result<Tensor<T>> {
    let (h, n) = centers.expect_matrix("evaluate_attention")?;
    if sigmas.shape() != centers.shape() || phis.shape() != centers.shape() {
        return Err(Error::shape("evaluate_attention", "μ, σ and φ must share one H×N shape"));
    }
    if m == 0 {
        return Err(Error::InvalidArgument("attention needs at least one target frame".into()));
    }
    let two = T::of(2.0);
    let mut data = Vec::with_capacity(h * n * m);
    for ((&mu, &sig), &phi) in centers.data().iter().zip(sigmas.data()).zip(phis.data()) {
        let denom = two * sig * sig;
        for t in 1..=m {
            let diff = T::of(t as f64) - mu;
            data.push(phi * (-(diff * diff) / denom).exp());
        }
    }
    Tensor::new(vec![h, n, m], data)
}

/// `α_{h,n}(m) = φ_{h,n} exp(−(m − μ_{h,n})² / 2σ_{h,n}²)`, unnormalised, shape `H×N×M`.
pub fn evaluate_attention<T: Scalar>(params: &GaussianAttentionParams<T>, m: usize) -> Result<Tensor<T>> {
    gaussian_kernel(&params.centers, &params.sigmas, &params.phis, m)
}

fn heads_of<T: Scalar>(alpha: &Tensor<T>, op: &'static str) -> Result<(usize, usize, usize)> {
    match *alpha.shape() {
        [h, n, m] => Ok((h, n, m)),
        [n, m] => Ok((1, n, m)),
        _ => Err(Error::shape(op, format!("expected H×N×M attention, got {:?}", alpha.shape()))),
    }
}

/// Per-column sums over `n`, indexed `[h * M + m]`.
pub(crate) fn column_sums<T: Scalar>(alpha: &Tensor<T>) -> Result<Vec<T>> {
    let (h, n, m) = heads_of(alpha, "normalize_attention")?;
    let mut sums = vec![T::zero(); h * m];
    let data = alpha.data();
    for k in 0..h {
        for i in 0..n {
            let row = &data[(k * n + i) * m..(k * n + i + 1) * m];
            for (s, &v) in sums[k * m..(k + 1) * m].iter_mut().zip(row) {
                *s += v;
            }
        }
    }
    Ok(sums)
}

/// Normalises every column over `n` to sum to one; degenerate columns become uniform `1/N`.
pub fn normalize_attention<T: Scalar>(alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, m) = heads_of(alpha, "normalize_attention")?;
    let sums = column_sums(alpha)?;
    let floor = T::of(NORMALIZE_FLOOR);
    let uniform = T::one() / T::of(n as f64);
    let mut out = alpha.clone();
    let data = out.data_mut();
    for k in 0..h {
        for i in 0..n {
            let base = (k * n + i) * m;
            for t in 0..m {
                let s = sums[k * m + t];
                data[base + t] = if s < floor { uniform } else { data[base + t] / s };
            }
        }
    }
    Ok(out)
}

/// Affine remap of the centres of an `S`-position window so the head-mean
/// centre runs exactly from 1 to `S`. `σ` and `φ` are left untouched.
pub fn rescale_to_window<T: Scalar>(
    params: &GaussianAttentionParams<T>,
    window: usize,
) -> Result<GaussianAttentionParams<T>> {
    let n = params.len();
    if n != window {
        return Err(Error::shape("rescale_to_window", format!("{n} positions for window {window}")));
    }
    let mut out = params.clone();
    if window == 1 {
        out.centers = Tensor::full(params.centers.shape(), T::one());
        return Ok(out);
    }
    let mean = params.mean_centers();
    let (first, last) = (mean[0], mean[n - 1]);
    let span = last - first;
    let s = T::of(window as f64);
    for h in 0..params.heads() {
        for i in 0..n {
            let v = if span < T::of(RESCALE_MIN_SPAN) {
                // silent or stalled window: pass through on the identity alignment
                T::of((i + 1) as f64)
            } else {
                (s - T::one()) * (params.centers.at(h, i) - first) / span + T::one()
            };
            out.centers.set(h, i, v);
        }
    }
    if span >= T::of(RESCALE_MIN_SPAN) {
        // pin the endpoints of the head mean exactly despite rounding in the affine map
        pin_mean_endpoints(&mut out.centers, s);
    }
    Ok(out)
}

fn pin_mean_endpoints<T: Scalar>(centers: &mut Tensor<T>, s: T) {
    let (h, n) = (centers.rows(), centers.cols());
    let hh = T::of(h as f64);
    let mean = |c: &Tensor<T>, col: usize| (0..h).map(|k| c.at(k, col)).sum::<T>() / hh;
    for (col, target) in [(0, T::one()), (n - 1, s)] {
        for _ in 0..4 {
            let shift = target - mean(centers, col);
            if shift == T::zero() {
                break;
            }
            for k in 0..h {
                let v = centers.at(k, col) + shift;
                centers.set(k, col, v);
            }
        }
        // the head mean of a sum can miss by an ulp; walk the largest head
        let big = (0..h).max_by(|&a, &b| centers.at(a, col).abs().partial_cmp(&centers.at(b, col).abs()).expect("finite centres")).unwrap_or(0);
        for _ in 0..64 {
            let miss = target - mean(centers, col);
            if miss == T::zero() {
                break;
            }
            let v = centers.at(big, col);
            centers.set(big, col, v.step_ulp(miss > T::zero()));
        }
        if mean(centers, col) != target {
            let mut heads: Vec<T> = (0..h).map(|k| centers.at(k, col)).collect();
            snap_mean(&mut heads, target);
            for (k, v) in heads.into_iter().enumerate() {
                centers.set(k, col, v);
            }
        }
    }
}

/// Moves `values` by at most a few ulps of their scale so that their
/// arithmetic mean is exactly `target`: offsets from `target` are rounded to a
/// power-of-two grid on which every partial sum is exact, and the last offset
/// cancels the rest.
fn snap_mean<T: Scalar>(values: &mut [T], target: T) {
    let h = values.len();
    let scale = values.iter().fold(target.abs(), |m, v| m.max(v.abs())) * T::of(h as f64);
    let grid = T::of(2.0).powi(scale.max(T::one()).log2().ceil().to_i32().unwrap_or(0)) * T::epsilon() * T::of(256.0);
    let mut offsets: Vec<T> = values.iter().map(|v| ((*v - target) / grid).round() * grid).collect();
    let rest: T = offsets[..h - 1].iter().copied().sum();
    offsets[h - 1] = -rest;
    for (v, d) in values.iter_mut().zip(offsets) {
        *v = target + d;
    }
}

/// Mean and standard deviation of target time for every row of an `N×M`
/// attention matrix read as a histogram over `m = 1..M`.
pub fn attention_moments<T: Scalar>(attention: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, _) = attention.expect_matrix("attention_moments")?;
    let mut mus = Vec::with_capacity(n);
    let mut sigmas = Vec::with_capacity(n);
    for i in 0..n {
        let row = attention.row(i);
        if row.iter().any(|v| *v < T::zero()) {
            return Err(Error::MalformedAttention(format!("row {} has negative weight", i + 1)));
        }
        let total: T = row.iter().copied().sum();
        if !(total > T::zero()) {
            return Err(Error::MalformedAttention(format!("row {} has zero mass", i + 1)));
        }
        let mu = row.iter().enumerate().map(|(t, &a)| a * T::of((t + 1) as f64)).sum::<T>() / total;
        let var = row
            .iter()
            .enumerate()
            .map(|(t, &a)| {
                let d = T::of((t + 1) as f64) - mu;
                a * d * d
            })
            .sum::<T>()
            / total;
        mus.push(mu);
        sigmas.push(var.max(T::zero()).sqrt());
    }
    Ok((mus, sigmas))
}

/// Warps a value sequence `V (C×N)` with a single-head attention matrix: `R = V α`.
pub fn apply_attention<T: Scalar>(values: &Tensor<T>, alpha: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, n, m) = heads_of(alpha, "apply_attention")?;
    if h != 1 {
        return Err(Error::shape("apply_attention", format!("single-head warp given {h} heads")));
    }
    let a = alpha.reshape(&[n, m])?;
    ops::matmul(values, &a)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor<f64> {
        Tensor::<f64>::from_f64(1, v.len(), v).unwrap()
    }

    fn params_with_centers(mu: &[f64]) -> GaussianAttentionParams<f64> {
        let n = mu.len();
        GaussianAttentionParams {
            deltas: Tensor::<f64>::zeros(&[1, n]),
            sigmas: Tensor::<f64>::full(&[1, n], 0.5),
            phis: Tensor::<f64>::full(&[1, n], 0.9),
            centers: row(mu),
        }
    }

    #[test]
    fn constraint_clamps_hit_documented_values() {
        // rows: Δ, Σ, Φ for H = 1 and N = 2
        let raw = Tensor::<f64>::from_f64(3, 2, &[-1.2, 0.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        let p = constrain_params(&raw).unwrap();
        assert_eq!(p.deltas.data(), &[1.2, 0.0]);
        assert_eq!(p.sigmas.data(), &[1.0, 0.001]);
        assert_eq!(p.phis.data(), &[0.9, 0.9]);
    }

    #[test]
    fn constrain_rejects_non_finite_and_bad_row_count() {
        let mut raw = Tensor::<f64>::zeros(&[3, 2]);
        raw.set(0, 0, f64::NAN);
        assert!(constrain_params(&raw).is_err());
        assert!(constrain_params(&Tensor::<f64>::zeros(&[4, 2])).is_err());
    }

    #[test]
    fn centers_are_running_sums() {
        assert_eq!(centers_from_deltas(&row(&[0.5, 1.0, 2.0])).unwrap().data(), &[0.5, 1.5, 3.5]);
        assert_eq!(centers_from_deltas(&row(&[0.0; 4])).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn gaussian_peak_and_offset_values() {
        let p = GaussianAttentionParams {
            deltas: row(&[2.0]),
            sigmas: row(&[0.5]),
            phis: row(&[0.9]),
            centers: row(&[2.0]),
        };
        let a = evaluate_attention(&p, 3).unwrap();
        assert!((a.data()[1] - 0.9).abs() < 1e-15);
        assert!((a.data()[2] - 0.9 * (-2.0f64).exp()).abs() < 1e-15);
        assert!((a.data()[2] - 0.121802).abs() < 1e-6);
    }

    #[test]
    fn narrow_gaussian_underflows_without_nan() {
        let p = GaussianAttentionParams {
            deltas: row(&[1.0]),
            sigmas: row(&[0.001]),
            phis: row(&[1.0]),
            centers: row(&[1.0]),
        };
        let a = evaluate_attention(&p, 2).unwrap();
        assert_eq!(a.data(), &[1.0, 0.0]);
    }

    #[test]
    fn normalisation_and_fallback() {
        let a = Tensor::<f64>::from_f64(3, 1, &[1.0, 1.0, 2.0]).unwrap();
        assert_eq!(normalize_attention(&a).unwrap().data(), &[0.25, 0.25, 0.5]);
        let z = Tensor::<f64>::zeros(&[1, 4, 1]);
        assert_eq!(normalize_attention(&z).unwrap().data(), &[0.25; 4]);
        let once = normalize_attention(&a).unwrap();
        assert_eq!(normalize_attention(&once).unwrap(), once);
    }

    #[test]
    fn rescale_examples() {
        for mu in [[2.0, 4.0, 6.0], [1.0, 1.5, 2.0], [1.0, 2.0, 3.0]] {
            let r = rescale_to_window(&params_with_centers(&mu), 3).unwrap();
            assert_eq!(r.centers.data(), &[1.0, 2.0, 3.0]);
            assert_eq!(r.sigmas.data(), &[0.5; 3]);
        }
    }

    #[test]
    fn rescale_degenerate_span_falls_back_to_identity() {
        let r = rescale_to_window(&params_with_centers(&[3.0, 3.0, 3.0, 3.0]), 4).unwrap();
        assert_eq!(r.centers.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(rescale_to_window(&params_with_centers(&[1.0, 2.0]), 3).is_err());
    }

    #[test]
    fn moments_of_simple_rows() {
        let a = Tensor::<f64>::from_f64(2, 4, &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 0.0]).unwrap();
        let (mu, sd) = attention_moments(&a).unwrap();
        assert_eq!(mu, vec![4.0, 2.0]);
        assert_eq!(sd[0], 0.0);
        assert!((sd[1] - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
    }

    #[test]
    fn moments_reject_empty_row() {
        let a = Tensor::<f64>::from_f64(1, 3, &[0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(attention_moments(&a), Err(Error::MalformedAttention(_))));
    }

    #[test]
    fn symmetric_row_is_centred() {
        let a = Tensor::<f64>::from_f64(1, 5, &[0.1, 0.7, 2.0, 0.7, 0.1]).unwrap();
        let (mu, _) = attention_moments(&a).unwrap();
        assert!((mu[0] - 3.0).abs() < 1e-14);
    }

    #[test]
    fn identity_and_uniform_warps() {
        let v = Tensor::<f64>::from_f64(2, 3, &[1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let eye = Tensor::<f64>::identity(3).reshape(&[1, 3, 3]).unwrap();
        assert_eq!(apply_attention(&v, &eye).unwrap(), v);
        let uni = Tensor::<f64>::full(&[1, 3, 1], 1.0 / 3.0);
        let r = apply_attention(&v, &uni).unwrap();
        assert!((r.at(0, 0) - 2.0).abs() < 1e-15);
        assert!((r.at(1, 0) - 3.5 / 3.0).abs() < 1e-15);
    }
}
