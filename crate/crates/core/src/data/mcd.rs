//! Mel-cepstral distortion along a dynamic-time-warping path.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Cepstral coefficients kept after dropping `c0`.
pub const CEPSTRAL_ORDER: usize = 24;

/// `10·√2 / ln 10`, the dB scale of mel-cepstral distortion.
pub fn mcd_constant() -> f64 {
    10.0 * 2f64.sqrt() / 10f64.ln()
}

/// Orthonormal DCT-II coefficient `k` of a frame.
fn dct_coefficient(frame: &[f64], k: usize) -> f64 {
    let b = frame.len() as f64;
    let scale = if k == 0 { (1.0 / b).sqrt() } else { (2.0 / b).sqrt() };
    scale
        * frame
            .iter()
            .enumerate()
            .map(|(i, x)| x * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * b)).cos())
            .sum::<f64>()
}

/// Coefficients `1..=24` of the DCT-II of each log-mel frame (`bands×T` input).
pub fn cepstra(mel: &Tensor<f64>) -> Result<Vec<Vec<f64>>> {
    let (bands, t) = mel.expect_matrix("cepstra")?;
    if t == 0 {
        return Err(Error::Empty("feature sequence"));
    }
    let order = CEPSTRAL_ORDER.min(bands.saturating_sub(1));
    Ok((0..t).map(|c| {
        let frame = mel.col(c);
        (1..=order).map(|k| dct_coefficient(&frame, k)).collect()
    }).collect())
}

/// Inverse orthonormal DCT-II of a coefficient vector of length `bands`.
pub fn inverse_dct(coeffs: &[f64]) -> Vec<f64> {
    let b = coeffs.len() as f64;
    (0..coeffs.len())
        .map(|i| {
            coeffs
                .iter()
                .enumerate()
                .map(|(k, c)| {
                    let scale = if k == 0 { (1.0 / b).sqrt() } else { (2.0 / b).sqrt() };
                    scale * c * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * b)).cos()
                })
                .sum()
        })
        .collect()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Total cost and length of the cheapest monotone path with steps
/// (1,0), (0,1), (1,1); ties go to the shorter path.
pub fn dtw(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<(f64, usize)> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("dtw sequence"));
    }
    let (n, m) = (a.len(), b.len());
    let mut acc = vec![(f64::INFINITY, 0usize); n * m];
    for i in 0..n {
        for j in 0..m {
            let d = euclid(&a[i], &b[j]);
            let best = if i == 0 && j == 0 {
                (0.0, 0)
            } else {
                let mut cands = Vec::with_capacity(3);
                if i > 0 {
                    cands.push(acc[(i - 1) * m + j]);
                }
                if j > 0 {
                    cands.push(acc[i * m + j - 1]);
                }
                if i > 0 && j > 0 {
                    cands.push(acc[(i - 1) * m + j - 1]);
                }
                cands.into_iter().min_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1))).expect("a predecessor")
            };
            acc[i * m + j] = (best.0 + d, best.1 + 1);
        }
    }
    Ok(acc[n * m - 1])
}

/// Mean MCD in dB along the DTW path between two `bands×T` log-mel sequences.
pub fn mcd_dtw(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::shape("mcd_dtw", format!("{} bands vs {} bands", a.rows(), b.rows())));
    }
    let (ca, cb) = (cepstra(a)?, cepstra(b)?);
    let (cost, len) = dtw(&ca, &cb)?;
    Ok(mcd_constant() * cost / len as f64)
}
