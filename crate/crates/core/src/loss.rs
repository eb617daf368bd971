//! Training objectives: reconstruction, moment matching and attention-shape penalties.

use crate::autodiff::Ops;
use crate::error::{Error, Result};
use crate::gaussian;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
    /// Width `ν` of the diagonal penalty.
    pub nu: f64,
    /// Width `ρ` of the orthogonality penalty.
    pub rho: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { l1: 1.0, l2: 2000.0, l3: 2000.0, nu: 0.3, rho: 0.3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.l1 < 0.0 || self.l2 < 0.0 || self.l3 < 0.0 {
            return Err(Error::InvalidArgument("loss weights must be nonnegative".into()));
        }
        if !(self.nu > 0.0 && self.rho > 0.0) {
            return Err(Error::InvalidArgument("penalty widths must be positive".into()));
        }
        Ok(())
    }
}

/// `g[n,m] = 1 − exp(−(n/N − m/M)² / 2w²)` with 1-based `n, m`.
pub fn penalty_matrix<T: Scalar>(n: usize, m: usize, width: f64) -> Result<Tensor<T>> {
    if !(width > 0.0) {
        return Err(Error::InvalidArgument(format!("penalty width must be positive, got {width}")));
    }
    Ok(Tensor::from_fn(n, m, |i, j| {
        T::of(penalty_value((i + 1) as f64 / n as f64 - (j + 1) as f64 / m as f64, width))
    }))
}

/// Penalty at normalised offset `x = n/N − m/M`.
pub fn penalty_value(x: f64, width: f64) -> f64 {
    1.0 - (-x * x / (2.0 * width * width)).exp()
}

/// `(1/M) · ‖Y − Xt[:, 2..=M+1]‖₁`.
pub fn loss_l0<T: Scalar, O: Ops<T>>(ops: &mut O, y: &O::Val, xt: &O::Val) -> Result<O::Val> {
    let (dy, m) = ops.value(y).expect_matrix("loss_l0")?;
    let (dt, mt) = ops.value(xt).expect_matrix("loss_l0")?;
    if m == 0 {
        return Err(Error::Empty("output sequence"));
    }
    if dy != dt || mt != m + 1 {
        return Err(Error::shape("loss_l0", format!("output {dy}x{m} against target {dt}x{mt} (SOS included)")));
    }
    let shifted = ops.slice(xt, 1, 1, m)?;
    let diff = ops.sub(y, &shifted)?;
    let a = ops.abs(&diff)?;
    let s = ops.sum_all(&a)?;
    ops.scale(&s, T::one() / T::of(m as f64))
}

/// Source rows receiving less total attention than this are treated as skipped.
pub const TEACHER_ROW_FLOOR: f64 = 0.05;

/// Per-row histogram moments of a teacher attention map, as `1×N` constants.
///
/// A hard teacher alignment leaves some source rows with (almost) no mass, and
/// their histogram moments say nothing about where they align. Such rows take
/// `μ̂` by linear interpolation between the nearest kept rows, with the stream
/// ends pinned at `(½, ½)` and `(N+½, M+½)`, and `σ̂` from the nearest kept row.
pub fn teacher_moments<T: Scalar>(attention: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (n, m) = attention.expect_matrix("teacher_moments")?;
    let mut kept: Vec<(usize, f64, f64)> = Vec::new();
    for i in 0..n {
        let row = Tensor::matrix(1, m, attention.row(i).to_vec())?;
        let mass: f64 = row.data().iter().map(|v| v.to_f64_lossy()).sum();
        if mass >= TEACHER_ROW_FLOOR {
            let (mu, sigma) = gaussian::attention_moments(&row)?;
            kept.push((i, mu[0].to_f64_lossy(), sigma[0].to_f64_lossy()));
        }
    }
    if kept.is_empty() {
        return Err(Error::MalformedAttention("every row has zero mass".into()));
    }
    let mut mu = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    let mut next = 0;
    for i in 0..n {
        while next < kept.len() && kept[next].0 < i {
            next += 1;
        }
        if next < kept.len() && kept[next].0 == i {
            mu.push(kept[next].1);
            sigma.push(kept[next].2);
            continue;
        }
        let x = i as f64 + 1.0;
        let (x0, y0, s0) = if next > 0 {
            let k = kept[next - 1];
            (k.0 as f64 + 1.0, k.1, Some(k.2))
        } else {
            (0.5, 0.5, None)
        };
        let (x1, y1, s1) = if next < kept.len() {
            let k = kept[next];
            (k.0 as f64 + 1.0, k.1, Some(k.2))
        } else {
            (n as f64 + 0.5, m as f64 + 0.5, None)
        };
        mu.push(y0 + (y1 - y0) * (x - x0) / (x1 - x0));
        let nearest = if x - x0 <= x1 - x && s0.is_some() { s0 } else { s1.or(s0) };
        sigma.push(nearest.expect("at least one kept row"));
    }
    let cast = |v: Vec<f64>| Tensor::new(vec![1, n], v.into_iter().map(T::of).collect());
    Ok((cast(mu)?, cast(sigma)?))
}

/// `(1/HN) Σ (|μ − μ̂| + |σ − σ̂|)`; all arguments `H×N`.
pub fn loss_l1<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    mu: &O::Val,
    sigma: &O::Val,
    mu_hat: &O::Val,
    sigma_hat: &O::Val,
) -> Result<O::Val> {
    let count = ops.value(mu).numel();
    if count == 0 {
        return Err(Error::Empty("attention parameters"));
    }
    let dm = ops.sub(mu, mu_hat)?;
    let ds = ops.sub(sigma, sigma_hat)?;
    let am = ops.abs(&dm)?;
    let as_ = ops.abs(&ds)?;
    let t = ops.add(&am, &as_)?;
    let s = ops.sum_all(&t)?;
    ops.scale(&s, T::one() / T::of(count as f64))
}

/// `(1/HNM) ‖G(ν) ⊙ α‖₁` for a single-head `N×M` map.
pub fn loss_l2<T: Scalar, O: Ops<T>>(ops: &mut O, alpha: &O::Val, nu: f64) -> Result<O::Val> {
    let (n, m) = ops.value(alpha).expect_matrix("loss_l2")?;
    let g = ops.constant(penalty_matrix(n, m, nu)?)?;
    let w = ops.mul(&g, alpha)?;
    let a = ops.abs(&w)?;
    let s = ops.sum_all(&a)?;
    ops.scale(&s, T::one() / T::of((n * m) as f64))
}

/// `(1/HN²) ‖G_{N×N}(ρ) ⊙ (α αᵀ)‖₁` for a single-head `N×M` map.
pub fn loss_l3<T: Scalar, O: Ops<T>>(ops: &mut O, alpha: &O::Val, rho: f64) -> Result<O::Val> {
    let (n, _) = ops.value(alpha).expect_matrix("loss_l3")?;
    let at = ops.transpose(alpha)?;
    let gram = ops.matmul(alpha, &at)?;
    let g = ops.constant(penalty_matrix(n, n, rho)?)?;
    let w = ops.mul(&g, &gram)?;
    let a = ops.abs(&w)?;
    let s = ops.sum_all(&a)?;
    ops.scale(&s, T::one() / T::of((n * n) as f64))
}

/// Loss value with its components as plain numbers.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub l0: f64,
    pub l1: f64,
    pub l2: f64,
    pub l3: f64,
}

impl LossParts {
    pub fn scaled(self, c: f64) -> Self {
        Self { total: self.total * c, l0: self.l0 * c, l1: self.l1 * c, l2: self.l2 * c, l3: self.l3 * c }
    }

    pub fn accumulate(&mut self, other: Self) {
        self.total += other.total;
        self.l0 += other.l0;
        self.l1 += other.l1;
        self.l2 += other.l2;
        self.l3 += other.l3;
    }
}

fn scalar_of<T: Scalar, O: Ops<T>>(ops: &O, v: &O::Val) -> f64 {
    ops.value(v).item().to_f64_lossy()
}

/// `L0 + λ₁L1 + λ₂L2 + λ₃L3` for one pair.
#[allow(clippy::too_many_arguments)]
pub fn student_pair_loss<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    w: &LossWeights,
    y: &O::Val,
    xt: &O::Val,
    alpha: &O::Val,
    mu: &O::Val,
    sigma: &O::Val,
    teacher_attention: &Tensor<T>,
) -> Result<(O::Val, LossParts)> {
    let (mu_hat, sigma_hat) = teacher_moments(teacher_attention)?;
    let mu_hat = ops.constant(mu_hat)?;
    let sigma_hat = ops.constant(sigma_hat)?;
    let l0 = loss_l0(ops, y, xt)?;
    let l1 = loss_l1(ops, mu, sigma, &mu_hat, &sigma_hat)?;
    let l2 = loss_l2(ops, alpha, w.nu)?;
    let l3 = loss_l3(ops, alpha, w.rho)?;
    combine(ops, w, l0, Some(l1), l2, l3)
}

/// Teacher objective: `L0 + λ₂L2(A) + λ₃L3(A)`.
pub fn teacher_pair_loss<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    w: &LossWeights,
    y: &O::Val,
    xt: &O::Val,
    attention: &O::Val,
) -> Result<(O::Val, LossParts)> {
    let l0 = loss_l0(ops, y, xt)?;
    let l2 = loss_l2(ops, attention, w.nu)?;
    let l3 = loss_l3(ops, attention, w.rho)?;
    combine(ops, w, l0, None, l2, l3)
}

fn combine<T: Scalar, O: Ops<T>>(
    ops: &mut O,
    w: &LossWeights,
    l0: O::Val,
    l1: Option<O::Val>,
    l2: O::Val,
    l3: O::Val,
) -> Result<(O::Val, LossParts)> {
    let mut parts = LossParts {
        l0: scalar_of(ops, &l0),
        l2: scalar_of(ops, &l2),
        l3: scalar_of(ops, &l3),
        ..LossParts::default()
    };
    let mut total = l0;
    if let Some(l1) = l1 {
        parts.l1 = scalar_of(ops, &l1);
        let t = ops.scale(&l1, T::of(w.l1))?;
        total = ops.add(&total, &t)?;
    }
    let t2 = ops.scale(&l2, T::of(w.l2))?;
    total = ops.add(&total, &t2)?;
    let t3 = ops.scale(&l3, T::of(w.l3))?;
    total = ops.add(&total, &t3)?;
    parts.total = scalar_of(ops, &total);
    Ok((total, parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Eager;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(rows, cols, v).unwrap()
    }

    #[test]
    fn l0_examples() {
        let y = m(1, 2, &[0.0, 0.0]);
        let xt = m(1, 3, &[0.0, 1.0, -1.0]);
        assert_eq!(loss_l0(&mut Eager, &y, &xt).unwrap().item(), 1.0);
        let exact = m(1, 2, &[1.0, -1.0]);
        assert_eq!(loss_l0(&mut Eager, &exact, &xt).unwrap().item(), 0.0);
        assert!(loss_l0(&mut Eager, &y, &m(1, 2, &[0.0, 1.0])).is_err());
    }

    #[test]
    fn l1_analytic() {
        let v = loss_l1(&mut Eager, &m(1, 1, &[3.0]), &m(1, 1, &[0.5]), &m(1, 1, &[1.0]), &m(1, 1, &[1.0])).unwrap();
        assert_eq!(v.item(), 2.5);
    }

    #[test]
    fn penalty_examples() {
        let g = penalty_matrix::<f64>(4, 4, 0.3).unwrap();
        for i in 0..4 {
            assert_eq!(g.at(i, i), 0.0);
        }
        assert!((penalty_value(0.3 * 2f64.sqrt(), 0.3) - 0.632_12).abs() < 1e-5);
        let g = penalty_matrix::<f64>(3, 6, 0.3).unwrap();
        assert!((g.at(2, 0) - penalty_value(1.0 - 1.0 / 6.0, 0.3)).abs() < 1e-15);
        assert!(g.data().iter().all(|v| (0.0..1.0).contains(v)));
        assert!(penalty_matrix::<f64>(2, 2, 0.0).is_err());
    }

    #[test]
    fn l2_uniform_two_by_two() {
        let a = m(2, 2, &[0.5, 0.5, 0.5, 0.5]);
        let v = loss_l2(&mut Eager, &a, 0.3).unwrap().item();
        let g = 1.0 - (-0.25f64 / 0.18).exp();
        assert!((v - 2.0 * g * 0.5 / 4.0).abs() < 1e-12);
        assert!((v - 0.187662).abs() < 1e-6);
    }

    #[test]
    fn identity_attention_has_no_shape_penalty() {
        let a = Tensor::<f64>::identity(5);
        assert_eq!(loss_l2(&mut Eager, &a, 0.3).unwrap().item(), 0.0);
        assert_eq!(loss_l3(&mut Eager, &a, 0.3).unwrap().item(), 0.0);
    }

    #[test]
    fn skipped_teacher_rows_are_interpolated() {
        // source rows 2 and 4 receive no attention; row 1 takes columns 1..2
        let a = m(4, 4, &[1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let (mu, sigma) = teacher_moments(&a).unwrap();
        assert_eq!(&mu.data()[..3], &[1.5, 2.5, 3.5]);
        assert!((mu.data()[3] - (3.5 + 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(sigma.data(), &[0.5, 0.5, 0.5, 0.5]);
        assert!(teacher_moments(&Tensor::<f64>::zeros(&[3, 2])).is_err());
    }
}
