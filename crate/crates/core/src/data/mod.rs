//! Corpora, feature extraction, evaluation metric and file formats.

pub mod container;
pub mod mcd;
pub mod mel;
pub mod synth;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One feature sequence of a parallel corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub class: usize,
    /// `D×T` stacked features.
    pub features: Tensor<f64>,
    /// For a target utterance of a synthetic pair: the 1-based target frame
    /// aligned with each source frame.
    pub warp: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParallelCorpus {
    pub classes: usize,
    pub pairs: Vec<(Utterance, Utterance)>,
}

impl ParallelCorpus {
    pub fn validate(&self) -> Result<()> {
        for (s, t) in &self.pairs {
            if s.id != t.id {
                return Err(Error::Format(format!("pair ids differ: {} vs {}", s.id, t.id)));
            }
            for u in [s, t] {
                if u.class == 0 || u.class > self.classes {
                    return Err(Error::ClassOutOfRange { index: u.class, classes: self.classes });
                }
                u.features.ensure_finite("corpus features")?;
            }
            if let Some(w) = &t.warp {
                if w.len() != s.features.cols() || w.windows(2).any(|p| p[1] <= p[0]) {
                    return Err(Error::Format(format!("warp of pair {} is not strictly increasing over the source", s.id)));
                }
            }
        }
        Ok(())
    }

    /// First `n` pairs and the rest.
    pub fn split(&self, n: usize) -> (ParallelCorpus, ParallelCorpus) {
        let n = n.min(self.pairs.len());
        (
            ParallelCorpus { classes: self.classes, pairs: self.pairs[..n].to_vec() },
            ParallelCorpus { classes: self.classes, pairs: self.pairs[n..].to_vec() },
        )
    }
}

/// Stacks `r` consecutive frames into one: column `j` is mel columns
/// `rj..rj+r` concatenated vertically. A trailing remainder is dropped.
pub fn stack_frames<T: Scalar>(mel: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (b, t) = mel.expect_matrix("stack_frames")?;
    if r == 0 {
        return Err(Error::InvalidArgument("reduction factor must be at least 1".into()));
    }
    if t < r {
        return Err(Error::InvalidArgument(format!("{t} frames cannot fill one stack of {r}")));
    }
    let cols = t / r;
    Ok(Tensor::from_fn(b * r, cols, |row, j| mel.at(row % b, j * r + row / b)))
}

/// Inverse of [`stack_frames`].
pub fn unstack_frames<T: Scalar>(stacked: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (d, cols) = stacked.expect_matrix("unstack_frames")?;
    if r == 0 || d % r != 0 {
        return Err(Error::InvalidArgument(format!("{d} channels do not split into {r} frames")));
    }
    let b = d / r;
    Ok(Tensor::from_fn(b, cols * r, |row, c| stacked.at((c % r) * b + row, c / r)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stacking_shapes_and_round_trip() {
        let mel = Tensor::from_fn(80, 124, |r, c| (r * 1000 + c) as f64);
        let st = stack_frames(&mel, 4).unwrap();
        assert_eq!(st.shape(), &[320, 31]);
        assert_eq!(st.at(80, 0), mel.at(0, 1));
        assert_eq!(unstack_frames(&st, 4).unwrap(), mel);
        let odd = Tensor::from_fn(2, 7, |r, c| (r + 10 * c) as f64);
        let back = unstack_frames(&stack_frames(&odd, 3).unwrap(), 3).unwrap();
        assert_eq!(back, odd.cols_range(0, 6).unwrap());
        assert_eq!(stack_frames(&odd, 1).unwrap(), odd);
        assert!(stack_frames(&odd, 8).is_err());
    }
}
