//! Dice overlap and the click-robustness score.

use thiserror::Error;

use crate::volume::{Dims, Volume3D, VolumeError};

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask dims differ: {0} vs {1}")]
    DimsMismatch(Dims, Dims),
    #[error("robustness needs at least two predictions, got {0}")]
    TooFewPredictions(usize),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

/// Voxel counts behind one Dice value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Overlap {
    pub intersection: usize,
    pub size_a: usize,
    pub size_b: usize,
}

impl Overlap {
    /// `2|A∩B| / (|A|+|B|)`; two empty masks agree perfectly (1.0).
    pub fn dice(&self) -> f64 {
        let denom = self.size_a + self.size_b;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.intersection as f64 / denom as f64
        }
    }

    pub fn both_empty(&self) -> bool {
        self.size_a == 0 && self.size_b == 0
    }
}

pub fn overlap(a: &Volume3D, b: &Volume3D) -> Result<Overlap, MetricError> {
    if a.dims() != b.dims() {
        return Err(MetricError::DimsMismatch(a.dims(), b.dims()));
    }
    let (a, b) = (a.mask_bits()?, b.mask_bits()?);
    let mut o = Overlap { intersection: 0, size_a: 0, size_b: 0 };
    for (&x, &y) in a.iter().zip(b) {
        o.size_a += x as usize;
        o.size_b += y as usize;
        o.intersection += (x & y) as usize;
    }
    Ok(o)
}

/// Dice similarity of two binary masks. Empty vs empty is 1.0, empty vs
/// non-empty is 0.0.
pub fn dice(a: &Volume3D, b: &Volume3D) -> Result<f64, MetricError> {
    Ok(overlap(a, b)?.dice())
}

/// Overlap of two masks given as sorted, deduplicated voxel index lists
/// in a shared frame.
pub fn overlap_sorted(a: &[usize], b: &[usize]) -> Overlap {
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Overlap { intersection: inter, size_a: a.len(), size_b: b.len() }
}

/// Predictions for one lesion from the centroid click and two shifted
/// clicks, all in the same (global) frame.
#[derive(Debug, Clone)]
pub struct RobustnessTriple {
    pub lesion_id: String,
    pub p_normal: Volume3D,
    pub p_aug1: Volume3D,
    pub p_aug2: Volume3D,
}

/// Mean of the three pairwise Dice scores of the triple.
pub fn robustness(t: &RobustnessTriple) -> Result<f64, MetricError> {
    let d_n1 = dice(&t.p_normal, &t.p_aug1)?;
    let d_n2 = dice(&t.p_normal, &t.p_aug2)?;
    let d_12 = dice(&t.p_aug1, &t.p_aug2)?;
    Ok((d_n1 + d_n2 + d_12) / 3.0)
}

/// Mean pairwise Dice over any number (≥ 2) of predictions. For three
/// masks this is the same sum as [`robustness`], in the same order.
pub fn mean_pairwise_dice(preds: &[Volume3D]) -> Result<f64, MetricError> {
    if preds.len() < 2 {
        return Err(MetricError::TooFewPredictions(preds.len()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..preds.len() {
        for j in i + 1..preds.len() {
            sum += dice(&preds[i], &preds[j])?;
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(bits: &[u8]) -> Volume3D {
        Volume3D::binary_mask(Dims::new(bits.len(), 1, 1), [1.0; 3], bits.to_vec()).unwrap()
    }

    #[test]
    fn dice_basics() {
        let a = m(&[1, 1, 0, 0]);
        assert_eq!(dice(&a, &a).unwrap(), 1.0);
        assert_eq!(dice(&a, &m(&[0, 0, 1, 1])).unwrap(), 0.0);
        assert_eq!(dice(&m(&[0; 4]), &m(&[0; 4])).unwrap(), 1.0);
        assert_eq!(dice(&m(&[0; 4]), &a).unwrap(), 0.0);
    }

    #[test]
    fn four_voxel_blocks_overlapping_in_two() {
        let a = m(&[1, 1, 1, 1, 0, 0]);
        let b = m(&[0, 0, 1, 1, 1, 1]);
        assert_eq!(dice(&a, &b).unwrap(), 0.5);
    }

    #[test]
    fn sorted_overlap_matches_dense() {
        let a = m(&[1, 1, 1, 1, 0, 0, 1]);
        let b = m(&[0, 0, 1, 1, 1, 1, 1]);
        let idx = |v: &Volume3D| -> Vec<usize> {
            v.mask_bits().unwrap().iter().enumerate().filter(|(_, &x)| x != 0).map(|(i, _)| i).collect()
        };
        assert_eq!(overlap_sorted(&idx(&a), &idx(&b)), overlap(&a, &b).unwrap());
        assert_eq!(overlap_sorted(&[], &[]).dice(), 1.0);
    }

    #[test]
    fn dims_mismatch() {
        assert!(matches!(dice(&m(&[1]), &m(&[1, 0])), Err(MetricError::DimsMismatch(..))));
    }

    #[test]
    fn robustness_of_identical_masks() {
        let a = m(&[0, 1, 1, 0]);
        let t = RobustnessTriple { lesion_id: "x".into(), p_normal: a.clone(), p_aug1: a.clone(), p_aug2: a.clone() };
        assert_eq!(robustness(&t).unwrap(), 1.0);
        assert_eq!(mean_pairwise_dice(&[a.clone(), a.clone(), a]).unwrap(), 1.0);
    }

    #[test]
    fn robustness_two_thirds() {
        // Dice(n,a1) = 0.5, Dice(n,a2) = 0.5, Dice(a1,a2) = 1
        let n = m(&[1, 1, 1, 1, 0, 0]);
        let a = m(&[0, 0, 1, 1, 1, 1]);
        let t = RobustnessTriple { lesion_id: "x".into(), p_normal: n, p_aug1: a.clone(), p_aug2: a };
        assert!((robustness(&t).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    }
}
