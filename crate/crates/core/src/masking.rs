//! Random binary masks over flattened discriminator features.

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Result};
use crate::real::Real;
use crate::tensor::Tensor;

/// A set of zeroed positions in a length-`length` feature vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub length: usize,
    pub ratio: f64,
    /// Sorted, unique, all `< length`.
    pub masked_indices: Vec<usize>,
    /// Caller-supplied record of the RNG position the draw came from.
    pub rng_state_tag: u128,
}

/// `floor(ratio · length)`, tolerant of representation error in `ratio`.
pub fn masked_count(length: usize, ratio: f64) -> usize {
    ((ratio * length as f64) + 1e-9).floor() as usize
}

fn check_ratio(ratio: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(domain_err!("mask ratio must lie in [0, 1], got {}", ratio));
    }
    Ok(())
}

/// Choose exactly `floor(ratio · length)` positions uniformly without replacement.
pub fn sample_mask<R: Rng + ?Sized>(length: usize, ratio: f64, rng: &mut R, tag: u128) -> Result<MaskSpec> {
    check_ratio(ratio)?;
    if length == 0 {
        return Err(domain_err!("mask length must be positive"));
    }
    let count = masked_count(length, ratio).min(length);
    let mut masked_indices = index::sample(rng, length, count).into_vec();
    masked_indices.sort_unstable();
    Ok(MaskSpec { length, ratio, masked_indices, rng_state_tag: tag })
}

impl MaskSpec {
    /// Empty mask (identity).
    pub fn none(length: usize) -> Self {
        Self { length, ratio: 0.0, masked_indices: Vec::new(), rng_state_tag: 0 }
    }

    /// 1 at kept positions, 0 at masked ones.
    pub fn keep_vector<T: Real>(&self) -> Vec<T> {
        let mut v = vec![T::one(); self.length];
        for &i in &self.masked_indices {
            v[i] = T::zero();
        }
        v
    }
}

/// Zero the masked positions of every row of `features` (trailing size `mask.length`).
pub fn apply_mask<T: Real>(features: &Tensor<T>, mask: &MaskSpec) -> Result<Tensor<T>> {
    let f = *features.shape().last().unwrap_or(&0);
    if f != mask.length || !features.len().is_multiple_of(mask.length) {
        return Err(shape_err!("features {:?} do not end in mask length {}", features.shape(), mask.length));
    }
    let mut out = features.clone();
    for row in out.data_mut().chunks_exact_mut(mask.length) {
        for &i in &mask.masked_indices {
            row[i] = T::zero();
        }
    }
    Ok(out)
}

/// Masks for one discriminator call: a single shared mask or one per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchMask {
    /// Resolution of the layer whose (flattened) output is masked.
    pub layer: usize,
    pub masks: Vec<MaskSpec>,
}

impl BatchMask {
    pub fn sample<R: Rng + ?Sized>(
        layer: usize,
        length: usize,
        ratio: f64,
        batch: usize,
        per_sample: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let n = if per_sample { batch } else { 1 };
        let masks = (0..n).map(|i| sample_mask(length, ratio, rng, i as u128)).collect::<Result<_>>()?;
        Ok(Self { layer, masks })
    }

    pub fn check(&self, batch: usize, length: usize) -> Result<()> {
        if self.masks.len() != 1 && self.masks.len() != batch {
            return Err(shape_err!("{} masks for a batch of {}", self.masks.len(), batch));
        }
        if let Some(m) = self.masks.iter().find(|m| m.length != length) {
            return Err(shape_err!("mask length {} does not match feature count {}", m.length, length));
        }
        Ok(())
    }

    /// Flattened keep-indicator for `batch` rows.
    pub fn indicator<T: Real>(&self, batch: usize) -> Vec<T> {
        let mut out = Vec::with_capacity(batch * self.masks[0].length);
        for i in 0..batch {
            let m = if self.masks.len() == 1 { &self.masks[0] } else { &self.masks[i] };
            out.extend(m.keep_vector::<T>());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn full_scale_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let m = sample_mask(8192, 0.75, &mut rng, 0).unwrap();
        assert_eq!(m.masked_indices.len(), 6144);
    }

    #[test]
    fn zero_ratio_is_empty() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_mask(10, 0.0, &mut rng, 0).unwrap().masked_indices.is_empty());
    }

    #[test]
    fn ratio_outside_unit_interval_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_mask(10, 1.5, &mut rng, 0), Err(crate::Error::Domain(_))));
        assert!(matches!(sample_mask(10, -0.1, &mut rng, 0), Err(crate::Error::Domain(_))));
    }

    #[test]
    fn advancing_the_rng_changes_the_draw() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = sample_mask(64, 0.5, &mut rng, 0).unwrap();
        let b = sample_mask(64, 0.5, &mut rng, 1).unwrap();
        assert_ne!(a.masked_indices, b.masked_indices);
    }

    #[test]
    fn apply_mask_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(vec![1, 8], vec![1.0f64; 8]).unwrap();
        let none = sample_mask(8, 0.0, &mut rng, 0).unwrap();
        assert_eq!(apply_mask(&x, &none).unwrap(), x);
        let half = sample_mask(8, 0.5, &mut rng, 0).unwrap();
        assert_eq!(apply_mask(&x, &half).unwrap().data().iter().sum::<f64>(), 4.0);
        let wrong = Tensor::new(vec![1, 7], vec![1.0f64; 7]).unwrap();
        assert!(matches!(apply_mask(&wrong, &half), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn gradient_of_masked_sum_is_the_indicator() {
        use crate::autograd::Tape;
        use std::sync::Arc;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = sample_mask(16, 0.75, &mut rng, 0).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(Tensor::new(vec![1, 16], (0..16).map(|i| i as f64 - 3.5).collect()).unwrap(), true);
        let y = tape.mul_const(x, Arc::new(m.keep_vector())).unwrap();
        let s = tape.mean(y).unwrap();
        let s = tape.scale(s, 16.0);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), m.keep_vector::<f64>().as_slice());
    }

    proptest! {
        #[test]
        fn count_is_exact(len in 1usize..600, num in 0u32..=8, seed in any::<u64>()) {
            let ratio = num as f64 / 8.0;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(len, ratio, &mut rng, 0).unwrap();
            prop_assert_eq!(m.masked_indices.len(), (ratio * len as f64).floor() as usize);
            prop_assert!(m.masked_indices.windows(2).all(|w| w[0] < w[1]));
            prop_assert!(m.masked_indices.iter().all(|&i| i < len));
        }

        #[test]
        fn masking_is_idempotent(vals in proptest::collection::vec(-10.0f64..10.0, 12), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = sample_mask(12, 0.5, &mut rng, 0).unwrap();
            let x = Tensor::new(vec![1, 12], vals).unwrap();
            let once = apply_mask(&x, &m).unwrap();
            prop_assert_eq!(apply_mask(&once, &m).unwrap(), once);
        }
    }
}
