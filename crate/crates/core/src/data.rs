//! Seeded synthetic "blob" images: a zero background with one bright square
//! whose quadrant and intensity depend on the class.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor4};

pub const NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor4,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Copies the samples at `indices` into a new batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Vec<usize>) {
        let s = self.images.shape();
        let per = s.c * s.h * s.w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let shape = Shape::new(indices.len(), s.c, s.h, s.w);
        (Tensor4::from_parts(shape, data), indices.iter().map(|&i| self.labels[i]).collect())
    }
}

/// Foreground intensity for `class`.
pub fn foreground_value(class: usize) -> f64 {
    1.0 + 0.5 * class as f64
}

/// Top-left corner of the `h/2 x w/2` foreground square for `class`.
pub fn foreground_origin(class: usize, h: usize, w: usize) -> (usize, usize) {
    let q = class % 4;
    ((q / 2) * (h / 2), (q % 2) * (w / 2))
}

/// `n` samples with balanced labels (`i % classes`), shuffled by `seed`.
pub fn generate_blobs(seed: u64, n: usize, classes: usize, shape: (usize, usize, usize)) -> Result<Dataset> {
    let (c, h, w) = shape;
    if n == 0 || classes == 0 {
        return Err(Error::Invalid("need at least one sample and one class".into()));
    }
    if h < 2 || w < 2 {
        return Err(Error::InputTooSmall {
            h,
            w,
            reason: "blobs need at least 2x2",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        labels.swap(i, j);
    }
    let noise = Normal::new(0.0, NOISE_STD).map_err(|_| Error::Invalid("bad noise std".into()))?;
    let images = Tensor4::from_fn(Shape::new(n, c, h, w), |s, _, r, col| {
        let class = labels[s];
        let (r0, c0) = foreground_origin(class, h, w);
        let inside = (r0..r0 + h / 2).contains(&r) && (c0..c0 + w / 2).contains(&col);
        let base = if inside { foreground_value(class) } else { 0.0 };
        base + noise.sample(&mut rng)
    })?;
    Ok(Dataset { images, labels, classes })
}
