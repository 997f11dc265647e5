//! Synthetic relational classification: two distinct motifs on a noisy
//! canvas, labelled by where the second sits relative to the first.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sdt_core::Tensor;

/// Motif A: a filled disc-like blob.
const MOTIF_A: [&str; 4] = [".##.", "####", "####", ".##."];
/// Motif B: a hollow square.
const MOTIF_B: [&str; 4] = ["####", "#..#", "#..#", "####"];
pub const MOTIF_SIZE: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub size: usize,
    /// 4: quadrant of B around A; 2: whether B is right of A.
    pub num_classes: usize,
    /// Std of additive Gaussian pixel noise.
    pub noise: f64,
    /// Minimum per-axis offset between the two motifs' corners.
    pub min_separation: usize,
    /// Motif corners are drawn from multiples of this stride.
    pub stride: usize,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self { size: 32, num_classes: 4, noise: 0.3, min_separation: MOTIF_SIZE, stride: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    /// `[n, size, size, 1]`
    pub images: Tensor<f64>,
    pub labels: Vec<usize>,
    /// Top-left corners `(row, col)` of motifs A and B.
    pub placements: Vec<((usize, usize), (usize, usize))>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn class_counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for &l in &self.labels {
            c[l] += 1;
        }
        c
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<(), String> {
        if self.num_classes != 2 && self.num_classes != 4 {
            return Err(format!("synthetic task supports 2 or 4 classes, got {}", self.num_classes));
        }
        let span = self.size.checked_sub(MOTIF_SIZE).unwrap_or(0);
        if self.size < MOTIF_SIZE || self.min_separation > span {
            return Err(format!("canvas {} cannot fit motifs {} apart", self.size, self.min_separation));
        }
        if self.min_separation < MOTIF_SIZE {
            return Err(format!("min_separation must be at least the motif size {MOTIF_SIZE}"));
        }
        if self.stride == 0 || self.min_separation > span / self.stride * self.stride {
            return Err(format!("stride {} leaves no placements {} apart", self.stride, self.min_separation));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(format!("noise must be a non-negative number, got {}", self.noise));
        }
        Ok(())
    }

    /// Deterministic label of a placement.
    pub fn label(&self, a: (usize, usize), b: (usize, usize)) -> usize {
        let right = usize::from(b.1 > a.1);
        if self.num_classes == 2 {
            right
        } else {
            2 * usize::from(b.0 > a.0) + right
        }
    }

    fn separated(&self, a: (usize, usize), b: (usize, usize)) -> bool {
        let sep = self.min_separation;
        let horizontal = a.1.abs_diff(b.1) >= sep;
        if self.num_classes == 2 {
            horizontal
        } else {
            horizontal && a.0.abs_diff(b.0) >= sep
        }
    }

    fn place(&self, target: usize, rng: &mut ChaCha8Rng) -> ((usize, usize), (usize, usize)) {
        let cells = (self.size - MOTIF_SIZE) / self.stride + 1;
        let mut corner = || (rng.gen_range(0..cells) * self.stride, rng.gen_range(0..cells) * self.stride);
        loop {
            let a = corner();
            let b = corner();
            if self.separated(a, b) && self.label(a, b) == target {
                return (a, b);
            }
        }
    }

    /// `n` samples with labels balanced to within one per class.
    pub fn generate(&self, n: usize, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut targets: Vec<usize> = (0..n).map(|i| i % self.num_classes).collect();
        targets.shuffle(&mut rng);
        let noise = Normal::new(0.0, self.noise.max(0.0)).expect("finite noise");
        let s = self.size;
        let mut pixels = Vec::with_capacity(n * s * s);
        let mut placements = Vec::with_capacity(n);
        for &t in &targets {
            let (a, b) = self.place(t, &mut rng);
            let mut img = vec![0.0; s * s];
            for (motif, (r0, c0)) in [(&MOTIF_A, a), (&MOTIF_B, b)] {
                for (dr, row) in motif.iter().enumerate() {
                    for (dc, ch) in row.bytes().enumerate() {
                        if ch == b'#' {
                            img[(r0 + dr) * s + c0 + dc] = 1.0;
                        }
                    }
                }
            }
            if self.noise > 0.0 {
                for p in &mut img {
                    *p += noise.sample(&mut rng);
                }
            }
            pixels.extend(img);
            placements.push((a, b));
        }
        Dataset { images: Tensor::new(vec![n, s, s, 1], pixels).expect("consistent shape"), labels: targets, placements }
    }
}
