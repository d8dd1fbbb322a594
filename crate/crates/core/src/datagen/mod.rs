//! Synthetic three-class image data: smooth textured backgrounds ("normal"),
//! plus one broad Gaussian blob ("benign"), plus a tiny bright spike on
//! the blob ("malignant").
//!
//! Only the maximum statistic separates benign from malignant reliably; the
//! mean barely moves when one or two pixels brighten.

mod augment;
mod format;

pub use augment::{apply_transform, augment_to_share, holdout_extract, Transform, MAX_DUPLICATION};
pub use format::DATASET_MAGIC;

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CLASS_NAMES: [&str; 3] = ["normal", "benign", "malignant"];
pub const NORMAL: usize = 0;
pub const BENIGN: usize = 1;
pub const MALIGNANT: usize = 2;
const MIN_SIDE: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Provenance {
    Generated,
    Augmented,
    Loaded,
    Split(String),
}

/// Single-channel images with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledImageSet {
    pub height: usize,
    pub width: usize,
    /// `N·H·W` pixels in `[0, 1]`, image-major then row-major.
    pub pixels: Vec<f32>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
    pub provenance: Provenance,
}

impl LabeledImageSet {
    pub fn empty(height: usize, width: usize, class_names: Vec<String>, provenance: Provenance) -> Self {
        LabeledImageSet {
            height,
            width,
            pixels: Vec::new(),
            labels: Vec::new(),
            class_names,
            provenance,
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_len(&self) -> usize {
        self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn push(&mut self, image: &[f32], label: usize) {
        debug_assert_eq!(image.len(), self.image_len());
        self.pixels.extend_from_slice(image);
        self.labels.push(label);
    }

    /// Copies the listed samples, in the given order.
    pub fn subset(&self, indices: &[usize], provenance: Provenance) -> Self {
        let mut out = Self::empty(self.height, self.width, self.class_names.clone(), provenance);
        out.pixels.reserve(indices.len() * self.image_len());
        for &i in indices {
            out.push(self.image(i), self.labels[i]);
        }
        out
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Sample indices grouped per class, ascending.
    pub fn indices_by_class(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.classes()];
        for (i, &l) in self.labels.iter().enumerate() {
            out[l].push(i);
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.pixels.len() != self.len() * self.image_len() {
            return Err(Error::shape(
                "image set",
                &[self.len(), self.height, self.width],
                &[self.pixels.len()],
            ));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l >= self.classes()) {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
        if self.pixels.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::invalid("pixel outside [0, 1]"));
        }
        Ok(())
    }
}

/// Parameters of the synthetic generator.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    /// Samples per class, in `CLASS_NAMES` order.
    pub counts: [usize; 3],
    pub side: usize,
    /// Half-width of uniform per-pixel noise.
    pub noise: f64,
    pub background: f64,
    /// Amplitude of the low-frequency background texture.
    pub texture: f64,
    pub blob_intensity: (f64, f64),
    /// Gaussian sigma range, in pixels.
    pub blob_radius: (f64, f64),
    pub spike_intensity: f64,
    pub seed: u64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            counts: [152, 820, 1028],
            side: 32,
            noise: 0.03,
            background: 0.2,
            texture: 0.08,
            blob_intensity: (0.25, 0.45),
            blob_radius: (3.0, 6.0),
            spike_intensity: 0.5,
            seed: 0,
        }
    }
}

impl GenSpec {
    pub fn validate(&self) -> Result<()> {
        if self.side < MIN_SIDE {
            return Err(Error::invalid(format!(
                "image side {} below minimum {MIN_SIDE}",
                self.side
            )));
        }
        if self.counts.iter().all(|&c| c == 0) {
            return Err(Error::invalid("all class counts are zero"));
        }
        let ranges = [self.blob_intensity, self.blob_radius];
        if ranges.iter().any(|(lo, hi)| !(lo <= hi && *lo >= 0.0)) || self.blob_radius.0 <= 0.0 {
            return Err(Error::invalid("blob ranges must satisfy 0 <= lo <= hi (radius > 0)"));
        }
        if [self.noise, self.background, self.texture, self.spike_intensity]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid(
                "noise, background, texture and spike must be nonnegative",
            ));
        }
        Ok(())
    }

    fn label_of(&self, index: usize) -> usize {
        let mut rest = index;
        for (class, &c) in self.counts.iter().enumerate() {
            if rest < c {
                return class;
            }
            rest -= c;
        }
        unreachable!("index beyond total count")
    }
}

/// Generates the dataset single-threaded.
pub fn generate(spec: &GenSpec) -> Result<LabeledImageSet> {
    generate_parallel(spec, 1)
}

/// Generates the dataset on up to `threads` workers. Each image has its
/// own random stream, so the output does not depend on `threads`.
pub fn generate_parallel(spec: &GenSpec, threads: usize) -> Result<LabeledImageSet> {
    spec.validate()?;
    let total: usize = spec.counts.iter().sum();
    let px = spec.side * spec.side;
    let mut pixels = vec![0f32; total * px];
    let threads = threads.clamp(1, total.max(1));
    let per = total.div_ceil(threads);
    std::thread::scope(|scope| {
        for (chunk_idx, chunk) in pixels.chunks_mut(per * px).enumerate() {
            scope.spawn(move || {
                for (j, img) in chunk.chunks_mut(px).enumerate() {
                    let i = chunk_idx * per + j;
                    render(spec, i, spec.label_of(i), img);
                }
            });
        }
    });
    let labels = (0..total).map(|i| spec.label_of(i)).collect();
    Ok(LabeledImageSet {
        height: spec.side,
        width: spec.side,
        pixels,
        labels,
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        provenance: Provenance::Generated,
    })
}

fn render(spec: &GenSpec, index: usize, label: usize, out: &mut [f32]) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64);
    let side = spec.side;
    let s = side as f64;

    // Low-frequency texture: a few random plane waves, normalized to [-1, 1].
    let waves: Vec<(f64, f64, f64, f64)> = (0..3)
        .map(|_| {
            let angle = rng.gen_range(0.0..2.0 * PI);
            let cycles = rng.gen_range(0.5..2.0);
            let weight = rng.gen_range(0.5..1.0);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (
                cycles * angle.cos() * 2.0 * PI / s,
                cycles * angle.sin() * 2.0 * PI / s,
                phase,
                weight,
            )
        })
        .collect();
    let weight_sum: f64 = waves.iter().map(|w| w.3).sum();

    let mut img = vec![0.0f64; side * side];
    for y in 0..side {
        for x in 0..side {
            let wave: f64 = waves
                .iter()
                .map(|(fx, fy, ph, wt)| wt * (fx * x as f64 + fy * y as f64 + ph).cos())
                .sum::<f64>()
                / weight_sum;
            img[y * side + x] = spec.background + spec.texture * wave;
        }
    }

    if label >= BENIGN {
        let margin = s / 4.0;
        let cx = rng.gen_range(margin..s - margin);
        let cy = rng.gen_range(margin..s - margin);
        let sigma = uniform(&mut rng, spec.blob_radius);
        let amp = uniform(&mut rng, spec.blob_intensity);
        for y in 0..side {
            for x in 0..side {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                img[y * side + x] += amp * (-d2 / (2.0 * sigma * sigma)).exp();
            }
        }
        if label == MALIGNANT {
            let r = sigma * 0.5;
            let sx = (cx + rng.gen_range(-r..=r)).round().clamp(0.0, s - 1.0) as usize;
            let sy = (cy + rng.gen_range(-r..=r)).round().clamp(0.0, s - 1.0) as usize;
            img[sy * side + sx] += spec.spike_intensity;
            if rng.gen_bool(0.5) {
                let (nx, ny) = if rng.gen_bool(0.5) {
                    (if sx + 1 < side { sx + 1 } else { sx - 1 }, sy)
                } else {
                    (sx, if sy + 1 < side { sy + 1 } else { sy - 1 })
                };
                img[ny * side + nx] += spec.spike_intensity;
            }
        }
    }

    for (o, v) in out.iter_mut().zip(&img) {
        let noisy = v + if spec.noise > 0.0 {
            rng.gen_range(-spec.noise..=spec.noise)
        } else {
            0.0
        };
        *o = noisy.clamp(0.0, 1.0) as f32;
    }
}

fn uniform<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Distribution {
    pub counts: Vec<usize>,
    pub shares: Vec<f64>,
}

pub fn class_distribution(set: &LabeledImageSet) -> Result<Distribution> {
    if set.is_empty() {
        return Err(Error::invalid("class distribution of an empty set"));
    }
    let counts = set.class_counts();
    let n = set.len() as f64;
    let shares = counts.iter().map(|&c| c as f64 / n).collect();
    Ok(Distribution { counts, shares })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(counts: [usize; 3], seed: u64) -> GenSpec {
        GenSpec {
            counts,
            side: 16,
            seed,
            ..GenSpec::default()
        }
    }

    #[test]
    fn only_requested_class() {
        let set = generate(&small([0, 0, 5], 1)).unwrap();
        assert_eq!(set.len(), 5);
        assert!(set.labels.iter().all(|&l| l == MALIGNANT));
    }

    #[test]
    fn deterministic_and_thread_independent() {
        let spec = small([7, 5, 9], 42);
        let a = generate(&spec).unwrap();
        let b = generate_parallel(&spec, 4).unwrap();
        assert_eq!(a, b);
        let c = generate(&small([7, 5, 9], 43)).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn pixels_in_unit_range() {
        let spec = GenSpec {
            spike_intensity: 3.0,
            noise: 0.4,
            ..small([5, 5, 5], 3)
        };
        let set = generate(&spec).unwrap();
        set.validate().unwrap();
    }

    #[test]
    fn rejects_bad_specs() {
        assert!(generate(&small([0, 0, 0], 1)).is_err());
        let tiny = GenSpec {
            side: 7,
            ..small([1, 1, 1], 1)
        };
        assert!(generate(&tiny).is_err());
    }

    #[test]
    fn spike_raises_the_maximum() {
        let set = generate(&GenSpec {
            counts: [0, 1000, 1000],
            seed: 9,
            ..GenSpec::default()
        })
        .unwrap();
        let mean_max = |class: usize| {
            let idx: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == class).collect();
            idx.iter()
                .map(|&i| set.image(i).iter().copied().fold(0f32, f32::max) as f64)
                .sum::<f64>()
                / idx.len() as f64
        };
        let gap = mean_max(MALIGNANT) - mean_max(BENIGN);
        assert!(gap > 0.2, "max-pixel gap {gap}");
    }

    #[test]
    fn distribution_shares() {
        let mut set = LabeledImageSet::empty(
            1,
            1,
            CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            Provenance::Generated,
        );
        for (label, n) in [(0usize, 2026usize), (1, 10900), (2, 13700)] {
            for _ in 0..n {
                set.push(&[0.0], label);
            }
        }
        let d = class_distribution(&set).unwrap();
        assert!((d.shares[0] - 0.076).abs() < 5e-4, "{}", d.shares[0]);
        assert!((d.shares.iter().sum::<f64>() - 1.0).abs() < 1e-12);

        let single = set.subset(&[0, 1, 2], Provenance::Generated);
        assert_eq!(class_distribution(&single).unwrap().shares, [1.0, 0.0, 0.0]);
        let equal = set.subset(&[0, 3000, 20000], Provenance::Generated);
        for s in class_distribution(&equal).unwrap().shares {
            assert!((s - 1.0 / 3.0).abs() < 1e-15);
        }
        let empty = set.subset(&[], Provenance::Generated);
        assert!(class_distribution(&empty).is_err());
    }
}
