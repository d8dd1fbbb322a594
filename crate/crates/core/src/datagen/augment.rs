use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

/// Augmentation is refused if it would need more than this many copies per
/// original image of the target class.
pub const MAX_DUPLICATION: usize = 50;
const MAX_SHIFT: i32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transform {
    FlipHorizontal,
    FlipVertical,
    /// Counter-clockwise quarter turns (1..=3); square images only.
    Rotate90(u8),
    /// Translation with edge clamping.
    Shift {
        dx: i32,
        dy: i32,
    },
}

impl Transform {
    fn random<R: Rng>(rng: &mut R, square: bool) -> Self {
        let kinds = if square { 4 } else { 3 };
        match rng.gen_range(0..kinds) {
            0 => Transform::FlipHorizontal,
            1 => Transform::FlipVertical,
            2 => loop {
                let dx = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
                let dy = rng.gen_range(-MAX_SHIFT..=MAX_SHIFT);
                if dx != 0 || dy != 0 {
                    break Transform::Shift { dx, dy };
                }
            },
            _ => Transform::Rotate90(rng.gen_range(1..=3)),
        }
    }
}

/// Applies `t` to an `h×w` image.
pub fn apply_transform(image: &[f32], h: usize, w: usize, t: Transform) -> Result<Vec<f32>> {
    if image.len() != h * w {
        return Err(Error::shape("transform", &[h, w], &[image.len()]));
    }
    let at = |y: usize, x: usize| image[y * w + x];
    let mut out = Vec::with_capacity(image.len());
    match t {
        Transform::FlipHorizontal => {
            for y in 0..h {
                out.extend((0..w).map(|x| at(y, w - 1 - x)));
            }
        }
        Transform::FlipVertical => {
            for y in 0..h {
                out.extend((0..w).map(|x| at(h - 1 - y, x)));
            }
        }
        Transform::Rotate90(k) => {
            if h != w {
                return Err(Error::invalid("rotation requires a square image"));
            }
            let n = h;
            for y in 0..n {
                for x in 0..n {
                    out.push(match k % 4 {
                        0 => at(y, x),
                        1 => at(x, n - 1 - y),
                        2 => at(n - 1 - y, n - 1 - x),
                        _ => at(n - 1 - x, y),
                    });
                }
            }
        }
        Transform::Shift { dx, dy } => {
            let src = |v: usize, d: i32, len: usize| (v as i64 - d as i64).clamp(0, len as i64 - 1) as usize;
            for y in 0..h {
                out.extend((0..w).map(|x| at(src(y, dy, h), src(x, dx, w))));
            }
        }
    }
    Ok(out)
}

/// Appends transformed copies of `target_class` images until that class
/// holds at least `target_share` of the set (and less than one sample
/// above it). Original samples are left untouched at their indices.
pub fn augment_to_share(
    set: &LabeledImageSet,
    target_class: usize,
    target_share: f64,
    seed: u64,
) -> Result<LabeledImageSet> {
    if target_class >= set.classes() {
        return Err(Error::invalid(format!("target class {target_class} out of range")));
    }
    let sources: Vec<usize> = (0..set.len()).filter(|&i| set.labels[i] == target_class).collect();
    if sources.is_empty() {
        return Err(Error::invalid("target class has no samples to augment"));
    }
    let (k, n) = (sources.len(), set.len());
    let current = k as f64 / n as f64;
    if !(target_share > current && target_share < 1.0) {
        return Err(Error::invalid(format!(
            "target share {target_share} must lie in ({current}, 1)"
        )));
    }
    let reaches = |m: usize| (k + m) as f64 >= target_share * (n + m) as f64;
    let mut m = ((target_share * n as f64 - k as f64) / (1.0 - target_share))
        .ceil()
        .max(1.0) as usize;
    while !reaches(m) {
        m += 1;
    }
    while m > 1 && reaches(m - 1) {
        m -= 1;
    }
    if m > MAX_DUPLICATION * k {
        return Err(Error::invalid(format!(
            "reaching share {target_share} needs {m} copies of {k} images (limit {MAX_DUPLICATION}x)"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = set.clone();
    out.provenance = Provenance::Augmented;
    out.pixels.reserve(m * set.image_len());
    let square = set.height == set.width;
    for _ in 0..m {
        let src = *sources.choose(&mut rng).unwrap();
        let t = Transform::random(&mut rng, square);
        let img = apply_transform(set.image(src), set.height, set.width, t)?;
        out.push(&img, target_class);
    }
    Ok(out)
}

/// Largest-remainder allocation of `n` samples across classes in
/// proportion to `counts`, capped by each count.
pub(crate) fn proportional_allocation(counts: &[usize], n: usize) -> Vec<usize> {
    let total: usize = counts.iter().sum();
    let quotas: Vec<f64> = counts.iter().map(|&c| n as f64 * c as f64 / total as f64).collect();
    let mut alloc: Vec<usize> = quotas
        .iter()
        .zip(counts)
        .map(|(q, &c)| (q.floor() as usize).min(c))
        .collect();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = quotas[a] - quotas[a].floor();
        let fb = quotas[b] - quotas[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    let mut left = n - alloc.iter().sum::<usize>();
    while left > 0 {
        let before = left;
        for &c in &order {
            if left > 0 && alloc[c] < counts[c] {
                alloc[c] += 1;
                left -= 1;
            }
        }
        if before == left {
            break;
        }
    }
    alloc
}

/// Stratified draw of `n` samples into a blind set; returns
/// `(blind, remainder)`, each in original index order.
pub fn holdout_extract(set: &LabeledImageSet, n: usize, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if n == 0 {
        return Err(Error::invalid("holdout size must be positive"));
    }
    if n >= set.len() {
        return Err(Error::invalid(format!(
            "holdout size {n} must be below set size {}",
            set.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let alloc = proportional_allocation(&set.class_counts(), n);
    let mut taken = vec![false; set.len()];
    for (mut members, k) in set.indices_by_class().into_iter().zip(alloc) {
        members.shuffle(&mut rng);
        for &i in &members[..k] {
            taken[i] = true;
        }
    }
    let blind: Vec<usize> = (0..set.len()).filter(|&i| taken[i]).collect();
    let rest: Vec<usize> = (0..set.len()).filter(|&i| !taken[i]).collect();
    Ok((
        set.subset(&blind, Provenance::Split("blind".into())),
        set.subset(&rest, Provenance::Split("remainder".into())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{class_distribution, generate, GenSpec, NORMAL};

    fn dataset() -> LabeledImageSet {
        generate(&GenSpec {
            side: 12,
            seed: 5,
            ..GenSpec::default()
        })
        .unwrap()
    }

    fn sorted(v: &[f32]) -> Vec<u32> {
        let mut bits: Vec<u32> = v.iter().map(|p| p.to_bits()).collect();
        bits.sort_unstable();
        bits
    }

    #[test]
    fn reaches_target_share() {
        let set = dataset();
        let before = class_distribution(&set).unwrap();
        assert!((before.shares[NORMAL] - 0.076).abs() < 1e-12);
        let out = augment_to_share(&set, NORMAL, 0.331, 1).unwrap();
        let share = class_distribution(&out).unwrap().shares[NORMAL];
        assert!(share >= 0.331 && share < 0.331 + 1.0 / out.len() as f64, "{share}");
        assert_eq!(out.len(), 2000 + 763);
        assert_eq!(out.pixels[..set.pixels.len()], set.pixels[..]);
        assert_eq!(out.labels[..set.len()], set.labels[..]);
        out.validate().unwrap();
    }

    #[test]
    fn one_sample_when_barely_short() {
        let set = dataset();
        // Share after one extra image is (153/2001); aim just above current.
        let target = 152.0 / 2000.0 + 1e-6;
        let out = augment_to_share(&set, NORMAL, target, 2).unwrap();
        assert_eq!(out.len(), set.len() + 1);
    }

    #[test]
    fn rejects_unreachable_and_invalid_targets() {
        let set = dataset();
        assert!(augment_to_share(&set, NORMAL, 0.05, 1).is_err());
        assert!(augment_to_share(&set, NORMAL, 1.0, 1).is_err());
        // 152 normals would need > 50x duplication to reach 99%.
        assert!(augment_to_share(&set, NORMAL, 0.99, 1).is_err());
        assert!(augment_to_share(&set, 7, 0.5, 1).is_err());
    }

    #[test]
    fn flips_and_rotations_permute_pixels() {
        let set = dataset();
        let img = set.image(3);
        for t in [
            Transform::FlipHorizontal,
            Transform::FlipVertical,
            Transform::Rotate90(1),
            Transform::Rotate90(2),
            Transform::Rotate90(3),
        ] {
            let out = apply_transform(img, 12, 12, t).unwrap();
            assert_eq!(sorted(&out), sorted(img), "{t:?}");
        }
    }

    #[test]
    fn transform_geometry() {
        // 2x3 image: rows [0 1 2] [3 4 5]
        let img: Vec<f32> = (0..6).map(|v| v as f32).collect();
        assert_eq!(
            apply_transform(&img, 2, 3, Transform::FlipHorizontal).unwrap(),
            [2., 1., 0., 5., 4., 3.]
        );
        assert_eq!(
            apply_transform(&img, 2, 3, Transform::FlipVertical).unwrap(),
            [3., 4., 5., 0., 1., 2.]
        );
        assert_eq!(
            apply_transform(&img, 2, 3, Transform::Shift { dx: 1, dy: 0 }).unwrap(),
            [0., 0., 1., 3., 3., 4.]
        );
        let sq: Vec<f32> = (0..4).map(|v| v as f32).collect();
        assert_eq!(
            apply_transform(&sq, 2, 2, Transform::Rotate90(1)).unwrap(),
            [1., 3., 0., 2.]
        );
        assert!(apply_transform(&img, 2, 3, Transform::Rotate90(1)).is_err());
    }

    #[test]
    fn holdout_is_stratified_partition() {
        let set = dataset();
        let (blind, rest) = holdout_extract(&set, 150, 3).unwrap();
        assert_eq!(blind.len(), 150);
        assert_eq!(rest.len(), 1850);
        let counts = set.class_counts();
        for (c, &got) in blind.class_counts().iter().enumerate() {
            let exact = 150.0 * counts[c] as f64 / 2000.0;
            assert!((got as f64 - exact).abs() <= 1.0);
        }
        let mut all = sorted(&blind.pixels);
        all.extend(sorted(&rest.pixels));
        all.sort_unstable();
        assert_eq!(all, sorted(&set.pixels));

        let (_, last) = holdout_extract(&set, 1999, 3).unwrap();
        assert_eq!(last.len(), 1);
        assert!(holdout_extract(&set, 0, 3).is_err());
        assert!(holdout_extract(&set, 2000, 3).is_err());
    }

    #[test]
    fn allocation_sums_to_request() {
        assert_eq!(proportional_allocation(&[7, 9], 8), vec![4, 4]);
        assert_eq!(proportional_allocation(&[1, 1, 1], 2), vec![1, 1, 0]);
        assert_eq!(proportional_allocation(&[100, 100, 100], 60), vec![20, 20, 20]);
    }
}
