use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::datagen::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

/// Splits per class: `round(fraction · count)` samples go to the second
/// set, the rest to the first. Both outputs are shuffled by `seed`.
pub fn stratified_split(set: &LabeledImageSet, fraction: f64, seed: u64) -> Result<(LabeledImageSet, LabeledImageSet)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::invalid(format!("split fraction {fraction} outside (0, 1)")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (class, mut members) in set.indices_by_class().into_iter().enumerate() {
        if members.is_empty() {
            continue;
        }
        if members.len() < 2 {
            return Err(Error::invalid(format!(
                "class {class} has {} sample(s); stratified split needs at least 2",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let k = (fraction * members.len() as f64).round() as usize;
        second.extend_from_slice(&members[..k]);
        first.extend_from_slice(&members[k..]);
    }
    first.shuffle(&mut rng);
    second.shuffle(&mut rng);
    Ok((
        set.subset(&first, Provenance::Split("train".into())),
        set.subset(&second, Provenance::Split("holdout".into())),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counted(counts: &[usize]) -> LabeledImageSet {
        let names = (0..counts.len()).map(|c| format!("c{c}")).collect();
        let mut set = LabeledImageSet::empty(1, 1, names, Provenance::Generated);
        let mut px = 0.0f32;
        for (label, &n) in counts.iter().enumerate() {
            for _ in 0..n {
                set.push(&[px], label);
                px += 1e-4;
            }
        }
        set
    }

    #[test]
    fn exact_division() {
        let set = counted(&[100, 100, 100]);
        let (train, val) = stratified_split(&set, 0.2, 1).unwrap();
        assert_eq!(val.class_counts(), [20, 20, 20]);
        assert_eq!(train.class_counts(), [80, 80, 80]);
    }

    #[test]
    fn odd_counts_within_one() {
        let set = counted(&[7, 9]);
        for seed in 0..5 {
            let (_, val) = stratified_split(&set, 0.5, seed).unwrap();
            let c = val.class_counts();
            assert!((3..=4).contains(&c[0]) && (4..=5).contains(&c[1]), "{c:?}");
        }
    }

    #[test]
    fn partition_and_determinism() {
        let set = counted(&[13, 21, 8]);
        let (a1, b1) = stratified_split(&set, 0.3, 9).unwrap();
        let (a2, b2) = stratified_split(&set, 0.3, 9).unwrap();
        assert_eq!((&a1, &b1), (&a2, &b2));
        let mut all: Vec<u32> = a1.pixels.iter().chain(&b1.pixels).map(|p| p.to_bits()).collect();
        all.sort_unstable();
        let mut orig: Vec<u32> = set.pixels.iter().map(|p| p.to_bits()).collect();
        orig.sort_unstable();
        assert_eq!(all, orig);
    }

    #[test]
    fn rejects_bad_fraction_and_singletons() {
        let set = counted(&[5, 5]);
        assert!(stratified_split(&set, 0.0, 1).is_err());
        assert!(stratified_split(&set, 1.0, 1).is_err());
        assert!(stratified_split(&counted(&[5, 1]), 0.5, 1).is_err());
    }
}
