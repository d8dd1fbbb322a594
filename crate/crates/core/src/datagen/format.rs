//! `MIDS1` dataset files.
//!
//! Magic `MIDS1`; `u32` N, H, W and class count; per class a `u16` length
//! and UTF-8 name; N `u8` labels; `N·H·W` `f32` pixels. Little-endian
//! throughout.

use std::fs;
use std::path::Path;

use super::{LabeledImageSet, Provenance};
use crate::error::{Error, Result};

pub const DATASET_MAGIC: &[u8; 5] = b"MIDS1";

fn u32_of(v: usize, what: &str) -> Result<[u8; 4]> {
    u32::try_from(v)
        .map(u32::to_le_bytes)
        .map_err(|_| Error::invalid(format!("{what} {v} exceeds u32")))
}

impl LabeledImageSet {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        if self.classes() > 256 {
            return Err(Error::invalid("at most 256 classes fit in u8 labels"));
        }
        let mut out = DATASET_MAGIC.to_vec();
        out.extend(u32_of(self.len(), "sample count")?);
        out.extend(u32_of(self.height, "height")?);
        out.extend(u32_of(self.width, "width")?);
        out.extend(u32_of(self.classes(), "class count")?);
        for name in &self.class_names {
            let len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("class name too long: {name}")))?;
            out.extend(len.to_le_bytes());
            out.extend(name.as_bytes());
        }
        out.extend(self.labels.iter().map(|&l| l as u8));
        out.reserve(self.pixels.len() * 4);
        for p in &self.pixels {
            out.extend(p.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0usize;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::format("dataset", "truncated"))?;
            pos += n;
            Ok(s)
        };
        if take(5)? != DATASET_MAGIC {
            return Err(Error::format("dataset", "bad magic"));
        }
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let height = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let width = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let classes = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut class_names = Vec::with_capacity(classes);
        for _ in 0..classes {
            let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
            let name =
                std::str::from_utf8(take(len)?).map_err(|_| Error::format("dataset", "class name is not UTF-8"))?;
            class_names.push(name.to_owned());
        }
        let labels: Vec<usize> = take(n)?.iter().map(|&l| l as usize).collect();
        let count = n
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .ok_or_else(|| Error::format("dataset", "dimensions overflow"))?;
        let pixels: Vec<f32> = take(count * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if pos != bytes.len() {
            return Err(Error::format("dataset", "trailing bytes"));
        }
        let set = LabeledImageSet {
            height,
            width,
            pixels,
            labels,
            class_names,
            provenance: Provenance::Loaded,
        };
        set.validate().map_err(|e| Error::format("dataset", e.to_string()))?;
        Ok(set)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use crate::datagen::{generate, GenSpec, LabeledImageSet};

    #[test]
    fn header_and_round_trip() {
        let set = generate(&GenSpec {
            counts: [2, 1, 3],
            side: 8,
            ..GenSpec::default()
        })
        .unwrap();
        let bytes = set.to_bytes().unwrap();
        assert_eq!(&bytes[..5], b"MIDS1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 6);
        assert_eq!(u32::from_le_bytes(bytes[17..21].try_into().unwrap()), 3);
        assert_eq!(u16::from_le_bytes(bytes[21..23].try_into().unwrap()), 6);
        assert_eq!(&bytes[23..29], b"normal");
        let back = LabeledImageSet::from_bytes(&bytes).unwrap();
        assert_eq!(back.pixels, set.pixels);
        assert_eq!(back.labels, set.labels);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let set = generate(&GenSpec {
            counts: [1, 1, 1],
            side: 8,
            ..GenSpec::default()
        })
        .unwrap();
        let bytes = set.to_bytes().unwrap();
        assert!(LabeledImageSet::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(LabeledImageSet::from_bytes(&extra).is_err());
        let mut bad_label = bytes.clone();
        let label_pos = 21 + (2 + 6) + (2 + 6) + (2 + 9);
        bad_label[label_pos] = 9;
        assert!(LabeledImageSet::from_bytes(&bad_label).is_err());
    }
}
