//! Grad-CAM case galleries: confident correct cases and misclassifications
//! of one class, written as side-by-side PPM images plus an index CSV.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::{grad_cam, CamMap};
use crate::datagen::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::Model;

pub const GALLERY_INDEX_HEADER: &str = "kind,sample_id,label,predicted,confidence,target,image";

/// Jet colormap of a value in `[0, 1]`.
pub fn jet(v: f64) -> [f64; 3] {
    let v = v.clamp(0.0, 1.0);
    let band = |c: f64| (1.5 - (4.0 * v - c).abs()).clamp(0.0, 1.0);
    [band(3.0), band(2.0), band(1.0)]
}

/// `0.5·gray + 0.5·jet(cam)` per channel.
pub fn overlay_pixel(gray: f64, cam: f64) -> [f64; 3] {
    let c = jet(cam);
    let g = gray.clamp(0.0, 1.0);
    [0.5 * g + 0.5 * c[0], 0.5 * g + 0.5 * c[1], 0.5 * g + 0.5 * c[2]]
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary P6 image, `2W×H`: the grayscale input on the left and the heatmap
/// overlay on the right.
pub fn side_by_side_ppm(image: &[f32], cam: &CamMap) -> Vec<u8> {
    let (h, w) = cam.input_hw;
    let mut out = format!("P6\n{} {}\n255\n", 2 * w, h).into_bytes();
    for y in 0..h {
        for x in 0..w {
            let g = quantize(f64::from(image[y * w + x]));
            out.extend([g, g, g]);
        }
        for x in 0..w {
            let i = y * w + x;
            out.extend(overlay_pixel(f64::from(image[i]), cam.upsampled[i]).map(quantize));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub sample_id: usize,
    pub label: usize,
    pub predicted: usize,
    pub confidence: f64,
    pub cam: CamMap,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    pub class: usize,
    pub correct: Vec<CaseRecord>,
    pub wrong: Vec<CaseRecord>,
    /// Set when fewer cases existed than were requested.
    pub note: Option<String>,
}

/// Picks up to `n_correct` correctly classified `class` samples with the
/// highest confidence and up to `n_wrong` `class` samples predicted as
/// another class, most confident errors first. Ties keep dataset order.
/// Heatmaps target the predicted class.
pub fn cam_case_gallery(
    model: &Model,
    data: &LabeledImageSet,
    class: usize,
    n_correct: usize,
    n_wrong: usize,
) -> Result<Gallery> {
    if class >= model.spec.classes() {
        return Err(Error::invalid(format!("class {class} outside the model's classes")));
    }
    let inf = model.infer(&data.pixels, data.len())?;
    let preds = inf.predictions();
    let mut correct = Vec::new();
    let mut wrong = Vec::new();
    for (i, &pred) in preds.iter().enumerate() {
        if data.labels[i] != class {
            continue;
        }
        let conf = inf.prob_row(i)[pred];
        if pred == class {
            correct.push((i, conf));
        } else {
            wrong.push((i, conf));
        }
    }
    let by_confidence = |a: &(usize, f64), b: &(usize, f64)| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0));
    correct.sort_by(by_confidence);
    wrong.sort_by(by_confidence);

    let mut notes = Vec::new();
    if correct.len() < n_correct {
        notes.push(format!("{} of {n_correct} correct cases available", correct.len()));
    }
    if wrong.len() < n_wrong {
        notes.push(format!("{} of {n_wrong} misclassified cases available", wrong.len()));
    }
    let records = |picked: &[(usize, f64)], n: usize| -> Result<Vec<CaseRecord>> {
        picked
            .iter()
            .take(n)
            .map(|&(i, confidence)| {
                let cam = grad_cam(model, data.image(i), preds[i])?;
                Ok(CaseRecord {
                    sample_id: i,
                    label: data.labels[i],
                    predicted: preds[i],
                    confidence,
                    cam,
                })
            })
            .collect()
    };
    Ok(Gallery {
        class,
        correct: records(&correct, n_correct)?,
        wrong: records(&wrong, n_wrong)?,
        note: (!notes.is_empty()).then(|| notes.join("; ")),
    })
}

fn raw_csv(cam: &CamMap) -> String {
    let (h, w) = cam.raw_hw;
    let mut out = String::new();
    for y in 0..h {
        let row: Vec<String> = cam.raw[y * w..(y + 1) * w].iter().map(f64::to_string).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Writes overlays, raw maps and `index.csv` into `dir`; returns the
/// written paths.
pub fn write_gallery(gallery: &Gallery, data: &LabeledImageSet, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut index = format!("{GALLERY_INDEX_HEADER}\n");
    for (kind, cases) in [("correct", &gallery.correct), ("wrong", &gallery.wrong)] {
        for (rank, case) in cases.iter().enumerate() {
            let stem = format!("{kind}_{rank}_sample{}", case.sample_id);
            let ppm = dir.join(format!("{stem}.ppm"));
            fs::write(&ppm, side_by_side_ppm(data.image(case.sample_id), &case.cam))?;
            let raw = dir.join(format!("{stem}_raw.csv"));
            fs::write(&raw, raw_csv(&case.cam))?;
            let name = |c: usize| data.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
            let _ = writeln!(
                index,
                "{kind},{},{},{},{},{},{stem}.ppm",
                case.sample_id,
                name(case.label),
                name(case.predicted),
                case.confidence,
                name(case.cam.target)
            );
            written.push(ppm);
            written.push(raw);
        }
    }
    if let Some(note) = &gallery.note {
        let _ = writeln!(index, "# {note}");
    }
    let path = dir.join("index.csv");
    fs::write(&path, index)?;
    written.push(path);
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jet_endpoints() {
        assert_eq!(jet(0.0), [0.0, 0.0, 0.5]);
        assert_eq!(jet(0.5), [0.5, 1.0, 0.5]);
        assert_eq!(jet(1.0), [0.5, 0.0, 0.0]);
    }

    #[test]
    fn ppm_reconstructs_overlay() {
        let image = [0.0f32, 0.25, 0.5, 1.0];
        let cam = CamMap {
            raw: vec![0.0, 0.5, 1.0, 0.2],
            raw_hw: (2, 2),
            upsampled: vec![0.0, 0.5, 1.0, 0.2],
            input_hw: (2, 2),
            alphas: vec![1.0],
            activations: vec![0.0, 0.5, 1.0, 0.2],
            target: 0,
            predicted: 0,
            confidence: 1.0,
        };
        let ppm = side_by_side_ppm(&image, &cam);
        let header = b"P6\n4 2\n255\n";
        assert_eq!(&ppm[..header.len()], header);
        let body = &ppm[header.len()..];
        assert_eq!(body.len(), 4 * 2 * 3);
        for y in 0..2 {
            for x in 0..2 {
                let i = y * 2 + x;
                let left = &body[(y * 4 + x) * 3..][..3];
                let right = &body[(y * 4 + 2 + x) * 3..][..3];
                assert!(left.iter().all(|&v| v == (f64::from(image[i]) * 255.0).round() as u8));
                let expect = overlay_pixel(f64::from(image[i]), cam.upsampled[i]);
                for c in 0..3 {
                    assert!((f64::from(right[c]) / 255.0 - expect[c]).abs() <= 0.5 / 255.0 + 1e-12);
                }
            }
        }
    }
}
