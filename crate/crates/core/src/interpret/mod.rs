//! Grad-CAM heatmaps and PCA of learned feature layers.

mod gallery;
mod gradcam;
mod pca;

pub use gallery::{
    cam_case_gallery, jet, overlay_pixel, side_by_side_ppm, write_gallery, CaseRecord, Gallery, GALLERY_INDEX_HEADER,
};
pub use gradcam::{bilinear_resize, grad_cam, CamMap};
pub use pca::{pca, symmetric_eigen, PcaResult};

use std::fmt::Write as _;

use crate::datagen::LabeledImageSet;
use crate::error::{Error, Result};
use crate::layers::{FeatureTap, Model};

/// Components compared when ranking candidate layers.
pub const SELECTION_COMPONENTS: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCandidate {
    pub name: String,
    /// Cumulative explained variance of the leading components.
    pub cumulative: Vec<f64>,
}

impl LayerCandidate {
    pub fn score(&self) -> f64 {
        self.cumulative.last().copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerSelection {
    pub selected: usize,
    pub candidates: Vec<LayerCandidate>,
}

impl LayerSelection {
    pub fn selected_name(&self) -> &str {
        &self.candidates[self.selected].name
    }

    /// `layer,component_index,cumulative,selected`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,component_index,cumulative,selected\n");
        for (i, c) in self.candidates.iter().enumerate() {
            for (j, v) in c.cumulative.iter().enumerate() {
                let _ = writeln!(out, "{},{},{v},{}", c.name, j + 1, i == self.selected);
            }
        }
        out
    }
}

/// Ranks `(name, N×D features, D)` candidates by the cumulative variance of
/// their first three components; the earliest candidate wins ties. A
/// candidate without variance scores zero.
pub fn select_from_features(candidates: &[(&str, &[f64], usize)], n: usize) -> Result<LayerSelection> {
    if candidates.is_empty() {
        return Err(Error::invalid("no candidate feature layers"));
    }
    let mut ranked = Vec::with_capacity(candidates.len());
    for &(name, features, d) in candidates {
        let k = SELECTION_COMPONENTS.min(d).min(n.saturating_sub(1)).max(1);
        let cumulative = match pca(features, n, d, k) {
            Ok(r) => r.cumulative(k),
            Err(Error::InvalidArgument(msg)) if msg.contains("zero total variance") => vec![0.0; k],
            Err(e) => return Err(e),
        };
        ranked.push(LayerCandidate {
            name: name.to_owned(),
            cumulative,
        });
    }
    let mut selected = 0;
    for (i, c) in ranked.iter().enumerate() {
        if c.score() > ranked[selected].score() {
            selected = i;
        }
    }
    Ok(LayerSelection {
        selected,
        candidates: ranked,
    })
}

/// Runs the model on `data` and ranks its feature taps in network order.
pub fn select_feature_layer(model: &Model, data: &LabeledImageSet) -> Result<(FeatureTap, LayerSelection)> {
    let inf = model.infer(&data.pixels, data.len())?;
    let taps: Vec<(FeatureTap, usize, &[f64])> = inf.taps.iter().map(|(t, d, v)| (*t, *d, v.as_slice())).collect();
    let named: Vec<(&str, &[f64], usize)> = taps.iter().map(|(t, d, v)| (t.name(), *v, *d)).collect();
    let selection = select_from_features(&named, data.len())?;
    Ok((taps[selection.selected].0, selection))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dominant_direction_beats_isotropic() {
        let n = 40;
        let d = 6;
        let mut iso = Vec::new();
        let mut dom = Vec::new();
        for i in 0..n {
            for j in 0..d {
                // Orthogonal sign patterns give equal variance on every axis.
                let s = if (i >> (j % 5)) & 1 == 0 { 1.0 } else { -1.0 };
                iso.push(s);
                dom.push(if j == 0 { 10.0 * s } else { 0.1 * s });
            }
        }
        let sel = select_from_features(&[("iso", &iso, d), ("dom", &dom, d)], n).unwrap();
        assert_eq!(sel.selected_name(), "dom");
        assert!(sel.candidates[1].score() > 0.99);
    }

    #[test]
    fn ties_keep_first_and_single_candidate_wins() {
        let f: Vec<f64> = (0..20).map(|v| (v * v % 7) as f64).collect();
        let sel = select_from_features(&[("a", &f, 2), ("b", &f, 2)], 10).unwrap();
        assert_eq!(sel.selected, 0);
        let one = select_from_features(&[("only", &f, 4)], 5).unwrap();
        assert_eq!(one.selected_name(), "only");
        assert!(one.to_csv().contains("only,1,"));
    }
}
