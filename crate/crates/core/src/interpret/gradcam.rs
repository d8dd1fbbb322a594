use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layers::{images_to_tensor, Model};
use crate::tensor::Graph;

/// Grad-CAM heatmap for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct CamMap {
    /// `ReLU(Σ_k α_k A_k)` at cam-layer resolution, row-major `h×w`.
    pub raw: Vec<f64>,
    pub raw_hw: (usize, usize),
    /// Bilinear upsample of `raw` to the input size, divided by its
    /// maximum (all zeros if `raw` is).
    pub upsampled: Vec<f64>,
    pub input_hw: (usize, usize),
    /// Channel weights: spatial means of the target-logit gradient.
    pub alphas: Vec<f64>,
    /// Cam-layer activations `A`, `h×w×K`.
    pub activations: Vec<f64>,
    pub target: usize,
    pub predicted: usize,
    /// Softmax probability of `predicted`.
    pub confidence: f64,
}

/// Computes Grad-CAM of the pre-softmax logit for `target` at the model's
/// cam layer. `image` is one `H×W` single-channel image.
pub fn grad_cam(model: &Model, image: &[f32], target: usize) -> Result<CamMap> {
    let (h, w) = model.spec.input_hw;
    let classes = model.spec.classes();
    if target >= classes {
        return Err(Error::invalid(format!("target class {target} outside 0..{classes}")));
    }
    if image.len() != h * w {
        return Err(Error::shape("grad_cam", &[h, w], &[image.len()]));
    }
    let mut g = Graph::new();
    let x = g.constant(images_to_tensor(image, 1, h, w)?);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = model.forward(&mut g, x, false, true, &mut rng)?;
    let mask = (0..classes).map(|c| if c == target { 1.0 } else { 0.0 }).collect();
    let picked = g.mask_apply(fwd.logits, mask)?;
    let score = g.sum(picked);
    g.backward(score)?;

    let shape = g.shape(fwd.cam).to_vec();
    let (ch, cw, k) = (shape[1], shape[2], shape[3]);
    let activations = g.value(fwd.cam).data().to_vec();
    let grad = g
        .grad(fwd.cam)
        .ok_or_else(|| Error::invalid("cam layer received no gradient"))?;
    let area = (ch * cw) as f64;
    let mut alphas = vec![0.0; k];
    for px in grad.chunks_exact(k) {
        for (a, v) in alphas.iter_mut().zip(px) {
            *a += v;
        }
    }
    alphas.iter_mut().for_each(|a| *a /= area);
    let raw: Vec<f64> = activations
        .chunks_exact(k)
        .map(|px| px.iter().zip(&alphas).map(|(a, al)| a * al).sum::<f64>().max(0.0))
        .collect();

    let mut upsampled = bilinear_resize(&raw, (ch, cw), (h, w));
    let peak = upsampled.iter().copied().fold(0.0, f64::max);
    if peak > 0.0 {
        upsampled.iter_mut().for_each(|v| *v /= peak);
    } else {
        upsampled.iter_mut().for_each(|v| *v = 0.0);
    }

    let probs = g.value(fwd.probs).data();
    let predicted = crate::evalkit::argmax_rows(probs, classes)[0];
    Ok(CamMap {
        raw,
        raw_hw: (ch, cw),
        upsampled,
        input_hw: (h, w),
        alphas,
        activations,
        target,
        predicted,
        confidence: probs[predicted],
    })
}

/// Bilinear resampling with half-pixel centers and edge clamping.
pub fn bilinear_resize(src: &[f64], from: (usize, usize), to: (usize, usize)) -> Vec<f64> {
    let (sh, sw) = from;
    let (dh, dw) = to;
    if from == to {
        return src.to_vec();
    }
    let coord = |d: usize, dn: usize, sn: usize| {
        let s = ((d as f64 + 0.5) * sn as f64 / dn as f64 - 0.5).clamp(0.0, (sn - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(sn - 1);
        (i0, i1, s - i0 as f64)
    };
    let mut out = Vec::with_capacity(dh * dw);
    for y in 0..dh {
        let (y0, y1, fy) = coord(y, dh, sh);
        for x in 0..dw {
            let (x0, x1, fx) = coord(x, dw, sw);
            let top = src[y0 * sw + x0] * (1.0 - fx) + src[y0 * sw + x1] * fx;
            let bottom = src[y1 * sw + x0] * (1.0 - fx) + src[y1 * sw + x1] * fx;
            out.push(top * (1.0 - fy) + bottom * fy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resize_identity_and_constant() {
        let src = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(bilinear_resize(&src, (2, 2), (2, 2)), src);
        let up = bilinear_resize(&[0.5; 6], (2, 3), (5, 7));
        assert_eq!(up.len(), 35);
        assert!(up.iter().all(|v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn resize_stays_within_source_range() {
        let src = [0.0, 1.0, 0.25, 0.75];
        let up = bilinear_resize(&src, (2, 2), (8, 8));
        assert!(up.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(up[0], 0.0);
        assert_eq!(up[7], 1.0);
    }
}
