//! Squeeze-and-excitation gating applied to a pooled vector.

use rand::Rng;

use super::he_uniform;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_REDUCTION_RATIO: usize = 16;
const MIN_COMPRESSED: usize = 8;

/// Bottleneck width for a vector of `width` features.
pub fn compressed_width(width: usize, reduction_ratio: usize) -> usize {
    MIN_COMPRESSED.max(width / reduction_ratio)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeVectorParams {
    /// `width × compressed`
    pub w1: Tensor,
    pub b1: Tensor,
    /// `compressed × width`
    pub w2: Tensor,
    pub b2: Tensor,
    pub reduction_ratio: usize,
}

impl SeVectorParams {
    pub fn zeros(width: usize, reduction_ratio: usize) -> Result<Self> {
        check_ratio(reduction_ratio)?;
        let k = compressed_width(width, reduction_ratio);
        Ok(SeVectorParams {
            w1: Tensor::zeros(&[width, k]),
            b1: Tensor::zeros(&[k]),
            w2: Tensor::zeros(&[k, width]),
            b2: Tensor::zeros(&[width]),
            reduction_ratio,
        })
    }

    pub fn random<R: Rng>(width: usize, reduction_ratio: usize, rng: &mut R) -> Result<Self> {
        check_ratio(reduction_ratio)?;
        let k = compressed_width(width, reduction_ratio);
        Ok(SeVectorParams {
            w1: he_uniform(&[width, k], width, rng),
            b1: Tensor::zeros(&[k]),
            w2: he_uniform(&[k, width], k, rng),
            b2: Tensor::zeros(&[width]),
            reduction_ratio,
        })
    }

    pub fn width(&self) -> usize {
        self.b2.numel()
    }

    pub fn compressed(&self) -> usize {
        self.b1.numel()
    }
}

fn check_ratio(r: usize) -> Result<()> {
    if r == 0 {
        return Err(Error::invalid("reduction_ratio must be positive"));
    }
    Ok(())
}

/// Gates and output for one fused vector: `(w, u_fused ⊙ w)`.
pub fn sevector(u_fused: &[f64], params: &SeVectorParams) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut g = Graph::new();
    let u = g.constant(Tensor::new(vec![1, u_fused.len()], u_fused.to_vec())?);
    let w1 = g.constant(params.w1.clone());
    let b1 = g.constant(params.b1.clone());
    let w2 = g.constant(params.w2.clone());
    let b2 = g.constant(params.b2.clone());
    let (gate, out) = sevector_graph(&mut g, u, [w1, b1, w2, b2])?;
    Ok((g.value(gate).data().to_vec(), g.value(out).data().to_vec()))
}

/// Graph form over an `N×width` batch. `p` is `[w1, b1, w2, b2]`.
pub fn sevector_graph(g: &mut Graph, u: Var, p: [Var; 4]) -> Result<(Var, Var)> {
    let [w1, b1, w2, b2] = p;
    let width = *g.shape(u).last().unwrap_or(&0);
    if g.shape(w1).first() != Some(&width) || g.shape(w2).get(1) != Some(&width) {
        return Err(Error::shape("sevector", g.shape(u), g.shape(w1)));
    }
    let squeeze = g.dense(u, w1, b1)?;
    let squeeze = g.relu(squeeze);
    let excite = g.dense(squeeze, w2, b2)?;
    let gate = g.sigmoid(excite);
    let out = g.mul(u, gate)?;
    Ok((gate, out))
}
