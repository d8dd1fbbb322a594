//! Cross-entropy, the feature smoothing loss and their weighted sum.
//!
//! The feature smoothing loss pulls each feature vector towards the mean of
//! its class within the current mini-batch:
//!
//! ```text
//! L_fs = 1/P Σ_c 1/N_c Σ_{i∈c} ||f_i − mean_c||²
//! ```
//!
//! where `P` is the number of classes present in the batch. No persistent
//! class centers are kept; the centroids are a differentiable function of
//! the batch itself.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Default weight of the feature smoothing term.
pub const DEFAULT_LAMBDA_FS: f64 = 0.1;
const ROW_SUM_TOLERANCE: f64 = 1e-9;

/// A mini-batch of feature vectors with their labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FslBatch {
    /// `N×D` feature matrix.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub lambda_fs: f64,
}

impl FslBatch {
    pub fn new(features: Tensor, labels: Vec<usize>, lambda_fs: f64) -> Result<Self> {
        let s = features.shape();
        if s.len() != 2 || s[0] != labels.len() {
            return Err(Error::shape("fsl batch", s, &[labels.len()]));
        }
        check_lambda(lambda_fs)?;
        Ok(FslBatch {
            features,
            labels,
            lambda_fs,
        })
    }

    pub fn loss(&self) -> Result<f64> {
        feature_smoothing_loss(&self.features, &self.labels)
    }
}

fn check_lambda(lambda_fs: f64) -> Result<()> {
    if !(lambda_fs >= 0.0 && lambda_fs.is_finite()) {
        return Err(Error::invalid(format!(
            "lambda_fs must be a nonnegative finite number, got {lambda_fs}"
        )));
    }
    Ok(())
}

fn check_probs(probs: &Tensor) -> Result<()> {
    let s = probs.shape();
    if s.len() != 2 {
        return Err(Error::shape("cross_entropy", s, &[0, 0]));
    }
    for (i, row) in probs.data().chunks_exact(s[1]).enumerate() {
        let total: f64 = row.iter().sum();
        if (total - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "probability row {i} sums to {total}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Mean of `-ln p[i, label_i]` over the batch, with probabilities clamped
/// to `[1e-12, 1]`.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    check_probs(probs)?;
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let loss = g.cross_entropy(p, labels)?;
    Ok(g.value(loss).item())
}

pub fn feature_smoothing_loss(features: &Tensor, labels: &[usize]) -> Result<f64> {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let loss = g.feature_smoothing(f, labels)?;
    Ok(g.value(loss).item())
}

/// `cross_entropy + lambda_fs * feature_smoothing_loss`.
pub fn total_loss(probs: &Tensor, labels: &[usize], features: &Tensor, lambda_fs: f64) -> Result<f64> {
    check_probs(probs)?;
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let f = g.constant(features.clone());
    let loss = total_loss_graph(&mut g, p, f, labels, lambda_fs)?;
    Ok(g.value(loss).item())
}

/// Graph form of [`total_loss`]. With `lambda_fs == 0` the smoothing term
/// is not recorded at all, so the result is exactly the cross-entropy node.
pub fn total_loss_graph(g: &mut Graph, probs: Var, features: Var, labels: &[usize], lambda_fs: f64) -> Result<Var> {
    check_lambda(lambda_fs)?;
    let ce = g.cross_entropy(probs, labels)?;
    if lambda_fs == 0.0 {
        return Ok(ce);
    }
    let fs = g.feature_smoothing(features, labels)?;
    let weighted = g.scale(fs, lambda_fs);
    g.add(ce, weighted)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn uniform_probs_give_ln3() {
        let p = t(&[2, 3], &[1.0 / 3.0; 6]);
        let ce = cross_entropy(&p, &[0, 2]).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_is_zero() {
        let p = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(cross_entropy(&p, &[0, 2]).unwrap(), 0.0);
    }

    #[test]
    fn half_probability_gives_ln2() {
        let p = t(&[1, 3], &[0.5, 0.25, 0.25]);
        assert!((cross_entropy(&p, &[0]).unwrap() - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn zero_probability_is_clamped() {
        let p = t(&[1, 2], &[1.0, 0.0]);
        let ce = cross_entropy(&p, &[1]).unwrap();
        assert!((ce - (-(1e-12f64).ln())).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = t(&[1, 3], &[0.5, 0.25, 0.25]);
        assert!(cross_entropy(&p, &[3]).is_err());
        let unnormalized = t(&[1, 2], &[0.5, 0.6]);
        assert!(cross_entropy(&unnormalized, &[0]).is_err());
        let f = t(&[1, 2], &[0.0, 0.0]);
        assert!(total_loss(&p, &[0], &f, -0.1).is_err());
    }

    #[test]
    fn fsl_two_points_one_class() {
        let f = t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]);
        assert_eq!(feature_smoothing_loss(&f, &[1, 1]).unwrap(), 1.0);
    }

    #[test]
    fn fsl_zero_cases() {
        let identical = t(&[4, 2], &[1.0, 2.0, 1.0, 2.0, -3.0, 0.5, -3.0, 0.5]);
        assert_eq!(feature_smoothing_loss(&identical, &[0, 0, 2, 2]).unwrap(), 0.0);
        let singletons = t(&[3, 2], &[1.0, 2.0, 5.0, -1.0, 0.0, 9.0]);
        assert_eq!(feature_smoothing_loss(&singletons, &[0, 1, 2]).unwrap(), 0.0);
    }

    #[test]
    fn fsl_divides_by_present_classes() {
        // Class 0 contributes 1.0, class 2 contributes 0; class 1 is absent.
        let f = t(&[3, 2], &[0.0, 0.0, 2.0, 0.0, 7.0, 7.0]);
        assert_eq!(feature_smoothing_loss(&f, &[0, 0, 2]).unwrap(), 0.5);
    }

    #[test]
    fn total_loss_combines_terms() {
        let p = t(&[2, 3], &[1.0 / 3.0; 6]);
        let f = t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]);
        let labels = [1, 1];
        let ce = cross_entropy(&p, &labels).unwrap();
        assert_eq!(total_loss(&p, &labels, &f, 0.0).unwrap(), ce);
        let combined = total_loss(&p, &labels, &f, 1.0).unwrap();
        assert!((combined - (3f64.ln() + 1.0)).abs() < 1e-12);
        assert!((combined - 2.0986).abs() < 1e-4);
    }

    #[test]
    fn batch_validation() {
        assert!(FslBatch::new(t(&[2, 2], &[0.0; 4]), vec![0], 0.1).is_err());
        let b = FslBatch::new(t(&[2, 2], &[0.0, 0.0, 2.0, 0.0]), vec![0, 0], 0.1).unwrap();
        assert_eq!(b.loss().unwrap(), 1.0);
    }
}
