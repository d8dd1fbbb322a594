//! Global average + global max pooling fusion.

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GagmOutput {
    /// Per-channel spatial mean.
    pub v_avg: Vec<f64>,
    /// Per-channel spatial max.
    pub u_max: Vec<f64>,
    /// `[v_avg ; u_max]`, length `2C`.
    pub u_fused: Vec<f64>,
}

/// Pools a single `H×W×C` feature map.
pub fn gagm(feature_map: &Tensor) -> Result<GagmOutput> {
    if feature_map.rank() != 3 {
        return Err(Error::shape("gagm", feature_map.shape(), &[0, 0, 0]));
    }
    let mut g = Graph::new();
    let x = g.constant(feature_map.clone());
    let (avg, max, fused) = gagm_graph(&mut g, x)?;
    Ok(GagmOutput {
        v_avg: g.value(avg).data().to_vec(),
        u_max: g.value(max).data().to_vec(),
        u_fused: g.value(fused).data().to_vec(),
    })
}

/// Graph form for `H×W×C` or batched `N×H×W×C` maps; returns
/// `(v_avg, u_max, u_fused)`.
pub fn gagm_graph(g: &mut Graph, x: Var) -> Result<(Var, Var, Var)> {
    let avg = g.global_avg_pool(x)?;
    let max = g.global_max_pool(x)?;
    let fused = g.concat(avg, max)?;
    Ok((avg, max, fused))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_map_pools_to_constant() {
        let t = Tensor::full(&[4, 5, 3], 0.7);
        let out = gagm(&t).unwrap();
        assert_eq!(out.u_fused.len(), 6);
        assert!(out.u_fused.iter().all(|v| (v - 0.7).abs() < 1e-12));
        assert_eq!(out.u_max, vec![0.7; 3]);
    }

    #[test]
    fn two_by_two_enumeration() {
        let t = Tensor::new(vec![2, 2, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = gagm(&t).unwrap();
        assert_eq!(out.v_avg, [2.5]);
        assert_eq!(out.u_max, [4.0]);
        assert_eq!(out.u_fused, [2.5, 4.0]);
    }

    #[test]
    fn fused_width_doubles_channels() {
        let t = Tensor::full(&[3, 3, 3], 1.0);
        assert_eq!(gagm(&t).unwrap().u_fused.len(), 6);
    }

    #[test]
    fn rejects_wrong_rank() {
        assert!(gagm(&Tensor::zeros(&[2, 2])).is_err());
        assert!(gagm(&Tensor::zeros(&[1, 2, 2, 1])).is_err());
    }
}
