use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::error::Result;

/// Central-difference step.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative errors, so near-zero gradients are
/// compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct TensorCheck {
    /// Position of the tensor in the input list.
    pub index: usize,
    pub max_rel_error: f64,
    pub finite: bool,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| if t.finite { t.max_rel_error } else { f64::INFINITY })
            .fold(0.0, f64::max)
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.tensors.iter().all(|t| t.finite && t.max_rel_error < tolerance)
    }
}

/// Uniform `[-2, 2]` tensors of the given shapes, all requiring grad.
pub fn random_inputs(shapes: &[&[usize]], seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
            Tensor::new(s.to_vec(), data).unwrap().with_grad()
        })
        .collect()
}

fn evaluate<F>(inputs: &[Tensor], f: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    Ok(g.value(loss).item())
}

/// Compares analytic gradients of `f` against central finite differences
/// for every input with `requires_grad` set.
pub fn grad_check<F>(inputs: &[Tensor], f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &vars)?;
    g.backward(loss)?;
    let loss_finite = g.value(loss).item().is_finite();

    let mut tensors = Vec::new();
    let mut probe = inputs.to_vec();
    for (index, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let analytic = g
            .grad(vars[index])
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; input.numel()]);
        let mut finite = loss_finite && analytic.iter().all(|v| v.is_finite());
        let mut worst: f64 = 0.0;
        for (j, &a) in analytic.iter().enumerate() {
            let orig = input.data()[j];
            probe[index].data_mut()[j] = orig + FD_STEP;
            let up = evaluate(&probe, &f)?;
            probe[index].data_mut()[j] = orig - FD_STEP;
            let down = evaluate(&probe, &f)?;
            probe[index].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            if !numeric.is_finite() {
                finite = false;
                continue;
            }
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            worst = worst.max((a - numeric).abs() / denom);
        }
        tensors.push(TensorCheck {
            index,
            max_rel_error: worst,
            finite,
        });
    }
    Ok(GradCheckReport { tensors })
}
