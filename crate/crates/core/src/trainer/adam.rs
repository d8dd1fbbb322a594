use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates, one pair per parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite or shapes disagree.
pub fn adam_step(params: &mut [&mut [f64]], grads: &[&[f64]], state: &mut AdamState, lr: f64) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape(
            "adam_step",
            &[params.len()],
            &[grads.len(), state.m.len()],
        ));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.len() != g.len() || p.len() != state.m[i].len() {
            return Err(Error::shape("adam_step", &[p.len()], &[g.len()]));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter {i}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        for j in 0..p.len() {
            m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
            v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + EPSILON);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = vec![1.0, -2.0];
        let mut st = AdamState::new(&[2]);
        adam_step(&mut [&mut p], &[&[0.0, 0.0]], &mut st, 1e-3).unwrap();
        assert_eq!(p, [1.0, -2.0]);
    }

    #[test]
    fn first_step_closed_form() {
        // After bias correction m̂ = g and v̂ = g², so the step is lr·g/(|g|+ε).
        for g in [0.5, -3.0, 1e-6] {
            let mut p = vec![0.0];
            let mut st = AdamState::new(&[1]);
            adam_step(&mut [&mut p], &[&[g]], &mut st, 1e-4).unwrap();
            let expected = -1e-4 * g / (g.abs() + EPSILON);
            assert!((p[0] - expected).abs() <= 1e-18, "{g}: {} vs {expected}", p[0]);
        }
    }

    #[test]
    fn rejects_non_finite_without_mutation() {
        let mut p = vec![1.0, 1.0];
        let mut st = AdamState::new(&[2]);
        let err = adam_step(&mut [&mut p], &[&[0.1, f64::NAN]], &mut st, 1e-3);
        assert!(matches!(err, Err(Error::NonFinite(_))));
        assert_eq!(p, [1.0, 1.0]);
        assert_eq!(st.step, 0);
    }

    #[test]
    fn deterministic_trace() {
        let run = || {
            let mut p = vec![0.3, -0.7, 1.1];
            let mut st = AdamState::new(&[3]);
            let mut trace = Vec::new();
            for k in 0..50 {
                let g: Vec<f64> = p.iter().map(|x| 2.0 * x + (k as f64 * 0.1).sin()).collect();
                adam_step(&mut [&mut p], &[&g], &mut st, 1e-2).unwrap();
                trace.extend(p.iter().map(|v| v.to_bits()));
            }
            trace
        };
        assert_eq!(run(), run());
    }
}
