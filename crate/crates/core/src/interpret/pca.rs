//! Principal component analysis through a cyclic Jacobi eigensolver on the
//! sample covariance matrix.

use std::fmt::Write as _;

use crate::error::{Error, Result};

const JACOBI_TOLERANCE: f64 = 1e-12;
const MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric `n×n` row-major matrix. Returns
/// eigenvalues in descending order and the matching eigenvectors as columns
/// of a row-major `n×n` matrix.
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if matrix.len() != n * n || n == 0 {
        return Err(Error::shape("symmetric_eigen", &[n, n], &[matrix.len()]));
    }
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    for _ in 0..MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|p| (p + 1..n).map(move |q| (p, q)))
            .map(|(p, q)| a[p * n + q] * a[p * n + q])
            .sum::<f64>()
            .sqrt();
        if off <= JACOBI_TOLERANCE * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for row in 0..n {
            vectors[row * n + col] = v[row * n + src];
        }
    }
    Ok((values, vectors))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcaResult {
    pub n: usize,
    pub d: usize,
    pub k: usize,
    /// `D×K` row-major; column `j` is the `j`-th principal axis.
    pub components: Vec<f64>,
    /// All `D` covariance eigenvalues, descending, clamped at zero.
    pub eigenvalues: Vec<f64>,
    /// Eigenvalue share of the total variance, for all `D` components.
    pub ratios: Vec<f64>,
    /// Centered data projected on the components, `N×K` row-major.
    pub projections: Vec<f64>,
    pub layer: String,
}

impl PcaResult {
    /// Running sum of the first `k` ratios, capped at 1.
    pub fn cumulative(&self, k: usize) -> Vec<f64> {
        let mut acc = 0.0;
        self.ratios
            .iter()
            .take(k)
            .map(|r| {
                acc += r;
                acc.min(1.0)
            })
            .collect()
    }

    pub fn component(&self, j: usize) -> Vec<f64> {
        (0..self.d).map(|r| self.components[r * self.k + j]).collect()
    }

    /// `sample_id,pc1..pcK,label,predicted`.
    pub fn projections_csv(&self, labels: &[String], predicted: &[String]) -> String {
        let pcs: Vec<String> = (1..=self.k).map(|j| format!("pc{j}")).collect();
        let mut out = format!("sample_id,{},label,predicted\n", pcs.join(","));
        for i in 0..self.n {
            let row: Vec<String> = self.projections[i * self.k..(i + 1) * self.k]
                .iter()
                .map(f64::to_string)
                .collect();
            let _ = writeln!(
                out,
                "{i},{},{},{}",
                row.join(","),
                labels.get(i).map_or("", String::as_str),
                predicted.get(i).map_or("", String::as_str)
            );
        }
        out
    }

    /// `component_index,ratio,cumulative` for the first `K` components.
    pub fn variance_csv(&self) -> String {
        let mut out = String::from("component_index,ratio,cumulative\n");
        for (j, cum) in self.cumulative(self.k).into_iter().enumerate() {
            let _ = writeln!(out, "{},{},{cum}", j + 1, self.ratios[j]);
        }
        out
    }
}

/// PCA of `N×D` row-major `features` keeping `k` components. Covariance uses
/// the `N−1` normalization. Each axis is signed so that its largest-magnitude
/// entry is positive.
pub fn pca(features: &[f64], n: usize, d: usize, k: usize) -> Result<PcaResult> {
    if features.len() != n * d || d == 0 {
        return Err(Error::shape("pca", &[n, d], &[features.len()]));
    }
    if n < 2 {
        return Err(Error::invalid("pca needs at least two samples"));
    }
    if k == 0 || k > d.min(n - 1) {
        return Err(Error::invalid(format!(
            "component count {k} outside 1..={}",
            d.min(n - 1)
        )));
    }
    if let Some(v) = features.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("feature value {v}")));
    }
    let mut mean = vec![0.0; d];
    for row in features.chunks_exact(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<f64> = features
        .chunks_exact(d)
        .flat_map(|row| row.iter().zip(&mean).map(|(v, m)| v - m))
        .collect();
    let mut cov = vec![0.0; d * d];
    for row in centered.chunks_exact(d) {
        for i in 0..d {
            let ri = row[i];
            if ri == 0.0 {
                continue;
            }
            for j in i..d {
                cov[i * d + j] += ri * row[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let c = cov[i * d + j] / (n - 1) as f64;
            cov[i * d + j] = c;
            cov[j * d + i] = c;
        }
    }
    let total: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    if total <= 0.0 {
        return Err(Error::invalid("features have zero total variance"));
    }
    let (values, vectors) = symmetric_eigen(&cov, d)?;
    let eigenvalues: Vec<f64> = values.into_iter().map(|v| v.max(0.0)).collect();
    let ratios = eigenvalues.iter().map(|v| v / total).collect();

    let mut components = vec![0.0; d * k];
    for j in 0..k {
        let col: Vec<f64> = (0..d).map(|r| vectors[r * d + j]).collect();
        let lead = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, v)| if v.abs() > col[best].abs() { i } else { best });
        let sign = if col[lead] < 0.0 { -1.0 } else { 1.0 };
        for r in 0..d {
            components[r * k + j] = sign * col[r];
        }
    }
    let mut projections = vec![0.0; n * k];
    for (i, row) in centered.chunks_exact(d).enumerate() {
        for j in 0..k {
            projections[i * k + j] = (0..d).map(|r| row[r] * components[r * k + j]).sum();
        }
    }
    Ok(PcaResult {
        n,
        d,
        k,
        components,
        eigenvalues,
        ratios,
        projections,
        layer: String::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_matrix_is_already_solved() {
        let (vals, vecs) = symmetric_eigen(&[1.0, 0.0, 0.0, 3.0], 2).unwrap();
        assert_eq!(vals, [3.0, 1.0]);
        assert_eq!(vecs, [0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn two_by_two_closed_form() {
        let (vals, vecs) = symmetric_eigen(&[2.0, 1.0, 1.0, 2.0], 2).unwrap();
        assert!((vals[0] - 3.0).abs() < 1e-14 && (vals[1] - 1.0).abs() < 1e-14);
        let h = 0.5f64.sqrt();
        assert!((vecs[0].abs() - h).abs() < 1e-14 && (vecs[2].abs() - h).abs() < 1e-14);
    }

    #[test]
    fn axis_aligned_variances() {
        // Columns with variances 4, 1, 0 under N−1 normalization.
        let xs = [2.0, -2.0, 2.0, -2.0];
        let ys = [1.0, 1.0, -1.0, -1.0];
        let mut f = Vec::new();
        for i in 0..4 {
            let scale = (3.0f64 / 4.0).sqrt();
            f.extend([xs[i] * scale, ys[i] * scale, 5.0]);
        }
        let r = pca(&f, 4, 3, 2).unwrap();
        assert!((r.ratios[0] - 0.8).abs() < 1e-12);
        assert!((r.ratios[1] - 0.2).abs() < 1e-12);
        assert_eq!(r.ratios[2], 0.0);
        assert_eq!(r.component(0), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn rejects_degenerate_inputs() {
        assert!(pca(&[1.0, 2.0, 1.0, 2.0], 2, 2, 1).is_err());
        assert!(pca(&[1.0, 2.0], 1, 2, 1).is_err());
        assert!(pca(&[1.0, 2.0, 3.0, 4.0], 2, 2, 2).is_err());
        assert!(pca(&[1.0, 2.0, 3.0], 2, 2, 1).is_err());
    }

    #[test]
    fn csv_layouts() {
        let f = [0.0, 1.0, 2.0, 3.0, 5.0, 4.0, 1.0, 0.0];
        let mut r = pca(&f, 4, 2, 2).unwrap();
        r.layer = "head".into();
        let names: Vec<String> = ["a", "b", "a", "b"].map(String::from).to_vec();
        let p = r.projections_csv(&names, &names);
        assert!(p.starts_with("sample_id,pc1,pc2,label,predicted\n0,"));
        assert_eq!(p.lines().count(), 5);
        let v = r.variance_csv();
        let last: f64 = v.lines().last().unwrap().rsplit(',').next().unwrap().parse().unwrap();
        assert!(last <= 1.0 && (last - 1.0).abs() < 1e-12);
    }
}
