use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{NumError, Result};
use crate::tensor::Tensor;

/// Projection of a data matrix onto its two leading principal axes.
#[derive(Clone, Debug)]
pub struct Pca2 {
    /// `n × 2` coordinates of the mean-centred rows.
    pub projections: Tensor,
    /// `2 × d`, orthonormal rows.
    pub components: Tensor,
    /// Sample variance along each component (descending).
    pub explained_variance: [f64; 2],
    pub mean: Vec<f64>,
}

/// Sample covariance (divisor `n - 1`) of the rows of `x` and their mean.
pub fn covariance(x: &Tensor) -> (Vec<f64>, DMatrix<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = DMatrix::zeros(d, d);
    for i in 0..n {
        let row = x.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in a..d {
                cov[(a, b)] += da * (row[b] - mean[b]);
            }
        }
    }
    let denom = (n - 1) as f64;
    for a in 0..d {
        for b in a..d {
            let v = cov[(a, b)] / denom;
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    (mean, cov)
}

/// Top-2 PCA of `rows` (`n × d`, `n ≥ 3`, `d ≥ 2`).
///
/// Component signs are fixed so that the largest-magnitude entry of each
/// component is positive. Identical rows yield [`NumError::ZeroVariance`].
pub fn pca_top2(rows: &Tensor) -> Result<Pca2> {
    if rows.rank() != 2 || rows.rows() < 3 || rows.cols() < 2 {
        return Err(NumError::InvalidArgument {
            op: "pca_top2",
            msg: format!("need at least 3 rows and 2 columns, got {:?}", rows.shape()),
        });
    }
    if !rows.is_finite() {
        return Err(NumError::NonFinite { op: "pca_top2" });
    }
    let (n, d) = (rows.rows(), rows.cols());
    let (mean, cov) = covariance(rows);
    let scale = rows.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if cov.trace() <= 1e-28 * (1.0 + scale * scale) {
        return Err(NumError::ZeroVariance);
    }

    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = Vec::with_capacity(2 * d);
    let mut explained = [0.0; 2];
    for (slot, &idx) in order.iter().take(2).enumerate() {
        let mut col: Vec<f64> = eig.eigenvectors.column(idx).iter().copied().collect();
        let norm = col.iter().map(|v| v * v).sum::<f64>().sqrt();
        col.iter_mut().for_each(|v| *v /= norm);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |best, v| if v.abs() > best.abs() + 1e-12 { v } else { best });
        if pivot < 0.0 {
            col.iter_mut().for_each(|v| *v = -*v);
        }
        components.extend(col);
        explained[slot] = eig.eigenvalues[idx].max(0.0);
    }

    let mut proj = Vec::with_capacity(n * 2);
    for i in 0..n {
        let row = rows.row(i);
        for c in 0..2 {
            let comp = &components[c * d..(c + 1) * d];
            proj.push(row.iter().zip(&mean).zip(comp).map(|((x, m), w)| (x - m) * w).sum());
        }
    }
    Ok(Pca2 {
        projections: Tensor::new(vec![n, 2], proj)?,
        components: Tensor::new(vec![2, d], components)?,
        explained_variance: explained,
        mean,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_aligned_points() {
        let x = Tensor::from_rows(&[vec![-1.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let p = pca_top2(&x).unwrap();
        assert!((p.components.at(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!(p.components.at(0, 1).abs() < 1e-12);
        assert!(p.explained_variance[1].abs() < 1e-15);
        assert!((p.explained_variance[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identical_rows_signal_zero_variance() {
        let x = Tensor::from_rows(&vec![vec![0.3, -2.0, 5.0]; 4]).unwrap();
        assert!(matches!(pca_top2(&x), Err(NumError::ZeroVariance)));
    }

    #[test]
    fn rejects_too_few_rows() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert!(pca_top2(&x).is_err());
    }
}
