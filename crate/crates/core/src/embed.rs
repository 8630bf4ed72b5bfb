//! Two-dimensional PCA projection of feature matrices.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Projects the centered rows of `x` onto its two leading principal axes.
///
/// Axes are ordered by decreasing variance and signed so that their
/// largest-magnitude loading (first one on ties) is positive. With a single
/// feature column the second coordinate is zero.
pub fn pca_2d(x: &Tensor) -> Result<Tensor> {
    let (n, d) = x.dims2("pca_2d")?;
    if n < 3 {
        return Err(Error::param(format!(
            "PCA embedding needs at least 3 rows, got {n}"
        )));
    }
    if d == 0 {
        return Err(Error::param(
            "PCA embedding needs at least one feature column",
        ));
    }
    let m = DMatrix::from_row_slice(n, d, x.data());
    let mean = m.row_mean();
    let centered = DMatrix::from_fn(n, d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .total_cmp(&eig.eigenvalues[a])
            .then(a.cmp(&b))
    });

    let mut out = vec![0.0; n * 2];
    for (c, &axis) in order.iter().take(2).enumerate() {
        let mut v: Vec<f64> = eig.eigenvectors.column(axis).iter().copied().collect();
        let mut lead = 0;
        for j in 1..d {
            if v[j].abs() > v[lead].abs() {
                lead = j;
            }
        }
        if v[lead] < 0.0 {
            v.iter_mut().for_each(|x| *x = -*x);
        }
        for i in 0..n {
            out[i * 2 + c] = (0..d).map(|j| centered[(i, j)] * v[j]).sum();
        }
    }
    Tensor::new(vec![n, 2], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn col_stats(t: &Tensor, j: usize) -> (f64, f64) {
        let n = t.rows() as f64;
        let m = (0..t.rows()).map(|i| t.get2(i, j)).sum::<f64>() / n;
        let v = (0..t.rows())
            .map(|i| (t.get2(i, j) - m).powi(2))
            .sum::<f64>()
            / n;
        (m, v)
    }

    #[test]
    fn projection_is_centered_and_keeps_at_most_the_total_variance() {
        let mut s = Stream::new(3);
        for _ in 0..20 {
            let n = 3 + s.below(40) as usize;
            let d = 1 + s.below(8) as usize;
            let x = Tensor::new(
                vec![n, d],
                (0..n * d).map(|_| 2.0 * s.normal() + 1.0).collect(),
            )
            .unwrap();
            let p = pca_2d(&x).unwrap();
            assert_eq!(p.shape(), &[n, 2]);
            let total: f64 = (0..d).map(|j| col_stats(&x, j).1).sum();
            let (m0, v0) = col_stats(&p, 0);
            let (m1, v1) = col_stats(&p, 1);
            assert!(m0.abs() < 1e-9 && m1.abs() < 1e-9);
            assert!(v0 + v1 <= total + 1e-9);
            assert!(v0 + 1e-12 >= v1);
        }
    }

    #[test]
    fn leading_axis_recovers_the_dominant_direction() {
        let mut s = Stream::new(4);
        let rows: Vec<[f64; 3]> = (0..200)
            .map(|_| {
                let t = 5.0 * s.normal();
                [-t + 0.01 * s.normal(), 0.01 * s.normal(), 0.1 * s.normal()]
            })
            .collect();
        let x = Tensor::from_rows(&rows).unwrap();
        let p = pca_2d(&x).unwrap();
        // The leading axis is -e₀ flipped to +e₀ by the sign rule.
        let mean0: f64 = rows.iter().map(|r| r[0]).sum::<f64>() / 200.0;
        for i in 0..200 {
            assert!((p.get2(i, 0) - (rows[i][0] - mean0)).abs() < 0.05);
        }
        let again = pca_2d(&x).unwrap();
        assert_eq!(p, again);
    }

    #[test]
    fn too_few_rows_is_an_input_error() {
        assert!(matches!(
            pca_2d(&Tensor::zeros(&[2, 3])),
            Err(Error::Parameter(_))
        ));
    }
}
