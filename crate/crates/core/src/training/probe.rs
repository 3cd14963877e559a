use nalgebra::{DMatrix, DVector};

use crate::autodiff::Matrix;
use crate::error::{Error, Result};
use crate::metrics::auc;
use crate::model::{column_stats, sigmoid};

const RIDGE: f64 = 1.0;
const MAX_NEWTON_STEPS: usize = 50;

/// Fits an L2-regularized logistic regression on standardized `train_x`
/// by Newton's method and reports its AUC on `test_x`.
pub fn logistic_probe_auc(
    train_x: &Matrix,
    train_y: &[u8],
    test_x: &Matrix,
    test_y: &[u8],
) -> Result<f64> {
    if train_x.nrows() != train_y.len() || test_x.nrows() != test_y.len() {
        return Err(Error::Shape("probe features and labels differ in length".into()));
    }
    if train_x.ncols() != test_x.ncols() {
        return Err(Error::Shape("probe train and test widths differ".into()));
    }
    let (mean, std) = column_stats(train_x);
    let d = train_x.ncols() + 1;
    let design = |x: &Matrix| {
        DMatrix::from_fn(x.nrows(), d, |r, c| {
            if c == 0 {
                1.0
            } else {
                let s = if std[c - 1] > 1e-12 { std[c - 1] } else { 1.0 };
                (x[[r, c - 1]] - mean[c - 1]) / s
            }
        })
    };
    let xtr = design(train_x);
    let y = DVector::from_iterator(train_y.len(), train_y.iter().map(|&v| v as f64));
    let mut w = DVector::zeros(d);
    let mut penalty = DMatrix::identity(d, d) * RIDGE;
    penalty[(0, 0)] = 0.0;
    for _ in 0..MAX_NEWTON_STEPS {
        let p = (&xtr * &w).map(sigmoid);
        let grad = xtr.transpose() * (&p - &y) + &penalty * &w;
        let weights = p.map(|v| v * (1.0 - v));
        let weighted = DMatrix::from_fn(xtr.nrows(), d, |r, c| xtr[(r, c)] * weights[r]);
        let hessian = xtr.transpose() * weighted + &penalty + DMatrix::identity(d, d) * 1e-9;
        let step = hessian
            .cholesky()
            .ok_or_else(|| Error::Undefined("probe Hessian is not positive definite".into()))?
            .solve(&grad);
        w -= &step;
        if step.norm() < 1e-10 {
            break;
        }
    }
    let scores: Vec<f64> = (design(test_x) * &w).iter().copied().collect();
    auc(&scores, test_y)
}

/// Probe AUC for each attribute column.
pub fn attribute_probe(
    train_z: &Matrix,
    train_attrs: &Matrix,
    test_z: &Matrix,
    test_attrs: &Matrix,
) -> Result<Vec<f64>> {
    (0..train_attrs.ncols())
        .map(|j| {
            let col = |m: &Matrix| m.column(j).iter().map(|&v| v as u8).collect::<Vec<u8>>();
            logistic_probe_auc(train_z, &col(train_attrs), test_z, &col(test_attrs))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn data(seed: u64, n: usize, signal: f64) -> (Matrix, Vec<u8>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let x = Matrix::from_shape_fn((n, 4), |(r, c)| {
            let noise: f64 = rng.random_range(-1.0..1.0);
            if c == 0 {
                noise + signal * y[r] as f64
            } else {
                noise
            }
        });
        (x, y)
    }

    #[test]
    fn separable_feature_gives_high_auc() {
        let (x, y) = data(1, 400, 3.0);
        let (xt, yt) = data(2, 400, 3.0);
        assert!(logistic_probe_auc(&x, &y, &xt, &yt).unwrap() > 0.95);
    }

    #[test]
    fn pure_noise_is_near_chance() {
        let (x, y) = data(3, 400, 0.0);
        let (xt, yt) = data(4, 400, 0.0);
        let a = logistic_probe_auc(&x, &y, &xt, &yt).unwrap();
        assert!((0.4..0.6).contains(&a), "{a}");
    }

    #[test]
    fn constant_features_are_handled() {
        let x = Matrix::from_elem((10, 2), 1.0);
        let y = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        assert_eq!(logistic_probe_auc(&x, &y, &x, &y).unwrap(), 0.5);
    }
}
