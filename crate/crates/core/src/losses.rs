//! Disentanglement and adversarial objectives.
//!
//! Each loss is available as a plain function over matrices and as a tape
//! node carrying its analytic gradient, so training and the finite-difference
//! checks exercise the same formulas.

use nalgebra::DMatrix;
use ndarray::Axis;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Matrix, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{sigmoid, PROB_EPS};

/// Columns whose norm falls below this contribute nothing to the column loss.
const ZERO_COLUMN_NORM: f64 = 1e-12;

/// Orthonormal basis of the dominant left-singular subspace of a sensitive
/// latent matrix; lives in sample space (`n × k`).
#[derive(Debug, Clone, PartialEq)]
pub struct SensitiveSubspace {
    pub basis: Matrix,
    pub k: usize,
    /// Fraction of squared singular-value mass captured by the first `k`.
    pub energy_captured: f64,
}

/// Top-`k` left singular vectors of `z_a`, with `k` the smallest count whose
/// squared singular values reach `energy` of the total.
pub fn sensitive_subspace(z_a: &Matrix, energy: f64) -> Result<SensitiveSubspace> {
    if !(energy > 0.0 && energy <= 1.0) {
        return Err(Error::Config(format!("energy fraction {energy} outside (0, 1]")));
    }
    let (n, d) = z_a.dim();
    if n < 2 {
        return Err(Error::Shape(format!("sensitive subspace needs n >= 2 rows, got {n}")));
    }
    if z_a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("sensitive latents contain non-finite values".into()));
    }
    let m = DMatrix::from_fn(n, d, |r, c| z_a[[r, c]]);
    let svd = m.svd(true, false);
    let u = svd.u.as_ref().expect("left singular vectors requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let sq: Vec<f64> = order.iter().map(|&i| svd.singular_values[i].powi(2)).collect();
    let total: f64 = sq.iter().sum();
    if total <= 0.0 {
        return Err(Error::Data(
            "sensitive latents are all zero; no subspace exists".into(),
        ));
    }
    // Rounding in the tail would otherwise push k past the numerical rank at
    // full energy.
    let target = energy - 1e-12;
    let mut cumulative = 0.0;
    let mut k = sq.len();
    for (i, s) in sq.iter().enumerate() {
        cumulative += s;
        if cumulative / total >= target {
            k = i + 1;
            break;
        }
    }
    let captured = sq[..k].iter().sum::<f64>() / total;
    let basis = Matrix::from_shape_fn((n, k), |(r, c)| u[(r, order[c])]);
    Ok(SensitiveSubspace {
        basis,
        k,
        energy_captured: captured.min(1.0),
    })
}

/// Sum over latent columns of the squared fraction of each column lying in
/// the sensitive subspace, together with its gradient in `z_t`.
pub fn column_orthogonality_with_grad(
    z_t: &Matrix,
    subspace: &SensitiveSubspace,
) -> Result<(f64, Matrix)> {
    if z_t.nrows() != subspace.basis.nrows() {
        return Err(Error::Shape(format!(
            "Z_T has {} rows but the subspace lives in R^{}",
            z_t.nrows(),
            subspace.basis.nrows()
        )));
    }
    // proj: k × d_z, coordinates of each column in the subspace basis.
    let proj = subspace.basis.t().dot(z_t);
    let mut grad = Matrix::zeros(z_t.raw_dim());
    let mut loss = 0.0;
    for j in 0..z_t.ncols() {
        let col = z_t.column(j);
        let den = col.dot(&col);
        if den.sqrt() < ZERO_COLUMN_NORM {
            continue;
        }
        let p = proj.column(j);
        let num = p.dot(&p);
        loss += num / den;
        // d/dc (|Sᵀc|² / |c|²) = 2 S Sᵀ c / |c|² − 2 |Sᵀc|² c / |c|⁴
        let back = subspace.basis.dot(&p);
        let mut g = grad.column_mut(j);
        g.scaled_add(2.0 / den, &back);
        g.scaled_add(-2.0 * num / (den * den), &col);
    }
    Ok((loss, grad))
}

pub fn column_orthogonality_loss(z_t: &Matrix, subspace: &SensitiveSubspace) -> Result<f64> {
    column_orthogonality_with_grad(z_t, subspace).map(|(l, _)| l)
}

/// Squared Frobenius norm of the centred feature cross-covariance between
/// `z_t` and `z_a`, divided by `d_z²`; returns gradients for both inputs.
pub fn row_orthogonality_with_grad(z_t: &Matrix, z_a: &Matrix) -> Result<(f64, Matrix, Matrix)> {
    if z_t.dim() != z_a.dim() {
        return Err(Error::Shape(format!(
            "Z_T {:?} and Z_A {:?} differ in shape",
            z_t.dim(),
            z_a.dim()
        )));
    }
    let (n, d) = z_t.dim();
    if n < 2 {
        return Err(Error::Shape(format!("row orthogonality needs n >= 2, got {n}")));
    }
    let tc = center_columns(z_t);
    let ac = center_columns(z_a);
    let cross = tc.t().dot(&ac);
    let norm = 1.0 / (d * d) as f64;
    let loss = cross.iter().map(|v| v * v).sum::<f64>() * norm;
    // Centered factors have zero column means, so no extra projection needed.
    let grad_t = ac.dot(&cross.t()) * (2.0 * norm);
    let grad_a = tc.dot(&cross) * (2.0 * norm);
    Ok((loss, grad_t, grad_a))
}

pub fn row_orthogonality_loss(z_t: &Matrix, z_a: &Matrix) -> Result<f64> {
    row_orthogonality_with_grad(z_t, z_a).map(|(l, _, _)| l)
}

fn center_columns(m: &Matrix) -> Matrix {
    let mean = m.mean_axis(Axis(0)).expect("nonempty");
    m - &mean.insert_axis(Axis(0))
}

/// Binary cross-entropy summed over columns and averaged over rows.
/// Probabilities must already lie strictly inside (0, 1).
pub fn cross_entropy(targets: &Matrix, probs: &Matrix) -> Result<f64> {
    if targets.dim() != probs.dim() || targets.nrows() == 0 {
        return Err(Error::Shape(format!(
            "targets {:?} vs predictions {:?}",
            targets.dim(),
            probs.dim()
        )));
    }
    let mut total = 0.0;
    for (&t, &p) in targets.iter().zip(probs.iter()) {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Undefined(format!(
                "probability {p} outside (0, 1) after clipping"
            )));
        }
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
    }
    Ok(total / targets.nrows() as f64)
}

/// Negative cross-entropy of attribute predictions; always ≤ 0.
pub fn adversarial_loss(attrs: &Matrix, predicted: &Matrix) -> Result<f64> {
    cross_entropy(attrs, predicted).map(|ce| -ce)
}

/// Weights of the disentanglement and adversarial terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub alpha_adv: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_c: 1.0,
            lambda_r: 1.0,
            alpha_adv: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("alpha_adv", self.alpha_adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1Loss {
    pub total: f64,
    pub cross_entropy: f64,
    pub column: f64,
    pub row: f64,
}

/// Target-encoder objective: cross-entropy plus weighted column and row
/// orthogonality against the frozen sensitive latents.
pub fn stage1_target_loss(
    y: &Matrix,
    y_hat: &Matrix,
    z_t: &Matrix,
    z_a: &Matrix,
    subspace: &SensitiveSubspace,
    weights: &LossWeights,
) -> Result<Stage1Loss> {
    weights.validate()?;
    let ce = cross_entropy(y, y_hat)?;
    let column = column_orthogonality_loss(z_t, subspace)?;
    let row = row_orthogonality_loss(z_t, z_a)?;
    Ok(Stage1Loss {
        total: ce + weights.lambda_c * column + weights.lambda_r * row,
        cross_entropy: ce,
        column,
        row,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Loss {
    /// `CE(y, ŷ) − α·CE(a, â_adv)`, minimized by everything but the adversary.
    pub main: f64,
    /// `CE(a, â_adv)`, minimized by the adversary alone.
    pub adversary: f64,
}

pub fn stage2_loss(
    y: &Matrix,
    y_hat: &Matrix,
    attrs: &Matrix,
    attrs_adv: &Matrix,
    alpha_adv: f64,
) -> Result<Stage2Loss> {
    if !alpha_adv.is_finite() || alpha_adv < 0.0 {
        return Err(Error::Config(format!("alpha_adv = {alpha_adv} must be >= 0")));
    }
    let ce = cross_entropy(y, y_hat)?;
    let adv = cross_entropy(attrs, attrs_adv)?;
    Ok(Stage2Loss {
        main: ce - alpha_adv * adv,
        adversary: adv,
    })
}

/// Cross-entropy of `sigmoid(logits)` clipped to `[ε, 1−ε]`, as a tape node.
pub fn tape_cross_entropy(tape: &mut Tape, logits: Var, targets: &Matrix) -> Result<Var> {
    let z = tape.value(logits);
    if z.dim() != targets.dim() || z.nrows() == 0 {
        return Err(Error::Shape(format!(
            "logits {:?} vs targets {:?}",
            z.dim(),
            targets.dim()
        )));
    }
    let rows = z.nrows() as f64;
    let mut total = 0.0;
    let mut grad = Matrix::zeros(z.raw_dim());
    for ((&logit, &t), g) in z.iter().zip(targets.iter()).zip(grad.iter_mut()) {
        let raw = sigmoid(logit);
        let p = raw.clamp(PROB_EPS, 1.0 - PROB_EPS);
        total -= t * p.ln() + (1.0 - t) * (1.0 - p).ln();
        if raw > PROB_EPS && raw < 1.0 - PROB_EPS {
            *g = (p - t) / rows;
        }
    }
    Ok(tape.scalar_fn(total / rows, vec![(logits, grad)]))
}

pub fn tape_column_orthogonality(
    tape: &mut Tape,
    z_t: Var,
    subspace: &SensitiveSubspace,
) -> Result<Var> {
    let (loss, grad) = column_orthogonality_with_grad(tape.value(z_t), subspace)?;
    Ok(tape.scalar_fn(loss, vec![(z_t, grad)]))
}

pub fn tape_row_orthogonality(tape: &mut Tape, z_t: Var, z_a: Var) -> Result<Var> {
    let (loss, gt, ga) = row_orthogonality_with_grad(tape.value(z_t), tape.value(z_a))?;
    Ok(tape.scalar_fn(loss, vec![(z_t, gt), (z_a, ga)]))
}
