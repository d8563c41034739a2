//! Stress loss between predicted embedding distances and normalized physical distances,
//! with an optional penalty pulling positive-pair embeddings together.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

/// Denominator guard for the distance derivative; gives subgradient 0 at coincident points.
const GRAD_EPS: f64 = 1e-12;

fn check_rows(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch(format!(
            "embedding blocks {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
}

/// `out[i, j] = ||a_i - b_j||`.
pub fn pairwise_distances(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    check_rows(a, b)?;
    let n = a.nrows();
    Ok(Array2::from_shape_fn((n, n), |(i, j)| {
        let sq: f64 = a.row(i).iter().zip(b.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
        sq.max(0.0).sqrt()
    }))
}

/// Target distances `||p_i - p_j||` between normalized coordinates.
pub fn target_distances(p: ArrayView2<f64>) -> Array2<f64> {
    pairwise_distances(p, p).expect("same block")
}

fn check_square(d_pred: &Array2<f64>, d_true: &Array2<f64>) -> Result<()> {
    if d_pred.dim() != d_true.dim() || d_pred.nrows() != d_pred.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "distance matrices {:?} vs {:?}",
            d_pred.dim(),
            d_true.dim()
        )));
    }
    if d_pred.is_empty() {
        return Err(Error::EmptyInput("distance matrix"));
    }
    Ok(())
}

/// Mean squared difference over all `N^2` entries, diagonal included.
pub fn loss_dist(d_pred: &Array2<f64>, d_true: &Array2<f64>) -> Result<f64> {
    check_square(d_pred, d_true)?;
    let n = d_pred.nrows() as f64;
    Ok(d_pred.iter().zip(d_true).map(|(p, t)| (p - t) * (p - t)).sum::<f64>() / (n * n))
}

/// `loss_dist + lambda * mean_i d_pred[i, i]^2`.
pub fn loss_total(d_pred: &Array2<f64>, d_true: &Array2<f64>, lambda: f64) -> Result<f64> {
    check_lambda(lambda)?;
    let dist = loss_dist(d_pred, d_true)?;
    Ok(dist + lambda * equiv_term(d_pred))
}

fn equiv_term(d_pred: &Array2<f64>) -> f64 {
    d_pred.diag().iter().map(|d| d * d).sum::<f64>() / d_pred.nrows() as f64
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::InvalidArgument(format!("lambda must be a finite value >= 0, got {lambda}")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossTerms {
    pub total: f64,
    pub dist: f64,
    /// Mean squared positive-pair distance (before the lambda weight); 0 in naive mode.
    pub equiv: f64,
    /// Mean positive-pair embedding distance; `None` in naive mode.
    pub mean_dpred_ii: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct LossGrad {
    pub terms: LossTerms,
    pub grad_a: Array2<f64>,
    /// Gradient w.r.t. the partner embeddings; `None` in naive mode, where it is folded
    /// into `grad_a`.
    pub grad_b: Option<Array2<f64>>,
}

/// Loss and its gradient. `b = None` is the naive mode (`B = A`, no equivariance term).
pub fn loss_and_grad(
    a: ArrayView2<f64>,
    b: Option<ArrayView2<f64>>,
    d_true: &Array2<f64>,
    lambda: f64,
) -> Result<LossGrad> {
    check_lambda(lambda)?;
    let bb = b.unwrap_or(a);
    check_rows(a, bb)?;
    if a.ncols() != 3 {
        return Err(Error::DimensionMismatch(format!("embeddings need 3 columns, got {}", a.ncols())));
    }
    let n = a.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least 2 embeddings".into()));
    }
    if d_true.dim() != (n, n) {
        return Err(Error::DimensionMismatch(format!("target {:?} for N = {n}", d_true.dim())));
    }
    let naive = b.is_none();
    let lambda = if naive { 0.0 } else { lambda };
    let nf = n as f64;
    let mut grad_a = Array2::<f64>::zeros((n, 3));
    let mut grad_b = Array2::<f64>::zeros((n, 3));
    let mut dist = 0.0;
    let mut diag_sq = 0.0;
    let mut diag = 0.0;
    for i in 0..n {
        let ai = [a[[i, 0]], a[[i, 1]], a[[i, 2]]];
        for j in 0..n {
            let diff = [ai[0] - bb[[j, 0]], ai[1] - bb[[j, 1]], ai[2] - bb[[j, 2]]];
            let sq = diff[0] * diff[0] + diff[1] * diff[1] + diff[2] * diff[2];
            let d = sq.max(0.0).sqrt();
            let r = d - d_true[[i, j]];
            dist += r * r;
            let mut coef = 2.0 * r / (nf * nf) / (sq + GRAD_EPS).sqrt();
            if i == j {
                diag_sq += sq;
                diag += d;
                coef += 2.0 * lambda / nf;
            }
            for c in 0..3 {
                grad_a[[i, c]] += coef * diff[c];
                grad_b[[j, c]] -= coef * diff[c];
            }
        }
    }
    let dist = dist / (nf * nf);
    let equiv = if naive { 0.0 } else { diag_sq / nf };
    let terms = LossTerms {
        total: dist + lambda * equiv,
        dist,
        equiv,
        mean_dpred_ii: (!naive).then_some(diag / nf),
    };
    if naive {
        grad_a += &grad_b;
        Ok(LossGrad {
            terms,
            grad_a,
            grad_b: None,
        })
    } else {
        Ok(LossGrad {
            terms,
            grad_a,
            grad_b: Some(grad_b),
        })
    }
}
