use nalgebra::{DMatrix, DVector};

use super::{expit, StatError};

/// Convergence threshold on the largest absolute coefficient update.
pub const IRLS_TOLERANCE: f64 = 1e-8;
pub const IRLS_MAX_ITER: usize = 25;
/// Any coefficient leaving `[-30, 30]` during IRLS is treated as separation.
pub const SEPARATION_BOUND: f64 = 30.0;

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticFit {
    /// Intercept first, in design column order.
    pub coefficients: Vec<f64>,
    pub std_errors: Vec<f64>,
    pub converged: bool,
    pub n_iter: usize,
    pub fitted_probabilities: Vec<f64>,
    /// Max-norm of the weighted score at the returned coefficients.
    pub score_max_norm: f64,
}

/// Weighted maximum-likelihood logistic regression by IRLS.
///
/// `design` must already contain the intercept column. Case weights default
/// to one. Deterministic for identical inputs.
pub fn fit_logistic(
    design: &DMatrix<f64>,
    response: &[bool],
    case_weights: Option<&[f64]>,
) -> Result<LogisticFit, StatError> {
    let n = design.nrows();
    let p = design.ncols();
    if response.len() != n {
        return Err(StatError::LengthMismatch {
            what: "response",
            rows: n,
            len: response.len(),
        });
    }
    if n < p || p == 0 {
        return Err(StatError::TooFewRows { rows: n, cols: p });
    }
    if design.iter().any(|v| !v.is_finite()) {
        return Err(StatError::NonFiniteDesign);
    }
    let weights: Vec<f64> = match case_weights {
        Some(w) => {
            if w.len() != n {
                return Err(StatError::LengthMismatch {
                    what: "case weights",
                    rows: n,
                    len: w.len(),
                });
            }
            if w.iter().any(|&v| !(v.is_finite() && v >= 0.0)) {
                return Err(StatError::InvalidWeight);
            }
            w.to_vec()
        }
        None => vec![1.0; n],
    };

    let (mut pos, mut neg) = (0.0, 0.0);
    for (&y, &w) in response.iter().zip(&weights) {
        if y {
            pos += w;
        } else {
            neg += w;
        }
    }
    if pos == 0.0 || neg == 0.0 {
        return Err(StatError::Separation(
            "response is constant over positively weighted rows".into(),
        ));
    }

    let y: Vec<f64> = response.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut beta = DVector::<f64>::zeros(p);
    let mut converged = false;
    let mut n_iter = 0;

    while n_iter < IRLS_MAX_ITER {
        n_iter += 1;
        let mu = probabilities(design, &beta);
        let (info, score) = information_and_score(design, &y, &weights, &mu);
        let step = info
            .cholesky()
            .ok_or(StatError::SingularInformation)?
            .solve(&score);
        beta += &step;
        if beta.iter().any(|b| !b.is_finite() || b.abs() > SEPARATION_BOUND) {
            return Err(StatError::Separation(format!(
                "coefficient magnitude exceeded {SEPARATION_BOUND} at iteration {n_iter}"
            )));
        }
        if step.amax() < IRLS_TOLERANCE {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(StatError::NoConvergence(n_iter));
    }

    let mu = probabilities(design, &beta);
    let (info, score) = information_and_score(design, &y, &weights, &mu);
    let cov = info
        .try_inverse()
        .ok_or(StatError::SingularInformation)?;
    let std_errors = (0..p).map(|j| cov[(j, j)].max(0.0).sqrt()).collect();

    Ok(LogisticFit {
        coefficients: beta.iter().copied().collect(),
        std_errors,
        converged,
        n_iter,
        fitted_probabilities: mu,
        score_max_norm: score.amax(),
    })
}

fn probabilities(design: &DMatrix<f64>, beta: &DVector<f64>) -> Vec<f64> {
    let eta = design * beta;
    eta.iter().map(|&e| expit(e)).collect()
}

fn information_and_score(
    design: &DMatrix<f64>,
    y: &[f64],
    weights: &[f64],
    mu: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    let p = design.ncols();
    let mut info = DMatrix::<f64>::zeros(p, p);
    let mut score = DVector::<f64>::zeros(p);
    let mut row = vec![0.0; p];
    for i in 0..design.nrows() {
        for (j, r) in row.iter_mut().enumerate() {
            *r = design[(i, j)];
        }
        let w = weights[i];
        let v = w * mu[i] * (1.0 - mu[i]);
        let resid = w * (y[i] - mu[i]);
        for j in 0..p {
            score[j] += row[j] * resid;
            for k in 0..=j {
                info[(j, k)] += v * row[j] * row[k];
            }
        }
    }
    for j in 0..p {
        for k in 0..j {
            info[(k, j)] = info[(j, k)];
        }
    }
    (info, score)
}
