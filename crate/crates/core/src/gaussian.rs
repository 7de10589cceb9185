//! Dense Gaussian and ensemble statistics.
//!
//! Mean/covariance estimation, log-density, score, KL divergence,
//! Cholesky-with-jitter solves, and the Gaspari-Cohn localization taper.
//! All densities are computed and combined in the log domain.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.837877066409345483560659472811;

/// Mean and covariance of a (multivariate) Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianParams {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GaussianParams {
    pub fn new(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        assert_eq!(mean.len(), cov.nrows());
        assert_eq!(cov.nrows(), cov.ncols());
        GaussianParams { mean, cov }
    }

    pub fn standard(dim: usize) -> Self {
        GaussianParams::new(DVector::zeros(dim), DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// First two sample moments of an ensemble.
#[derive(Debug, Clone)]
pub struct SampleStats {
    pub mean: DVector<f64>,
    /// Unbiased sample covariance (divisor K-1).
    pub cov: DMatrix<f64>,
    /// Diagonal of `cov`.
    pub var: DVector<f64>,
}

/// Sample mean and unbiased covariance. Needs K >= 2.
pub fn sample_mean_cov(ensemble: &Ensemble) -> Result<SampleStats> {
    let k = ensemble.size();
    if k < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: k });
    }
    let d = ensemble.dim();
    let mean = ensemble.mean();
    let mut cov = DMatrix::zeros(d, d);
    for m in ensemble.iter() {
        let a = m - &mean;
        cov.syger(1.0, &a, &a, 1.0);
    }
    cov /= (k - 1) as f64;
    cov.fill_upper_triangle_with_lower_triangle();
    let var = cov.diagonal();
    Ok(SampleStats { mean, cov, var })
}

/// Cholesky factorization with an escalating jitter ladder.
///
/// Starts at 1e-12 * trace/d on the diagonal and escalates by 10x up to
/// 1e-6 * trace/d before giving up. Small ensembles routinely produce
/// rank-deficient covariances, so plain factorization is not enough.
pub fn cholesky_with_jitter(cov: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    if let Some(chol) = Cholesky::new(cov.clone()) {
        return Ok(chol);
    }
    let d = cov.nrows();
    let scale = cov.trace() / d as f64;
    let mut jitter = 1e-12 * scale;
    let max_jitter = 1e-6 * scale;
    while jitter <= max_jitter && jitter > 0.0 {
        let mut jittered = cov.clone();
        for i in 0..d {
            jittered[(i, i)] += jitter;
        }
        if let Some(chol) = Cholesky::new(jittered) {
            return Ok(chol);
        }
        jitter *= 10.0;
    }
    Err(Error::SingularCovariance)
}

/// log det of the factored matrix.
pub fn chol_log_det(chol: &Cholesky<f64, Dyn>) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
}

/// Quadratic form (x - mean)^T cov^{-1} (x - mean) via one triangular solve.
pub fn chol_mahalanobis_sq(chol: &Cholesky<f64, Dyn>, diff: &DVector<f64>) -> f64 {
    let mut y = diff.clone();
    chol.l_dirty().solve_lower_triangular_mut(&mut y);
    y.norm_squared()
}

/// Gaussian log-density with the factorization precomputed.
pub fn gaussian_logpdf_chol(x: &DVector<f64>, mean: &DVector<f64>, chol: &Cholesky<f64, Dyn>) -> f64 {
    let d = x.len() as f64;
    -0.5 * (d * LN_2PI + chol_log_det(chol) + chol_mahalanobis_sq(chol, &(x - mean)))
}

pub fn gaussian_logpdf(x: &DVector<f64>, g: &GaussianParams) -> Result<f64> {
    let chol = cholesky_with_jitter(&g.cov)?;
    Ok(gaussian_logpdf_chol(x, &g.mean, &chol))
}

/// Score of a Gaussian: -cov^{-1} (x - mean), via a factorized solve.
pub fn gaussian_score(x: &DVector<f64>, g: &GaussianParams) -> Result<DVector<f64>> {
    let chol = cholesky_with_jitter(&g.cov)?;
    Ok(-chol.solve(&(x - &g.mean)))
}

/// Closed-form KL(p || q) between multivariate Gaussians.
pub fn gaussian_kl(p: &GaussianParams, q: &GaussianParams) -> Result<f64> {
    assert_eq!(p.dim(), q.dim());
    let d = p.dim() as f64;
    let chol_q = cholesky_with_jitter(&q.cov)?;
    let chol_p = cholesky_with_jitter(&p.cov)?;
    let trace_term = chol_q.solve(&p.cov).trace();
    let diff = &q.mean - &p.mean;
    let maha = chol_mahalanobis_sq(&chol_q, &diff);
    let log_det = chol_log_det(&chol_q) - chol_log_det(&chol_p);
    Ok(0.5 * (trace_term + maha - d + log_det))
}

/// The Gaspari-Cohn fifth-order compactly supported correlation function.
///
/// `r` is the distance and `c` the half-width; the taper is exactly zero
/// for r >= 2c.
pub fn gaspari_cohn_taper(r: f64, c: f64) -> f64 {
    assert!(c > 0.0, "half-width must be positive");
    let z = (r / c).abs();
    if z < 1.0 {
        1.0 + z * z * (-5.0 / 3.0 + z * (5.0 / 8.0 + z * (0.5 - 0.25 * z)))
    } else if z < 2.0 {
        4.0 - 5.0 * z + z * z * (5.0 / 3.0 + z * (5.0 / 8.0 + z * (-0.5 + z / 12.0))) - 2.0 / (3.0 * z)
    } else {
        0.0
    }
}

/// Distance convention between state indices for localization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceMetric {
    /// Circular index distance min(|i-j|, d-|i-j|); matches periodic models.
    IndexRing,
    /// Plain index distance |i-j|.
    Euclidean,
}

pub fn index_distance(i: usize, j: usize, d: usize, metric: DistanceMetric) -> f64 {
    let diff = i.abs_diff(j);
    match metric {
        DistanceMetric::IndexRing => diff.min(d - diff) as f64,
        DistanceMetric::Euclidean => diff as f64,
    }
}

/// Schur product of `cov` with the Gaspari-Cohn taper of pairwise index
/// distances. Preserves symmetry and the diagonal exactly.
pub fn localize_cov(cov: &DMatrix<f64>, half_width: f64, metric: DistanceMetric) -> DMatrix<f64> {
    let d = cov.nrows();
    let mut out = cov.clone();
    for j in 0..d {
        for i in 0..d {
            if i != j {
                out[(i, j)] *= gaspari_cohn_taper(index_distance(i, j, d, metric), half_width);
            }
        }
    }
    out
}
