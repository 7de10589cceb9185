//! Gaussian-mixture prior construction from an ensemble, its forward
//! marginals, reverse kernels, mixture weights and scores, plus the
//! degenerate per-sample Monte Carlo prior score.
//!
//! The mixture places one component per (shrunken) ensemble member with a
//! shared covariance and uniform weights. The variance-splitting parameter
//! `gamma` divides the total prior variance between the spread of component
//! means and the shared covariance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diffusion::NoiseSchedule;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gaussian::{
    chol_log_det, chol_mahalanobis_sq, cholesky_with_jitter, localize_cov, sample_mean_cov,
    DistanceMetric, LN_2PI,
};

/// Exponent applied to gamma when forming the shared covariance.
///
/// `Two` (the default) makes the construction exactly variance-preserving:
/// the spread of the means carries (1 - gamma^2) of the ensemble variance
/// and the shared covariance gamma^2 of it. `One` keeps the literal
/// shared-covariance scaling gamma * cov, which over-counts variance for
/// gamma in (0, 1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GammaExponent {
    One,
    Two,
}

impl Default for GammaExponent {
    fn default() -> Self {
        GammaExponent::Two
    }
}

/// Settings for [`build_gm_prior`].
#[derive(Debug, Clone)]
pub struct GmPriorConfig {
    /// Variance-splitting parameter in [0, 1].
    pub gamma: f64,
    /// Gaspari-Cohn half-width applied to the sample covariance (ring metric).
    pub loc_half_width: Option<f64>,
    /// Multiplicative inflation applied to ensemble anomalies (>= 1).
    pub inflation: f64,
    pub gamma_exponent: GammaExponent,
}

impl Default for GmPriorConfig {
    fn default() -> Self {
        GmPriorConfig {
            gamma: 0.5,
            loc_half_width: None,
            inflation: 1.0,
            gamma_exponent: GammaExponent::default(),
        }
    }
}

/// The ensemble-derived mixture prior: one mean per member, shared
/// covariance, uniform weights.
#[derive(Debug, Clone)]
pub struct GaussianMixturePrior {
    means: Vec<DVector<f64>>,
    shared_cov: DMatrix<f64>,
    gamma: f64,
}

impl GaussianMixturePrior {
    pub fn components(&self) -> usize {
        self.means.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn shared_cov(&self) -> &DMatrix<f64> {
        &self.shared_cov
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Uniform component weight 1/K.
    pub fn weight(&self) -> f64 {
        1.0 / self.components() as f64
    }

    /// Direct construction from known components (uniform weights implied).
    pub fn from_parts(means: Vec<DVector<f64>>, shared_cov: DMatrix<f64>, gamma: f64) -> Self {
        assert!(!means.is_empty());
        assert_eq!(means[0].len(), shared_cov.nrows());
        GaussianMixturePrior { means, shared_cov, gamma }
    }

    /// A single-Gaussian prior as the K = 1 special case.
    pub fn single(mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        GaussianMixturePrior::from_parts(vec![mean], cov, 1.0)
    }
}

/// Builds the mixture prior from an ensemble.
///
/// Anomalies are inflated about the mean first, the sample covariance is
/// localized if requested, and then the variance split is applied:
/// means = sqrt(1 - gamma^2) * anomaly + mean, shared covariance
/// gamma^e * cov with e the configured exponent.
pub fn build_gm_prior(ensemble: &Ensemble, cfg: &GmPriorConfig) -> Result<GaussianMixturePrior> {
    if !(0.0..=1.0).contains(&cfg.gamma) {
        return Err(Error::config(format!("gamma must lie in [0, 1], got {}", cfg.gamma)));
    }
    if cfg.inflation < 1.0 {
        return Err(Error::config(format!(
            "inflation must be >= 1, got {}",
            cfg.inflation
        )));
    }
    let k = ensemble.size();
    if k < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: k });
    }

    let mean = ensemble.mean();
    let inflated = Ensemble::from_fn(k, |i| &mean + (ensemble.member(i) - &mean) * cfg.inflation);
    let stats = sample_mean_cov(&inflated)?;
    let mut cov = stats.cov;
    if let Some(c) = cfg.loc_half_width {
        cov = localize_cov(&cov, c, DistanceMetric::IndexRing);
    }

    let shrink = (1.0 - cfg.gamma * cfg.gamma).sqrt();
    let means = inflated
        .iter()
        .map(|x| &mean + (x - &mean) * shrink)
        .collect();
    let scale = match cfg.gamma_exponent {
        GammaExponent::One => cfg.gamma,
        GammaExponent::Two => cfg.gamma * cfg.gamma,
    };
    Ok(GaussianMixturePrior {
        means,
        shared_cov: cov * scale,
        gamma: cfg.gamma,
    })
}

/// Forward marginal of the mixture at pseudo-time `t`:
/// component means alpha_t * mu_k, shared covariance
/// alpha_t^2 Sigma + beta_t^2 I.
pub fn gm_forward_marginal(
    prior: &GaussianMixturePrior,
    t: f64,
) -> Result<(Vec<DVector<f64>>, DMatrix<f64>)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("pseudo-time {t} outside [0, 1]")));
    }
    let schedule = NoiseSchedule;
    let alpha = schedule.alpha(t);
    let beta_sq = schedule.beta_sq(t);
    let means = prior.means.iter().map(|m| m * alpha).collect();
    let d = prior.dim();
    let mut cov = &prior.shared_cov * (alpha * alpha);
    for i in 0..d {
        cov[(i, i)] += beta_sq;
    }
    Ok((means, cov))
}

/// Conditional distribution of the initial state given the noisy state at
/// pseudo-time `t`, per mixture component.
#[derive(Debug, Clone)]
pub struct ReverseKernel {
    /// Conditional means, one per component (each depends on z_t).
    pub means: Vec<DVector<f64>>,
    /// Shared conditional covariance (independent of the component).
    pub cov: DMatrix<f64>,
    /// Lower Cholesky factor of `cov`.
    pub chol: DMatrix<f64>,
}

/// Gain and conditional covariance shared by every component at time `t`:
/// gain = alpha_t Sigma (alpha_t^2 Sigma + beta_t^2 I)^{-1},
/// cov = Sigma - alpha_t gain Sigma.
pub(crate) fn reverse_kernel_parts(
    prior: &GaussianMixturePrior,
    t: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let schedule = NoiseSchedule;
    let alpha = schedule.alpha(t);
    let beta_sq = schedule.beta_sq(t);
    let d = prior.dim();
    let sigma = &prior.shared_cov;
    let mut sigma_t = sigma * (alpha * alpha);
    for i in 0..d {
        sigma_t[(i, i)] += beta_sq;
    }
    let chol_t = cholesky_with_jitter(&sigma_t)?;
    // (Sigma_t^{-1} Sigma)^T = Sigma Sigma_t^{-1} by symmetry of both factors
    let gain = chol_t.solve(sigma).transpose() * alpha;
    let cov = sigma - &gain * (sigma * alpha);
    Ok((gain, cov))
}

/// Reverse transition kernel of the mixture at (t, z_t). Needs t > 0; at
/// t = 0 the kernel degenerates to a point mass at z_t.
pub fn gm_reverse_kernel(
    prior: &GaussianMixturePrior,
    t: f64,
    z_t: &DVector<f64>,
) -> Result<ReverseKernel> {
    if !(0.0 < t && t <= 1.0) {
        return Err(Error::domain(format!("reverse kernel needs t in (0, 1], got {t}")));
    }
    let alpha = NoiseSchedule.alpha(t);
    let (gain, cov) = reverse_kernel_parts(prior, t)?;
    let means = prior
        .means
        .iter()
        .map(|mu| mu + &gain * (z_t - mu * alpha))
        .collect();
    let chol = cholesky_with_jitter(&cov)
        .map(|c| c.l_dirty().lower_triangle())
        .unwrap_or_else(|_| DMatrix::zeros(prior.dim(), prior.dim()));
    Ok(ReverseKernel { means, cov, chol })
}

/// Normalized mixture responsibilities at (t, z_t) and the mixture score.
///
/// Weights are computed by log-sum-exp; the score is the
/// responsibility-weighted sum of Gaussian component scores
/// -Sigma_t^{-1}(z_t - mu_{t,k}).
pub fn gm_prior_score(
    prior: &GaussianMixturePrior,
    t: f64,
    z_t: &DVector<f64>,
) -> Result<(DVector<f64>, Vec<f64>)> {
    let (means_t, cov_t) = gm_forward_marginal(prior, t)?;
    let chol_t = cholesky_with_jitter(&cov_t)?;
    let log_w: Vec<f64> = means_t
        .iter()
        .map(|m| -0.5 * chol_mahalanobis_sq(&chol_t, &(z_t - m)))
        .collect();
    let weights = normalize_log_weights(&log_w)?;
    let mut mean_bar = DVector::zeros(prior.dim());
    for (w, m) in weights.iter().zip(&means_t) {
        mean_bar += m * *w;
    }
    let score = -chol_t.solve(&(z_t - mean_bar));
    Ok((score, weights))
}

/// Monte Carlo prior score of the raw ensemble (the mixture degenerates to
/// per-sample point masses): weights over members proportional to
/// N(z_t; alpha_t x_j, beta_t^2 I).
pub fn ensf_prior_score(ensemble: &Ensemble, t: f64, z_t: &DVector<f64>) -> Result<DVector<f64>> {
    let schedule = NoiseSchedule;
    if !(0.0 < t && t <= 1.0) {
        return Err(Error::domain(format!("prior score needs t in (0, 1], got {t}")));
    }
    let beta_sq = schedule.beta_sq(t);
    if beta_sq == 0.0 {
        return Err(Error::ScheduleSingularity(t));
    }
    let alpha = schedule.alpha(t);
    let log_w: Vec<f64> = ensemble
        .iter()
        .map(|x| -(z_t - x * alpha).norm_squared() / (2.0 * beta_sq))
        .collect();
    let weights = normalize_log_weights(&log_w)?;
    let mut weighted_mean = DVector::zeros(ensemble.dim());
    for (w, x) in weights.iter().zip(ensemble.iter()) {
        weighted_mean += x * *w;
    }
    Ok(-(z_t - weighted_mean * alpha) / beta_sq)
}

/// Softmax in the log domain. Errors only if every entry is -inf.
pub fn normalize_log_weights(log_w: &[f64]) -> Result<Vec<f64>> {
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut weights: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= total;
    }
    Ok(weights)
}

/// Log-density of the diffused mixture at (t, z_t); used by the
/// finite-difference tests as the score's integral.
pub fn gm_forward_logpdf(prior: &GaussianMixturePrior, t: f64, z_t: &DVector<f64>) -> Result<f64> {
    let (means_t, cov_t) = gm_forward_marginal(prior, t)?;
    let chol_t = cholesky_with_jitter(&cov_t)?;
    let d = prior.dim() as f64;
    let log_norm = -0.5 * (d * LN_2PI + chol_log_det(&chol_t));
    let log_pi = -(prior.components() as f64).ln();
    let terms: Vec<f64> = means_t
        .iter()
        .map(|m| log_pi + log_norm - 0.5 * chol_mahalanobis_sq(&chol_t, &(z_t - m)))
        .collect();
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|x| (x - max).exp()).sum::<f64>().ln())
}

pub(crate) fn shared_chol(
    prior: &GaussianMixturePrior,
    t: f64,
) -> Result<(f64, f64, Cholesky<f64, Dyn>)> {
    let schedule = NoiseSchedule;
    let alpha = schedule.alpha(t);
    let beta_sq = schedule.beta_sq(t);
    let d = prior.dim();
    let mut sigma_t = &prior.shared_cov * (alpha * alpha);
    for i in 0..d {
        sigma_t[(i, i)] += beta_sq;
    }
    Ok((alpha, beta_sq, cholesky_with_jitter(&sigma_t)?))
}
