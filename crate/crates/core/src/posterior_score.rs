//! Assembly of the approximate posterior score for reverse-SDE sampling.
//!
//! The score combines responsibility-weighted Gaussian component scores of
//! the diffused mixture prior with a time-scaled likelihood term:
//!
//!   score(z, t) = sum_k softmax(log w_prior + log w_obs)(k) * S_k(z, t)
//!               + J(t) * likelihood_score(y | mu_bar(z, t))
//!
//! where J(t) = alpha_t Sigma (alpha_t^2 Sigma + beta_t^2 I)^{-1} and
//! mu_bar is a Kalman-type update of a Gaussian reference posterior. The
//! heuristic damped score (prior Monte Carlo score plus h(t) times the
//! likelihood score at z itself) is kept as a baseline mode.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::diffusion::{NoiseSchedule, ScoreModel, ScoreStep};
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gaussian::{chol_log_det, chol_mahalanobis_sq, cholesky_with_jitter, LN_2PI};
use crate::gm_prior::{
    gm_reverse_kernel, normalize_log_weights, reverse_kernel_parts, GaussianMixturePrior,
    ReverseKernel,
};
use crate::models::{ObservationKind, ObservationModel};

/// Gaussian surrogate for the unknown posterior; anchors the likelihood
/// score evaluation point and is refined by the outer iteration.
#[derive(Debug, Clone)]
pub struct ReferencePosterior {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

/// How the per-component observation factor is approximated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObsWeightMode {
    /// Linearize the operator at each component's reverse-kernel mean
    /// (default): log N(y; M(m_k), H_k S H_k^T + R).
    ComponentPoint,
    /// Constant-operator approximation: log likelihood at the kernel mean.
    ZerothOrder,
    /// One shared linearization point (the reference mean) with a shifted
    /// innovation.
    SharedPoint,
    /// No observation factor; posterior weights reduce to prior weights.
    Off,
}

/// Which posterior-score construction drives the sampler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreMethod {
    /// Mixture weights + J(t)-scaled likelihood score at the reference point.
    Iensf,
    /// Monte Carlo prior score + h(t)-damped likelihood score at z itself.
    Ensf,
}

#[derive(Debug, Clone, Copy)]
pub struct ScoreConfig {
    pub obs_weight_mode: ObsWeightMode,
    pub method: ScoreMethod,
    /// Damping h(t) for the baseline mode; must satisfy h(0) = 1, h(1) = 0
    /// and decrease monotonically.
    pub ensf_damping: fn(f64) -> f64,
}

fn default_damping(t: f64) -> f64 {
    1.0 - t
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            obs_weight_mode: ObsWeightMode::ComponentPoint,
            method: ScoreMethod::Iensf,
            ensf_damping: default_damping,
        }
    }
}

impl ScoreConfig {
    /// Checks the damping boundary conditions and monotonicity on a grid.
    pub fn validate(&self) -> Result<()> {
        let h = self.ensf_damping;
        if (h(0.0) - 1.0).abs() > 1e-12 || h(1.0).abs() > 1e-12 {
            return Err(Error::config("damping must satisfy h(0) = 1, h(1) = 0"));
        }
        let mut prev = h(0.0);
        for i in 1..=100 {
            let v = h(i as f64 / 100.0);
            if v > prev + 1e-12 {
                return Err(Error::config("damping must be monotone decreasing"));
            }
            prev = v;
        }
        Ok(())
    }
}

/// J(t) = alpha_t Sigma (alpha_t^2 Sigma + beta_t^2 I)^{-1}, the Jacobian of
/// the reverse-kernel mean in z_t. J(0) = I and J(1) = 0.
pub fn time_scaling(prior_cov: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>> {
    let schedule = NoiseSchedule;
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::domain(format!("pseudo-time {t} outside [0, 1]")));
    }
    let alpha = schedule.alpha(t);
    let beta_sq = schedule.beta_sq(t);
    let d = prior_cov.nrows();
    let mut sigma_t = prior_cov * (alpha * alpha);
    for i in 0..d {
        sigma_t[(i, i)] += beta_sq;
    }
    let chol = cholesky_with_jitter(&sigma_t)?;
    // Sigma and Sigma_t commute, so Sigma Sigma_t^{-1} = (Sigma_t^{-1} Sigma)^T
    Ok(chol.solve(prior_cov).transpose() * alpha)
}

/// Kalman-type evaluation point for the likelihood score:
/// mu_bar(z) = mu* + alpha_t Sigma* (alpha_t^2 Sigma* + beta_t^2 I)^{-1}
/// (z - alpha_t mu*). Interpolates between z at t = 0 and mu* at t = 1.
pub fn reference_eval_point(
    reference: &ReferencePosterior,
    t: f64,
    z_t: &DVector<f64>,
) -> Result<DVector<f64>> {
    let gain = time_scaling(&reference.cov, t)?;
    let alpha = NoiseSchedule.alpha(t);
    Ok(&reference.mean + gain * (z_t - &reference.mean * alpha))
}

/// Unnormalized per-component observation log-factors at (t, z_t).
///
/// `kernel` must have been computed at the same (t, z_t). The shared-point
/// mode linearizes at `shared_point` (the reference mean in the sampler).
pub fn observation_log_weights(
    obs: &ObservationModel,
    y: &DVector<f64>,
    kernel: &ReverseKernel,
    mode: ObsWeightMode,
    shared_point: Option<&DVector<f64>>,
) -> Result<Vec<f64>> {
    let k = kernel.means.len();
    match mode {
        ObsWeightMode::Off => Ok(vec![0.0; k]),
        ObsWeightMode::ZerothOrder => Ok(kernel
            .means
            .iter()
            .map(|m| obs.log_likelihood(y, m))
            .collect()),
        ObsWeightMode::ComponentPoint => kernel
            .means
            .iter()
            .map(|m| {
                let jac = obs.jacobian(m)?;
                let innov_cov = &jac * &kernel.cov * jac.transpose() + &obs.noise_cov;
                let chol = cholesky_with_jitter(&innov_cov)?;
                let r = y.len() as f64;
                let diff = y - obs.apply(m);
                Ok(-0.5 * (r * LN_2PI + chol_log_det(&chol) + chol_mahalanobis_sq(&chol, &diff)))
            })
            .collect(),
        ObsWeightMode::SharedPoint => {
            let point = shared_point.ok_or_else(|| {
                Error::config("shared-point observation weights need an expansion point")
            })?;
            let jac = obs.jacobian(point)?;
            // shifted innovation: y* = y - M(mu*) + H mu*
            let y_star = y - obs.apply(point) + &jac * point;
            let innov_cov = &jac * &kernel.cov * jac.transpose() + &obs.noise_cov;
            let chol = cholesky_with_jitter(&innov_cov)?;
            Ok(kernel
                .means
                .iter()
                .map(|m| -0.5 * chol_mahalanobis_sq(&chol, &(&y_star - &jac * m)))
                .collect())
        }
    }
}

/// One-shot evaluation of the assembled posterior score at (t, z_t).
pub fn iensf_score(
    prior: &GaussianMixturePrior,
    reference: &ReferencePosterior,
    obs: &ObservationModel,
    y: &DVector<f64>,
    t: f64,
    z_t: &DVector<f64>,
    cfg: &ScoreConfig,
) -> Result<DVector<f64>> {
    let model = GmPosteriorScore::new(prior, reference, obs, y, *cfg);
    let step = model.prepare_step(t)?;
    Ok(step.eval(z_t))
}

/// One-shot evaluation of the damped heuristic posterior score at (t, z_t).
pub fn ensf_score(
    ensemble: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    t: f64,
    z_t: &DVector<f64>,
    cfg: &ScoreConfig,
) -> Result<DVector<f64>> {
    let model = EnsfScore::new(ensemble, obs, y, *cfg);
    let step = model.prepare_step(t)?;
    Ok(step.eval(z_t))
}

/// Mixture posterior score bound to one (prior, reference, observation).
pub struct GmPosteriorScore<'a> {
    prior: &'a GaussianMixturePrior,
    reference: &'a ReferencePosterior,
    obs: &'a ObservationModel,
    y: &'a DVector<f64>,
    cfg: ScoreConfig,
}

impl<'a> GmPosteriorScore<'a> {
    pub fn new(
        prior: &'a GaussianMixturePrior,
        reference: &'a ReferencePosterior,
        obs: &'a ObservationModel,
        y: &'a DVector<f64>,
        cfg: ScoreConfig,
    ) -> Self {
        GmPosteriorScore { prior, reference, obs, y, cfg }
    }

    fn prepare_step(&self, t: f64) -> Result<GmScoreStep<'_>> {
        let prior = self.prior;
        let d = prior.dim();
        let alpha = NoiseSchedule.alpha(t);

        // shared diffused-mixture factorization (one per reverse step)
        let (_, _, chol_t) = crate::gm_prior::shared_chol(prior, t)?;
        let means_t: Vec<DVector<f64>> = prior.means().iter().map(|m| m * alpha).collect();

        // reverse-kernel gain and conditional covariance; the gain is also
        // the likelihood time-scaling J(t)
        let (gain, kernel_cov) = reverse_kernel_parts(prior, t)?;

        // reference-based evaluation point mu_bar(z) = ref_offset + ref_gain z
        let ref_gain = time_scaling(&self.reference.cov, t)?;
        let ref_offset = &self.reference.mean - &ref_gain * (&self.reference.mean * alpha);

        let obs_cache = match self.cfg.obs_weight_mode {
            ObsWeightMode::Off => ObsCache::Off,
            mode => self.build_obs_cache(mode, alpha, &gain, &kernel_cov)?,
        };

        Ok(GmScoreStep {
            model: self,
            chol_t,
            means_t,
            gain,
            kernel_cov,
            ref_gain,
            ref_offset,
            obs_cache,
            alpha,
        })
    }

    /// Precomputations for the observation factor that are shared by all
    /// members at one reverse step.
    fn build_obs_cache(
        &self,
        mode: ObsWeightMode,
        alpha: f64,
        gain: &DMatrix<f64>,
        kernel_cov: &DMatrix<f64>,
    ) -> Result<ObsCache> {
        let prior = self.prior;
        if let Some(indices) = self.obs.observed_indices() {
            // selection-shaped operators: all per-component quantities only
            // involve the kernel mean at the observed indices, so the gain
            // rows and the projected kernel covariance are enough
            let r = indices.len();
            let d = prior.dim();
            let gain_rows = DMatrix::from_fn(r, d, |i, j| gain[(indices[i], j)]);
            let mean_offsets: Vec<DVector<f64>> = prior
                .means()
                .iter()
                .map(|mu| {
                    DVector::from_fn(r, |i, _| mu[indices[i]]) - &gain_rows * (mu * alpha)
                })
                .collect();
            let projected_cov =
                DMatrix::from_fn(r, r, |i, j| kernel_cov[(indices[i], indices[j])]);

            let linear_chol = match (&self.obs.kind, mode) {
                // linear selection: the innovation covariance is component-
                // independent; factor once
                (ObservationKind::SelectLinear { .. }, ObsWeightMode::ComponentPoint) => {
                    Some(cholesky_with_jitter(&(&projected_cov + &self.obs.noise_cov))?)
                }
                _ => None,
            };

            let shared = if mode == ObsWeightMode::SharedPoint {
                let point = &self.reference.mean;
                let jac = self.obs.jacobian(point)?;
                let y_star = self.y - self.obs.apply(point) + &jac * point;
                let scales = self
                    .obs
                    .row_scales(|row| point[indices[row]])
                    .expect("selection-shaped operator");
                let mut scaled = projected_cov.clone();
                for i in 0..r {
                    for j in 0..r {
                        scaled[(i, j)] *= scales[i] * scales[j];
                    }
                }
                let chol = cholesky_with_jitter(&(scaled + &self.obs.noise_cov))?;
                Some(SharedPointCache { y_star, scales, chol })
            } else {
                None
            };

            Ok(ObsCache::Selection {
                mode,
                gain_rows,
                mean_offsets,
                projected_cov,
                linear_chol,
                shared,
            })
        } else {
            // dense fallback (radial operator in 2-D experiments)
            let shared = if mode == ObsWeightMode::SharedPoint {
                let point = &self.reference.mean;
                let jac = self.obs.jacobian(point)?;
                let y_star = self.y - self.obs.apply(point) + &jac * point;
                let innov_cov = &jac * kernel_cov * jac.transpose() + &self.obs.noise_cov;
                let chol = cholesky_with_jitter(&innov_cov)?;
                Some(DenseSharedCache { y_star, jac, chol })
            } else {
                None
            };
            Ok(ObsCache::Dense { mode, shared })
        }
    }
}

struct SharedPointCache {
    y_star: DVector<f64>,
    scales: Vec<f64>,
    chol: Cholesky<f64, Dyn>,
}

struct DenseSharedCache {
    y_star: DVector<f64>,
    jac: DMatrix<f64>,
    chol: Cholesky<f64, Dyn>,
}

enum ObsCache {
    Off,
    Selection {
        mode: ObsWeightMode,
        /// Rows of the kernel gain at the observed indices (r x d).
        gain_rows: DMatrix<f64>,
        /// Per component: kernel mean at observed indices minus
        /// gain_rows * (alpha mu_k); add gain_rows * z to finish.
        mean_offsets: Vec<DVector<f64>>,
        /// Kernel covariance restricted to observed indices (r x r).
        projected_cov: DMatrix<f64>,
        /// Factorization shared across components for linear selection.
        linear_chol: Option<Cholesky<f64, Dyn>>,
        shared: Option<SharedPointCache>,
    },
    Dense {
        mode: ObsWeightMode,
        shared: Option<DenseSharedCache>,
    },
}

pub struct GmScoreStep<'a> {
    model: &'a GmPosteriorScore<'a>,
    chol_t: Cholesky<f64, Dyn>,
    means_t: Vec<DVector<f64>>,
    /// Reverse-kernel gain == J(t).
    gain: DMatrix<f64>,
    kernel_cov: DMatrix<f64>,
    ref_gain: DMatrix<f64>,
    ref_offset: DVector<f64>,
    obs_cache: ObsCache,
    alpha: f64,
}

impl GmScoreStep<'_> {
    /// Posterior mixture weights at z (normalized).
    fn posterior_weights(&self, z: &DVector<f64>) -> Vec<f64> {
        let mut log_w: Vec<f64> = self
            .means_t
            .iter()
            .map(|m| -0.5 * chol_mahalanobis_sq(&self.chol_t, &(z - m)))
            .collect();
        self.add_obs_log_weights(z, &mut log_w);
        normalize_log_weights(&log_w).expect("finite mixture weights")
    }

    fn add_obs_log_weights(&self, z: &DVector<f64>, log_w: &mut [f64]) {
        let obs = self.model.obs;
        let y = self.model.y;
        match &self.obs_cache {
            ObsCache::Off => {}
            ObsCache::Selection {
                mode,
                gain_rows,
                mean_offsets,
                projected_cov,
                linear_chol,
                shared,
            } => {
                let r = projected_cov.nrows();
                let projected_z = gain_rows * z;
                match mode {
                    ObsWeightMode::ZerothOrder => {
                        for (lw, offset) in log_w.iter_mut().zip(mean_offsets) {
                            let mean_obs = offset + &projected_z;
                            // log likelihood of y given the kernel mean;
                            // selection shape means M acts coordinate-wise
                            let m_val = self.apply_selected(&mean_obs);
                            *lw += -0.5
                                * chol_mahalanobis_sq(obs.noise_chol(), &(y - m_val));
                        }
                    }
                    ObsWeightMode::ComponentPoint => {
                        for (lw, offset) in log_w.iter_mut().zip(mean_offsets) {
                            let mean_obs = offset + &projected_z;
                            let m_val = self.apply_selected(&mean_obs);
                            let diff = y - m_val;
                            if let Some(chol) = linear_chol {
                                // normalizer is component-independent here
                                *lw += -0.5 * chol_mahalanobis_sq(chol, &diff);
                            } else {
                                let scales = obs
                                    .row_scales(|row| mean_obs[row])
                                    .expect("selection-shaped operator");
                                let mut innov = projected_cov.clone();
                                for i in 0..r {
                                    for j in 0..r {
                                        innov[(i, j)] *= scales[i] * scales[j];
                                    }
                                }
                                innov += &obs.noise_cov;
                                let chol = cholesky_with_jitter(&innov)
                                    .expect("innovation covariance is PSD");
                                *lw += -0.5
                                    * (r as f64 * LN_2PI
                                        + chol_log_det(&chol)
                                        + chol_mahalanobis_sq(&chol, &diff));
                            }
                        }
                    }
                    ObsWeightMode::SharedPoint => {
                        let cache = shared.as_ref().expect("cache built for shared mode");
                        for (lw, offset) in log_w.iter_mut().zip(mean_offsets) {
                            let mean_obs = offset + &projected_z;
                            let h_mu = DVector::from_fn(r, |i, _| cache.scales[i] * mean_obs[i]);
                            *lw += -0.5
                                * chol_mahalanobis_sq(&cache.chol, &(&cache.y_star - h_mu));
                        }
                    }
                    ObsWeightMode::Off => unreachable!(),
                }
            }
            ObsCache::Dense { mode, shared } => {
                for (k, lw) in log_w.iter_mut().enumerate() {
                    let mu = &self.model.prior.means()[k];
                    let kernel_mean = mu + &self.gain * (z - mu * self.alpha);
                    match mode {
                        ObsWeightMode::ZerothOrder => {
                            *lw += obs.log_likelihood(y, &kernel_mean);
                        }
                        ObsWeightMode::ComponentPoint => {
                            let jac = obs.jacobian(&kernel_mean).expect("jacobian");
                            let innov_cov =
                                &jac * &self.kernel_cov * jac.transpose() + &obs.noise_cov;
                            let chol =
                                cholesky_with_jitter(&innov_cov).expect("innovation PSD");
                            let diff = y - obs.apply(&kernel_mean);
                            *lw += -0.5
                                * (y.len() as f64 * LN_2PI
                                    + chol_log_det(&chol)
                                    + chol_mahalanobis_sq(&chol, &diff));
                        }
                        ObsWeightMode::SharedPoint => {
                            let cache = shared.as_ref().expect("cache built for shared mode");
                            let diff = &cache.y_star - &cache.jac * kernel_mean;
                            *lw += -0.5 * chol_mahalanobis_sq(&cache.chol, &diff);
                        }
                        ObsWeightMode::Off => unreachable!(),
                    }
                }
            }
        }
    }

    /// Applies the (selection-shaped) operator to a vector already gathered
    /// at the observed indices.
    fn apply_selected(&self, v: &DVector<f64>) -> DVector<f64> {
        match &self.model.obs.kind {
            ObservationKind::SelectLinear { .. } => v.clone(),
            ObservationKind::ArctanSelected { .. } => v.map(|x| x.atan()),
            ObservationKind::Radial { .. } => unreachable!("radial uses the dense path"),
        }
    }
}

impl ScoreStep for GmScoreStep<'_> {
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let weights = self.posterior_weights(z);
        let mut weighted_mean = DVector::zeros(z.len());
        for (w, m) in weights.iter().zip(&self.means_t) {
            weighted_mean += m * *w;
        }
        let mut score = -self.chol_t.solve(&(z - weighted_mean));

        // likelihood term: J(t) * score_{Y|X}(y | mu_bar(z))
        let eval_point = &self.ref_offset + &self.ref_gain * z;
        if let Ok(lik_score) = self.model.obs.likelihood_score(self.model.y, &eval_point) {
            score += &self.gain * lik_score;
        } else {
            // singular Jacobian (radial operator at its center): the
            // likelihood contribution is left out at this isolated point
            debug_assert!(matches!(self.model.obs.kind, ObservationKind::Radial { .. }));
        }
        score
    }
}

impl ScoreModel for GmPosteriorScore<'_> {
    fn prepare(&self, t: f64) -> Result<Box<dyn ScoreStep + '_>> {
        Ok(Box::new(self.prepare_step(t)?))
    }
}

/// Baseline heuristic score: Monte Carlo prior score over the raw ensemble
/// plus a damped likelihood score evaluated at z itself.
pub struct EnsfScore<'a> {
    ensemble: &'a Ensemble,
    obs: &'a ObservationModel,
    y: &'a DVector<f64>,
    cfg: ScoreConfig,
}

impl<'a> EnsfScore<'a> {
    pub fn new(
        ensemble: &'a Ensemble,
        obs: &'a ObservationModel,
        y: &'a DVector<f64>,
        cfg: ScoreConfig,
    ) -> Self {
        EnsfScore { ensemble, obs, y, cfg }
    }

    fn prepare_step(&self, t: f64) -> Result<EnsfScoreStep<'a>> {
        let schedule = NoiseSchedule;
        let beta_sq = schedule.beta_sq(t);
        if beta_sq == 0.0 {
            return Err(Error::ScheduleSingularity(t));
        }
        Ok(EnsfScoreStep {
            ensemble: self.ensemble,
            obs: self.obs,
            y: self.y,
            alpha: schedule.alpha(t),
            beta_sq,
            damping: (self.cfg.ensf_damping)(t),
        })
    }
}

pub struct EnsfScoreStep<'a> {
    ensemble: &'a Ensemble,
    obs: &'a ObservationModel,
    y: &'a DVector<f64>,
    alpha: f64,
    beta_sq: f64,
    damping: f64,
}

impl ScoreStep for EnsfScoreStep<'_> {
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        let log_w: Vec<f64> = self
            .ensemble
            .iter()
            .map(|x| -(z - x * self.alpha).norm_squared() / (2.0 * self.beta_sq))
            .collect();
        let weights = normalize_log_weights(&log_w).expect("finite weights");
        let mut weighted_mean = DVector::zeros(z.len());
        for (w, x) in weights.iter().zip(self.ensemble.iter()) {
            weighted_mean += x * *w;
        }
        let mut score = -(z - weighted_mean * self.alpha) / self.beta_sq;
        if self.damping != 0.0 {
            if let Ok(lik_score) = self.obs.likelihood_score(self.y, z) {
                score += lik_score * self.damping;
            }
        }
        score
    }
}

impl ScoreModel for EnsfScore<'_> {
    fn prepare(&self, t: f64) -> Result<Box<dyn ScoreStep + '_>> {
        Ok(Box::new(self.prepare_step(t)?))
    }
}

/// Normalized posterior weights at (t, z_t); the softmax of prior and
/// observation log-factors. Exposed for tests and diagnostics.
pub fn posterior_weights(
    prior: &GaussianMixturePrior,
    reference: &ReferencePosterior,
    obs: &ObservationModel,
    y: &DVector<f64>,
    t: f64,
    z_t: &DVector<f64>,
    cfg: &ScoreConfig,
) -> Result<Vec<f64>> {
    let model = GmPosteriorScore::new(prior, reference, obs, y, *cfg);
    let step = model.prepare_step(t)?;
    Ok(step.posterior_weights(z_t))
}

/// Reference implementation of the posterior weights straight from the
/// spec-level operations; used to pin the cached fast paths.
pub fn posterior_weights_reference(
    prior: &GaussianMixturePrior,
    reference: &ReferencePosterior,
    obs: &ObservationModel,
    y: &DVector<f64>,
    t: f64,
    z_t: &DVector<f64>,
    mode: ObsWeightMode,
) -> Result<Vec<f64>> {
    let (_, w_prior) = crate::gm_prior::gm_prior_score(prior, t, z_t)?;
    let kernel = gm_reverse_kernel(prior, t, z_t)?;
    let log_obs = observation_log_weights(obs, y, &kernel, mode, Some(&reference.mean))?;
    let log_w: Vec<f64> = w_prior
        .iter()
        .zip(&log_obs)
        .map(|(wp, lo)| wp.max(1e-300).ln() + lo)
        .collect();
    normalize_log_weights(&log_w)
}
