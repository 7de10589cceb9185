//! Evaluation metrics and independent ground-truth oracles: dense-grid
//! Bayes posterior for low-dimensional problems, RMSE splits over
//! observed/unobserved indices, and ensemble-vs-Gaussian KL.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gaussian::{cholesky_with_jitter, gaussian_kl, sample_mean_cov, GaussianParams};
use crate::models::ObservationModel;

/// Per-axis uniform grid.
#[derive(Debug, Clone)]
pub struct GridAxis {
    pub lo: f64,
    pub hi: f64,
    pub n: usize,
}

impl GridAxis {
    pub fn new(lo: f64, hi: f64, n: usize) -> Self {
        assert!(hi > lo && n >= 2);
        GridAxis { lo, hi, n }
    }

    fn value(&self, i: usize) -> f64 {
        self.lo + (self.hi - self.lo) * (i as f64 + 0.5) / self.n as f64
    }

    fn step(&self) -> f64 {
        (self.hi - self.lo) / self.n as f64
    }
}

/// Deterministic dense-grid posterior: normalized log-density on the grid
/// plus quadrature moments.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub axes: Vec<GridAxis>,
    /// Normalized log-density at cell centers, row-major over the axes.
    pub log_density: Vec<f64>,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl GridPosterior {
    pub fn gaussian_fit(&self) -> GaussianParams {
        GaussianParams::new(self.mean.clone(), self.cov.clone())
    }
}

fn for_each_cell(axes: &[GridAxis], mut f: impl FnMut(usize, &DVector<f64>)) {
    let d = axes.len();
    let mut idx = vec![0usize; d];
    let total: usize = axes.iter().map(|a| a.n).product();
    let mut x = DVector::zeros(d);
    for flat in 0..total {
        for (j, axis) in axes.iter().enumerate() {
            x[j] = axis.value(idx[j]);
        }
        f(flat, &x);
        for j in (0..d).rev() {
            idx[j] += 1;
            if idx[j] < axes[j].n {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// Evaluates log prior + log likelihood on the grid, normalizes by
/// log-sum-exp with the cell volume, and integrates the first two moments.
/// Supported for d <= 3.
pub fn grid_bayes_oracle(
    log_prior: impl Fn(&DVector<f64>) -> f64,
    obs: &ObservationModel,
    y: &DVector<f64>,
    axes: Vec<GridAxis>,
) -> Result<GridPosterior> {
    let d = axes.len();
    if d == 0 || d > 3 {
        return Err(Error::config(format!("grid oracle supports 1..=3 dimensions, got {d}")));
    }
    let total: usize = axes.iter().map(|a| a.n).product();
    let log_volume: f64 = axes.iter().map(|a| a.step().ln()).sum();

    let mut log_density = vec![0.0; total];
    for_each_cell(&axes, |flat, x| {
        log_density[flat] = log_prior(x) + obs.log_likelihood(y, x);
    });

    let max = log_density.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::GridCoverage);
    }
    let log_mass = max
        + log_density
            .iter()
            .map(|l| (l - max).exp())
            .sum::<f64>()
            .ln()
        + log_volume;
    for l in &mut log_density {
        *l -= log_mass;
    }

    // quadrature moments with the normalized cell masses
    let mut mean = DVector::zeros(d);
    for_each_cell(&axes, |flat, x| {
        let mass = (log_density[flat] + log_volume).exp();
        mean.axpy(mass, x, 1.0);
    });
    let mut cov = DMatrix::zeros(d, d);
    for_each_cell(&axes, |flat, x| {
        let mass = (log_density[flat] + log_volume).exp();
        let diff = x - &mean;
        cov.syger(mass, &diff, &diff, 1.0);
    });
    cov.fill_upper_triangle_with_lower_triangle();

    Ok(GridPosterior { axes, log_density, mean, cov })
}

/// RMSE over observed indices, unobserved indices, and all coordinates.
/// Empty subsets yield `None` for the corresponding field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RmseSplit {
    pub observed: Option<f64>,
    pub unobserved: Option<f64>,
    pub all: f64,
}

pub fn rmse_split(estimate: &DVector<f64>, truth: &DVector<f64>, observed_idx: &[usize]) -> RmseSplit {
    assert_eq!(estimate.len(), truth.len());
    let d = truth.len();
    let is_observed = {
        let mut mask = vec![false; d];
        for &i in observed_idx {
            mask[i] = true;
        }
        mask
    };
    let mut sq_obs = 0.0;
    let mut sq_unobs = 0.0;
    let mut n_obs = 0usize;
    for i in 0..d {
        let e = estimate[i] - truth[i];
        if is_observed[i] {
            sq_obs += e * e;
            n_obs += 1;
        } else {
            sq_unobs += e * e;
        }
    }
    let n_unobs = d - n_obs;
    RmseSplit {
        observed: (n_obs > 0).then(|| (sq_obs / n_obs as f64).sqrt()),
        unobserved: (n_unobs > 0).then(|| (sq_unobs / n_unobs as f64).sqrt()),
        all: ((sq_obs + sq_unobs) / d as f64).sqrt(),
    }
}

/// Fits a Gaussian to the ensemble and returns KL(fit || reference).
pub fn ensemble_kl(ensemble: &Ensemble, reference: &GaussianParams) -> Result<f64> {
    let k = ensemble.size();
    let d = ensemble.dim();
    if k < d + 2 {
        return Err(Error::InsufficientSamples { need: d + 2, got: k });
    }
    let stats = sample_mean_cov(ensemble)?;
    let fit = GaussianParams::new(stats.mean, stats.cov);
    gaussian_kl(&fit, reference)
}

/// Random-walk Metropolis sampler over the same log-posterior the grid
/// oracle integrates; optional cross-validation instrument, not an
/// acceptance gate.
pub fn metropolis_sample<R: Rng>(
    log_prior: impl Fn(&DVector<f64>) -> f64,
    obs: &ObservationModel,
    y: &DVector<f64>,
    init: DVector<f64>,
    step_scale: f64,
    n_steps: usize,
    burn_in: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let d = init.len();
    let mut x = init;
    let mut log_p = log_prior(&x) + obs.log_likelihood(y, &x);
    let mut out = Vec::with_capacity(n_steps.saturating_sub(burn_in));
    for step in 0..n_steps {
        let proposal = &x + DVector::from_fn(d, |_, _| {
            step_scale * rng.sample::<f64, _>(StandardNormal)
        });
        let log_p_new = log_prior(&proposal) + obs.log_likelihood(y, &proposal);
        let accept = (log_p_new - log_p).exp();
        if rng.random::<f64>() < accept {
            x = proposal;
            log_p = log_p_new;
        }
        if step >= burn_in {
            out.push(x.clone());
        }
    }
    out
}

/// Log-density of a Gaussian prior, for handing to the oracles.
pub fn gaussian_log_prior(params: &GaussianParams) -> Result<impl Fn(&DVector<f64>) -> f64> {
    let chol = cholesky_with_jitter(&params.cov)?;
    let mean = params.mean.clone();
    let d = params.dim() as f64;
    let log_norm = -0.5 * (d * crate::gaussian::LN_2PI + crate::gaussian::chol_log_det(&chol));
    Ok(move |x: &DVector<f64>| {
        log_norm - 0.5 * crate::gaussian::chol_mahalanobis_sq(&chol, &(x - &mean))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::kf_posterior_static;
    use crate::models::ObservationKind;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;

    fn scenario_prior() -> GaussianParams {
        GaussianParams::new(dvector![0.0, 0.0], dmatrix![0.5, -0.4; -0.4, 0.5])
    }

    fn default_axes(n: usize) -> Vec<GridAxis> {
        vec![GridAxis::new(-5.0, 5.0, n), GridAxis::new(-5.0, 5.0, n)]
    }

    #[test]
    fn density_integrates_to_one() {
        let prior = scenario_prior();
        let log_prior = gaussian_log_prior(&prior).unwrap();
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 0.5)
                .unwrap();
        let grid = grid_bayes_oracle(log_prior, &obs, &dvector![0.5], default_axes(200)).unwrap();
        let log_volume: f64 = grid.axes.iter().map(|a| a.step().ln()).sum();
        let mass: f64 = grid.log_density.iter().map(|l| (l + log_volume).exp()).sum();
        assert_abs_diff_eq!(mass, 1.0, epsilon = 1e-6);
    }

    #[test]
    fn flat_likelihood_returns_prior_moments() {
        let prior = scenario_prior();
        let log_prior = gaussian_log_prior(&prior).unwrap();
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1e6)
                .unwrap();
        let grid = grid_bayes_oracle(log_prior, &obs, &dvector![0.0], default_axes(320)).unwrap();
        assert!((grid.mean - &prior.mean).norm() < 1e-4);
        assert!((grid.cov - &prior.cov).norm() < 1e-3);
    }

    #[test]
    fn linear_observation_matches_kalman_posterior() {
        let prior = scenario_prior();
        let log_prior = gaussian_log_prior(&prior).unwrap();
        let sigma = 0.1;
        let obs = ObservationModel::with_sigma(
            ObservationKind::SelectLinear { indices: vec![0] },
            sigma,
        )
        .unwrap();
        let y = dvector![3.0];
        let axes = vec![GridAxis::new(-2.0, 5.0, 500), GridAxis::new(-5.5, 2.0, 500)];
        let grid = grid_bayes_oracle(log_prior, &obs, &y, axes).unwrap();
        let (kf_mean, kf_cov) = kf_posterior_static(
            &prior.mean,
            &prior.cov,
            &dmatrix![1.0, 0.0],
            &obs.noise_cov,
            &y,
        )
        .unwrap();
        assert!(
            (&grid.mean - &kf_mean).norm() < 1e-5,
            "grid {:?} vs kf {:?}",
            grid.mean,
            kf_mean
        );
        assert!((&grid.cov - &kf_cov).norm() < 1e-4);
    }

    #[test]
    fn refinement_invariance() {
        let prior = scenario_prior();
        let obs = ObservationModel::with_sigma(
            ObservationKind::Radial { center: dvector![1.0, 1.0] },
            0.1,
        )
        .unwrap();
        let y = dvector![1.5];
        let coarse = grid_bayes_oracle(
            gaussian_log_prior(&prior).unwrap(),
            &obs,
            &y,
            default_axes(300),
        )
        .unwrap();
        let fine = grid_bayes_oracle(
            gaussian_log_prior(&prior).unwrap(),
            &obs,
            &y,
            default_axes(600),
        )
        .unwrap();
        assert!(
            (&coarse.mean - &fine.mean).norm() <= 1e-4,
            "mean moved {}",
            (&coarse.mean - &fine.mean).norm()
        );
        assert!((&coarse.cov - &fine.cov).norm() <= 1e-4);
    }

    #[test]
    fn missing_mass_is_a_coverage_error() {
        let prior = scenario_prior();
        let log_prior = gaussian_log_prior(&prior).unwrap();
        let obs = ObservationModel::with_sigma(
            ObservationKind::SelectLinear { indices: vec![0] },
            1e-4,
        )
        .unwrap();
        // likelihood mass sits at x1 = 1000, far outside the grid: every
        // cell underflows to -inf
        let result = grid_bayes_oracle(log_prior, &obs, &dvector![1000.0], default_axes(50));
        assert!(matches!(result, Err(Error::GridCoverage)));
    }

    #[test]
    fn rmse_split_cases() {
        let truth = dvector![1.0, 2.0, 3.0, 4.0];
        let split = rmse_split(&truth.clone(), &truth, &[0, 2]);
        assert_eq!(split, RmseSplit { observed: Some(0.0), unobserved: Some(0.0), all: 0.0 });

        let est = dvector![2.0, 3.0, 4.0, 5.0];
        let split = rmse_split(&est, &truth, &[0, 2]);
        assert_abs_diff_eq!(split.observed.unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(split.unobserved.unwrap(), 1.0, epsilon = 1e-14);
        assert_abs_diff_eq!(split.all, 1.0, epsilon = 1e-14);

        let est = dvector![4.0, 2.0, 7.0, 4.0];
        let split = rmse_split(&est, &truth, &[0, 2]);
        assert_relative_eq!(split.observed.unwrap(), (12.5f64).sqrt(), max_relative = 1e-12);
        assert_abs_diff_eq!(split.unobserved.unwrap(), 0.0, epsilon = 1e-14);

        // identity: all^2 * d = obs^2 * n_obs + unobs^2 * n_unobs
        let lhs = split.all * split.all * 4.0;
        let rhs = split.observed.unwrap().powi(2) * 2.0 + split.unobserved.unwrap().powi(2) * 2.0;
        assert_relative_eq!(lhs, rhs, max_relative = 1e-12);

        let split = rmse_split(&est, &truth, &[]);
        assert!(split.observed.is_none());
        assert_abs_diff_eq!(split.unobserved.unwrap(), split.all, epsilon = 1e-14);
    }

    #[test]
    fn ensemble_kl_cases() {
        let reference = GaussianParams::standard(2);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(15);
        let k = 10_000;
        let ens = Ensemble::from_fn(k, |_| {
            DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let kl = ensemble_kl(&ens, &reference).unwrap();
        assert!(kl <= 0.01, "kl = {kl}");

        // halving the reference variance strictly increases KL
        let tight = GaussianParams::new(DVector::zeros(2), DMatrix::identity(2, 2) * 0.5);
        let kl_tight = ensemble_kl(&ens, &tight).unwrap();
        assert!(kl_tight > kl);

        // too few members for the fit
        let small = Ensemble::from_fn(3, |_| DVector::zeros(2));
        assert!(matches!(
            ensemble_kl(&small, &reference),
            Err(Error::InsufficientSamples { .. })
        ));
    }

    #[test]
    fn exact_fit_gives_zero_kl() {
        // reference chosen as the ensemble's own fitted moments
        let members: Vec<DVector<f64>> = (0..6)
            .map(|i| dvector![(i as f64) * 0.4 - 1.0])
            .collect();
        let ens = Ensemble::new(members);
        let stats = sample_mean_cov(&ens).unwrap();
        let reference = GaussianParams::new(stats.mean.clone(), stats.cov.clone());
        let kl = ensemble_kl(&ens, &reference).unwrap();
        assert_abs_diff_eq!(kl, 0.0, epsilon = 1e-12);
    }

    #[test]
    #[ignore = "slow cross-validation of the grid oracle against MCMC"]
    fn metropolis_agrees_with_grid_oracle() {
        let prior = scenario_prior();
        let obs = ObservationModel::with_sigma(
            ObservationKind::Radial { center: dvector![1.0, 1.0] },
            0.1,
        )
        .unwrap();
        let y = dvector![1.5];
        let grid = grid_bayes_oracle(
            gaussian_log_prior(&prior).unwrap(),
            &obs,
            &y,
            default_axes(400),
        )
        .unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(16);
        let samples = metropolis_sample(
            gaussian_log_prior(&prior).unwrap(),
            &obs,
            &y,
            dvector![0.0, 0.0],
            0.25,
            1_000_000,
            100_000,
            &mut rng,
        );
        let ens = Ensemble::new(samples);
        let stats = sample_mean_cov(&ens).unwrap();
        assert!((stats.mean - &grid.mean).norm() < 0.02);
        assert!((stats.cov - &grid.cov).norm() < 0.02);
    }
}
