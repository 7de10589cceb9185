//! Reference filters: exact Kalman filter, stochastic (perturbed-
//! observation) EnKF, LETKF with Gaspari-Cohn localization, and a bootstrap
//! particle filter with systematic resampling.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gaussian::{
    cholesky_with_jitter, gaspari_cohn_taper, index_distance, DistanceMetric, GaussianParams,
};
use crate::models::ObservationModel;

/// Linear-Gaussian state-space model for the exact filter.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub transition: DMatrix<f64>,
    pub process_noise: DMatrix<f64>,
    pub obs_matrix: DMatrix<f64>,
    pub obs_noise: DMatrix<f64>,
}

impl LinearGaussianModel {
    pub fn new(
        transition: DMatrix<f64>,
        process_noise: DMatrix<f64>,
        obs_matrix: DMatrix<f64>,
        obs_noise: DMatrix<f64>,
    ) -> Self {
        let d = transition.nrows();
        let r = obs_matrix.nrows();
        assert_eq!(transition.ncols(), d);
        assert_eq!(process_noise.nrows(), d);
        assert_eq!(obs_matrix.ncols(), d);
        assert_eq!(obs_noise.nrows(), r);
        LinearGaussianModel { transition, process_noise, obs_matrix, obs_noise }
    }
}

/// Static Kalman update of a Gaussian prior by a linear observation
/// (predict step omitted). Joseph-form covariance.
pub fn kf_posterior_static(
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    obs_matrix: &DMatrix<f64>,
    obs_noise: &DMatrix<f64>,
    y: &DVector<f64>,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let d = mean.len();
    let innov_cov = obs_matrix * cov * obs_matrix.transpose() + obs_noise;
    let chol = cholesky_with_jitter(&innov_cov)?;
    // gain = cov H^T S^{-1}
    let gain = chol.solve(&(obs_matrix * cov)).transpose();
    let post_mean = mean + &gain * (y - obs_matrix * mean);
    let i_kh = DMatrix::identity(d, d) - &gain * obs_matrix;
    let post_cov = &i_kh * cov * i_kh.transpose() + &gain * obs_noise * gain.transpose();
    Ok((post_mean, post_cov))
}

/// One predict-update cycle of the exact Kalman filter.
pub fn kf_step(
    state: &GaussianParams,
    model: &LinearGaussianModel,
    y: &DVector<f64>,
) -> Result<GaussianParams> {
    let pred_mean = &model.transition * &state.mean;
    let pred_cov =
        &model.transition * &state.cov * model.transition.transpose() + &model.process_noise;
    let (mean, cov) =
        kf_posterior_static(&pred_mean, &pred_cov, &model.obs_matrix, &model.obs_noise, y)?;
    Ok(GaussianParams::new(mean, cov))
}

/// Stochastic EnKF update with perturbed observations.
///
/// Nonlinear operators are handled through the sample cross-covariance of
/// (state, predicted observation) pairs. When the operator is selection-
/// shaped and `loc_half_width` is set, gain covariances are tapered by
/// ring-distance Gaspari-Cohn factors.
pub fn enkf_update<R: Rng>(
    ensemble: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    inflation: f64,
    loc_half_width: Option<f64>,
    rng: &mut R,
) -> Result<Ensemble> {
    let k = ensemble.size();
    if k < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: k });
    }
    let d = ensemble.dim();
    let r = obs.obs_dim();

    let mean = ensemble.mean();
    let members: Vec<DVector<f64>> = ensemble
        .iter()
        .map(|x| &mean + (x - &mean) * inflation)
        .collect();

    let predicted: Vec<DVector<f64>> = members.iter().map(|x| obs.apply(x)).collect();
    let mut pred_mean = DVector::zeros(r);
    for p in &predicted {
        pred_mean += p;
    }
    pred_mean /= k as f64;

    let mut cov_xy = DMatrix::zeros(d, r);
    let mut cov_yy = DMatrix::zeros(r, r);
    for (x, p) in members.iter().zip(&predicted) {
        let ax = x - &mean;
        let ay = p - &pred_mean;
        cov_xy.ger(1.0, &ax, &ay, 1.0);
        cov_yy.ger(1.0, &ay, &ay, 1.0);
    }
    cov_xy /= (k - 1) as f64;
    cov_yy /= (k - 1) as f64;

    if let (Some(c), Some(indices)) = (loc_half_width, obs.observed_indices()) {
        for (col, &pos_c) in indices.iter().enumerate() {
            for row in 0..d {
                cov_xy[(row, col)] *=
                    gaspari_cohn_taper(index_distance(row, pos_c, d, DistanceMetric::IndexRing), c);
            }
            for (row, &pos_r) in indices.iter().enumerate() {
                if row != col {
                    cov_yy[(row, col)] *= gaspari_cohn_taper(
                        index_distance(pos_r, pos_c, d, DistanceMetric::IndexRing),
                        c,
                    );
                }
            }
        }
    }

    let chol = cholesky_with_jitter(&(cov_yy + &obs.noise_cov))?;
    let gain = chol.solve(&cov_xy.transpose()).transpose();

    let noise_l = obs.noise_chol().l_dirty().lower_triangle();
    let updated = members
        .into_iter()
        .zip(predicted)
        .map(|(x, p)| {
            let eps = DVector::from_fn(r, |_, _| rng.sample::<f64, _>(StandardNormal));
            let perturbed = y + &noise_l * eps;
            &x + &gain * (perturbed - p)
        })
        .collect();
    Ok(Ensemble::new(updated))
}

/// LETKF analysis: per state index, a local deterministic square-root
/// update using observations whose Gaspari-Cohn taper weight exceeds 1e-6,
/// with the taper scaling the observation-error precision.
///
/// Requires a selection-shaped operator (observations tied to state
/// indices) and diagonal observation noise.
pub fn letkf_update(
    ensemble: &Ensemble,
    obs: &ObservationModel,
    y: &DVector<f64>,
    inflation: f64,
    loc_half_width: f64,
) -> Result<Ensemble> {
    let k = ensemble.size();
    if k < 2 {
        return Err(Error::InsufficientSamples { need: 2, got: k });
    }
    let indices = obs
        .observed_indices()
        .ok_or_else(|| Error::config("LETKF needs observations tied to state indices"))?;
    let r = indices.len();
    for i in 0..r {
        for j in 0..r {
            if i != j && obs.noise_cov[(i, j)] != 0.0 {
                return Err(Error::config("LETKF assumes diagonal observation noise"));
            }
        }
    }
    let d = ensemble.dim();
    let kf = k as f64;

    let mean = ensemble.mean();
    // state anomalies (d x K)
    let anomalies = DMatrix::from_fn(d, k, |i, j| ensemble.member(j)[i] - mean[i]);

    let predicted: Vec<DVector<f64>> = ensemble.iter().map(|x| obs.apply(x)).collect();
    let mut pred_mean = DVector::zeros(r);
    for p in &predicted {
        pred_mean += p;
    }
    pred_mean /= kf;
    let obs_anomalies = DMatrix::from_fn(r, k, |i, j| predicted[j][i] - pred_mean[i]);
    let innovation = y - &pred_mean;

    let mut updated = vec![DVector::zeros(d); k];
    for i in 0..d {
        // local observation set with taper weights
        let mut local: Vec<(usize, f64)> = Vec::new();
        for (row, &pos) in indices.iter().enumerate() {
            let taper = gaspari_cohn_taper(
                index_distance(i, pos, d, DistanceMetric::IndexRing),
                loc_half_width,
            );
            if taper > 1e-6 {
                local.push((row, taper));
            }
        }
        if local.is_empty() {
            for (j, out) in updated.iter_mut().enumerate() {
                out[i] = ensemble.member(j)[i];
            }
            continue;
        }

        // C = Yl^T R_loc^{-1}  (K x L), with the taper scaling the precision
        let l = local.len();
        let c_mat = DMatrix::from_fn(k, l, |j, col| {
            let (row, taper) = local[col];
            obs_anomalies[(row, j)] * taper / obs.noise_cov[(row, row)]
        });
        let yl = DMatrix::from_fn(l, k, |col, j| obs_anomalies[(local[col].0, j)]);

        // P_tilde = [(K-1) I / inflation + C Yl]^{-1}
        let mut prec = &c_mat * &yl;
        for jj in 0..k {
            prec[(jj, jj)] += (kf - 1.0) / inflation;
        }
        let eig = prec.symmetric_eigen();
        // analysis weight perturbations W = [(K-1) P_tilde]^{1/2}
        let mut w_mean = DVector::zeros(k);
        let innov_local = DVector::from_fn(l, |col, _| innovation[local[col].0]);
        let c_innov = &c_mat * innov_local;
        let mut w_pert = DMatrix::zeros(k, k);
        for (idx, ev) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(idx);
            let inv = 1.0 / ev;
            // w_mean += v (v^T c_innov) / ev
            let proj = v.dot(&c_innov) * inv;
            w_mean.axpy(proj, &v, 1.0);
            let sqrt_term = ((kf - 1.0) * inv).sqrt();
            w_pert.ger(sqrt_term, &v, &v, 1.0);
        }

        let row_anom = anomalies.row(i);
        for (j, out) in updated.iter_mut().enumerate() {
            let w_col = w_pert.column(j);
            let mut acc = mean[i];
            for m in 0..k {
                acc += row_anom[m] * (w_mean[m] + w_col[m]);
            }
            out[i] = acc;
        }
    }
    Ok(Ensemble::new(updated))
}

/// Effective sample size of normalized weights.
pub fn effective_sample_size(weights: &[f64]) -> f64 {
    1.0 / weights.iter().map(|w| w * w).sum::<f64>()
}

/// Systematic resampling: one uniform offset, K evenly spaced pointers.
pub fn systematic_resample<R: Rng>(weights: &[f64], rng: &mut R) -> Vec<usize> {
    let k = weights.len();
    let offset: f64 = rng.random::<f64>() / k as f64;
    let mut picks = Vec::with_capacity(k);
    let mut cumulative = weights[0];
    let mut idx = 0;
    for j in 0..k {
        let u = offset + j as f64 / k as f64;
        while u > cumulative && idx + 1 < k {
            idx += 1;
            cumulative += weights[idx];
        }
        picks.push(idx);
    }
    picks
}

/// Bootstrap particle-filter update: likelihood-weighted reweighting in the
/// log domain, with systematic resampling when ESS drops below K/2.
pub fn pf_update<R: Rng>(
    ensemble: &Ensemble,
    weights: &[f64],
    obs: &ObservationModel,
    y: &DVector<f64>,
    rng: &mut R,
) -> Result<(Ensemble, Vec<f64>)> {
    let k = ensemble.size();
    assert_eq!(weights.len(), k);
    let log_w: Vec<f64> = ensemble
        .iter()
        .zip(weights)
        .map(|(x, w)| w.max(1e-300).ln() + obs.log_likelihood(y, x))
        .collect();
    let max = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    let mut new_weights: Vec<f64> = log_w.iter().map(|lw| (lw - max).exp()).collect();
    let total: f64 = new_weights.iter().sum();
    for w in &mut new_weights {
        *w /= total;
    }

    if effective_sample_size(&new_weights) < k as f64 / 2.0 {
        let picks = systematic_resample(&new_weights, rng);
        let resampled = Ensemble::new(picks.iter().map(|&i| ensemble.member(i).clone()).collect());
        Ok((resampled, vec![1.0 / k as f64; k]))
    } else {
        Ok((ensemble.clone(), new_weights))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ObservationKind;
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector};
    use rand::SeedableRng;

    fn scenario1_model() -> LinearGaussianModel {
        LinearGaussianModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            dmatrix![1.0, 0.0],
            dmatrix![0.01],
        )
    }

    #[test]
    fn kf_no_information_keeps_prior() {
        let model = LinearGaussianModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::zeros(1, 2),
            dmatrix![1.0],
        );
        let prior = GaussianParams::new(dvector![0.5, -0.5], dmatrix![0.5, -0.4; -0.4, 0.5]);
        let post = kf_step(&prior, &model, &dvector![7.0]).unwrap();
        assert_abs_diff_eq!((&post.mean - &prior.mean).norm(), 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!((&post.cov - &prior.cov).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn kf_exact_observation_pins_state() {
        let model = LinearGaussianModel::new(
            DMatrix::identity(2, 2),
            DMatrix::zeros(2, 2),
            DMatrix::identity(2, 2),
            DMatrix::identity(2, 2) * 1e-14,
        );
        let prior = GaussianParams::new(dvector![0.0, 0.0], DMatrix::identity(2, 2));
        let y = dvector![1.5, -2.5];
        let post = kf_step(&prior, &model, &y).unwrap();
        assert!((post.mean - y).norm() < 1e-10);
        assert!(post.cov.norm() < 1e-10);
    }

    #[test]
    fn kf_scenario1_hand_values() {
        // prior N(0, [[0.5,-0.4],[-0.4,0.5]]), observe x1 with sigma = 0.1,
        // y = 3: gain = [0.5, -0.4]/0.51, mean = (2.941, -2.353)
        let prior = GaussianParams::new(dvector![0.0, 0.0], dmatrix![0.5, -0.4; -0.4, 0.5]);
        let post = kf_step(&prior, &scenario1_model(), &dvector![3.0]).unwrap();
        assert_abs_diff_eq!(post.mean[0], 3.0 * 0.5 / 0.51, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean[1], -3.0 * 0.4 / 0.51, epsilon = 1e-12);
        assert_abs_diff_eq!(post.mean[0], 2.941, epsilon = 1e-3);
        assert_abs_diff_eq!(post.mean[1], -2.353, epsilon = 1e-3);
    }

    #[test]
    fn kf_covariance_stays_symmetric_psd() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let model = LinearGaussianModel::new(
            dmatrix![0.9, 0.2; -0.1, 0.95],
            DMatrix::identity(2, 2) * 0.05,
            dmatrix![1.0, 0.0],
            dmatrix![0.25],
        );
        let mut state = GaussianParams::standard(2);
        for _ in 0..1000 {
            let y = dvector![rng.sample::<f64, _>(StandardNormal) * 2.0];
            state = kf_step(&state, &model, &y).unwrap();
            let asym = (&state.cov - state.cov.transpose()).norm();
            assert!(asym < 1e-12);
            let eig = state.cov.clone().symmetric_eigen();
            assert!(eig.eigenvalues.iter().all(|&e| e > -1e-12));
        }
    }

    #[test]
    fn enkf_flat_likelihood_keeps_ensemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let ens = Ensemble::from_fn(40, |_| {
            DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1e6)
                .unwrap();
        let updated = enkf_update(&ens, &obs, &dvector![100.0], 1.0, None, &mut rng).unwrap();
        for (a, b) in updated.iter().zip(ens.iter()) {
            assert!((a - b).norm() < 1e-4);
        }
    }

    #[test]
    fn enkf_zero_spread_zero_gain() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let member = dvector![1.0, 2.0];
        let ens = Ensemble::new(vec![member.clone(); 10]);
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 0.5)
                .unwrap();
        let updated = enkf_update(&ens, &obs, &dvector![5.0], 1.0, None, &mut rng).unwrap();
        for m in updated.iter() {
            assert_abs_diff_eq!((m - &member).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn enkf_matches_kf_moments_large_ensemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let k = 10_000;
        let prior_mean = 1.0;
        let prior_var: f64 = 2.0;
        let ens = Ensemble::from_fn(k, |_| {
            dvector![prior_mean + prior_var.sqrt() * rng.sample::<f64, _>(StandardNormal)]
        });
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 0.7)
                .unwrap();
        let y = dvector![2.5];
        let updated = enkf_update(&ens, &obs, &y, 1.0, None, &mut rng).unwrap();
        let stats = crate::gaussian::sample_mean_cov(&updated).unwrap();

        let (kf_mean, kf_cov) = kf_posterior_static(
            &dvector![prior_mean],
            &dmatrix![prior_var],
            &dmatrix![1.0],
            &obs.noise_cov,
            &y,
        )
        .unwrap();
        let se_mean = 3.0 * (kf_cov[(0, 0)] / k as f64).sqrt() * 2.0;
        assert!((stats.mean[0] - kf_mean[0]).abs() < se_mean);
        let se_var = 3.0 * kf_cov[(0, 0)] * (2.0 / k as f64).sqrt() * 2.0;
        assert!((stats.var[0] - kf_cov[(0, 0)]).abs() < se_var);
    }

    #[test]
    fn letkf_flat_likelihood_keeps_ensemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(6);
        let ens = Ensemble::from_fn(10, |_| {
            DVector::from_fn(8, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let obs = ObservationModel::with_sigma(
            ObservationKind::SelectLinear { indices: vec![0, 4] },
            1e6,
        )
        .unwrap();
        let updated = letkf_update(&ens, &obs, &dvector![50.0, -50.0], 1.0, 4.0).unwrap();
        for (a, b) in updated.iter().zip(ens.iter()) {
            assert!((a - b).norm() < 1e-4, "{}", (a - b).norm());
        }
    }

    #[test]
    fn letkf_matches_kf_moments_large_ensemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let k = 10_000;
        let prior_mean = -0.5;
        let prior_var: f64 = 1.5;
        let ens = Ensemble::from_fn(k, |_| {
            dvector![prior_mean + prior_var.sqrt() * rng.sample::<f64, _>(StandardNormal)]
        });
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 0.6)
                .unwrap();
        let y = dvector![1.0];
        let updated = letkf_update(&ens, &obs, &y, 1.0, 10.0).unwrap();
        let stats = crate::gaussian::sample_mean_cov(&updated).unwrap();
        let (kf_mean, kf_cov) = kf_posterior_static(
            &dvector![prior_mean],
            &dmatrix![prior_var],
            &dmatrix![1.0],
            &obs.noise_cov,
            &y,
        )
        .unwrap();
        assert!((stats.mean[0] - kf_mean[0]).abs() < 3.0 * (kf_cov[(0, 0)] / k as f64).sqrt() * 2.0);
        assert!(
            (stats.var[0] - kf_cov[(0, 0)]).abs()
                < 3.0 * kf_cov[(0, 0)] * (2.0 / k as f64).sqrt() * 2.0
        );
    }

    #[test]
    fn letkf_wide_localization_matches_global_etkf() {
        // with the taper ~ 1 everywhere the local analyses coincide with a
        // single global ETKF analysis
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let d = 8;
        let k = 6;
        let ens = Ensemble::from_fn(k, |_| {
            DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let indices = vec![0, 2, 4, 6];
        let sigma = 0.4;
        let obs = ObservationModel::with_sigma(
            ObservationKind::SelectLinear { indices: indices.clone() },
            sigma,
        )
        .unwrap();
        let y = dvector![0.5, -0.3, 0.8, 0.1];
        let updated = letkf_update(&ens, &obs, &y, 1.0, 1e6).unwrap();

        // independent dense global ETKF
        let kf = k as f64;
        let mean = ens.mean();
        let anomalies = DMatrix::from_fn(d, k, |i, j| ens.member(j)[i] - mean[i]);
        let pred: Vec<DVector<f64>> = ens.iter().map(|x| obs.apply(x)).collect();
        let mut pred_mean = DVector::zeros(indices.len());
        for p in &pred {
            pred_mean += p;
        }
        pred_mean /= kf;
        let ya = DMatrix::from_fn(indices.len(), k, |i, j| pred[j][i] - pred_mean[i]);
        let c = ya.transpose() / (sigma * sigma);
        let mut prec = &c * &ya;
        for j in 0..k {
            prec[(j, j)] += kf - 1.0;
        }
        let eig = prec.symmetric_eigen();
        let innov = &y - &pred_mean;
        let c_innov = &c * innov;
        let mut w_mean = DVector::zeros(k);
        let mut w_pert = DMatrix::zeros(k, k);
        for (idx, ev) in eig.eigenvalues.iter().enumerate() {
            let v = eig.eigenvectors.column(idx);
            w_mean.axpy(v.dot(&c_innov) / ev, &v, 1.0);
            w_pert.ger(((kf - 1.0) / ev).sqrt(), &v, &v, 1.0);
        }
        for j in 0..k {
            let w = &w_mean + w_pert.column(j);
            let expect = &mean + &anomalies * w;
            assert!(
                (updated.member(j) - &expect).norm() < 1e-8,
                "member {j} differs by {}",
                (updated.member(j) - expect).norm()
            );
        }
    }

    #[test]
    fn pf_flat_likelihood_no_resample() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let ens = Ensemble::from_fn(20, |_| {
            DVector::from_fn(1, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1e9)
                .unwrap();
        let w0 = vec![1.0 / 20.0; 20];
        let (updated, w) = pf_update(&ens, &w0, &obs, &dvector![0.0], &mut rng).unwrap();
        assert_eq!(updated, ens);
        for (a, b) in w.iter().zip(&w0) {
            assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn pf_dominant_particle_takes_over() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(10);
        let mut members: Vec<DVector<f64>> = (0..9).map(|i| dvector![10.0 + i as f64]).collect();
        members.push(dvector![0.0]); // sits exactly at the likelihood mode
        let ens = Ensemble::new(members);
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1e-3)
                .unwrap();
        let w0 = vec![0.1; 10];
        let (updated, w) = pf_update(&ens, &w0, &obs, &dvector![0.0], &mut rng).unwrap();
        for m in updated.iter() {
            assert_eq!(m[0], 0.0);
        }
        for v in w {
            assert_abs_diff_eq!(v, 0.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn pf_matches_kf_moments_large_ensemble() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let k = 100_000;
        let ens = Ensemble::from_fn(k, |_| {
            dvector![2.0f64.sqrt() * rng.sample::<f64, _>(StandardNormal)]
        });
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1.0)
                .unwrap();
        let y = dvector![1.0];
        let w0 = vec![1.0 / k as f64; k];
        let (updated, w) = pf_update(&ens, &w0, &obs, &y, &mut rng).unwrap();
        // weighted moments
        let mean: f64 = updated.iter().zip(&w).map(|(x, wi)| wi * x[0]).sum();
        let var: f64 = updated
            .iter()
            .zip(&w)
            .map(|(x, wi)| wi * (x[0] - mean) * (x[0] - mean))
            .sum();
        let (kf_mean, kf_cov) = kf_posterior_static(
            &dvector![0.0],
            &dmatrix![2.0],
            &dmatrix![1.0],
            &obs.noise_cov,
            &y,
        )
        .unwrap();
        assert!((mean - kf_mean[0]).abs() < 3.0 * (kf_cov[(0, 0)] / k as f64).sqrt() * 3.0);
        assert!((var - kf_cov[(0, 0)]).abs() < 0.05);
    }

    #[test]
    fn pf_degenerate_weights_error() {
        let ens = Ensemble::new(vec![dvector![1e8], dvector![2e8]]);
        let obs =
            ObservationModel::with_sigma(ObservationKind::SelectLinear { indices: vec![0] }, 1e-6)
                .unwrap();
        let w0 = vec![0.5; 2];
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        assert!(matches!(
            pf_update(&ens, &w0, &obs, &dvector![0.0], &mut rng),
            Err(Error::DegenerateWeights)
        ));
    }

    #[test]
    fn systematic_resampling_unbiased() {
        // expected offspring count of particle j is K * w_j
        let weights = vec![0.5, 0.3, 0.15, 0.05];
        let k = weights.len();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let trials = 10_000;
        let mut counts = vec![0usize; k];
        for _ in 0..trials {
            for pick in systematic_resample(&weights, &mut rng) {
                counts[pick] += 1;
            }
        }
        for j in 0..k {
            let expected = trials as f64 * k as f64 * weights[j];
            let observed = counts[j] as f64;
            // systematic resampling has sub-multinomial variance; the
            // multinomial 3-sigma bound is conservative
            let sigma = (trials as f64 * k as f64 * weights[j] * (1.0 - weights[j])).sqrt();
            assert!(
                (observed - expected).abs() < 3.0 * sigma,
                "particle {j}: {observed} vs {expected}"
            );
        }
    }

    #[test]
    fn updates_preserve_ensemble_shape() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(14);
        let ens = Ensemble::from_fn(12, |_| {
            DVector::from_fn(6, |_, _| rng.sample::<f64, _>(StandardNormal))
        });
        let obs = ObservationModel::with_sigma(
            ObservationKind::SelectLinear { indices: vec![0, 3] },
            0.5,
        )
        .unwrap();
        let y = dvector![0.1, -0.2];
        let a = enkf_update(&ens, &obs, &y, 1.05, Some(2.0), &mut rng).unwrap();
        assert_eq!((a.size(), a.dim()), (12, 6));
        let b = letkf_update(&ens, &obs, &y, 1.05, 2.0).unwrap();
        assert_eq!((b.size(), b.dim()), (12, 6));
        let (c, w) = pf_update(&ens, &vec![1.0 / 12.0; 12], &obs, &y, &mut rng).unwrap();
        assert_eq!((c.size(), c.dim()), (12, 6));
        assert_abs_diff_eq!(w.iter().sum::<f64>(), 1.0, epsilon = 1e-12);
    }
}
