//! Forward-SDE noise schedule, transition kernel, and the reverse-time
//! SDE/ODE integrator that turns any score function into a sampler.

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::rng::SeedStream;

/// The variance-preserving schedule alpha_t = 1 - t, beta_t^2 = t on [0, 1].
///
/// Drift and squared diffusion follow from the schedule:
/// b(t) = d log(alpha_t)/dt and sigma^2(t) = d(beta_t^2)/dt - 2 b(t) beta_t^2,
/// which for this schedule give b(t) = -1/(1-t), sigma^2(t) = (1+t)/(1-t).
/// Both are singular at t = 1.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoiseSchedule;

/// Schedule quantities at one pseudo-time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SchedulePoint {
    pub alpha: f64,
    pub beta_sq: f64,
    pub drift: f64,
    pub diffusion_sq: f64,
}

impl NoiseSchedule {
    fn check_domain(self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::domain(format!("pseudo-time {t} outside [0, 1]")));
        }
        Ok(())
    }

    pub fn alpha(self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        1.0 - t
    }

    pub fn beta_sq(self, t: f64) -> f64 {
        debug_assert!((0.0..=1.0).contains(&t));
        t
    }

    /// b(t) = -1/(1-t); singular at t = 1.
    pub fn drift(self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        if t >= 1.0 {
            return Err(Error::ScheduleSingularity(t));
        }
        Ok(-1.0 / (1.0 - t))
    }

    /// sigma^2(t) = (1+t)/(1-t); singular at t = 1.
    pub fn diffusion_sq(self, t: f64) -> Result<f64> {
        self.check_domain(t)?;
        if t >= 1.0 {
            return Err(Error::ScheduleSingularity(t));
        }
        Ok((1.0 + t) / (1.0 - t))
    }

    /// All four schedule quantities at `t` (requires t < 1).
    pub fn eval(self, t: f64) -> Result<SchedulePoint> {
        self.check_domain(t)?;
        Ok(SchedulePoint {
            alpha: self.alpha(t),
            beta_sq: self.beta_sq(t),
            drift: self.drift(t)?,
            diffusion_sq: self.diffusion_sq(t)?,
        })
    }
}

/// Draws z_t | z_0 = alpha_t z_0 + beta_t * noise, the forward-SDE marginal.
pub fn forward_perturb(
    schedule: NoiseSchedule,
    z0: &DVector<f64>,
    t: f64,
    noise: &DVector<f64>,
) -> Result<DVector<f64>> {
    schedule.check_domain(t)?;
    Ok(z0 * schedule.alpha(t) + noise * schedule.beta_sq(t).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntegratorMode {
    /// Reverse Euler-Maruyama.
    Sde,
    /// Probability-flow ODE: no noise, score-diffusion term halved.
    Ode,
}

/// Reverse integration grid and mode.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ReverseIntegratorConfig {
    pub n_steps: usize,
    /// Start of reverse integration; truncated below 1 because the drift is
    /// singular there.
    pub t_start: f64,
    /// End of reverse integration; truncated above 0 because beta_t^2 -> 0.
    pub t_end: f64,
    pub mode: IntegratorMode,
}

impl Default for ReverseIntegratorConfig {
    fn default() -> Self {
        ReverseIntegratorConfig {
            n_steps: 100,
            t_start: 1.0 - 1e-3,
            t_end: 1e-3,
            mode: IntegratorMode::Sde,
        }
    }
}

impl ReverseIntegratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("n_steps must be at least 1"));
        }
        if !(0.0 < self.t_end && self.t_end < self.t_start && self.t_start < 1.0) {
            return Err(Error::config(format!(
                "need 0 < t_end < t_start < 1, got t_end={}, t_start={}",
                self.t_end, self.t_start
            )));
        }
        Ok(())
    }
}

/// A score function prepared per pseudo-time step.
///
/// The sampler calls `prepare` once per grid point; the returned step is
/// evaluated for every ensemble member, so per-`t` factorizations are
/// computed once and shared.
pub trait ScoreModel: Sync {
    fn prepare(&self, t: f64) -> Result<Box<dyn ScoreStep + '_>>;
}

pub trait ScoreStep: Sync {
    fn eval(&self, z: &DVector<f64>) -> DVector<f64>;
}

struct ClosureStep<'a, F> {
    f: &'a F,
    t: f64,
}

impl<F> ScoreStep for ClosureStep<'_, F>
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Sync,
{
    fn eval(&self, z: &DVector<f64>) -> DVector<f64> {
        (self.f)(z, self.t)
    }
}

impl<F> ScoreModel for F
where
    F: Fn(&DVector<f64>, f64) -> DVector<f64> + Sync,
{
    fn prepare(&self, t: f64) -> Result<Box<dyn ScoreStep + '_>> {
        Ok(Box::new(ClosureStep { f: self, t }))
    }
}

/// Integrates the reverse-time SDE (or probability-flow ODE) from Gaussian
/// noise at `t_start` down to `t_end` and returns the final states.
///
/// Members integrate independently; each consumes a dedicated rng substream
/// derived from (stream, member index), so results are identical across
/// thread counts.
pub fn sample_reverse<S: ScoreModel + ?Sized>(
    score: &S,
    n_members: usize,
    dim: usize,
    cfg: &ReverseIntegratorConfig,
    stream: SeedStream,
) -> Result<Ensemble> {
    cfg.validate()?;
    if n_members == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    let schedule = NoiseSchedule;
    let dt = (cfg.t_end - cfg.t_start) / cfg.n_steps as f64; // negative

    let mut states: Vec<(DVector<f64>, rand_chacha::ChaCha8Rng)> = (0..n_members)
        .map(|k| {
            let mut rng = stream.child(k as u64).rng();
            let z = DVector::from_fn(dim, |_, _| rng.sample::<f64, _>(StandardNormal));
            (z, rng)
        })
        .collect();

    for i in 0..cfg.n_steps {
        let t = cfg.t_start + i as f64 * dt;
        let point = schedule.eval(t)?;
        let step = score.prepare(t)?;
        let noise_scale = point.diffusion_sq.sqrt() * dt.abs().sqrt();

        states
            .par_iter_mut()
            .enumerate()
            .try_for_each(|(member, (z, rng))| -> Result<()> {
                let s = step.eval(z);
                if s.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { member, t });
                }
                match cfg.mode {
                    IntegratorMode::Sde => {
                        for j in 0..dim {
                            let xi: f64 = StandardNormal.sample(rng);
                            z[j] += dt * (point.drift * z[j] - point.diffusion_sq * s[j])
                                + noise_scale * xi;
                        }
                    }
                    IntegratorMode::Ode => {
                        for j in 0..dim {
                            z[j] += dt * (point.drift * z[j] - 0.5 * point.diffusion_sq * s[j]);
                        }
                    }
                }
                if z.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite { member, t });
                }
                Ok(())
            })?;
    }

    Ok(Ensemble::new(states.into_iter().map(|(z, _)| z).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{cholesky_with_jitter, sample_mean_cov};
    use approx::assert_abs_diff_eq;
    use nalgebra::{dmatrix, dvector, DMatrix};
    use rand::SeedableRng;

    #[test]
    fn schedule_anchor_values() {
        let s = NoiseSchedule;
        // t = 0: (alpha, beta^2) = (1, 0); b(0) = -1, sigma^2(0) = 1.
        let p0 = s.eval(0.0).unwrap();
        assert_eq!((p0.alpha, p0.beta_sq), (1.0, 0.0));
        assert_abs_diff_eq!(p0.drift, -1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p0.diffusion_sq, 1.0, epsilon = 1e-15);

        // t = 1: terminal standard Gaussian; drift singular.
        assert_eq!((s.alpha(1.0), s.beta_sq(1.0)), (0.0, 1.0));
        assert!(matches!(s.drift(1.0), Err(Error::ScheduleSingularity(_))));

        // t = 0.5 by hand substitution.
        let p = s.eval(0.5).unwrap();
        assert_eq!((p.alpha, p.beta_sq), (0.5, 0.5));
        assert_abs_diff_eq!(p.drift, -2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(p.diffusion_sq, 3.0, epsilon = 1e-15);

        assert!(s.eval(-0.1).is_err());
        assert!(s.eval(1.1).is_err());
    }

    #[test]
    fn drift_and_diffusion_match_finite_differences() {
        let s = NoiseSchedule;
        let dt = 1e-6;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let t = 0.01 + rng.random::<f64>() * 0.94;
            let b = s.drift(t).unwrap();
            let fd_b = ((s.alpha(t + dt)).ln() - (s.alpha(t - dt)).ln()) / (2.0 * dt);
            assert!((b - fd_b).abs() <= 1e-5, "b mismatch at t={t}: {b} vs {fd_b}");

            let fd_dbeta = (s.beta_sq(t + dt) - s.beta_sq(t - dt)) / (2.0 * dt);
            let sigma_sq = s.diffusion_sq(t).unwrap();
            assert!(
                (sigma_sq - (fd_dbeta - 2.0 * b * s.beta_sq(t))).abs() <= 1e-4,
                "sigma^2 mismatch at t={t}"
            );
        }
    }

    #[test]
    fn snr_strictly_decreasing() {
        let s = NoiseSchedule;
        let mut prev = f64::INFINITY;
        for i in 1..1000 {
            let t = i as f64 / 1000.0;
            let snr = s.alpha(t).powi(2) / s.beta_sq(t);
            assert!(snr < prev, "SNR not decreasing at t={t}");
            prev = snr;
        }
    }

    #[test]
    fn forward_perturb_endpoints() {
        let z0 = dvector![1.0, -2.0];
        let noise = dvector![0.3, 0.7];
        let s = NoiseSchedule;
        assert_eq!(forward_perturb(s, &z0, 0.0, &noise).unwrap(), z0);
        assert_eq!(forward_perturb(s, &z0, 1.0, &noise).unwrap(), noise);
    }

    #[test]
    fn forward_perturb_moments_at_half_time() {
        // 1e5 draws at t = 0.5: mean ~ 0.5 z0, per-coordinate variance ~ 0.5.
        let z0 = dvector![2.0, -1.0];
        let s = NoiseSchedule;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let ens = Ensemble::from_fn(n, |_| {
            let noise = DVector::from_fn(2, |_, _| StandardNormal.sample(&mut rng));
            forward_perturb(s, &z0, 0.5, &noise).unwrap()
        });
        let stats = sample_mean_cov(&ens).unwrap();
        let se_mean = (0.5f64 / n as f64).sqrt();
        let se_var = 0.5 * (2.0f64 / n as f64).sqrt();
        for i in 0..2 {
            assert!((stats.mean[i] - 0.5 * z0[i]).abs() < 3.0 * se_mean);
            assert!((stats.var[i] - 0.5).abs() < 3.0 * se_var);
        }
    }

    #[test]
    fn reverse_sde_reproduces_standard_normal() {
        // Diffused score of N(0, I): -(alpha_t^2 + beta_t^2)^{-1} z. (The bare
        // -z is only the t = 0 score; the forward marginal variance is
        // alpha_t^2 + beta_t^2, not 1, at intermediate t.)
        let sched = NoiseSchedule;
        let score = move |z: &DVector<f64>, t: f64| {
            -z / (sched.alpha(t).powi(2) + sched.beta_sq(t))
        };
        let cfg = ReverseIntegratorConfig::default();
        let k = 10_000;
        let ens = sample_reverse(&score, k, 2, &cfg, SeedStream::new(5)).unwrap();
        let stats = sample_mean_cov(&ens).unwrap();
        let bound = 4.0 / (k as f64).sqrt();
        for i in 0..2 {
            assert!(stats.mean[i].abs() < bound, "mean[{i}] = {}", stats.mean[i]);
            assert!((stats.var[i] - 1.0).abs() < 0.1, "var[{i}] = {}", stats.var[i]);
        }
    }

    #[test]
    fn reverse_sde_inverts_single_gaussian_score() {
        // Exact diffused score of N(mu, I): -(alpha^2 Sigma + beta^2 I)^{-1}(z - alpha mu).
        let mu = dvector![3.0, -3.0];
        let sched = NoiseSchedule;
        let mu_c = mu.clone();
        let score = move |z: &DVector<f64>, t: f64| {
            let a = sched.alpha(t);
            let denom = a * a + sched.beta_sq(t);
            -(z - &mu_c * a) / denom
        };
        let k = 10_000;
        let ens = sample_reverse(&score, k, 2, &ReverseIntegratorConfig::default(), SeedStream::new(9))
            .unwrap();
        let stats = sample_mean_cov(&ens).unwrap();
        for i in 0..2 {
            assert!(
                (stats.mean[i] - mu[i]).abs() < 0.05 * mu[i].abs().max(1.0),
                "mean[{i}] = {} vs {}",
                stats.mean[i],
                mu[i]
            );
            assert!((stats.var[i] - 1.0).abs() < 0.05, "var[{i}] = {}", stats.var[i]);
        }
    }

    #[test]
    fn reverse_sde_inverts_correlated_gaussian_score() {
        let mu = dvector![3.0, -3.0];
        let cov = dmatrix![1.0, 0.0; 0.0, 1.0];
        let sched = NoiseSchedule;
        let mu_c = mu.clone();
        let cov_c = cov.clone();
        let score = move |z: &DVector<f64>, t: f64| {
            let a = sched.alpha(t);
            let sigma_t = &cov_c * (a * a) + DMatrix::identity(2, 2) * sched.beta_sq(t);
            let chol = cholesky_with_jitter(&sigma_t).unwrap();
            -chol.solve(&(z - &mu_c * a))
        };
        let ens = sample_reverse(&score, 10_000, 2, &ReverseIntegratorConfig::default(), SeedStream::new(2))
            .unwrap();
        let stats = sample_mean_cov(&ens).unwrap();
        assert!((&stats.mean - &mu).norm() / mu.norm() < 0.05);
        assert!((&stats.cov - &cov).norm() / cov.norm() < 0.05);
    }

    #[test]
    fn ode_mode_is_deterministic() {
        let score = |z: &DVector<f64>, _t: f64| -z;
        let cfg = ReverseIntegratorConfig {
            mode: IntegratorMode::Ode,
            ..Default::default()
        };
        let a = sample_reverse(&score, 1, 3, &cfg, SeedStream::new(77)).unwrap();
        let b = sample_reverse(&score, 1, 3, &cfg, SeedStream::new(77)).unwrap();
        assert_eq!(a.member(0), b.member(0));
    }

    #[test]
    fn zero_steps_is_a_config_error() {
        let score = |z: &DVector<f64>, _t: f64| -z;
        let cfg = ReverseIntegratorConfig {
            n_steps: 0,
            ..Default::default()
        };
        assert!(matches!(
            sample_reverse(&score, 1, 1, &cfg, SeedStream::new(0)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn non_finite_score_aborts_with_member_and_time() {
        let score = |_z: &DVector<f64>, _t: f64| dvector![f64::NAN];
        let err = sample_reverse(&score, 3, 1, &ReverseIntegratorConfig::default(), SeedStream::new(0))
            .unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }
}
