//! Forward models and observation operators: the discrete harmonic
//! oscillator, the Lorenz-96 ODE with RK4 integration, and the observation
//! functions with analytic Jacobians and likelihood scores.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, Matrix2};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::cholesky_with_jitter;

/// Discrete-time harmonic oscillator with additive Gaussian process noise.
#[derive(Debug, Clone)]
pub struct HarmonicOscillator {
    pub omega: f64,
    pub dt: f64,
    pub process_noise: DMatrix<f64>,
    pub init_state: DVector<f64>,
    noise_chol: Option<Cholesky<f64, Dyn>>,
}

impl HarmonicOscillator {
    pub fn new(omega: f64, dt: f64, process_noise: DMatrix<f64>, init_state: DVector<f64>) -> Self {
        assert_eq!(process_noise.nrows(), 2);
        assert_eq!(init_state.len(), 2);
        let noise_chol = if process_noise.iter().all(|x| *x == 0.0) {
            None
        } else {
            Some(cholesky_with_jitter(&process_noise).expect("process noise must be PSD"))
        };
        HarmonicOscillator {
            omega,
            dt,
            process_noise,
            init_state,
            noise_chol,
        }
    }

    /// Paper setup: omega = 2, dt = 0.1, Q = (0.5)^2 I, X0 = [3, -3].
    pub fn standard() -> Self {
        HarmonicOscillator::new(
            2.0,
            0.1,
            DMatrix::identity(2, 2) * 0.25,
            DVector::from_vec(vec![3.0, -3.0]),
        )
    }

    /// The rotation-like transition matrix; |det| = 1.
    pub fn transition_matrix(&self) -> Matrix2<f64> {
        let (s, c) = (self.omega * self.dt).sin_cos();
        Matrix2::new(c, s / self.omega, -self.omega * s, c)
    }

    /// One step of the state model, including process noise.
    pub fn step<R: Rng>(&self, x: &DVector<f64>, rng: &mut R) -> DVector<f64> {
        let a = self.transition_matrix();
        let mut next = DVector::from_vec(vec![
            a[(0, 0)] * x[0] + a[(0, 1)] * x[1],
            a[(1, 0)] * x[0] + a[(1, 1)] * x[1],
        ]);
        if let Some(chol) = &self.noise_chol {
            let z = DVector::from_fn(2, |_, _| rng.sample::<f64, _>(StandardNormal));
            next += chol.l_dirty().lower_triangle() * z;
        }
        next
    }
}

/// Lorenz-96 dynamics with periodic index wrapping.
///
/// The standard model includes a -x_i damping term; `damping = false` drops
/// it (forcing-plus-advection only).
#[derive(Debug, Clone, Copy)]
pub struct Lorenz96 {
    pub dim: usize,
    pub forcing: f64,
    pub damping: bool,
}

impl Lorenz96 {
    pub fn new(dim: usize, forcing: f64, damping: bool) -> Result<Self> {
        if dim < 4 {
            return Err(Error::config(format!("Lorenz-96 needs dim >= 4, got {dim}")));
        }
        Ok(Lorenz96 { dim, forcing, damping })
    }

    pub fn rhs(&self, x: &DVector<f64>) -> DVector<f64> {
        let d = self.dim;
        debug_assert_eq!(x.len(), d);
        DVector::from_fn(d, |i, _| {
            let ip1 = (i + 1) % d;
            let im1 = (i + d - 1) % d;
            let im2 = (i + d - 2) % d;
            let advect = (x[ip1] - x[im2]) * x[im1];
            let damp = if self.damping { x[i] } else { 0.0 };
            advect - damp + self.forcing
        })
    }
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step(x: &DVector<f64>, rhs: impl Fn(&DVector<f64>) -> DVector<f64>, h: f64) -> DVector<f64> {
    let k1 = rhs(x);
    let k2 = rhs(&(x + &k1 * (h / 2.0)));
    let k3 = rhs(&(x + &k2 * (h / 2.0)));
    let k4 = rhs(&(x + &k3 * h));
    x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// The observation operator shapes used in the experiments.
#[derive(Debug, Clone)]
pub enum ObservationKind {
    /// Observe the state at `indices` directly.
    SelectLinear { indices: Vec<usize> },
    /// Observe arctan of the state at `indices`.
    ArctanSelected { indices: Vec<usize> },
    /// Observe the Euclidean distance from `center` (r = 1).
    Radial { center: DVector<f64> },
}

/// Observation operator, its Jacobian, and Gaussian noise covariance.
#[derive(Debug, Clone)]
pub struct ObservationModel {
    pub kind: ObservationKind,
    pub noise_cov: DMatrix<f64>,
    noise_chol: Cholesky<f64, Dyn>,
}

impl ObservationModel {
    pub fn new(kind: ObservationKind, noise_cov: DMatrix<f64>) -> Result<Self> {
        let r = match &kind {
            ObservationKind::SelectLinear { indices } | ObservationKind::ArctanSelected { indices } => {
                indices.len()
            }
            ObservationKind::Radial { .. } => 1,
        };
        if noise_cov.nrows() != r || noise_cov.ncols() != r {
            return Err(Error::config(format!(
                "noise covariance must be {r}x{r}, got {}x{}",
                noise_cov.nrows(),
                noise_cov.ncols()
            )));
        }
        let noise_chol = cholesky_with_jitter(&noise_cov)?;
        Ok(ObservationModel { kind, noise_cov, noise_chol })
    }

    /// Isotropic noise with standard deviation `sigma`.
    pub fn with_sigma(kind: ObservationKind, sigma: f64) -> Result<Self> {
        let r = match &kind {
            ObservationKind::SelectLinear { indices } | ObservationKind::ArctanSelected { indices } => {
                indices.len()
            }
            ObservationKind::Radial { .. } => 1,
        };
        ObservationModel::new(kind, DMatrix::identity(r, r) * sigma * sigma)
    }

    pub fn obs_dim(&self) -> usize {
        self.noise_cov.nrows()
    }

    pub fn noise_chol(&self) -> &Cholesky<f64, Dyn> {
        &self.noise_chol
    }

    /// The state indices this operator reads, when it is selection-shaped.
    pub fn observed_indices(&self) -> Option<&[usize]> {
        match &self.kind {
            ObservationKind::SelectLinear { indices } | ObservationKind::ArctanSelected { indices } => {
                Some(indices)
            }
            ObservationKind::Radial { .. } => None,
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            ObservationKind::SelectLinear { indices } => {
                DVector::from_fn(indices.len(), |i, _| x[indices[i]])
            }
            ObservationKind::ArctanSelected { indices } => {
                DVector::from_fn(indices.len(), |i, _| x[indices[i]].atan())
            }
            ObservationKind::Radial { center } => {
                DVector::from_element(1, (x - center).norm())
            }
        }
    }

    /// Analytic Jacobian of the operator at `x` (r x d).
    pub fn jacobian(&self, x: &DVector<f64>) -> Result<DMatrix<f64>> {
        let d = x.len();
        match &self.kind {
            ObservationKind::SelectLinear { indices } => {
                let mut jac = DMatrix::zeros(indices.len(), d);
                for (row, &i) in indices.iter().enumerate() {
                    jac[(row, i)] = 1.0;
                }
                Ok(jac)
            }
            ObservationKind::ArctanSelected { indices } => {
                let mut jac = DMatrix::zeros(indices.len(), d);
                for (row, &i) in indices.iter().enumerate() {
                    jac[(row, i)] = 1.0 / (1.0 + x[i] * x[i]);
                }
                Ok(jac)
            }
            ObservationKind::Radial { center } => {
                let diff = x - center;
                let norm = diff.norm();
                if norm == 0.0 {
                    return Err(Error::SingularJacobian);
                }
                Ok(DMatrix::from_fn(1, d, |_, j| diff[j] / norm))
            }
        }
    }

    /// Diagonal scaling of the selection rows at `x`: jacobian = D(x) * P.
    /// Only defined for selection-shaped operators.
    pub(crate) fn row_scales(&self, x_at_indices: impl Fn(usize) -> f64) -> Option<Vec<f64>> {
        match &self.kind {
            ObservationKind::SelectLinear { indices } => Some(vec![1.0; indices.len()]),
            ObservationKind::ArctanSelected { indices } => Some(
                (0..indices.len())
                    .map(|row| {
                        let v = x_at_indices(row);
                        1.0 / (1.0 + v * v)
                    })
                    .collect(),
            ),
            ObservationKind::Radial { .. } => None,
        }
    }

    /// Log of the Gaussian likelihood p(y | x).
    pub fn log_likelihood(&self, y: &DVector<f64>, x: &DVector<f64>) -> f64 {
        crate::gaussian::gaussian_logpdf_chol(y, &self.apply(x), &self.noise_chol)
    }

    /// Gradient of the log-likelihood in x:
    /// -J(x)^T noise_cov^{-1} (M(x) - y).
    pub fn likelihood_score(&self, y: &DVector<f64>, x: &DVector<f64>) -> Result<DVector<f64>> {
        let innovation = self.apply(x) - y;
        let weighted = self.noise_chol.solve(&innovation);
        let d = x.len();
        // J^T w without materializing the dense Jacobian for selection shapes.
        match &self.kind {
            ObservationKind::SelectLinear { indices } => {
                let mut out = DVector::zeros(d);
                for (row, &i) in indices.iter().enumerate() {
                    out[i] = -weighted[row];
                }
                Ok(out)
            }
            ObservationKind::ArctanSelected { indices } => {
                let mut out = DVector::zeros(d);
                for (row, &i) in indices.iter().enumerate() {
                    out[i] = -weighted[row] / (1.0 + x[i] * x[i]);
                }
                Ok(out)
            }
            ObservationKind::Radial { .. } => {
                let jac = self.jacobian(x)?;
                Ok(-jac.transpose() * weighted)
            }
        }
    }
}

/// Central finite-difference Jacobian with per-coordinate step
/// 1e-5 * (1 + |x_i|); used to validate analytic Jacobians.
pub fn fd_jacobian(f: impl Fn(&DVector<f64>) -> DVector<f64>, x: &DVector<f64>) -> DMatrix<f64> {
    let d = x.len();
    let r = f(x).len();
    let mut jac = DMatrix::zeros(r, d);
    for j in 0..d {
        let h = 1e-5 * (1.0 + x[j].abs());
        let mut xp = x.clone();
        let mut xm = x.clone();
        xp[j] += h;
        xm[j] -= h;
        let df = (f(&xp) - f(&xm)) / (2.0 * h);
        jac.set_column(j, &df);
    }
    jac
}
