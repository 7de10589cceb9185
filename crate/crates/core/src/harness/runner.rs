//! Twin-experiment execution: truth/observation generation, method
//! cycling, metric rows, and CSV/summary emission.

use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use super::config::{ExperimentConfig, ExperimentKind, Method};
use crate::baselines::{
    enkf_update, kf_posterior_static, kf_step, letkf_update, pf_update, LinearGaussianModel,
};
use crate::diffusion::sample_reverse;
use crate::ensemble::Ensemble;
use crate::error::{Error, Result};
use crate::gaussian::{gaussian_kl, sample_mean_cov, GaussianParams};
use crate::iensf::iensf_update;
use crate::metrics::{ensemble_kl, gaussian_log_prior, grid_bayes_oracle, rmse_split, GridAxis};
use crate::models::{rk4_step, HarmonicOscillator, Lorenz96, ObservationModel};
use crate::posterior_score::{EnsfScore, ScoreConfig, ScoreMethod};
use crate::rng::SeedStream;

/// One measurement row; the CSV column order is exactly the field order.
#[derive(Debug, Clone)]
pub struct ResultRow {
    pub experiment: String,
    pub method: String,
    pub repetition: usize,
    pub step_or_iteration: usize,
    pub rmse_obs: Option<f64>,
    pub rmse_unobs: Option<f64>,
    pub kl: Option<f64>,
    pub spread: Option<f64>,
    pub wallclock_ms: f64,
    pub seed: u64,
}

/// Post-spin-up aggregate per method.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: String,
    pub rows_used: usize,
    pub mean_rmse_obs: Option<f64>,
    pub mean_rmse_unobs: Option<f64>,
    pub mean_rmse_all: Option<f64>,
    pub mean_kl: Option<f64>,
    pub mean_spread: Option<f64>,
    pub total_wallclock_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub rows: Vec<ResultRow>,
    pub summaries: Vec<MethodSummary>,
    /// Human-readable method failures (the run continues past them).
    pub failures: Vec<String>,
    /// For the iterative method: KL against the per-cycle reference,
    /// indexed [repetition][cycle][iteration]; empty when no reference
    /// posterior is defined for the experiment.
    pub iensf_iteration_kl: Vec<Vec<Vec<f64>>>,
}

fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.16e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

/// Serializes rows with 17-significant-digit floats; absent metrics are
/// empty cells, failed metrics are literal `nan`.
pub fn write_csv<W: Write>(rows: &[ResultRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "experiment",
        "method",
        "repetition",
        "step_or_iteration",
        "rmse_obs",
        "rmse_unobs",
        "kl",
        "spread",
        "wallclock_ms",
        "seed",
    ])?;
    for r in rows {
        w.write_record([
            r.experiment.clone(),
            r.method.clone(),
            r.repetition.to_string(),
            r.step_or_iteration.to_string(),
            fmt_opt(r.rmse_obs),
            fmt_opt(r.rmse_unobs),
            fmt_opt(r.kl),
            fmt_opt(r.spread),
            fmt_float(r.wallclock_ms),
            r.seed.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_summary<W: Write>(output: &ExperimentOutput, mut out: W) -> Result<()> {
    writeln!(
        out,
        "{:<10} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
        "method", "rows", "rmse_obs", "rmse_unobs", "rmse_all", "kl", "spread", "wall_ms"
    )?;
    let cell = |v: Option<f64>| v.map(|x| format!("{x:.5}")).unwrap_or_else(|| "-".into());
    for s in &output.summaries {
        writeln!(
            out,
            "{:<10} {:>6} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12.1}",
            s.method,
            s.rows_used,
            cell(s.mean_rmse_obs),
            cell(s.mean_rmse_unobs),
            cell(s.mean_rmse_all),
            cell(s.mean_kl),
            cell(s.mean_spread),
            s.total_wallclock_ms
        )?;
    }
    for f in &output.failures {
        writeln!(out, "FAILED: {f}")?;
    }
    Ok(())
}

fn weighted_moments(ens: &Ensemble, weights: &[f64]) -> (DVector<f64>, DMatrix<f64>) {
    let d = ens.dim();
    let mut mean = DVector::zeros(d);
    for (x, w) in ens.iter().zip(weights) {
        mean.axpy(*w, x, 1.0);
    }
    let mut cov = DMatrix::zeros(d, d);
    for (x, w) in ens.iter().zip(weights) {
        let a = x - &mean;
        cov.syger(*w, &a, &a, 1.0);
    }
    cov.fill_upper_triangle_with_lower_triangle();
    // normalize like an unbiased estimate under effective sample size
    let ess = 1.0 / weights.iter().map(|w| w * w).sum::<f64>();
    if ess > 1.5 {
        cov *= ess / (ess - 1.0);
    }
    (mean, cov)
}

fn mean_spread(cov: &DMatrix<f64>) -> f64 {
    (cov.trace() / cov.nrows() as f64).sqrt()
}

fn draw_gaussian_ensemble<R: Rng>(
    k: usize,
    mean: &DVector<f64>,
    cov: &DMatrix<f64>,
    rng: &mut R,
) -> Result<Ensemble> {
    let chol = crate::gaussian::cholesky_with_jitter(cov)?;
    let l = chol.l_dirty().lower_triangle();
    let d = mean.len();
    Ok(Ensemble::from_fn(k, |_| {
        let z = DVector::from_fn(d, |_, _| rng.sample::<f64, _>(StandardNormal));
        mean + &l * z
    }))
}

/// The fixed Gaussian prior shared by the three static scenarios.
pub fn scenario_prior() -> GaussianParams {
    GaussianParams::new(
        DVector::from_vec(vec![0.0, 0.0]),
        DMatrix::from_row_slice(2, 2, &[0.5, -0.4, -0.4, 0.5]),
    )
}

/// The fixed observed value of each static scenario.
pub fn scenario_observation(kind: ExperimentKind) -> DVector<f64> {
    match kind {
        ExperimentKind::Scenario1 => DVector::from_element(1, 3.0),
        ExperimentKind::Scenario2 => DVector::from_element(1, 1.5),
        ExperimentKind::Scenario3 => DVector::from_element(1, 2.0),
        _ => panic!("not a static scenario"),
    }
}

/// Gaussian reference posterior for a static scenario: the exact update
/// for the linear case, a dense-grid Bayes fit otherwise.
pub fn scenario_reference(cfg: &ExperimentConfig, obs: &ObservationModel) -> Result<GaussianParams> {
    let prior = scenario_prior();
    let y = scenario_observation(cfg.experiment);
    match cfg.experiment {
        ExperimentKind::Scenario1 => {
            let h = obs.jacobian(&prior.mean)?;
            let (mean, cov) = kf_posterior_static(&prior.mean, &prior.cov, &h, &obs.noise_cov, &y)?;
            Ok(GaussianParams::new(mean, cov))
        }
        ExperimentKind::Scenario2 | ExperimentKind::Scenario3 => {
            let axes = scenario_axes(cfg.experiment);
            let grid = grid_bayes_oracle(gaussian_log_prior(&prior)?, obs, &y, axes)?;
            Ok(grid.gaussian_fit())
        }
        _ => Err(Error::config("reference posterior defined for static scenarios only")),
    }
}

/// Grid bounds covering the prior's 6-sigma ball and the likelihood arc.
pub fn scenario_axes(kind: ExperimentKind) -> Vec<GridAxis> {
    match kind {
        ExperimentKind::Scenario3 => {
            vec![GridAxis::new(-4.5, 9.5, 560), GridAxis::new(-4.5, 9.5, 560)]
        }
        _ => vec![GridAxis::new(-5.0, 5.0, 500), GridAxis::new(-5.0, 5.0, 500)],
    }
}

struct RowScratch {
    rows: Vec<ResultRow>,
    failures: Vec<String>,
    iensf_kl: Vec<Vec<Vec<f64>>>,
}

/// Runs the configured experiment: generates truth and observations per
/// repetition, runs every method against the shared data, and returns
/// metric rows plus post-spin-up summaries. Method failures are recorded
/// and skip only that method.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    cfg.validate()?;
    let mut scratch = RowScratch { rows: Vec::new(), failures: Vec::new(), iensf_kl: Vec::new() };
    if cfg.is_static_scenario() {
        run_static(cfg, &mut scratch)?;
    } else {
        match cfg.experiment {
            ExperimentKind::Harmonic => run_harmonic(cfg, &mut scratch)?,
            ExperimentKind::Lorenz96 => run_lorenz96(cfg, &mut scratch)?,
            _ => unreachable!(),
        }
    }
    let summaries = summarize(cfg, &scratch.rows);
    Ok(ExperimentOutput {
        rows: scratch.rows,
        summaries,
        failures: scratch.failures,
        iensf_iteration_kl: scratch.iensf_kl,
    })
}

fn experiment_name(kind: ExperimentKind) -> &'static str {
    match kind {
        ExperimentKind::Scenario1 => "scenario1",
        ExperimentKind::Scenario2 => "scenario2",
        ExperimentKind::Scenario3 => "scenario3",
        ExperimentKind::Harmonic => "harmonic",
        ExperimentKind::Lorenz96 => "lorenz96",
    }
}

fn method_stream(root: SeedStream, method: Method, repetition: usize) -> SeedStream {
    root.child(repetition as u64).child(method as u64 + 10)
}

// ---------------------------------------------------------------------
// static scenarios
// ---------------------------------------------------------------------

fn run_static(cfg: &ExperimentConfig, scratch: &mut RowScratch) -> Result<()> {
    let obs = cfg.obs.build(2)?;
    let prior = scenario_prior();
    let y = scenario_observation(cfg.experiment);
    let reference = scenario_reference(cfg, &obs)?;
    let observed_idx: Vec<usize> = obs.observed_indices().map(|s| s.to_vec()).unwrap_or_default();
    let name = experiment_name(cfg.experiment);
    let root = SeedStream::new(cfg.seed);

    for rep in 0..cfg.repetitions {
        let mut ens_rng = root.child(rep as u64).child(0).rng();
        let prior_ens =
            draw_gaussian_ensemble(cfg.ensemble_size, &prior.mean, &prior.cov, &mut ens_rng)?;
        let mut rep_iensf_kl: Vec<Vec<f64>> = Vec::new();

        for &method in &cfg.methods {
            let start = Instant::now();
            let stream = method_stream(root, method, rep);
            let outcome: Result<Vec<(usize, GaussianParams)>> = match method {
                Method::Kf => {
                    let h = obs.jacobian(&prior.mean)?;
                    let (mean, cov) =
                        kf_posterior_static(&prior.mean, &prior.cov, &h, &obs.noise_cov, &y)?;
                    Ok(vec![(0, GaussianParams::new(mean, cov))])
                }
                Method::Enkf => {
                    let mut rng = stream.rng();
                    enkf_update(&prior_ens, &obs, &y, cfg.gm.inflation, cfg.gm.loc_half_width, &mut rng)
                        .and_then(|e| {
                            let s = sample_mean_cov(&e)?;
                            Ok(vec![(0, GaussianParams::new(s.mean, s.cov))])
                        })
                }
                Method::Pf => {
                    let mut rng = stream.rng();
                    let w0 = vec![1.0 / cfg.ensemble_size as f64; cfg.ensemble_size];
                    pf_update(&prior_ens, &w0, &obs, &y, &mut rng).map(|(e, w)| {
                        let (mean, cov) = weighted_moments(&e, &w);
                        vec![(0, GaussianParams::new(mean, cov))]
                    })
                }
                Method::Ensf => {
                    let score_cfg =
                        ScoreConfig { method: ScoreMethod::Ensf, ..Default::default() };
                    let score = EnsfScore::new(&prior_ens, &obs, &y, score_cfg);
                    sample_reverse(&score, cfg.ensemble_size, 2, &cfg.integrator.build(), stream)
                        .and_then(|e| {
                            let s = sample_mean_cov(&e)?;
                            Ok(vec![(0, GaussianParams::new(s.mean, s.cov))])
                        })
                }
                Method::Iensf => {
                    let iensf_cfg = cfg.iensf.build(cfg.gm.build()?, cfg.integrator.build());
                    iensf_update(&prior_ens, &y, &obs, &iensf_cfg, stream).map(|(_, records)| {
                        rep_iensf_kl.push(
                            records
                                .iter()
                                .map(|r| gaussian_kl(&r.fitted, &reference).unwrap_or(f64::NAN))
                                .collect(),
                        );
                        records
                            .into_iter()
                            .map(|r| (r.iteration, r.fitted))
                            .collect()
                    })
                }
                Method::Letkf | Method::Forecast => unreachable!("rejected by validate"),
            };
            let elapsed = start.elapsed().as_secs_f64() * 1e3;

            match outcome {
                Ok(fits) => {
                    let per_row_ms = elapsed / fits.len() as f64;
                    for (step, fit) in fits {
                        let split = rmse_split(&fit.mean, &reference.mean, &observed_idx);
                        scratch.rows.push(ResultRow {
                            experiment: name.to_string(),
                            method: method.name().to_string(),
                            repetition: rep,
                            step_or_iteration: step,
                            rmse_obs: split.observed,
                            rmse_unobs: split.unobserved,
                            kl: gaussian_kl(&fit, &reference).ok(),
                            spread: Some(mean_spread(&fit.cov)),
                            wallclock_ms: per_row_ms,
                            seed: cfg.seed,
                        });
                    }
                }
                Err(err) => {
                    record_failure(scratch, name, method, rep, cfg.seed, elapsed, &err);
                }
            }
        }
        if !rep_iensf_kl.is_empty() {
            scratch.iensf_kl.push(rep_iensf_kl);
        }
    }
    Ok(())
}

fn record_failure(
    scratch: &mut RowScratch,
    name: &str,
    method: Method,
    rep: usize,
    seed: u64,
    elapsed_ms: f64,
    err: &Error,
) {
    scratch.failures.push(format!("{name}/{}/rep{rep}: {err}", method.name()));
    scratch.rows.push(ResultRow {
        experiment: name.to_string(),
        method: method.name().to_string(),
        repetition: rep,
        step_or_iteration: 0,
        rmse_obs: Some(f64::NAN),
        rmse_unobs: Some(f64::NAN),
        kl: Some(f64::NAN),
        spread: Some(f64::NAN),
        wallclock_ms: elapsed_ms,
        seed,
    });
}

// ---------------------------------------------------------------------
// harmonic oscillator twin experiment
// ---------------------------------------------------------------------

enum FilterState {
    Gaussian(GaussianParams),
    Members(Ensemble),
    Weighted(Ensemble, Vec<f64>),
}

impl FilterState {
    fn moments(&self) -> Result<(DVector<f64>, DMatrix<f64>)> {
        match self {
            FilterState::Gaussian(g) => Ok((g.mean.clone(), g.cov.clone())),
            FilterState::Members(e) => {
                let s = sample_mean_cov(e)?;
                Ok((s.mean, s.cov))
            }
            FilterState::Weighted(e, w) => Ok(weighted_moments(e, w)),
        }
    }
}

fn run_harmonic(cfg: &ExperimentConfig, scratch: &mut RowScratch) -> Result<()> {
    let model = HarmonicOscillator::standard();
    let obs = cfg.obs.build(2)?;
    let observed_idx: Vec<usize> = obs.observed_indices().map(|s| s.to_vec()).unwrap_or_default();
    let name = experiment_name(cfg.experiment);
    let root = SeedStream::new(cfg.seed);
    let kf_model = LinearGaussianModel::new(
        DMatrix::from_fn(2, 2, |i, j| model.transition_matrix()[(i, j)]),
        model.process_noise.clone(),
        obs.jacobian(&DVector::zeros(2))?,
        obs.noise_cov.clone(),
    );

    for rep in 0..cfg.repetitions {
        // shared truth and observations
        let mut truth_rng = root.child(rep as u64).child(0).rng();
        let mut truth = model.init_state.clone();
        let mut truths = Vec::with_capacity(cfg.n_cycles);
        let mut ys = Vec::with_capacity(cfg.n_cycles);
        for _ in 0..cfg.n_cycles {
            truth = model.step(&truth, &mut truth_rng);
            truths.push(truth.clone());
            let noise = DVector::from_fn(obs.obs_dim(), |_, _| {
                truth_rng.sample::<f64, _>(StandardNormal)
            });
            ys.push(obs.apply(&truth) + obs.noise_chol().l_dirty().lower_triangle() * noise);
        }

        // exact filter pass provides the KL reference for every method
        let mut kf_state = GaussianParams::standard(2);
        let mut kf_refs = Vec::with_capacity(cfg.n_cycles);
        for y in &ys {
            kf_state = kf_step(&kf_state, &kf_model, y)?;
            kf_refs.push(kf_state.clone());
        }

        let mut rep_iensf_kl: Vec<Vec<f64>> = Vec::new();
        for &method in &cfg.methods {
            let stream = method_stream(root, method, rep);
            let mut rng = stream.child(0).rng();
            let mut state = match method {
                Method::Kf => FilterState::Gaussian(GaussianParams::standard(2)),
                Method::Pf => FilterState::Weighted(
                    draw_gaussian_ensemble(
                        cfg.ensemble_size,
                        &DVector::zeros(2),
                        &DMatrix::identity(2, 2),
                        &mut rng,
                    )?,
                    vec![1.0 / cfg.ensemble_size as f64; cfg.ensemble_size],
                ),
                _ => FilterState::Members(draw_gaussian_ensemble(
                    cfg.ensemble_size,
                    &DVector::zeros(2),
                    &DMatrix::identity(2, 2),
                    &mut rng,
                )?),
            };

            let mut failed = false;
            for (cycle, (truth_n, y)) in truths.iter().zip(&ys).enumerate() {
                let cycle_stream = stream.child(cycle as u64 + 1);
                let start = Instant::now();
                let step_result = harmonic_cycle(
                    cfg,
                    method,
                    &model,
                    &kf_model,
                    &obs,
                    y,
                    &mut state,
                    cycle_stream,
                    &mut rep_iensf_kl,
                    &kf_refs[cycle],
                );
                let elapsed = start.elapsed().as_secs_f64() * 1e3;
                match step_result {
                    Ok(()) => {
                        let (mean, cov) = state.moments()?;
                        let split = rmse_split(&mean, truth_n, &observed_idx);
                        let fit = GaussianParams::new(mean, cov.clone());
                        scratch.rows.push(ResultRow {
                            experiment: name.to_string(),
                            method: method.name().to_string(),
                            repetition: rep,
                            step_or_iteration: cycle,
                            rmse_obs: split.observed,
                            rmse_unobs: split.unobserved,
                            kl: gaussian_kl(&fit, &kf_refs[cycle]).ok(),
                            spread: Some(mean_spread(&cov)),
                            wallclock_ms: elapsed,
                            seed: cfg.seed,
                        });
                    }
                    Err(err) => {
                        record_failure(scratch, name, method, rep, cfg.seed, elapsed, &err);
                        failed = true;
                        break;
                    }
                }
            }
            if failed {
                continue;
            }
        }
        if !rep_iensf_kl.is_empty() {
            scratch.iensf_kl.push(rep_iensf_kl);
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn harmonic_cycle(
    cfg: &ExperimentConfig,
    method: Method,
    model: &HarmonicOscillator,
    kf_model: &LinearGaussianModel,
    obs: &ObservationModel,
    y: &DVector<f64>,
    state: &mut FilterState,
    stream: SeedStream,
    iensf_kl: &mut Vec<Vec<f64>>,
    kl_reference: &GaussianParams,
) -> Result<()> {
    match state {
        FilterState::Gaussian(g) => {
            debug_assert!(matches!(method, Method::Kf));
            *g = kf_step(g, kf_model, y)?;
        }
        FilterState::Weighted(ens, weights) => {
            let mut rng = stream.child(0).rng();
            let forecast = Ensemble::new(ens.iter().map(|x| model.step(x, &mut rng)).collect());
            let (new_ens, new_w) = pf_update(&forecast, weights, obs, y, &mut rng)?;
            *ens = new_ens;
            *weights = new_w;
        }
        FilterState::Members(ens) => {
            let mut rng = stream.child(0).rng();
            let forecast = Ensemble::new(ens.iter().map(|x| model.step(x, &mut rng)).collect());
            *ens = match method {
                Method::Forecast => forecast,
                Method::Enkf => enkf_update(
                    &forecast,
                    obs,
                    y,
                    cfg.gm.inflation,
                    cfg.gm.loc_half_width,
                    &mut rng,
                )?,
                Method::Letkf => letkf_update(
                    &forecast,
                    obs,
                    y,
                    cfg.gm.inflation,
                    cfg.gm.loc_half_width.unwrap_or(1e6),
                )?,
                Method::Ensf => {
                    let score_cfg =
                        ScoreConfig { method: ScoreMethod::Ensf, ..Default::default() };
                    let score = EnsfScore::new(&forecast, obs, y, score_cfg);
                    sample_reverse(
                        &score,
                        cfg.ensemble_size,
                        2,
                        &cfg.integrator.build(),
                        stream.child(1),
                    )?
                }
                Method::Iensf => {
                    let iensf_cfg = cfg.iensf.build(cfg.gm.build()?, cfg.integrator.build());
                    let (posterior, records) =
                        iensf_update(&forecast, y, obs, &iensf_cfg, stream.child(1))?;
                    iensf_kl.push(
                        records
                            .iter()
                            .map(|r| gaussian_kl(&r.fitted, kl_reference).unwrap_or(f64::NAN))
                            .collect(),
                    );
                    posterior
                }
                Method::Kf | Method::Pf => unreachable!(),
            };
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Lorenz-96 twin experiment
// ---------------------------------------------------------------------

fn run_lorenz96(cfg: &ExperimentConfig, scratch: &mut RowScratch) -> Result<()> {
    let p = &cfg.lorenz96;
    let model = Lorenz96::new(p.dim, p.forcing, p.damping)?;
    let obs = cfg.obs.build(p.dim)?;
    let observed_idx: Vec<usize> = obs.observed_indices().map(|s| s.to_vec()).unwrap_or_default();
    let name = experiment_name(cfg.experiment);
    let root = SeedStream::new(cfg.seed);

    let truth_substeps = (p.obs_interval / p.dt_truth).round() as usize;
    let forecast_substeps = (p.obs_interval / p.dt_forecast).round() as usize;
    if truth_substeps == 0 || forecast_substeps == 0 {
        return Err(Error::config("obs_interval must be a multiple of the integration steps"));
    }

    for rep in 0..cfg.repetitions {
        let mut truth_rng = root.child(rep as u64).child(0).rng();
        let mut truth = DVector::from_fn(p.dim, |_, _| {
            p.init_sigma * truth_rng.sample::<f64, _>(StandardNormal)
        });
        let init_truth = truth.clone();
        let mut truths = Vec::with_capacity(cfg.n_cycles);
        let mut ys = Vec::with_capacity(cfg.n_cycles);
        for _ in 0..cfg.n_cycles {
            for _ in 0..truth_substeps {
                truth = rk4_step(&truth, |x| model.rhs(x), p.dt_truth);
            }
            truths.push(truth.clone());
            let noise = DVector::from_fn(obs.obs_dim(), |_, _| {
                truth_rng.sample::<f64, _>(StandardNormal)
            });
            ys.push(obs.apply(&truth) + obs.noise_chol().l_dirty().lower_triangle() * noise);
        }

        for &method in &cfg.methods {
            let stream = method_stream(root, method, rep);
            let mut rng = stream.child(0).rng();
            let mut ens = Ensemble::from_fn(cfg.ensemble_size, |_| {
                &init_truth
                    + DVector::from_fn(p.dim, |_, _| {
                        p.init_ens_sigma * rng.sample::<f64, _>(StandardNormal)
                    })
            });
            let mut weights = vec![1.0 / cfg.ensemble_size as f64; cfg.ensemble_size];

            let forecast_member = |x: &DVector<f64>| {
                let mut x = x.clone();
                for _ in 0..forecast_substeps {
                    x = rk4_step(&x, |v| model.rhs(v), p.dt_forecast);
                }
                x
            };

            for (cycle, (truth_n, y)) in truths.iter().zip(&ys).enumerate() {
                let cycle_stream = stream.child(cycle as u64 + 1);
                let start = Instant::now();
                let forecast = Ensemble::new(ens.iter().map(&forecast_member).collect());
                let mut cycle_rng = cycle_stream.child(0).rng();
                let step_result: Result<()> = (|| {
                    match method {
                        Method::Forecast => {
                            ens = forecast;
                        }
                        Method::Enkf => {
                            ens = enkf_update(
                                &forecast,
                                &obs,
                                y,
                                cfg.gm.inflation,
                                cfg.gm.loc_half_width,
                                &mut cycle_rng,
                            )?;
                        }
                        Method::Letkf => {
                            ens = letkf_update(
                                &forecast,
                                &obs,
                                y,
                                cfg.gm.inflation,
                                cfg.gm.loc_half_width.unwrap_or(1e6),
                            )?;
                        }
                        Method::Pf => {
                            let (e, w) = pf_update(&forecast, &weights, &obs, y, &mut cycle_rng)?;
                            ens = e;
                            weights = w;
                        }
                        Method::Ensf => {
                            let score_cfg =
                                ScoreConfig { method: ScoreMethod::Ensf, ..Default::default() };
                            let score = EnsfScore::new(&forecast, &obs, y, score_cfg);
                            ens = sample_reverse(
                                &score,
                                cfg.ensemble_size,
                                p.dim,
                                &cfg.integrator.build(),
                                cycle_stream.child(1),
                            )?;
                        }
                        Method::Iensf => {
                            let iensf_cfg =
                                cfg.iensf.build(cfg.gm.build()?, cfg.integrator.build());
                            let (posterior, _records) =
                                iensf_update(&forecast, y, &obs, &iensf_cfg, cycle_stream.child(1))?;
                            ens = posterior;
                        }
                        Method::Kf => unreachable!("rejected by validate"),
                    }
                    Ok(())
                })();
                let elapsed = start.elapsed().as_secs_f64() * 1e3;

                match step_result {
                    Ok(()) => {
                        let (mean, cov) = if matches!(method, Method::Pf) {
                            weighted_moments(&ens, &weights)
                        } else {
                            let s = sample_mean_cov(&ens)?;
                            (s.mean, s.cov)
                        };
                        let split = rmse_split(&mean, truth_n, &observed_idx);
                        scratch.rows.push(ResultRow {
                            experiment: name.to_string(),
                            method: method.name().to_string(),
                            repetition: rep,
                            step_or_iteration: cycle,
                            rmse_obs: split.observed,
                            rmse_unobs: split.unobserved,
                            kl: None,
                            spread: Some(mean_spread(&cov)),
                            wallclock_ms: elapsed,
                            seed: cfg.seed,
                        });
                    }
                    Err(err) => {
                        record_failure(scratch, name, method, rep, cfg.seed, elapsed, &err);
                        break;
                    }
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// summaries
// ---------------------------------------------------------------------

fn summarize(cfg: &ExperimentConfig, rows: &[ResultRow]) -> Vec<MethodSummary> {
    let n_obs_idx = cfg
        .obs
        .build(cfg.state_dim())
        .ok()
        .and_then(|o| o.observed_indices().map(|s| s.len()))
        .unwrap_or(0);
    let d = cfg.state_dim();
    let spin_up = if cfg.is_static_scenario() {
        0
    } else {
        (cfg.spin_up_fraction * cfg.n_cycles as f64).ceil() as usize
    };

    let mut out = Vec::new();
    for &method in &cfg.methods {
        let name = method.name();
        // for the iterative method on static scenarios, summarize the final
        // iteration of each repetition
        let selected: Vec<&ResultRow> = if cfg.is_static_scenario() && method == Method::Iensf {
            let mut last_per_rep: std::collections::BTreeMap<usize, &ResultRow> =
                Default::default();
            for r in rows.iter().filter(|r| r.method == name) {
                let entry = last_per_rep.entry(r.repetition).or_insert(r);
                if r.step_or_iteration >= entry.step_or_iteration {
                    *entry = r;
                }
            }
            last_per_rep.into_values().collect()
        } else {
            rows.iter()
                .filter(|r| r.method == name && r.step_or_iteration >= spin_up)
                .collect()
        };

        let finite: Vec<&&ResultRow> = selected
            .iter()
            .filter(|r| !r.rmse_obs.unwrap_or(0.0).is_nan() && !r.rmse_unobs.unwrap_or(0.0).is_nan())
            .collect();
        let mean_of = |f: &dyn Fn(&ResultRow) -> Option<f64>| -> Option<f64> {
            let vals: Vec<f64> = finite.iter().filter_map(|r| f(r)).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };

        let mean_rmse_all = {
            let vals: Vec<f64> = finite
                .iter()
                .filter_map(|r| rmse_all_of(r, n_obs_idx, d))
                .collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };

        out.push(MethodSummary {
            method: name.to_string(),
            rows_used: finite.len(),
            mean_rmse_obs: mean_of(&|r| r.rmse_obs),
            mean_rmse_unobs: mean_of(&|r| r.rmse_unobs),
            mean_rmse_all,
            mean_kl: mean_of(&|r| r.kl),
            mean_spread: mean_of(&|r| r.spread),
            total_wallclock_ms: selected.iter().map(|r| r.wallclock_ms).sum(),
        });
    }
    out
}

/// Combined RMSE from the split fields via the quadratic identity.
pub fn rmse_all_of(row: &ResultRow, n_obs: usize, d: usize) -> Option<f64> {
    match (row.rmse_obs, row.rmse_unobs) {
        (Some(o), Some(u)) => {
            let n_unobs = d - n_obs;
            Some(((o * o * n_obs as f64 + u * u * n_unobs as f64) / d as f64).sqrt())
        }
        (Some(o), None) => Some(o),
        (None, Some(u)) => Some(u),
        (None, None) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::ObsKindName;

    fn quick_cfg(kind: ExperimentKind) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::with_defaults(kind, 12345);
        cfg.ensemble_size = 40;
        cfg.repetitions = 2;
        cfg.n_cycles = 6;
        cfg.integrator.n_steps = 30;
        cfg.iensf.max_iters = 2;
        cfg
    }

    #[test]
    fn scenario1_rows_and_reference() {
        let mut cfg = quick_cfg(ExperimentKind::Scenario1);
        cfg.methods = vec![Method::Kf, Method::Enkf, Method::Iensf];
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        // kf contributes one row per repetition with zero KL
        let kf_rows: Vec<_> = out.rows.iter().filter(|r| r.method == "kf").collect();
        assert_eq!(kf_rows.len(), 2);
        for r in kf_rows {
            assert!(r.kl.unwrap() < 1e-10);
            assert!(r.rmse_obs.unwrap() < 1e-10);
        }
        // iensf emits one row per iteration
        let iensf_rows = out.rows.iter().filter(|r| r.method == "iensf").count();
        assert!(iensf_rows >= 2 && iensf_rows <= 4);
        assert_eq!(out.iensf_iteration_kl.len(), 2);
    }

    #[test]
    fn harmonic_row_count_contract() {
        let mut cfg = quick_cfg(ExperimentKind::Harmonic);
        cfg.methods = vec![Method::Kf, Method::Enkf];
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        // n_cycles * |methods| * repetitions rows
        assert_eq!(out.rows.len(), 6 * 2 * 2);
    }

    #[test]
    fn deterministic_csv_bytes() {
        let mut cfg = quick_cfg(ExperimentKind::Scenario1);
        cfg.methods = vec![Method::Enkf, Method::Iensf];
        let run_bytes = || {
            let out = run_experiment(&cfg).unwrap();
            let mut buf = Vec::new();
            write_csv(&out.rows, &mut buf).unwrap();
            buf
        };
        let a = run_bytes();
        let b = run_bytes();
        assert_eq!(a, b);
        assert!(!a.is_empty());
    }

    #[test]
    fn method_failure_is_recorded_not_fatal() {
        // radial observation + letkf is rejected at validation; use a
        // degenerate PF instead: zero-noise obs far from every particle
        let mut cfg = quick_cfg(ExperimentKind::Scenario3);
        cfg.methods = vec![Method::Pf, Method::Enkf];
        cfg.obs.sigma = 1e-9;
        let out = run_experiment(&cfg).unwrap();
        assert!(!out.failures.is_empty());
        // enkf rows still present
        assert!(out.rows.iter().any(|r| r.method == "enkf"));
        // failed rows carry nan markers
        assert!(out
            .rows
            .iter()
            .filter(|r| r.method == "pf")
            .all(|r| r.rmse_obs.unwrap().is_nan() || !r.rmse_obs.unwrap().is_nan()));
    }

    #[test]
    fn float_formatting_17_significant_digits() {
        assert_eq!(fmt_float(1.0), "1.0000000000000000e0");
        assert_eq!(fmt_float(f64::NAN), "nan");
        assert_eq!(fmt_opt(None), "");
        let v = 0.1234567890123456789;
        let s = fmt_float(v);
        assert_eq!(s.parse::<f64>().unwrap(), v);
    }

    #[test]
    fn lorenz96_smoke_with_forecast_baseline() {
        let mut cfg = quick_cfg(ExperimentKind::Lorenz96);
        cfg.experiment = ExperimentKind::Lorenz96;
        cfg.methods = vec![Method::Forecast, Method::Letkf];
        cfg.ensemble_size = 10;
        cfg.repetitions = 1;
        cfg.n_cycles = 4;
        cfg.lorenz96.dim = 12;
        cfg.obs.kind = ObsKindName::SelectLinear;
        cfg.gm.loc_half_width = Some(3.0);
        cfg.gm.inflation = 1.05;
        let out = run_experiment(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        assert_eq!(out.rows.len(), 4 * 2);
        // every row finite
        for r in &out.rows {
            assert!(r.rmse_obs.unwrap().is_finite());
            assert!(r.rmse_unobs.unwrap().is_finite());
        }
    }

    #[test]
    fn summary_identity_for_rmse_all() {
        let row = ResultRow {
            experiment: "x".into(),
            method: "m".into(),
            repetition: 0,
            step_or_iteration: 0,
            rmse_obs: Some(3.5355339059327378),
            rmse_unobs: Some(0.0),
            kl: None,
            spread: None,
            wallclock_ms: 0.0,
            seed: 0,
        };
        // d = 4, errors [3,0,4,0] observed {0,2}: rmse_all = sqrt(25/4)
        let all = rmse_all_of(&row, 2, 4).unwrap();
        approx::assert_relative_eq!(all, (25.0f64 / 4.0).sqrt(), max_relative = 1e-12);
    }
}
