//! The five experiment drivers. Each returns plain data; writing files is
//! left to [`crate::report`].

use std::collections::BTreeMap;

use fisherflow::edh::{integrate_edh_particles, lambda_schedule, transient_params};
use fisherflow::fr_gaussian::{
    integrate_gaussian_flow_run, recover_particles, GaussianFlowState,
};
use fisherflow::fr_mixture::{integrate_mixture_flow_run, MixtureFlowState};
use fisherflow::gaussian::{cholesky_factor, gaussian_kl, mahalanobis, GaussianParams, LogDensity, Matrix, MixtureParams, Vector};
use fisherflow::metrics::{
    elbo_from_values, importance_kl_estimate, mode_coverage, moving_average, paper_kl_estimate, strictly_increasing,
    EvalGrid,
};
use fisherflow::normflow::{
    integrate_nf, integrate_nf_run, particle_kl, sample_base_with_log_det, transformed_velocity, BaseState,
    JointFlowState, PlanarParams, Transform, TransformChain, TriangularParams,
};
use fisherflow::quadrature::{gh_rule_nd, rule_for_dim, transport, ParticleSet};
use fisherflow::targets::{
    generate_logreg_dataset, gmm_posterior_analytic, kalman_posterior, FunnelModel, LinearGaussianModel,
    MixturePriorLinearModel, RangeModel, TargetModel,
};
use fisherflow::integrator::OdeConfig;
use fisherflow::{FlowError, Result};
use nalgebra::{dmatrix, dvector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde_json::{json, Value};

use crate::config::{Experiment, ExperimentConfig};

/// Window of the moving average applied to ELBO series.
pub const ELBO_SMOOTHING: usize = 5;
/// Slack allowed when checking that a KL series never increases.
pub const DESCENT_SLACK: f64 = 1e-6;

/// One line of `metrics.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub t: f64,
    pub metric: String,
    pub value: f64,
}

/// Everything an experiment produces.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    /// Scalar results, written to the report as metric records.
    pub summary: BTreeMap<String, f64>,
    pub series: Vec<MetricRow>,
    pub final_parameters: Value,
    pub particles: ParticleSet,
    pub checkpoints: Vec<(f64, Value)>,
}

impl RunOutput {
    fn new(particles: ParticleSet) -> Self {
        Self {
            summary: BTreeMap::new(),
            series: Vec::new(),
            final_parameters: Value::Null,
            particles,
            checkpoints: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, metric: &str, value: f64) {
        self.series.push(MetricRow {
            t,
            metric: metric.into(),
            value,
        });
    }

    fn set(&mut self, metric: &str, value: f64) {
        self.summary.insert(metric.into(), value);
    }

    fn flag(&mut self, metric: &str, value: bool) {
        self.set(metric, if value { 1.0 } else { 0.0 });
    }

    /// Values of one series in time order.
    pub fn series_values(&self, metric: &str) -> Vec<f64> {
        self.series.iter().filter(|r| r.metric == metric).map(|r| r.value).collect()
    }
}

pub fn run_experiment(c: &ExperimentConfig) -> Result<RunOutput> {
    match c.experiment {
        Experiment::LinearEquivalence => linear_equivalence(c),
        Experiment::GmmPrior if c.planar_maps > 0 => planar_flow(c, &gmm_model()?, 5.0, 15.0),
        Experiment::GmmPrior => gmm_prior(c),
        Experiment::NonlinearRange if c.planar_maps > 0 => planar_flow(c, &range_model()?, 4.0, 1.0),
        Experiment::NonlinearRange => nonlinear_range(c),
        Experiment::Logreg => logreg(c),
        Experiment::Funnel => funnel(c),
    }
}

/// Linear-Gaussian model with a two-dimensional state and observation.
pub fn linear_model() -> Result<LinearGaussianModel> {
    let h = dmatrix![1.0, 1.5; 0.2, 2.0];
    let truth = dvector![-1.18, 4.12];
    LinearGaussianModel::new(
        Vector::zeros(2),
        dmatrix![1.5, 0.5; 0.5, 5.5],
        h.clone(),
        dmatrix![0.2, 0.1; 0.1, 0.2],
        h * truth,
    )
}

/// Four-component Gaussian-mixture prior observed through a weak linear sensor.
pub fn gmm_model() -> Result<MixturePriorLinearModel> {
    let cov = Matrix::identity(2, 2) * 5.0;
    let comps = [(5.0, 5.0), (-5.0, 5.0), (-5.0, -5.0), (5.0, -5.0)]
        .iter()
        .map(|(a, b)| GaussianParams::new(dvector![*a, *b], cov.clone()))
        .collect::<Result<Vec<_>>>()?;
    let h = dmatrix![2.0, -0.2; 0.3, 2.5];
    let truth = dvector![2.67, 1.67];
    MixturePriorLinearModel::new(
        MixtureParams::uniform(comps)?,
        h.clone(),
        dmatrix![170.0, 64.0; 64.0, 230.0],
        h * truth,
    )
}

/// Range-only observation of a two-dimensional position.
pub fn range_model() -> Result<RangeModel> {
    let truth = dvector![4.7, -3.1];
    RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, truth.norm())
}

fn draw(rng: &mut ChaCha8Rng, mean: &Vector, factor: &Matrix) -> Vector {
    let xi = Vector::from_fn(mean.len(), |_, _| StandardNormal.sample(rng));
    mean + factor * xi
}

fn max_column_distance(a: &Matrix, b: &Matrix) -> f64 {
    (a - b).column_iter().map(|c| c.norm()).fold(0.0, f64::max)
}

fn all_times<S: Clone>(init: &S, t0: f64, checkpoints: &[S], time: impl Fn(&S) -> f64) -> Vec<(f64, S)> {
    std::iter::once((t0, init.clone()))
        .chain(checkpoints.iter().map(|s| (time(s), s.clone())))
        .collect()
}

/// Evenly spaced picks of at most `max` checkpoints, always including the last.
fn thin<T: Clone>(items: &[(f64, T)], max: usize) -> Vec<(f64, T)> {
    if max == 0 || items.is_empty() {
        return Vec::new();
    }
    if items.len() <= max {
        return items.to_vec();
    }
    let stride = items.len().div_ceil(max);
    let mut out: Vec<_> = items.iter().rev().step_by(stride).cloned().collect();
    out.reverse();
    out
}

fn mixture_params_json(m: &MixtureParams) -> Value {
    json!({
        "weights": m.weights().as_slice(),
        "components": m.components().iter().map(|g| json!({
            "mean": g.mean().as_slice(),
            "cov": fisherflow::fr_gaussian::matrix_rows(g.cov()),
        })).collect::<Vec<_>>(),
    })
}

fn gaussian_json(g: &GaussianParams) -> Value {
    json!({
        "mean": g.mean().as_slice(),
        "cov": fisherflow::fr_gaussian::matrix_rows(g.cov()),
    })
}

fn max_mahalanobis_drift(initial: &[f64], now: &ParticleSet, mean: &Vector, prec: &Matrix) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for (j, d0) in initial.iter().enumerate() {
        let d = mahalanobis(&now.position(j), mean, prec)?;
        worst = worst.max((d - d0).abs());
    }
    Ok(worst)
}

fn mahalanobis_all(ps: &ParticleSet, mean: &Vector, prec: &Matrix) -> Result<Vec<f64>> {
    (0..ps.len()).map(|j| mahalanobis(&ps.position(j), mean, prec)).collect()
}

/// EDH and Gaussian Fisher-Rao flows from one shared particle set, with
/// transient-density, posterior and invariance diagnostics.
fn linear_equivalence(c: &ExperimentConfig) -> Result<RunOutput> {
    let model = linear_model()?;
    let prior = model.prior();
    let post = kalman_posterior(&model)?;
    let ode = c.ode.to_ode_config();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let factor = cholesky_factor(prior.cov())?;
    let mut shared = Matrix::zeros(2, c.shared_particles);
    for j in 0..c.shared_particles {
        shared.set_column(j, &draw(&mut rng, prior.mean(), &factor));
    }

    let rule = gh_rule_nd(c.gh_degree, 2)?;
    let init = GaussianFlowState::new(&prior, rule.clone(), c.mode)?.with_particles(shared.clone())?;
    let fr = integrate_gaussian_flow_run(&init, &model, c.horizon, &ode)?;
    let edh = integrate_edh_particles(&model, &shared, c.horizon, &ode)?;

    let mut out = RunOutput::new(fr.state.particles.clone());
    out.set(
        "max_particle_deviation",
        max_column_distance(fr.state.particles.positions(), &edh),
    );

    let init_maha = mahalanobis_all(&init.particles, init.params.mean(), init.params.prec())?;
    let mut transient_worst: f64 = 0.0;
    let mut drift_worst: f64 = 0.0;
    let states = all_times(&init, 0.0, &fr.checkpoints, |s| s.t);
    for (t, s) in &states {
        let q = s.gaussian()?;
        let closed = transient_params(&model, lambda_schedule(*t))?;
        let closed_prec = fisherflow::gaussian::spd_inverse(&closed.cov)?;
        let mean_err = (s.params.mean() - &closed.mean).norm();
        let prec_err = (s.params.prec() - &closed_prec).norm();
        out.push(*t, "kl_to_posterior", gaussian_kl(&q, &post)?);
        out.push(*t, "transient_mean_error", mean_err);
        out.push(*t, "transient_precision_error", prec_err);
        transient_worst = transient_worst.max(mean_err).max(prec_err);
        let drift = max_mahalanobis_drift(&init_maha, &s.particles, s.params.mean(), s.params.prec())?;
        out.push(*t, "mahalanobis_drift", drift);
        drift_worst = drift_worst.max(drift);
    }
    out.set("transient_max_error", transient_worst);
    out.set("mahalanobis_drift", drift_worst);

    let fin = fr.state.gaussian()?;
    out.set(
        "posterior_mean_rel_error",
        (fin.mean() - post.mean()).norm() / post.mean().norm().max(1e-300),
    );
    out.set(
        "posterior_cov_rel_error",
        (fin.cov() - post.cov()).norm() / post.cov().norm(),
    );
    out.set("kl_to_posterior_final", gaussian_kl(&fin, &post)?);

    // quadrature nodes tracked as particles, compared against re-transported nodes
    let gh = GaussianFlowState::new(&prior, rule.clone(), c.mode)?;
    let gh_ode = OdeConfig {
        checkpoint_every: None,
        ..ode.clone()
    };
    let gh_run = integrate_gaussian_flow_run(&gh, &model, c.horizon, &gh_ode)?;
    let recovered = recover_particles(&gh_run.state, &rule)?;
    out.set(
        "gh_recovery_deviation",
        max_column_distance(recovered.positions(), gh_run.state.particles.positions()),
    );
    let gh_maha = mahalanobis_all(&gh.particles, gh.params.mean(), gh.params.prec())?;
    out.set(
        "gh_mahalanobis_drift",
        max_mahalanobis_drift(&gh_maha, &gh_run.state.particles, gh_run.state.params.mean(), gh_run.state.params.prec())?,
    );

    out.final_parameters = json!({
        "gaussian_flow": gaussian_json(&fin),
        "kalman_posterior": gaussian_json(&post),
        "edh_particles": fisherflow::fr_gaussian::column_list(&edh),
    });
    out.checkpoints = thin(
        &states.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    Ok(out)
}

/// Component means drawn around `centers` (cycled), shared covariance.
fn sampled_mixture(
    rng: &mut ChaCha8Rng,
    k: usize,
    centers: &[Vector],
    spread: &Matrix,
    cov: &Matrix,
) -> Result<MixtureParams> {
    let factor = cholesky_factor(spread)?;
    let comps = (0..k)
        .map(|i| GaussianParams::new(draw(rng, &centers[i % centers.len()], &factor), cov.clone()))
        .collect::<Result<Vec<_>>>()?;
    MixtureParams::uniform(comps)
}

struct GridKl<'a> {
    grid: EvalGrid,
    model: &'a dyn TargetModel,
}

impl GridKl<'_> {
    fn both(&self, q: &dyn LogDensity) -> Result<(f64, f64)> {
        let lq = |x: &Vector| Ok(q.log_density(x));
        let lp = |x: &Vector| self.model.log_joint(x);
        Ok((
            paper_kl_estimate(lq, lp, self.grid.points())?,
            importance_kl_estimate(lq, lp, &self.grid)?,
        ))
    }
}

fn grid_for<'a>(c: &ExperimentConfig, model: &'a dyn TargetModel) -> Result<GridKl<'a>> {
    let hw = c.grid.half_width;
    Ok(GridKl {
        grid: EvalGrid::cube(2, -hw, hw, c.grid.resolution)?,
        model,
    })
}

fn record_mixture_kl(
    out: &mut RunOutput,
    grid: &GridKl<'_>,
    states: &[(f64, MixtureFlowState)],
    prefix: &str,
) -> Result<(f64, f64)> {
    let mut last = (f64::NAN, f64::NAN);
    for (t, s) in states {
        let (verbatim, importance) = grid.both(&s.density()?)?;
        out.push(*t, &format!("{prefix}kl_verbatim"), verbatim);
        out.push(*t, &format!("{prefix}kl_importance"), importance);
        last = (verbatim, importance);
    }
    Ok(last)
}

/// Mixture flow against a Gaussian-mixture prior; KL on a grid and mode coverage.
fn gmm_prior(c: &ExperimentConfig) -> Result<RunOutput> {
    let model = gmm_model()?;
    let reference = gmm_posterior_analytic(&model)?;
    let p = model.prior.components()[0].cov().clone();
    let centers: Vec<Vector> = model.prior.components().iter().map(|g| g.mean().clone()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let init_mix = sampled_mixture(&mut rng, c.components, &centers, &p, &(&p * 3.0))?;
    let init = MixtureFlowState::new(&init_mix, vec![gh_rule_nd(c.gh_degree, 2)?], c.mode)?;
    let run = integrate_mixture_flow_run(&init, &model, c.horizon, &c.ode.to_ode_config())?;

    let mut out = RunOutput::new(run.state.pooled_particles()?);
    let grid = grid_for(c, &model)?;
    let states = all_times(&init, 0.0, &run.checkpoints, |s| s.t);
    record_mixture_kl(&mut out, &grid, &states, "")?;
    let kl_v = out.series_values("kl_verbatim");
    let kl_i = out.series_values("kl_importance");
    out.set("kl_verbatim_initial", kl_v[0]);
    out.set("kl_verbatim_final", *kl_v.last().unwrap());
    out.set("kl_importance_initial", kl_i[0]);
    out.set("kl_importance_final", *kl_i.last().unwrap());

    let fin = run.state.mixture()?;
    let covered = mode_coverage(&fin, &reference, c.grid.coverage_radius);
    out.set("modes_covered", covered.iter().filter(|b| **b).count() as f64);
    out.set("modes_total", covered.len() as f64);
    out.final_parameters = json!({
        "mixture": mixture_params_json(&fin),
        "reference_posterior": mixture_params_json(&reference),
    });
    out.checkpoints = thin(
        &states.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    Ok(out)
}

/// `K`-component mixture flow against a single-Gaussian flow on the range model.
fn nonlinear_range(c: &ExperimentConfig) -> Result<RunOutput> {
    let model = range_model()?;
    let prior = model.prior();
    let ode = c.ode.to_ode_config();
    let rule = gh_rule_nd(c.gh_degree, 2)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let init_mix = sampled_mixture(
        &mut rng,
        c.components,
        &[prior.mean().clone()],
        prior.cov(),
        &(prior.cov() * 3.0),
    )?;
    let init = MixtureFlowState::new(&init_mix, vec![rule.clone()], c.mode)?;
    let run = integrate_mixture_flow_run(&init, &model, c.horizon, &ode)?;

    // the single Gaussian starts where the first mixture component does
    let g0 = init_mix.components()[0].clone();
    let ginit = GaussianFlowState::new(&g0, rule, c.mode)?;
    let grun = integrate_gaussian_flow_run(&ginit, &model, c.horizon, &ode)?;

    let mut out = RunOutput::new(run.state.pooled_particles()?);
    let grid = grid_for(c, &model)?;
    let states = all_times(&init, 0.0, &run.checkpoints, |s| s.t);
    let (mv, mi) = record_mixture_kl(&mut out, &grid, &states, "mixture_")?;
    let mut last = (f64::NAN, f64::NAN);
    for (t, s) in all_times(&ginit, 0.0, &grun.checkpoints, |s| s.t) {
        let (v, i) = grid.both(&s.density()?)?;
        out.push(t, "gaussian_kl_verbatim", v);
        out.push(t, "gaussian_kl_importance", i);
        last = (v, i);
    }
    out.set("mixture_kl_verbatim_final", mv);
    out.set("mixture_kl_importance_final", mi);
    out.set("gaussian_kl_verbatim_final", last.0);
    out.set("gaussian_kl_importance_final", last.1);
    out.flag("mixture_beats_gaussian", mi < last.1);

    out.final_parameters = json!({
        "mixture": mixture_params_json(&run.state.mixture()?),
        "gaussian": gaussian_json(&grun.state.gaussian()?),
    });
    out.checkpoints = thin(
        &states.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    Ok(out)
}

/// Quadrature nodes of every component re-transported from the current
/// parameters, weighted by mixture weight.
fn recovered_mixture_particles(s: &MixtureFlowState) -> Result<ParticleSet> {
    let w = s.weights();
    let sets = s
        .components
        .iter()
        .map(|c| transport(&c.rule, c.sqrt.mean(), c.sqrt.factor()))
        .collect::<Result<Vec<_>>>()?;
    pool(&sets, w.as_slice())
}

fn pool(sets: &[ParticleSet], weights: &[f64]) -> Result<ParticleSet> {
    let n = sets[0].dim();
    let total: usize = sets.iter().map(|s| s.len()).sum();
    let mut pos = Matrix::zeros(n, total);
    let mut w = Vector::zeros(total);
    let mut j = 0;
    for (s, pk) in sets.iter().zip(weights) {
        for i in 0..s.len() {
            pos.set_column(j, &s.positions().column(i));
            w[j] = pk * s.weights()[i];
            j += 1;
        }
    }
    ParticleSet::new(pos, w)
}

fn batch_elbo(ps: &ParticleSet, q: &dyn LogDensity, model: &dyn TargetModel) -> Result<f64> {
    elbo_from_values(ps, &q.log_density_batch(ps), &model.log_joint_batch(ps)?)
}

fn monotone_after_smoothing(series: &[f64]) -> bool {
    let s = moving_average(series, ELBO_SMOOTHING);
    !s.is_empty() && strictly_increasing(&s)
}

/// Bayesian logistic regression: single Gaussian against a `K`-component mixture.
fn logreg(c: &ExperimentConfig) -> Result<RunOutput> {
    let n = c.dim;
    let model = generate_logreg_dataset(n, c.data_count, c.data_seed)?;
    let ode = c.ode.to_ode_config();
    let rule = rule_for_dim(c.gh_degree, n, c.mc_count, c.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let spread = Matrix::identity(n, n) * 5.0;
    let init_mix = sampled_mixture(&mut rng, c.components, &[Vector::zeros(n)], &spread, &spread)?;
    let g0 = GaussianParams::new(draw(&mut rng, &Vector::zeros(n), &cholesky_factor(&spread)?), spread.clone())?;

    let ginit = GaussianFlowState::new(&g0, rule.clone(), c.mode)?;
    let grun = integrate_gaussian_flow_run(&ginit, &model, c.horizon, &ode)?;
    let minit = MixtureFlowState::new(&init_mix, vec![rule.clone()], c.mode)?;
    let mrun = integrate_mixture_flow_run(&minit, &model, c.horizon, &ode)?;

    let mut out = RunOutput::new(grun.state.particles.clone());
    let mut recovery: f64 = 0.0;
    let gstates = all_times(&ginit, 0.0, &grun.checkpoints, |s| s.t);
    for (t, s) in &gstates {
        let q = s.density()?;
        let recovered = recover_particles(s, &rule)?;
        out.push(*t, "gaussian_elbo", batch_elbo(&recovered, &q, &model)?);
        out.push(*t, "gaussian_elbo_propagated", batch_elbo(&s.particles, &q, &model)?);
        recovery = recovery.max(max_column_distance(recovered.positions(), s.particles.positions()));
    }
    let mstates = all_times(&minit, 0.0, &mrun.checkpoints, |s| s.t);
    for (t, s) in &mstates {
        let q = s.density()?;
        let recovered = recovered_mixture_particles(s)?;
        let propagated = s.pooled_particles()?;
        out.push(*t, "mixture_elbo", batch_elbo(&recovered, &q, &model)?);
        out.push(*t, "mixture_elbo_propagated", batch_elbo(&propagated, &q, &model)?);
        recovery = recovery.max(max_column_distance(recovered.positions(), propagated.positions()));
    }
    let ge = out.series_values("gaussian_elbo");
    let me = out.series_values("mixture_elbo");
    let (gf, mf) = (*ge.last().unwrap(), *me.last().unwrap());
    out.set("gaussian_elbo_final", gf);
    out.set("mixture_elbo_final", mf);
    out.set("elbo_relative_gap", (gf - mf).abs() / gf.abs().max(mf.abs()));
    out.flag("gaussian_elbo_smoothed_increasing", monotone_after_smoothing(&ge));
    out.flag("mixture_elbo_smoothed_increasing", monotone_after_smoothing(&me));
    out.set("recovery_deviation", recovery);
    out.set("gaussian_ode_steps", grun.steps as f64);
    out.set("mixture_ode_steps", mrun.steps as f64);
    if let Some(truth) = &model.truth {
        out.set("posterior_mean_distance_to_truth", (grun.state.mean() - truth).norm());
    }

    out.final_parameters = json!({
        "gaussian": gaussian_json(&grun.state.gaussian()?),
        "mixture": mixture_params_json(&mrun.state.mixture()?),
    });
    out.checkpoints = thin(
        &gstates.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    Ok(out)
}

fn kl_series(out: &mut RunOutput, model: &dyn TargetModel, init: &JointFlowState, checkpoints: &[JointFlowState]) -> Result<Vec<(f64, JointFlowState)>> {
    let states = all_times(init, init.t, checkpoints, |s| s.t);
    for (t, s) in &states {
        out.push(*t, "particle_kl", particle_kl(s, model)?);
    }
    Ok(states)
}

fn non_increasing(series: &[f64], slack: f64) -> bool {
    series.windows(2).all(|w| w[1] <= w[0] + slack)
}

/// Largest relative gap between the analytic x-space particle velocity and a
/// second-order one-sided difference of the pushed-forward positions.
pub fn velocity_consistency(state: &JointFlowState, model: &dyn TargetModel, h: f64) -> Result<f64> {
    let step = OdeConfig::rk4(h);
    let s1 = integrate_nf(state, model, h, &step)?.1;
    let s2 = integrate_nf(&s1, model, h, &step)?.1;
    let x = |s: &JointFlowState| -> Result<Matrix> { Ok(s.transformed_particles()?.positions().clone()) };
    let fd = (x(&s1)? * 4.0 - x(state)? * 3.0 - x(&s2)?) / (2.0 * h);
    let v = transformed_velocity(state, model)?;
    let mut worst: f64 = 0.0;
    for (j, vj) in v.iter().enumerate() {
        let f = fd.column(j);
        worst = worst.max((vj - f).norm() / f.norm().max(1e-6));
    }
    Ok(worst)
}

/// Normalizing-flow variant: mixture base plus planar maps, learned jointly.
fn planar_flow(c: &ExperimentConfig, model: &dyn TargetModel, mean_var: f64, cov_scale: f64) -> Result<RunOutput> {
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let init_mix = sampled_mixture(
        &mut rng,
        c.components,
        &[Vector::zeros(2)],
        &(Matrix::identity(2, 2) * mean_var),
        &(Matrix::identity(2, 2) * cov_scale),
    )?;
    let base = BaseState::Mixture(MixtureFlowState::new(&init_mix, vec![gh_rule_nd(c.gh_degree, 2)?], c.mode)?);
    // y = 0 makes every map the identity; a random direction w keeps the
    // parameter gradient away from the degenerate point w = 0
    let layers = (0..c.planar_maps)
        .map(|_| Transform::Planar(PlanarParams::identity(draw(&mut rng, &Vector::zeros(2), &Matrix::identity(2, 2)))))
        .collect();
    let init = JointFlowState::new(base, TransformChain::new(layers)?, c.gamma)?;
    let run = integrate_nf_run(&init, model, c.horizon, &c.ode.to_ode_config())?;

    let (samples, log_dets) = sample_base_with_log_det(&run.state, c.output_samples, c.seed)?;
    let mut out = RunOutput::new(samples);
    let states = kl_series(&mut out, model, &init, &run.checkpoints)?;
    let kl = out.series_values("particle_kl");
    out.set("particle_kl_initial", kl[0]);
    out.set("particle_kl_final", *kl.last().unwrap());
    out.flag("particle_kl_non_increasing", non_increasing(&kl, DESCENT_SLACK));
    out.flag("log_dets_finite", log_dets.iter().all(|v| v.is_finite()));
    out.flag("chain_invertible", run.state.chain.invertible());
    out.set("velocity_consistency", velocity_consistency(&run.state, model, 1e-4)?);
    out.set("ode_steps", run.steps as f64);
    out.final_parameters = run.state.to_json();
    out.checkpoints = thin(
        &states.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    Ok(out)
}

/// Sample Pearson correlation of paired values.
pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    sab / (saa * sbb).sqrt()
}

/// Correlation between the first coordinate and the log-norm of the rest.
pub fn funnel_correlation(ps: &ParticleSet) -> f64 {
    let n = ps.dim();
    let top: Vec<f64> = ps.positions().row(0).iter().copied().collect();
    let tail: Vec<f64> = ps
        .positions()
        .column_iter()
        .map(|c| c.rows(1, n - 1).norm().ln())
        .collect();
    pearson(&top, &tail)
}

/// Funnel target with a mixture base and one triangular map.
fn funnel(c: &ExperimentConfig) -> Result<RunOutput> {
    let n = c.dim;
    let model = FunnelModel::new(n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let init_mix = sampled_mixture(
        &mut rng,
        c.components,
        &[Vector::zeros(n)],
        &(Matrix::identity(n, n) * 4.0),
        &Matrix::identity(n, n),
    )?;
    let rule = rule_for_dim(c.gh_degree, n, c.mc_count, c.seed)?;
    let base = BaseState::Mixture(MixtureFlowState::new(&init_mix, vec![rule], c.mode)?);
    let chain = TransformChain::new(vec![Transform::Triangular(TriangularParams::identity(n))])?;
    let init = JointFlowState::new(base, chain, c.gamma)?;
    let run = integrate_nf_run(&init, &model, c.horizon, &c.ode.to_ode_config())?;

    let (samples, log_dets) = sample_base_with_log_det(&run.state, c.output_samples, c.seed)?;
    let corr = funnel_correlation(&samples);
    let mut out = RunOutput::new(samples);
    let states = kl_series(&mut out, &model, &init, &run.checkpoints)?;
    let kl = out.series_values("particle_kl");
    out.set("particle_kl_initial", kl[0]);
    out.set("particle_kl_final", *kl.last().unwrap());
    out.set("funnel_correlation", corr);
    out.set("ode_steps", run.steps as f64);
    out.flag("log_dets_finite", log_dets.iter().all(|v| v.is_finite()));
    out.final_parameters = run.state.to_json();
    out.checkpoints = thin(
        &states.iter().map(|(t, s)| (*t, s.to_json())).collect::<Vec<_>>(),
        c.checkpoint_files,
    );
    if !corr.is_finite() {
        return Err(FlowError::NonFiniteValue("funnel correlation".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&a, &[2.0, 4.0, 6.0, 8.0]) - 1.0).abs() < 1e-15);
        assert!((pearson(&a, &[-1.0, -2.0, -3.0, -4.0]) + 1.0).abs() < 1e-15);
        assert!(pearson(&a, &[1.0, -1.0, -1.0, 1.0]).abs() < 1e-15);
    }

    #[test]
    fn thinning_keeps_last() {
        let items: Vec<(f64, usize)> = (0..21).map(|i| (i as f64, i)).collect();
        let t = thin(&items, 5);
        assert!(t.len() <= 5);
        assert_eq!(t.last().unwrap().1, 20);
        assert!(thin(&items, 0).is_empty());
        assert_eq!(thin(&items, 50).len(), 21);
    }

    #[test]
    fn smoothing_check() {
        assert!(monotone_after_smoothing(&[1.0, 2.0, 1.9, 3.0, 4.0, 5.0, 6.0]));
        assert!(!monotone_after_smoothing(&[1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        assert!(!monotone_after_smoothing(&[1.0, 2.0]));
    }
}
