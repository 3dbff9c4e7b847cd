//! Gaussian Fisher-Rao parameter flow and its affine particle dynamics.
//!
//! The state carries the precision `Σ⁻¹` as primary parameter and a square
//! root `L` (`LLᵀ = Σ`) propagated with `dL/dt = ÃL`, so the quadrature
//! particles `Lξ + μ` at any time are the flow images of the initial ones.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{
    asymmetry, mahalanobis, symmetrize, GaussianDensity, GaussianParams, LogDensity, Matrix,
    PrecisionParams, SqrtParams, Vector,
};
use crate::integrator::{integrate, Layout, OdeConfig};
use crate::quadrature::{map_particles, transport, weighted_sum, ParticleSet, QuadratureRule};
use crate::targets::TargetModel;

/// Largest accepted change of a tracked particle's Mahalanobis distance.
pub const MAHALANOBIS_DRIFT_TOL: f64 = 1e-3;

/// Relative asymmetry of the propagated precision that aborts a run.
pub const PRECISION_ASYMMETRY_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExpectationMode {
    /// Quadrature over analytic `∇V`, `∇²V`.
    Analytic,
    /// Derivative-free centered estimators built from values of `V` only.
    Stein,
}

/// Particle velocity `Ã x + b̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowCoeffs {
    pub a: Matrix,
    pub b: Vector,
}

impl FlowCoeffs {
    pub fn velocity(&self, x: &Vector) -> Vector {
        &self.a * x + &self.b
    }
}

/// Centered sums `Σ wᵢ dᵢ Ṽᵢ` and `Σ wᵢ dᵢdᵢᵀ Ṽᵢ` with `dᵢ = xᵢ − μ`, `Ṽ = V − V̄`.
#[derive(Debug, Clone, PartialEq)]
pub struct SteinTerms {
    pub first: Vector,
    pub second: Matrix,
}

/// `E[V]`, `E[∇V]`, `E[∇²V]` under one Gaussian component.
#[derive(Debug, Clone, PartialEq)]
pub struct VMoments {
    pub mean_v: f64,
    pub grad: Vector,
    pub hess: Matrix,
    pub stein: Option<SteinTerms>,
}

/// `V(x) = log q(x) − log p(x, z)`.
pub fn v_value(x: &Vector, q: &dyn LogDensity, model: &dyn TargetModel) -> Result<f64> {
    let v = q.log_density(x) - model.log_joint(x)?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FlowError::NonFiniteValue("V".into()))
    }
}

/// Moments of `V` under `N(mean, factor·factorᵀ)`, with `q` the full variational density.
pub fn component_moments(
    mean: &Vector,
    prec: &Matrix,
    factor: &Matrix,
    rule: &QuadratureRule,
    q: &dyn LogDensity,
    model: &dyn TargetModel,
    mode: ExpectationMode,
) -> Result<VMoments> {
    let ps = transport(rule, mean, factor)?;
    let w = ps.weights();
    match mode {
        ExpectationMode::Analytic => {
            if !model.has_grad() || !model.has_hess() {
                return Err(FlowError::Unsupported("analytic derivatives"));
            }
            let pt = model.batch_terms(&ps)?;
            let qt = q.batch_terms(&ps)?;
            let mut vs = Vec::with_capacity(ps.len());
            for (lq, lpj) in qt.log.iter().zip(&pt.log) {
                let v = lq - lpj;
                if !v.is_finite() {
                    return Err(FlowError::NonFiniteValue("V".into()));
                }
                vs.push(v);
            }
            let hess = qt.expected_hess - pt.expected_hess;
            if hess.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFiniteValue("expected hessian".into()));
            }
            let grad = (qt.grads - pt.grads) * w;
            if grad.iter().any(|v| !v.is_finite()) {
                return Err(FlowError::NonFiniteValue("expected gradient".into()));
            }
            Ok(VMoments {
                mean_v: weighted_sum(w, &vs)?,
                grad,
                hess: symmetrize(&hess),
                stein: None,
            })
        }
        ExpectationMode::Stein => {
            let vs = map_particles(&ps, |x| v_value(x, q, model))?;
            let mean_v = weighted_sum(w, &vs)?;
            let n = mean.len();
            let mut first = Vector::zeros(n);
            let mut second = Matrix::zeros(n, n);
            for (i, v) in vs.iter().enumerate() {
                let d = ps.positions().column(i) - mean;
                let c = w[i] * (v - mean_v);
                first.axpy(c, &d, 1.0);
                second.ger(c, &d, &d, 1.0);
            }
            let second = symmetrize(&second);
            Ok(VMoments {
                mean_v,
                grad: prec * &first,
                hess: symmetrize(&(prec * &second * prec)),
                stein: Some(SteinTerms { first, second }),
            })
        }
    }
}

/// Everything one RHS evaluation needs for one Gaussian component.
#[derive(Debug, Clone)]
pub struct ComponentFlow {
    pub moments: VMoments,
    pub d_mean: Vector,
    pub d_prec: Matrix,
    pub coeffs: FlowCoeffs,
}

pub fn component_flow(
    mean: &Vector,
    prec: &Matrix,
    factor: &Matrix,
    rule: &QuadratureRule,
    q: &dyn LogDensity,
    model: &dyn TargetModel,
    mode: ExpectationMode,
) -> Result<ComponentFlow> {
    let moments = component_moments(mean, prec, factor, rule, q, model, mode)?;
    let (d_mean, a) = match &moments.stein {
        Some(s) => (-&s.first, &s.second * prec * -0.5),
        None => {
            let chol = Cholesky::new(prec.clone()).ok_or(FlowError::NotPositiveDefinite)?;
            (-chol.solve(&moments.grad), chol.solve(&moments.hess) * -0.5)
        }
    };
    let b = &d_mean - &a * mean;
    Ok(ComponentFlow {
        d_prec: moments.hess.clone(),
        moments,
        d_mean,
        coeffs: FlowCoeffs { a, b },
    })
}

/// Gaussian variational state with co-propagated square root and tracked particles.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianFlowState {
    pub t: f64,
    pub params: PrecisionParams,
    pub sqrt: SqrtParams,
    /// Particles moved by `dx/dt = Ãx + b̃`.
    pub particles: ParticleSet,
    pub mode: ExpectationMode,
    pub rule: QuadratureRule,
}

impl GaussianFlowState {
    /// Tracked particles start at the transported quadrature nodes.
    pub fn new(init: &GaussianParams, rule: QuadratureRule, mode: ExpectationMode) -> Result<Self> {
        check_dim(init.dim(), rule.dim())?;
        let sqrt = init.to_sqrt()?;
        let particles = transport(&rule, init.mean(), sqrt.factor())?;
        Ok(Self {
            t: 0.0,
            params: init.to_precision()?,
            sqrt,
            particles,
            mode,
            rule,
        })
    }

    /// Replaces the tracked particles (uniform weights).
    pub fn with_particles(mut self, positions: Matrix) -> Result<Self> {
        check_dim(self.dim(), positions.nrows())?;
        self.particles = ParticleSet::uniform(positions);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.params.dim()
    }

    pub fn mean(&self) -> &Vector {
        self.params.mean()
    }

    pub fn gaussian(&self) -> Result<GaussianParams> {
        self.params.to_gaussian()
    }

    pub fn density(&self) -> Result<GaussianDensity> {
        self.params.density()
    }

    /// Quadrature nodes transported by the current `(μ, L)`.
    pub fn quadrature_particles(&self) -> Result<ParticleSet> {
        transport(&self.rule, self.sqrt.mean(), self.sqrt.factor())
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "t": self.t,
            "mean": self.params.mean().as_slice(),
            "cov_inv": matrix_rows(self.params.prec()),
            "L": matrix_rows(self.sqrt.factor()),
            "particles": column_list(self.particles.positions()),
        })
    }
}

/// Row-major nested arrays.
pub fn matrix_rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().cloned().collect()).collect()
}

/// One array per column (particle).
pub fn column_list(m: &Matrix) -> Vec<Vec<f64>> {
    m.column_iter().map(|c| c.iter().cloned().collect()).collect()
}

/// Variational moments at `state`.
pub fn expect_v_moments(state: &GaussianFlowState, model: &dyn TargetModel) -> Result<VMoments> {
    let q = state.density()?;
    component_moments(
        state.mean(),
        state.params.prec(),
        state.sqrt.factor(),
        &state.rule,
        &q,
        model,
        state.mode,
    )
}

fn state_flow(state: &GaussianFlowState, model: &dyn TargetModel) -> Result<ComponentFlow> {
    let q = state.density()?;
    component_flow(
        state.mean(),
        state.params.prec(),
        state.sqrt.factor(),
        &state.rule,
        &q,
        model,
        state.mode,
    )
}

/// `(dμ/dt, dΣ⁻¹/dt)`.
pub fn param_rhs(state: &GaussianFlowState, model: &dyn TargetModel) -> Result<(Vector, Matrix)> {
    let f = state_flow(state, model)?;
    Ok((f.d_mean, f.d_prec))
}

/// `(Ã, b̃)` of the particle dynamics.
pub fn dynamics_coeffs(state: &GaussianFlowState, model: &dyn TargetModel) -> Result<FlowCoeffs> {
    Ok(state_flow(state, model)?.coeffs)
}

/// `dL/dt = ÃL`.
pub fn sqrt_rhs(state: &GaussianFlowState, coeffs: &FlowCoeffs) -> Matrix {
    &coeffs.a * state.sqrt.factor()
}

pub(crate) struct GaussianLayout {
    pub layout: Layout,
    pub n: usize,
    pub m: usize,
}

impl GaussianLayout {
    pub fn new(n: usize, m: usize, prefix: &str) -> Self {
        let mut layout = Layout::new();
        layout
            .push(format!("{prefix}mean"), n, 1)
            .push(format!("{prefix}prec"), n, n)
            .push(format!("{prefix}sqrt"), n, n)
            .push(format!("{prefix}particles"), n, m);
        Self { layout, n, m }
    }
}

/// Flat-state view of one Gaussian component.
pub(crate) struct ComponentSlots {
    pub mean: std::ops::Range<usize>,
    pub prec: std::ops::Range<usize>,
    pub sqrt: std::ops::Range<usize>,
    pub particles: std::ops::Range<usize>,
    pub n: usize,
    pub m: usize,
}

impl ComponentSlots {
    pub fn from_layout(layout: &Layout, prefix: &str, n: usize, m: usize) -> Self {
        let r = |s: &str| layout.segment(&format!("{prefix}{s}")).expect("segment").range();
        Self {
            mean: r("mean"),
            prec: r("prec"),
            sqrt: r("sqrt"),
            particles: r("particles"),
            n,
            m,
        }
    }

    pub fn mean(&self, y: &[f64]) -> Vector {
        Vector::from_column_slice(&y[self.mean.clone()])
    }

    pub fn prec(&self, y: &[f64]) -> Matrix {
        symmetrize(&Matrix::from_column_slice(self.n, self.n, &y[self.prec.clone()]))
    }

    pub fn raw_prec(&self, y: &[f64]) -> Matrix {
        Matrix::from_column_slice(self.n, self.n, &y[self.prec.clone()])
    }

    pub fn sqrt(&self, y: &[f64]) -> Matrix {
        Matrix::from_column_slice(self.n, self.n, &y[self.sqrt.clone()])
    }

    pub fn particles(&self, y: &[f64]) -> Matrix {
        Matrix::from_column_slice(self.n, self.m, &y[self.particles.clone()])
    }

    pub fn write(&self, y: &mut [f64], mean: &Vector, prec: &Matrix, sqrt: &Matrix, particles: &Matrix) {
        y[self.mean.clone()].copy_from_slice(mean.as_slice());
        y[self.prec.clone()].copy_from_slice(prec.as_slice());
        y[self.sqrt.clone()].copy_from_slice(sqrt.as_slice());
        y[self.particles.clone()].copy_from_slice(particles.as_slice());
    }

    /// Writes the time derivative of the component given its flow.
    pub fn write_rhs(&self, out: &mut [f64], y: &[f64], flow: &ComponentFlow) {
        let d_sqrt = &flow.coeffs.a * self.sqrt(y);
        let mut d_particles = &flow.coeffs.a * self.particles(y);
        for mut col in d_particles.column_iter_mut() {
            col += &flow.coeffs.b;
        }
        out[self.mean.clone()].copy_from_slice(flow.d_mean.as_slice());
        out[self.prec.clone()].copy_from_slice(flow.d_prec.as_slice());
        out[self.sqrt.clone()].copy_from_slice(d_sqrt.as_slice());
        out[self.particles.clone()].copy_from_slice(d_particles.as_slice());
    }

    /// Mahalanobis distances of the tracked particles.
    pub fn mahalanobis(&self, y: &[f64]) -> Result<Vec<f64>> {
        let mean = self.mean(y);
        let prec = self.prec(y);
        let x = self.particles(y);
        (0..self.m)
            .map(|j| mahalanobis(&x.column(j).into_owned(), &mean, &prec))
            .collect()
    }

    /// Symmetry, positive definiteness and Mahalanobis drift checks.
    pub fn check(&self, y: &[f64], initial_maha: &[f64]) -> std::result::Result<(), String> {
        let raw = self.raw_prec(y);
        if asymmetry(&raw) > PRECISION_ASYMMETRY_TOL * raw.amax().max(1.0) {
            return Err(format!("precision asymmetry {:e}", asymmetry(&raw)));
        }
        if Cholesky::new(symmetrize(&raw)).is_none() {
            return Err("precision lost positive definiteness".into());
        }
        let maha = self.mahalanobis(y).map_err(|e| e.to_string())?;
        for (j, (now, then)) in maha.iter().zip(initial_maha).enumerate() {
            if (now - then).abs() > MAHALANOBIS_DRIFT_TOL * then.max(1.0) {
                return Err(format!("Mahalanobis drift {:e} on particle {j}", (now - then).abs()));
            }
        }
        Ok(())
    }
}

fn pack(state: &GaussianFlowState, slots: &ComponentSlots, len: usize) -> Vec<f64> {
    let mut y = vec![0.0; len];
    slots.write(
        &mut y,
        state.params.mean(),
        state.params.prec(),
        state.sqrt.factor(),
        state.particles.positions(),
    );
    y
}

fn unpack(template: &GaussianFlowState, slots: &ComponentSlots, y: &[f64], t: f64) -> Result<GaussianFlowState> {
    let mean = slots.mean(y);
    Ok(GaussianFlowState {
        t,
        params: PrecisionParams::new(mean.clone(), slots.prec(y))?,
        sqrt: SqrtParams::new(mean, slots.sqrt(y))?,
        particles: ParticleSet::new(slots.particles(y), template.particles.weights().clone())?,
        mode: template.mode,
        rule: template.rule.clone(),
    })
}

/// Final state plus snapshots at the configured cadence.
#[derive(Debug, Clone)]
pub struct GaussianFlowRun {
    pub state: GaussianFlowState,
    pub checkpoints: Vec<GaussianFlowState>,
    pub steps: usize,
}

/// Integrates the flow from `init.t` to `init.t + horizon`.
pub fn integrate_gaussian_flow(
    init: &GaussianFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<GaussianFlowState> {
    Ok(integrate_gaussian_flow_run(init, model, horizon, ode)?.state)
}

pub fn integrate_gaussian_flow_run(
    init: &GaussianFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<GaussianFlowRun> {
    check_dim(init.dim(), model.dim())?;
    if !(horizon >= 0.0) {
        return Err(FlowError::InvalidArgument("horizon must be nonnegative".into()));
    }
    let gl = GaussianLayout::new(init.dim(), init.particles.len(), "");
    let slots = ComponentSlots::from_layout(&gl.layout, "", gl.n, gl.m);
    let y0 = pack(init, &slots, gl.layout.len());
    let initial_maha = slots.mahalanobis(&y0)?;

    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let mean = slots.mean(y);
        let prec = slots.prec(y);
        let factor = slots.sqrt(y);
        let q = GaussianDensity::from_prec(mean.clone(), &prec)?;
        let flow = component_flow(&mean, &prec, &factor, &init.rule, &q, model, init.mode)
            .map_err(|e| FlowError::DivergedFlow {
                t,
                reason: e.to_string(),
                component: None,
            })?;
        let mut out = vec![0.0; y.len()];
        slots.write_rhs(&mut out, y, &flow);
        Ok(out)
    };
    let mut hook = |_t: f64, y: &[f64]| slots.check(y, &initial_maha);
    let traj = integrate(rhs, &y0, init.t, init.t + horizon, ode, &mut hook)?;
    let checkpoints = traj
        .checkpoints
        .iter()
        .map(|c| unpack(init, &slots, &c.state, c.t))
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianFlowRun {
        state: unpack(init, &slots, &traj.state, traj.t)?,
        checkpoints,
        steps: traj.steps,
    })
}

/// `L_T ξᵢ + μ_T`.
pub fn recover_particles(state: &GaussianFlowState, base_nodes: &QuadratureRule) -> Result<ParticleSet> {
    transport(base_nodes, state.sqrt.mean(), state.sqrt.factor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edh::{edh_coeffs, lambda_schedule, transient_params};
    use crate::gaussian::gaussian_kl;
    use crate::quadrature::gh_rule_nd;
    use crate::targets::{kalman_posterior, LinearGaussianModel, RangeModel};
    use nalgebra::{dmatrix, dvector};

    fn model() -> LinearGaussianModel {
        let h = dmatrix![1.0, 1.5; 0.2, 2.0];
        let z = &h * dvector![-1.18, 4.12];
        LinearGaussianModel::new(dvector![0.0, 0.0], dmatrix![1.5, 0.5; 0.5, 5.5], h, dmatrix![0.2, 0.1; 0.1, 0.2], z)
            .unwrap()
    }

    fn state_at(g: &GaussianParams, mode: ExpectationMode) -> GaussianFlowState {
        GaussianFlowState::new(g, gh_rule_nd(4, g.dim()).unwrap(), mode).unwrap()
    }

    /// Closed-form flow solution on the linear-Gaussian model.
    fn closed_form(m: &LinearGaussianModel, t: f64) -> GaussianParams {
        let tp = transient_params(m, lambda_schedule(t)).unwrap();
        GaussianParams::new(tp.mean, tp.cov).unwrap()
    }

    #[test]
    fn v_is_constant_at_posterior() {
        let m = model();
        let post = kalman_posterior(&m).unwrap().density().unwrap();
        let vals: Vec<f64> = (0..10)
            .map(|i| v_value(&dvector![i as f64 - 4.0, 0.3 * i as f64], &post, &m).unwrap())
            .collect();
        let spread = vals.iter().cloned().fold(f64::MIN, f64::max) - vals.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-9);
        assert!((vals[0] + m.log_evidence().unwrap()).abs() < 1e-9);
    }

    #[test]
    fn v_at_prior_is_negative_log_likelihood() {
        let m = model();
        let prior = m.prior().density().unwrap();
        let x = dvector![0.4, -1.2];
        let noise = GaussianDensity::from_cov(Vector::zeros(2), &m.obs_cov).unwrap();
        let loglik = noise.logpdf(&(&m.z - &m.obs_matrix * &x));
        assert!((v_value(&x, &prior, &m).unwrap() + loglik).abs() < 1e-10);
        let q = GaussianParams::new(dvector![1.0, 2.0], dmatrix![2.0, 0.1; 0.1, 1.0]).unwrap();
        let direct = q.logpdf(&x).unwrap() - m.log_joint(&x).unwrap();
        assert!((v_value(&x, &q.density().unwrap(), &m).unwrap() - direct).abs() < 1e-12);
    }

    #[test]
    fn analytic_hessian_is_precision_gap() {
        let m = model();
        let g = GaussianParams::new(dvector![0.5, 1.0], dmatrix![2.0, 0.3; 0.3, 1.0]).unwrap();
        let s = state_at(&g, ExpectationMode::Analytic);
        let mom = expect_v_moments(&s, &m).unwrap();
        let post_prec = m.prior_prec() + m.info_matrix();
        let expect = -s.params.prec() + post_prec;
        assert!((mom.hess - expect).amax() < 1e-10);
    }

    #[test]
    fn posterior_is_fixed_point() {
        let m = model();
        let post = kalman_posterior(&m).unwrap();
        for mode in [ExpectationMode::Analytic, ExpectationMode::Stein] {
            let s = state_at(&post, mode);
            let mom = expect_v_moments(&s, &m).unwrap();
            assert!(mom.grad.amax() < 1e-9 && mom.hess.amax() < 1e-9, "{mode:?}");
            let (dm, dp) = param_rhs(&s, &m).unwrap();
            assert!(dm.amax() < 1e-9 && dp.amax() < 1e-9);
            let c = dynamics_coeffs(&s, &m).unwrap();
            assert!(c.a.amax() < 1e-9 && c.b.amax() < 1e-9);
        }
    }

    #[test]
    fn stein_matches_analytic_on_quadratic_v() {
        let m = model();
        let g = GaussianParams::new(dvector![-0.7, 2.0], dmatrix![3.0, -0.4; -0.4, 0.8]).unwrap();
        let a = expect_v_moments(&state_at(&g, ExpectationMode::Analytic), &m).unwrap();
        let s = expect_v_moments(&state_at(&g, ExpectationMode::Stein), &m).unwrap();
        assert!((a.mean_v - s.mean_v).abs() < 1e-8);
        assert!((&a.grad - &s.grad).amax() < 1e-8);
        assert!((&a.hess - &s.hess).amax() < 1e-8);
        let ca = dynamics_coeffs(&state_at(&g, ExpectationMode::Analytic), &m).unwrap();
        let cs = dynamics_coeffs(&state_at(&g, ExpectationMode::Stein), &m).unwrap();
        assert!((&ca.a - &cs.a).amax() < 1e-8 && (&ca.b - &cs.b).amax() < 1e-8);
    }

    #[test]
    fn rhs_matches_closed_form_derivative() {
        let m = model();
        for t in [0.5, 1.0, 2.0, 5.0] {
            let g = closed_form(&m, t);
            let s = state_at(&g, ExpectationMode::Analytic);
            let (dm, dp) = param_rhs(&s, &m).unwrap();
            let h = 1e-4;
            let stencil = [(-2.0, 1.0), (-1.0, -8.0), (1.0, 8.0), (2.0, -1.0)];
            let mut fd_mean = Vector::zeros(2);
            let mut fd_prec = Matrix::zeros(2, 2);
            for (k, c) in stencil {
                let g = closed_form(&m, t + k * h);
                fd_mean += g.mean() * (c / (12.0 * h));
                fd_prec += g.to_precision().unwrap().prec() * (c / (12.0 * h));
            }
            assert!((dm - &fd_mean).amax() < 1e-7 * fd_mean.amax().max(1.0), "t = {t}");
            assert!((dp - &fd_prec).amax() < 1e-7 * fd_prec.amax().max(1.0), "t = {t}");

            // the time-scaled EDH coefficient
            let c = dynamics_coeffs(&s, &m).unwrap();
            let lam = lambda_schedule(t);
            let edh = edh_coeffs(&m, lam).unwrap();
            assert!((&c.a - &edh.a * (1.0 - lam)).amax() < 1e-8, "t = {t}");
            let a_closed = -0.5 * (1.0 - lam) * g.cov() * m.info_matrix();
            assert!((&c.a - a_closed).amax() < 1e-8);
        }
    }

    #[test]
    fn one_step_decreases_kl() {
        let m = model();
        let post = kalman_posterior(&m).unwrap();
        let s0 = state_at(&m.prior(), ExpectationMode::Stein);
        let s1 = integrate_gaussian_flow(&s0, &m, 1e-3, &OdeConfig::rk4(1e-3)).unwrap();
        let before = gaussian_kl(&s0.gaussian().unwrap(), &post).unwrap();
        let after = gaussian_kl(&s1.gaussian().unwrap(), &post).unwrap();
        assert!(after < before);
    }

    #[test]
    fn scalar_sqrt_propagation() {
        // 1-d model with Ã ≡ −0.5 is not reachable from a target, so integrate dL/dt = ÃL directly.
        let c = FlowCoeffs {
            a: dmatrix![-0.5],
            b: dvector![0.0],
        };
        let g = GaussianParams::new(dvector![0.0], dmatrix![2.0]).unwrap();
        let mut s = GaussianFlowState::new(&g, gh_rule_nd(3, 1).unwrap(), ExpectationMode::Stein).unwrap();
        let l0 = s.sqrt.factor()[(0, 0)];
        let mut rhs = |_t: f64, y: &[f64]| Ok(vec![-0.5 * y[0]]);
        let cfg = OdeConfig::rk4(1e-2).with_checkpoints(0.1);
        let out = integrate(&mut rhs, &[l0], 0.0, 1.0, &cfg, &mut crate::integrator::NoHook).unwrap();
        for cp in &out.checkpoints {
            let l = cp.state[0];
            assert!((l - l0 * (-0.5 * cp.t).exp()).abs() < 1e-8);
            assert!((l * l - 2.0 * (-cp.t).exp()).abs() < 1e-8);
        }
        assert_eq!(sqrt_rhs(&s, &FlowCoeffs { a: dmatrix![0.0], b: dvector![0.0] })[(0, 0)], 0.0);
        s.sqrt.factor = dmatrix![3.0];
        assert_eq!(sqrt_rhs(&s, &c)[(0, 0)], -1.5);
    }

    #[test]
    fn zero_horizon_is_identity() {
        let m = model();
        let s0 = state_at(&m.prior(), ExpectationMode::Stein);
        let s1 = integrate_gaussian_flow(&s0, &m, 0.0, &OdeConfig::default()).unwrap();
        assert_eq!(s0, s1);
        let rec = recover_particles(&s1, &s1.rule).unwrap();
        assert_eq!(rec, transport(&s0.rule, s0.mean(), s0.sqrt.factor()).unwrap());
    }

    #[test]
    fn converges_to_kalman_posterior() {
        let m = model();
        let post = kalman_posterior(&m).unwrap();
        for mode in [ExpectationMode::Stein, ExpectationMode::Analytic] {
            let s0 = state_at(&m.prior(), mode);
            let s = integrate_gaussian_flow(&s0, &m, 10.0, &OdeConfig::rk4(1e-3)).unwrap();
            let g = s.gaussian().unwrap();
            assert!((g.mean() - post.mean()).norm() < 1e-3 * post.mean().norm());
            assert!((g.cov() - post.cov()).norm() < 1e-3 * post.cov().norm());
            let lt = s.sqrt.cov();
            assert!((lt - g.cov()).norm() < 1e-6);
            let rec = recover_particles(&s, &s.rule).unwrap();
            assert!((rec.positions() - s.particles.positions()).amax() < 1e-6);
        }
    }

    #[test]
    fn kl_descends_and_mahalanobis_is_conserved() {
        let m = model();
        let post = kalman_posterior(&m).unwrap();
        let s0 = state_at(&m.prior(), ExpectationMode::Stein);
        let cfg = OdeConfig::rk45(1e-10, 1e-12).with_checkpoints(0.5);
        let run = integrate_gaussian_flow_run(&s0, &m, 10.0, &cfg).unwrap();
        assert_eq!(run.checkpoints.len(), 20);
        let mut last = gaussian_kl(&s0.gaussian().unwrap(), &post).unwrap();
        let d0: Vec<f64> = (0..s0.particles.len())
            .map(|j| mahalanobis(&s0.particles.position(j), s0.mean(), s0.params.prec()).unwrap())
            .collect();
        for cp in &run.checkpoints {
            let kl = gaussian_kl(&cp.gaussian().unwrap(), &post).unwrap();
            assert!(kl <= last + 1e-9, "t = {}", cp.t);
            last = kl;
            assert!(asymmetry(cp.params.prec()) < 1e-10);
            for (j, d) in d0.iter().enumerate() {
                let now = mahalanobis(&cp.particles.position(j), cp.mean(), cp.params.prec()).unwrap();
                assert!((now - d).abs() < 1e-6, "t = {} drift {:e}", cp.t, (now - d).abs());
            }
        }
    }

    #[test]
    fn stein_estimators_ignore_constant_shift() {
        struct Shifted<'a>(&'a dyn TargetModel, f64);
        impl TargetModel for Shifted<'_> {
            fn dim(&self) -> usize {
                self.0.dim()
            }
            fn log_joint(&self, x: &Vector) -> Result<f64> {
                Ok(self.0.log_joint(x)? - self.1)
            }
        }
        let range = RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.63).unwrap();
        let g = GaussianParams::new(dvector![2.0, -1.0], dmatrix![3.0, 0.2; 0.2, 2.0]).unwrap();
        let s = state_at(&g, ExpectationMode::Stein);
        let base = expect_v_moments(&s, &range).unwrap();
        let shifted = expect_v_moments(&s, &Shifted(&range, 17.3)).unwrap();
        assert!((&base.grad - &shifted.grad).amax() < 1e-10);
        assert!((&base.hess - &shifted.hess).amax() < 1e-10);
        assert!((shifted.mean_v - base.mean_v - 17.3).abs() < 1e-10);
    }

    #[test]
    fn analytic_gradient_matches_kl_finite_difference() {
        let range = RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.63).unwrap();
        let g = GaussianParams::new(dvector![3.0, -2.0], dmatrix![1.0, 0.2; 0.2, 0.7]).unwrap();
        let s = GaussianFlowState::new(&g, gh_rule_nd(8, 2).unwrap(), ExpectationMode::Analytic).unwrap();
        let mom = expect_v_moments(&s, &range).unwrap();
        // KL(μ) up to log p(z): E_q[V] with q = N(μ, Σ), evaluated by the same quadrature rule
        let kl = |mu: &Vector| {
            let q = GaussianParams::new(mu.clone(), g.cov().clone()).unwrap();
            let st = GaussianFlowState::new(&q, s.rule.clone(), ExpectationMode::Analytic).unwrap();
            expect_v_moments(&st, &range).unwrap().mean_v
        };
        for i in 0..2 {
            let mut up = g.mean().clone();
            let mut dn = g.mean().clone();
            up[i] += 1e-5;
            dn[i] -= 1e-5;
            let fd = (kl(&up) - kl(&dn)) / 2e-5;
            assert!((fd - mom.grad[i]).abs() < 1e-4 * mom.grad.amax().max(1.0), "{fd} vs {}", mom.grad[i]);
        }
    }
}
