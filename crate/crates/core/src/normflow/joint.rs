//! The joint flow of base parameters `θ_u` and transformation parameters `θ_F`.
//!
//! The base moves by its Fisher-Rao flow against the pulled-back joint
//! `p̃(u) = p(F(u), z)|det ∇F(u)|`; the transformation follows
//! `dθ_F/dt = −γ ∇_θ KL(b ‖ p̃)` estimated on the base quadrature particles.

use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde_json::json;

use super::{TransformChain, TransformedTarget};
use crate::error::{check_dim, FlowError, Result};
use crate::fr_gaussian::{component_flow, ComponentFlow, ComponentSlots, GaussianFlowState};
use crate::fr_mixture::{clamp_log_odds, evaluate, MixtureComponentState, MixtureFlowState};
use crate::gaussian::{weights_from_log_odds, GaussianDensity, LogDensity, Matrix, PrecisionParams, SqrtParams, Vector};
use crate::integrator::{integrate, Layout, OdeConfig};
use crate::quadrature::{map_particles, transport, weighted_sum, ParticleSet, QuadratureRule};
use crate::targets::TargetModel;

#[derive(Debug, Clone, PartialEq)]
pub enum BaseState {
    Gaussian(GaussianFlowState),
    Mixture(MixtureFlowState),
}

impl BaseState {
    pub fn dim(&self) -> usize {
        match self {
            BaseState::Gaussian(g) => g.dim(),
            BaseState::Mixture(m) => m.dim(),
        }
    }

    /// Tracked particles, weighted by component weight for mixtures.
    pub fn particles(&self) -> Result<ParticleSet> {
        match self {
            BaseState::Gaussian(g) => Ok(g.particles.clone()),
            BaseState::Mixture(m) => m.pooled_particles(),
        }
    }

    /// Transported quadrature nodes of every component with their mixture weights.
    fn quadrature_sets(&self) -> Result<Vec<(f64, ParticleSet)>> {
        match self {
            BaseState::Gaussian(g) => Ok(vec![(1.0, g.quadrature_particles()?)]),
            BaseState::Mixture(m) => {
                let w = m.weights();
                m.components
                    .iter()
                    .zip(w.iter())
                    .map(|(c, w)| Ok((*w, c.quadrature_particles()?)))
                    .collect()
            }
        }
    }

    pub fn log_density(&self) -> Result<Box<dyn LogDensity>> {
        Ok(match self {
            BaseState::Gaussian(g) => Box::new(g.density()?),
            BaseState::Mixture(m) => Box::new(m.density()?),
        })
    }

    pub fn to_json(&self) -> serde_json::Value {
        match self {
            BaseState::Gaussian(g) => g.to_json(),
            BaseState::Mixture(m) => m.to_json(),
        }
    }

    fn set_t(&mut self, t: f64) {
        match self {
            BaseState::Gaussian(g) => g.t = t,
            BaseState::Mixture(m) => m.t = t,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointFlowState {
    pub t: f64,
    pub base: BaseState,
    pub chain: TransformChain,
    /// Step scale of the transformation-parameter flow; zero freezes the chain.
    pub gamma: f64,
}

impl JointFlowState {
    pub fn new(base: BaseState, chain: TransformChain, gamma: f64) -> Result<Self> {
        if !(gamma >= 0.0) || !gamma.is_finite() {
            return Err(FlowError::InvalidArgument(format!("gamma must be nonnegative, got {gamma}")));
        }
        if let Some(l) = chain.layers().first() {
            check_dim(base.dim(), l.layer().dim())?;
        }
        let t = match &base {
            BaseState::Gaussian(g) => g.t,
            BaseState::Mixture(m) => m.t,
        };
        Ok(Self { t, base, chain, gamma })
    }

    pub fn dim(&self) -> usize {
        self.base.dim()
    }

    /// Tracked particles pushed through the chain.
    pub fn transformed_particles(&self) -> Result<ParticleSet> {
        let ps = self.base.particles()?;
        push_forward(&ps, &self.chain)
    }

    pub fn to_json(&self) -> serde_json::Value {
        json!({
            "t": self.t,
            "base": self.base.to_json(),
            "chain": self.chain.to_json(),
            "theta": self.chain.params().as_slice(),
            "gamma": self.gamma,
        })
    }
}

fn push_forward(ps: &ParticleSet, chain: &TransformChain) -> Result<ParticleSet> {
    let xs = map_particles(ps, |u| Ok(chain.forward(u)?.0))?;
    let mut pos = Matrix::zeros(ps.dim(), ps.len());
    for (j, x) in xs.iter().enumerate() {
        pos.set_column(j, x);
    }
    ParticleSet::new(pos, ps.weights().clone())
}

/// Base-flow terms per component, the log-odds rate (mixtures) and `dθ_F/dt`.
#[derive(Debug, Clone)]
pub struct JointRhs {
    pub components: Vec<ComponentFlow>,
    pub d_log_odds: Option<Vector>,
    pub d_theta: Vector,
}

/// `Σ_k π_k Σ_i w_i ∇_θ log p̃(u_ki)` over the base quadrature particles.
pub fn transform_gradient(sets: &[(f64, ParticleSet)], chain: &TransformChain, model: &dyn TargetModel) -> Result<Vector> {
    let mut total = Vector::zeros(chain.n_params());
    if chain.is_empty() {
        return Ok(total);
    }
    for (pi, ps) in sets {
        let grads = map_particles(ps, |u| Ok(chain.log_joint_with_grads(u, model)?.2))?;
        total.axpy(*pi, &weighted_sum(ps.weights(), &grads)?, 1.0);
    }
    Ok(total)
}

/// Particle estimate of `KL(b ‖ p̃) = Σ_k π_k Σ_i w_i [log b(u_ki) − log p̃(u_ki)]`, up to `log p(z)`.
pub fn particle_kl(state: &JointFlowState, model: &dyn TargetModel) -> Result<f64> {
    let b = state.base.log_density()?;
    let target = TransformedTarget {
        chain: &state.chain,
        model,
    };
    let mut total = 0.0;
    for (pi, ps) in state.base.quadrature_sets()? {
        let v = map_particles(&ps, |u| Ok(b.log_density(u) - target.log_joint(u)?))?;
        total += pi * weighted_sum(ps.weights(), &v)?;
    }
    if total.is_finite() {
        Ok(total)
    } else {
        Err(FlowError::NonFiniteValue("particle KL".into()))
    }
}

/// `(dθ_u/dt, dθ_F/dt)` at `state`.
pub fn joint_param_rhs(state: &JointFlowState, model: &dyn TargetModel) -> Result<JointRhs> {
    check_dim(state.dim(), model.dim())?;
    let target = TransformedTarget {
        chain: &state.chain,
        model,
    };
    let (components, d_log_odds) = match &state.base {
        BaseState::Gaussian(g) => {
            let q = g.density()?;
            let f = component_flow(g.mean(), g.params.prec(), g.sqrt.factor(), &g.rule, &q, &target, g.mode)?;
            (vec![f], None)
        }
        BaseState::Mixture(m) => {
            let means: Vec<_> = m.components.iter().map(|c| c.params.mean().clone()).collect();
            let precs: Vec<_> = m.components.iter().map(|c| c.params.prec().clone()).collect();
            let factors: Vec<_> = m.components.iter().map(|c| c.sqrt.factor().clone()).collect();
            let rules: Vec<_> = m.components.iter().map(|c| c.rule.clone()).collect();
            let r = evaluate(&means, &precs, &factors, &rules, &m.log_odds, &target, m.mode).map_err(|(_, e)| e)?;
            (r.components, Some(r.d_log_odds))
        }
    };
    let d_theta = if state.gamma == 0.0 {
        Vector::zeros(state.chain.n_params())
    } else {
        transform_gradient(&state.base.quadrature_sets()?, &state.chain, model)? * state.gamma
    };
    Ok(JointRhs {
        components,
        d_log_odds,
        d_theta,
    })
}

/// x-space velocity of every tracked particle: `∂F/∂θ θ̇ + ∇_u F u̇`.
pub fn transformed_velocity(state: &JointFlowState, model: &dyn TargetModel) -> Result<Vec<Vector>> {
    let rhs = joint_param_rhs(state, model)?;
    let mut out = Vec::new();
    let mut push = |positions: &Matrix, flow: &ComponentFlow| -> Result<()> {
        for u in positions.column_iter() {
            let u = u.into_owned();
            let du = flow.coeffs.velocity(&u);
            out.push(state.chain.velocity(&u, &du, rhs.d_theta.as_slice())?);
        }
        Ok(())
    };
    match &state.base {
        BaseState::Gaussian(g) => push(g.particles.positions(), &rhs.components[0])?,
        BaseState::Mixture(m) => {
            for (c, f) in m.components.iter().zip(&rhs.components) {
                push(c.particles.positions(), f)?;
            }
        }
    }
    Ok(out)
}

/// `count` i.i.d. draws from the base pushed through the chain (uniform weights).
pub fn sample_base(state: &JointFlowState, count: usize, seed: u64) -> Result<ParticleSet> {
    Ok(sample_base_with_log_det(state, count, seed)?.0)
}

/// [`sample_base`] plus `log |det ∂F/∂u|` at every draw.
pub fn sample_base_with_log_det(state: &JointFlowState, count: usize, seed: u64) -> Result<(ParticleSet, Vec<f64>)> {
    if count == 0 {
        return Err(FlowError::InvalidArgument("sample count must be positive".into()));
    }
    let n = state.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let comps: Vec<(&Vector, &Matrix)> = match &state.base {
        BaseState::Gaussian(g) => vec![(g.sqrt.mean(), g.sqrt.factor())],
        BaseState::Mixture(m) => m.components.iter().map(|c| (c.sqrt.mean(), c.sqrt.factor())).collect(),
    };
    let weights: Vec<f64> = match &state.base {
        BaseState::Gaussian(_) => vec![1.0],
        BaseState::Mixture(m) => m.weights().iter().copied().collect(),
    };
    let pick = WeightedIndex::new(&weights).map_err(|e| FlowError::InvalidArgument(e.to_string()))?;
    let mut pos = Matrix::zeros(n, count);
    for j in 0..count {
        let (mean, factor) = comps[pick.sample(&mut rng)];
        let xi = Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng));
        pos.set_column(j, &(mean + factor * xi));
    }
    let base = ParticleSet::uniform(pos);
    let mapped = map_particles(&base, |u| state.chain.forward(u))?;
    let mut out = Matrix::zeros(n, count);
    let mut log_dets = Vec::with_capacity(count);
    for (j, (x, ld)) in mapped.into_iter().enumerate() {
        out.set_column(j, &x);
        log_dets.push(ld);
    }
    Ok((ParticleSet::uniform(out), log_dets))
}

struct JointLayout {
    layout: Layout,
    slots: Vec<ComponentSlots>,
    log_odds: Option<std::ops::Range<usize>>,
    theta: std::ops::Range<usize>,
}

/// `(mean, prec, sqrt, tracked particles)` of each base component.
fn base_components(base: &BaseState) -> Vec<(&PrecisionParams, &SqrtParams, &ParticleSet)> {
    match base {
        BaseState::Gaussian(g) => vec![(&g.params, &g.sqrt, &g.particles)],
        BaseState::Mixture(m) => m.components.iter().map(|c| (&c.params, &c.sqrt, &c.particles)).collect(),
    }
}

impl JointLayout {
    fn new(state: &JointFlowState) -> Self {
        let n = state.dim();
        let comps = base_components(&state.base);
        let mut layout = Layout::new();
        for (k, (_, _, ps)) in comps.iter().enumerate() {
            layout
                .push(format!("c{k}.mean"), n, 1)
                .push(format!("c{k}.prec"), n, n)
                .push(format!("c{k}.sqrt"), n, n)
                .push(format!("c{k}.particles"), n, ps.len());
        }
        let mixture = matches!(state.base, BaseState::Mixture(_));
        if mixture {
            layout.push("log_odds", comps.len(), 1);
        }
        layout.push("theta", state.chain.n_params(), 1);
        let slots = comps
            .iter()
            .enumerate()
            .map(|(k, (_, _, ps))| ComponentSlots::from_layout(&layout, &format!("c{k}."), n, ps.len()))
            .collect();
        let log_odds = mixture.then(|| layout.segment("log_odds").expect("segment").range());
        let theta = layout.segment("theta").expect("segment").range();
        Self {
            layout,
            slots,
            log_odds,
            theta,
        }
    }

    fn pack(&self, state: &JointFlowState) -> Vec<f64> {
        let mut y = vec![0.0; self.layout.len()];
        for (s, (p, l, ps)) in self.slots.iter().zip(base_components(&state.base)) {
            s.write(&mut y, p.mean(), p.prec(), l.factor(), ps.positions());
        }
        if let (Some(r), BaseState::Mixture(m)) = (&self.log_odds, &state.base) {
            y[r.clone()].copy_from_slice(m.log_odds.as_slice());
        }
        y[self.theta.clone()].copy_from_slice(state.chain.params().as_slice());
        y
    }

    fn component(&self, k: usize, y: &[f64], weights: &Vector) -> Result<(PrecisionParams, SqrtParams, ParticleSet)> {
        let s = &self.slots[k];
        let mean = s.mean(y);
        Ok((
            PrecisionParams::new(mean.clone(), s.prec(y))?,
            SqrtParams::new(mean, s.sqrt(y))?,
            ParticleSet::new(s.particles(y), weights.clone())?,
        ))
    }

    fn unpack(&self, template: &JointFlowState, y: &[f64], t: f64) -> Result<JointFlowState> {
        let mut base = match &template.base {
            BaseState::Gaussian(g) => {
                let (params, sqrt, particles) = self.component(0, y, g.particles.weights())?;
                BaseState::Gaussian(GaussianFlowState {
                    params,
                    sqrt,
                    particles,
                    ..g.clone()
                })
            }
            BaseState::Mixture(m) => {
                let components = m
                    .components
                    .iter()
                    .enumerate()
                    .map(|(k, c)| {
                        let (params, sqrt, particles) = self.component(k, y, c.particles.weights())?;
                        Ok(MixtureComponentState {
                            params,
                            sqrt,
                            particles,
                            rule: c.rule.clone(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let r = self.log_odds.clone().expect("mixture layout");
                BaseState::Mixture(MixtureFlowState {
                    t,
                    components,
                    log_odds: clamp_log_odds(&Vector::from_column_slice(&y[r])),
                    mode: m.mode,
                })
            }
        };
        base.set_t(t);
        Ok(JointFlowState {
            t,
            base,
            chain: template.chain.with_params(&y[self.theta.clone()]),
            gamma: template.gamma,
        })
    }
}

#[derive(Debug, Clone)]
pub struct JointFlowRun {
    pub state: JointFlowState,
    pub checkpoints: Vec<JointFlowState>,
    pub steps: usize,
    /// Tracked particles of the final state mapped by the final chain.
    pub particles: ParticleSet,
}

/// Propagates base and chain from `init.t` to `init.t + horizon` and maps the
/// tracked particles through the final chain.
pub fn integrate_nf(
    init: &JointFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<(ParticleSet, JointFlowState)> {
    let run = integrate_nf_run(init, model, horizon, ode)?;
    Ok((run.particles, run.state))
}

pub fn integrate_nf_run(
    init: &JointFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<JointFlowRun> {
    check_dim(init.dim(), model.dim())?;
    if !(horizon > 0.0) {
        return Err(FlowError::InvalidArgument("horizon must be positive".into()));
    }
    let jl = JointLayout::new(init);
    let y0 = jl.pack(init);
    let initial_maha = jl
        .slots
        .iter()
        .map(|s| s.mahalanobis(&y0))
        .collect::<Result<Vec<_>>>()?;
    let (rules, mode): (Vec<QuadratureRule>, _) = match &init.base {
        BaseState::Gaussian(g) => (vec![g.rule.clone()], g.mode),
        BaseState::Mixture(m) => (m.components.iter().map(|c| c.rule.clone()).collect(), m.mode),
    };
    let diverged = |t: f64, e: FlowError| match e {
        FlowError::DivergedFlow { .. } => e,
        other => FlowError::DivergedFlow {
            t,
            reason: other.to_string(),
            component: None,
        },
    };

    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let chain = init.chain.with_params(&y[jl.theta.clone()]);
        let target = TransformedTarget { chain: &chain, model };
        let means: Vec<_> = jl.slots.iter().map(|s| s.mean(y)).collect();
        let precs: Vec<_> = jl.slots.iter().map(|s| s.prec(y)).collect();
        let factors: Vec<_> = jl.slots.iter().map(|s| s.sqrt(y)).collect();
        let mut dy = vec![0.0; y.len()];
        let pis = match &jl.log_odds {
            None => {
                let q = GaussianDensity::from_prec(means[0].clone(), &precs[0]).map_err(|e| diverged(t, e))?;
                let f = component_flow(&means[0], &precs[0], &factors[0], &rules[0], &q, &target, mode)
                    .map_err(|e| diverged(t, e))?;
                jl.slots[0].write_rhs(&mut dy, y, &f);
                vec![1.0]
            }
            Some(r) => {
                let eta = Vector::from_column_slice(&y[r.clone()]);
                let out = evaluate(&means, &precs, &factors, &rules, &eta, &target, mode).map_err(|(k, e)| {
                    FlowError::DivergedFlow {
                        t,
                        reason: e.to_string(),
                        component: Some(k),
                    }
                })?;
                for (s, f) in jl.slots.iter().zip(&out.components) {
                    s.write_rhs(&mut dy, y, f);
                }
                let mut d_eta = out.d_log_odds;
                let last = d_eta.len() - 1;
                d_eta[last] = 0.0;
                dy[r.clone()].copy_from_slice(d_eta.as_slice());
                weights_from_log_odds(&clamp_log_odds(&eta)).iter().copied().collect()
            }
        };
        if init.gamma != 0.0 && !chain.is_empty() {
            let sets = (0..means.len())
                .map(|k| Ok((pis[k], transport(&rules[k], &means[k], &factors[k])?)))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| diverged(t, e))?;
            let g = transform_gradient(&sets, &chain, model).map_err(|e| diverged(t, e))? * init.gamma;
            dy[jl.theta.clone()].copy_from_slice(g.as_slice());
        }
        Ok(dy)
    };
    let mut hook = |_t: f64, y: &[f64]| {
        for (k, (s, m0)) in jl.slots.iter().zip(&initial_maha).enumerate() {
            s.check(y, m0).map_err(|e| format!("component {k}: {e}"))?;
        }
        if !init.chain.with_params(&y[jl.theta.clone()]).invertible() {
            return Err("transformation left its invertible set".into());
        }
        Ok(())
    };
    let traj = integrate(rhs, &y0, init.t, init.t + horizon, ode, &mut hook)?;
    let checkpoints = traj
        .checkpoints
        .iter()
        .map(|c| jl.unpack(init, &c.state, c.t))
        .collect::<Result<Vec<_>>>()?;
    let state = jl.unpack(init, &traj.state, traj.t)?;
    let particles = state.transformed_particles()?;
    Ok(JointFlowRun {
        state,
        checkpoints,
        steps: traj.steps,
        particles,
    })
}
