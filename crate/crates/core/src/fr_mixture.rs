//! Approximated Gaussian-mixture Fisher-Rao flow with block-diagonal FIM.
//!
//! Each component moves like a Gaussian flow driven by the full-mixture `V`;
//! the log-odds follow `dη_k/dt = E_K[V] − E_k[V]` with `η_K ≡ 0`.

use std::cell::Cell;

use rayon::prelude::*;
use serde_json::json;

use crate::error::{check_dim, FlowError, Result};
use crate::fr_gaussian::{
    component_flow, column_list, matrix_rows, ComponentFlow, ComponentSlots, ExpectationMode, FlowCoeffs,
};
use crate::gaussian::{
    spd_inverse, weights_from_log_odds, GaussianDensity, MixtureDensity, MixtureParams, PrecisionParams,
    SqrtParams, Vector,
};
use crate::integrator::{integrate, Layout, OdeConfig};
use crate::quadrature::{transport, ParticleSet, QuadratureRule};
use crate::targets::TargetModel;

/// Bound on every log-odds entry.
pub const LOG_ODDS_CLAMP: f64 = 27.6;

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponentState {
    pub params: PrecisionParams,
    pub sqrt: SqrtParams,
    pub particles: ParticleSet,
    pub rule: QuadratureRule,
}

impl MixtureComponentState {
    pub fn mean(&self) -> &Vector {
        self.params.mean()
    }

    pub fn quadrature_particles(&self) -> Result<ParticleSet> {
        transport(&self.rule, self.sqrt.mean(), self.sqrt.factor())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureFlowState {
    pub t: f64,
    pub components: Vec<MixtureComponentState>,
    /// Length `K`, last entry pinned at zero.
    pub log_odds: Vector,
    pub mode: ExpectationMode,
}

impl MixtureFlowState {
    /// One rule per component, or a single rule shared by all.
    pub fn new(init: &MixtureParams, rules: Vec<QuadratureRule>, mode: ExpectationMode) -> Result<Self> {
        let k = init.len();
        let rules = match rules.len() {
            1 => vec![rules[0].clone(); k],
            r if r == k => rules,
            r => return Err(FlowError::DimensionMismatch { expected: k, found: r }),
        };
        let components = init
            .components()
            .iter()
            .zip(rules)
            .map(|(g, rule)| {
                check_dim(g.dim(), rule.dim())?;
                let sqrt = g.to_sqrt()?;
                Ok(MixtureComponentState {
                    params: g.to_precision()?,
                    particles: transport(&rule, g.mean(), sqrt.factor())?,
                    sqrt,
                    rule,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            t: 0.0,
            components,
            log_odds: clamp_log_odds(init.log_odds()),
            mode,
        })
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.components[0].params.dim()
    }

    pub fn weights(&self) -> Vector {
        weights_from_log_odds(&self.log_odds)
    }

    pub fn mixture(&self) -> Result<MixtureParams> {
        let comps = self
            .components
            .iter()
            .map(|c| c.params.to_gaussian())
            .collect::<Result<Vec<_>>>()?;
        MixtureParams::new(comps, self.log_odds.clone())
    }

    pub fn density(&self) -> Result<MixtureDensity> {
        mixture_density(self.components.iter().map(|c| (c.params.mean(), c.params.prec())), &self.log_odds)
    }

    /// All tracked particles, weighted by component weight times particle weight.
    pub fn pooled_particles(&self) -> Result<ParticleSet> {
        let n = self.dim();
        let w = self.weights();
        let total: usize = self.components.iter().map(|c| c.particles.len()).sum();
        let mut pos = crate::gaussian::Matrix::zeros(n, total);
        let mut weights = Vector::zeros(total);
        let mut j = 0;
        for (k, c) in self.components.iter().enumerate() {
            for i in 0..c.particles.len() {
                pos.set_column(j, &c.particles.positions().column(i));
                weights[j] = w[k] * c.particles.weights()[i];
                j += 1;
            }
        }
        ParticleSet::new(pos, weights)
    }

    pub fn to_json(&self) -> serde_json::Value {
        let comps: Vec<_> = self
            .components
            .iter()
            .map(|c| {
                json!({
                    "mean": c.params.mean().as_slice(),
                    "cov_inv": matrix_rows(c.params.prec()),
                    "L": matrix_rows(c.sqrt.factor()),
                    "particles": column_list(c.particles.positions()),
                })
            })
            .collect();
        json!({
            "t": self.t,
            "components": comps,
            "log_odds": self.log_odds.as_slice(),
        })
    }
}

pub fn clamp_log_odds(eta: &Vector) -> Vector {
    eta.map(|v| v.clamp(-LOG_ODDS_CLAMP, LOG_ODDS_CLAMP))
}

pub(crate) fn mixture_density<'a>(
    comps: impl Iterator<Item = (&'a Vector, &'a crate::gaussian::Matrix)>,
    log_odds: &Vector,
) -> Result<MixtureDensity> {
    let dens = comps
        .map(|(m, p)| GaussianDensity::from_prec(m.clone(), p))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureDensity::new(dens, &clamp_log_odds(log_odds)))
}

/// Per-component `(dμ, dΣ⁻¹)` and the log-odds rate.
#[derive(Debug, Clone)]
pub struct MixtureRhs {
    pub components: Vec<ComponentFlow>,
    pub d_log_odds: Vector,
}

/// Flow of every component plus `dη`, with clamped entries frozen at their bound.
pub(crate) fn evaluate(
    means: &[Vector],
    precs: &[crate::gaussian::Matrix],
    factors: &[crate::gaussian::Matrix],
    rules: &[QuadratureRule],
    log_odds: &Vector,
    model: &dyn TargetModel,
    mode: ExpectationMode,
) -> std::result::Result<MixtureRhs, (usize, FlowError)> {
    let q = mixture_density(means.iter().zip(precs), log_odds).map_err(|e| (0, e))?;
    let flows = (0..means.len())
        .into_par_iter()
        .map(|k| {
            component_flow(&means[k], &precs[k], &factors[k], &rules[k], &q, model, mode).map_err(|e| (k, e))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let last = flows.last().expect("K ≥ 1").moments.mean_v;
    let d_log_odds = Vector::from_iterator(
        flows.len(),
        flows.iter().zip(log_odds.iter()).map(|(f, eta)| {
            let d = last - f.moments.mean_v;
            let pinned = (*eta >= LOG_ODDS_CLAMP && d > 0.0) || (*eta <= -LOG_ODDS_CLAMP && d < 0.0);
            if pinned {
                0.0
            } else {
                d
            }
        }),
    );
    Ok(MixtureRhs {
        components: flows,
        d_log_odds,
    })
}

fn state_rhs(state: &MixtureFlowState, model: &dyn TargetModel) -> Result<MixtureRhs> {
    check_dim(state.dim(), model.dim())?;
    let means: Vec<_> = state.components.iter().map(|c| c.params.mean().clone()).collect();
    let precs: Vec<_> = state.components.iter().map(|c| c.params.prec().clone()).collect();
    let factors: Vec<_> = state.components.iter().map(|c| c.sqrt.factor().clone()).collect();
    let rules: Vec<_> = state.components.iter().map(|c| c.rule.clone()).collect();
    evaluate(&means, &precs, &factors, &rules, &state.log_odds, model, state.mode).map_err(|(_, e)| e)
}

pub fn mixture_param_rhs(state: &MixtureFlowState, model: &dyn TargetModel) -> Result<MixtureRhs> {
    state_rhs(state, model)
}

/// Conventional-parameter `(Ã_k, b̃_k)`.
pub fn component_dynamics(state: &MixtureFlowState, model: &dyn TargetModel, k: usize) -> Result<FlowCoeffs> {
    check_index(state, k)?;
    Ok(state_rhs(state, model)?.components.swap_remove(k).coeffs)
}

/// Natural-parameter form: `Ã = ¼Γ⁻¹E[∇²V]`, `b̃ = ½Γ⁻¹E[∇V] + ½ÃΓ⁻¹γ`.
pub fn natural_component_dynamics(
    state: &MixtureFlowState,
    model: &dyn TargetModel,
    k: usize,
) -> Result<FlowCoeffs> {
    check_index(state, k)?;
    let nat = state.components[k].params.to_gaussian()?.to_natural()?;
    let gamma_inv = spd_inverse(&(-nat.big_gamma()))? * -1.0;
    let mom = state_rhs(state, model)?.components.swap_remove(k).moments;
    let a = &gamma_inv * &mom.hess * 0.25;
    let b = &gamma_inv * &mom.grad * 0.5 + &a * &gamma_inv * nat.gamma() * 0.5;
    Ok(FlowCoeffs { a, b })
}

fn check_index(state: &MixtureFlowState, k: usize) -> Result<()> {
    if k < state.len() {
        Ok(())
    } else {
        Err(FlowError::InvalidArgument(format!("component {k} of {}", state.len())))
    }
}

struct MixtureLayout {
    layout: Layout,
    slots: Vec<ComponentSlots>,
    log_odds: std::ops::Range<usize>,
}

impl MixtureLayout {
    fn new(state: &MixtureFlowState) -> Self {
        let n = state.dim();
        let mut layout = Layout::new();
        for (k, c) in state.components.iter().enumerate() {
            let m = c.particles.len();
            layout
                .push(format!("c{k}.mean"), n, 1)
                .push(format!("c{k}.prec"), n, n)
                .push(format!("c{k}.sqrt"), n, n)
                .push(format!("c{k}.particles"), n, m);
        }
        layout.push("log_odds", state.len(), 1);
        let slots = state
            .components
            .iter()
            .enumerate()
            .map(|(k, c)| ComponentSlots::from_layout(&layout, &format!("c{k}."), n, c.particles.len()))
            .collect();
        let log_odds = layout.segment("log_odds").expect("segment").range();
        Self {
            layout,
            slots,
            log_odds,
        }
    }

    fn pack(&self, state: &MixtureFlowState) -> Vec<f64> {
        let mut y = vec![0.0; self.layout.len()];
        for (s, c) in self.slots.iter().zip(&state.components) {
            s.write(&mut y, c.params.mean(), c.params.prec(), c.sqrt.factor(), c.particles.positions());
        }
        y[self.log_odds.clone()].copy_from_slice(state.log_odds.as_slice());
        y
    }

    fn unpack(&self, template: &MixtureFlowState, y: &[f64], t: f64) -> Result<MixtureFlowState> {
        let components = self
            .slots
            .iter()
            .zip(&template.components)
            .map(|(s, c)| {
                let mean = s.mean(y);
                Ok(MixtureComponentState {
                    params: PrecisionParams::new(mean.clone(), s.prec(y))?,
                    sqrt: SqrtParams::new(mean, s.sqrt(y))?,
                    particles: ParticleSet::new(s.particles(y), c.particles.weights().clone())?,
                    rule: c.rule.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureFlowState {
            t,
            components,
            log_odds: clamp_log_odds(&Vector::from_column_slice(&y[self.log_odds.clone()])),
            mode: template.mode,
        })
    }
}

#[derive(Debug, Clone)]
pub struct MixtureFlowRun {
    pub state: MixtureFlowState,
    pub checkpoints: Vec<MixtureFlowState>,
    pub steps: usize,
}

pub fn integrate_mixture_flow(
    init: &MixtureFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<MixtureFlowState> {
    Ok(integrate_mixture_flow_run(init, model, horizon, ode)?.state)
}

pub fn integrate_mixture_flow_run(
    init: &MixtureFlowState,
    model: &dyn TargetModel,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<MixtureFlowRun> {
    check_dim(init.dim(), model.dim())?;
    if !(horizon >= 0.0) {
        return Err(FlowError::InvalidArgument("horizon must be nonnegative".into()));
    }
    let ml = MixtureLayout::new(init);
    let y0 = ml.pack(init);
    let initial_maha = ml
        .slots
        .iter()
        .map(|s| s.mahalanobis(&y0))
        .collect::<Result<Vec<_>>>()?;
    let rules: Vec<_> = init.components.iter().map(|c| c.rule.clone()).collect();
    let pinned_last = init.len() - 1;
    let culprit = Cell::new(None);

    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let means: Vec<_> = ml.slots.iter().map(|s| s.mean(y)).collect();
        let precs: Vec<_> = ml.slots.iter().map(|s| s.prec(y)).collect();
        let factors: Vec<_> = ml.slots.iter().map(|s| s.sqrt(y)).collect();
        let eta = Vector::from_column_slice(&y[ml.log_odds.clone()]);
        let out = evaluate(&means, &precs, &factors, &rules, &eta, model, init.mode).map_err(|(k, e)| {
            FlowError::DivergedFlow {
                t,
                reason: e.to_string(),
                component: Some(k),
            }
        })?;
        let mut dy = vec![0.0; y.len()];
        for (s, f) in ml.slots.iter().zip(&out.components) {
            s.write_rhs(&mut dy, y, f);
        }
        let mut d_eta = out.d_log_odds;
        d_eta[pinned_last] = 0.0;
        dy[ml.log_odds.clone()].copy_from_slice(d_eta.as_slice());
        Ok(dy)
    };
    let mut hook = |_t: f64, y: &[f64]| {
        for (k, (s, m0)) in ml.slots.iter().zip(&initial_maha).enumerate() {
            s.check(y, m0).map_err(|e| {
                culprit.set(Some(k));
                e
            })?;
        }
        Ok(())
    };
    let traj = integrate(rhs, &y0, init.t, init.t + horizon, ode, &mut hook).map_err(|e| match e {
        FlowError::DivergedFlow {
            t,
            reason,
            component: None,
        } => FlowError::DivergedFlow {
            t,
            reason,
            component: culprit.get(),
        },
        other => other,
    })?;
    let checkpoints = traj
        .checkpoints
        .iter()
        .map(|c| ml.unpack(init, &c.state, c.t))
        .collect::<Result<Vec<_>>>()?;
    Ok(MixtureFlowRun {
        state: ml.unpack(init, &traj.state, traj.t)?,
        checkpoints,
        steps: traj.steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fr_gaussian::{param_rhs, dynamics_coeffs, integrate_gaussian_flow, GaussianFlowState};
    use crate::gaussian::{mahalanobis, GaussianParams, Matrix};
    use crate::quadrature::gh_rule_nd;
    use crate::targets::{gmm_posterior_analytic, kalman_posterior, LinearGaussianModel, MixturePriorLinearModel};
    use nalgebra::{dmatrix, dvector};

    fn linear() -> LinearGaussianModel {
        let h = dmatrix![1.0, 1.5; 0.2, 2.0];
        let z = &h * dvector![-1.18, 4.12];
        LinearGaussianModel::new(dvector![0.0, 0.0], dmatrix![1.5, 0.5; 0.5, 5.5], h, dmatrix![0.2, 0.1; 0.1, 0.2], z)
            .unwrap()
    }

    fn gmm_model() -> MixturePriorLinearModel {
        let p = dmatrix![1.0, 0.3; 0.3, 2.0];
        let comps = [[-4.0, -4.0], [4.0, -4.0], [-4.0, 4.0], [4.0, 4.0]]
            .iter()
            .map(|m| GaussianParams::new(dvector![m[0], m[1]], p.clone()).unwrap())
            .collect();
        let prior = MixtureParams::uniform(comps).unwrap();
        MixturePriorLinearModel::new(prior, Matrix::identity(2, 2), dmatrix![2.0, 0.0; 0.0, 2.0], dvector![0.5, 0.3])
            .unwrap()
    }

    fn rule() -> QuadratureRule {
        gh_rule_nd(4, 2).unwrap()
    }

    #[test]
    fn single_component_reduces_to_gaussian_flow() {
        let m = linear();
        let g = GaussianParams::new(dvector![0.3, 1.0], dmatrix![2.0, 0.4; 0.4, 3.0]).unwrap();
        for mode in [ExpectationMode::Stein, ExpectationMode::Analytic] {
            let mix = MixtureFlowState::new(&MixtureParams::uniform(vec![g.clone()]).unwrap(), vec![rule()], mode).unwrap();
            let single = GaussianFlowState::new(&g, rule(), mode).unwrap();
            let rhs = mixture_param_rhs(&mix, &m).unwrap();
            let (dm, dp) = param_rhs(&single, &m).unwrap();
            assert!((&rhs.components[0].d_mean - dm).amax() < 1e-12);
            assert!((&rhs.components[0].d_prec - dp).amax() < 1e-12);
            assert_eq!(rhs.d_log_odds[0], 0.0);
            let c = component_dynamics(&mix, &m, 0).unwrap();
            let cg = dynamics_coeffs(&single, &m).unwrap();
            assert!((c.a - cg.a).amax() < 1e-12 && (c.b - cg.b).amax() < 1e-12);
        }
    }

    #[test]
    fn identical_components_keep_weights() {
        let m = gmm_model();
        let g = GaussianParams::new(dvector![1.0, 0.0], dmatrix![3.0, 0.0; 0.0, 3.0]).unwrap();
        let mix = MixtureFlowState::new(
            &MixtureParams::uniform(vec![g.clone(), g]).unwrap(),
            vec![rule()],
            ExpectationMode::Stein,
        )
        .unwrap();
        let rhs = mixture_param_rhs(&mix, &m).unwrap();
        assert!(rhs.d_log_odds.amax() < 1e-12);
    }

    #[test]
    fn identical_components_follow_single_gaussian() {
        let m = linear();
        let g = m.prior();
        let mix = MixtureFlowState::new(
            &MixtureParams::uniform(vec![g.clone(); 3]).unwrap(),
            vec![rule()],
            ExpectationMode::Stein,
        )
        .unwrap();
        let cfg = OdeConfig::rk4(1e-3);
        let out = integrate_mixture_flow(&mix, &m, 5.0, &cfg).unwrap();
        let single = integrate_gaussian_flow(&GaussianFlowState::new(&g, rule(), ExpectationMode::Stein).unwrap(), &m, 5.0, &cfg)
            .unwrap();
        for c in &out.components {
            assert!((c.params.mean() - single.mean()).amax() < 1e-6);
            assert!((c.params.prec() - single.params.prec()).amax() < 1e-6);
            assert!((c.particles.positions() - single.particles.positions()).amax() < 1e-6);
        }
        assert!((out.weights() - Vector::repeat(3, 1.0 / 3.0)).amax() < 1e-9);
    }

    #[test]
    fn analytic_posterior_is_fixed_point() {
        let m = gmm_model();
        let post = gmm_posterior_analytic(&m).unwrap();
        for mode in [ExpectationMode::Stein, ExpectationMode::Analytic] {
            let s = MixtureFlowState::new(&post, vec![rule()], mode).unwrap();
            let rhs = mixture_param_rhs(&s, &m).unwrap();
            assert!(rhs.d_log_odds.amax() < 1e-8);
            for f in &rhs.components {
                assert!(f.coeffs.a.amax() < 1e-8 && f.coeffs.b.amax() < 1e-8, "{mode:?}");
                assert!(f.d_mean.amax() < 1e-8 && f.d_prec.amax() < 1e-8);
            }
        }
    }

    #[test]
    fn natural_and_conventional_forms_agree() {
        use rand::{Rng, SeedableRng};
        let m = gmm_model();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..10 {
            let comps: Vec<_> = (0..3)
                .map(|_| {
                    let l = dmatrix![rng.gen_range(0.5..2.0), 0.0; rng.gen_range(-1.0..1.0), rng.gen_range(0.5..2.0)];
                    GaussianParams::new(dvector![rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)], &l * l.transpose())
                        .unwrap()
                })
                .collect();
            let w: Vec<f64> = (0..3).map(|_| rng.gen_range(0.1..1.0)).collect();
            let s = MixtureFlowState::new(&MixtureParams::from_weights(comps, &w).unwrap(), vec![rule()], ExpectationMode::Stein)
                .unwrap();
            for k in 0..3 {
                let c = component_dynamics(&s, &m, k).unwrap();
                let nat = natural_component_dynamics(&s, &m, k).unwrap();
                let scale = c.a.amax().max(c.b.amax()).max(1.0);
                assert!((&c.a - &nat.a).amax() < 1e-10 * scale);
                assert!((&c.b - &nat.b).amax() < 1e-10 * scale);
            }
        }
        assert!(component_dynamics(
            &MixtureFlowState::new(&gmm_posterior_analytic(&m).unwrap(), vec![rule()], ExpectationMode::Stein).unwrap(),
            &m,
            9
        )
        .is_err());
    }

    #[test]
    fn single_component_reaches_kalman_posterior() {
        let m = linear();
        let post = kalman_posterior(&m).unwrap();
        let s = MixtureFlowState::new(&MixtureParams::uniform(vec![m.prior()]).unwrap(), vec![rule()], ExpectationMode::Stein)
            .unwrap();
        let out = integrate_mixture_flow(&s, &m, 10.0, &OdeConfig::rk4(1e-3)).unwrap();
        let g = out.mixture().unwrap().components()[0].clone();
        assert!((g.mean() - post.mean()).norm() < 1e-3 * post.mean().norm());
        assert!((g.cov() - post.cov()).norm() < 1e-3 * post.cov().norm());
    }

    #[test]
    fn log_odds_respect_clamp() {
        // the first component sits far from all posterior mass, so its weight decays
        let m = gmm_model();
        let far = GaussianParams::new(dvector![60.0, 60.0], dmatrix![0.5, 0.0; 0.0, 0.5]).unwrap();
        let near = GaussianParams::new(dvector![0.0, 0.0], dmatrix![3.0, 0.0; 0.0, 3.0]).unwrap();
        let s = MixtureFlowState::new(&MixtureParams::uniform(vec![far, near]).unwrap(), vec![rule()], ExpectationMode::Stein)
            .unwrap();
        let run = integrate_mixture_flow_run(&s, &m, 2.0, &OdeConfig::rk45(1e-6, 1e-9).with_checkpoints(0.1)).unwrap();
        for cp in run.checkpoints.iter().chain([&run.state]) {
            assert!(cp.log_odds.amax() <= LOG_ODDS_CLAMP);
            assert!(cp.weights().min() >= 1e-12);
            assert!((cp.weights().sum() - 1.0).abs() < 1e-12);
            assert_eq!(cp.log_odds[1], 0.0);
        }
        assert!(run.state.log_odds[0] <= -LOG_ODDS_CLAMP + 1e-9, "{}", run.state.log_odds[0]);
    }

    #[test]
    fn component_mahalanobis_is_conserved() {
        let m = gmm_model();
        let init = MixtureParams::uniform(vec![
            GaussianParams::new(dvector![-2.0, 1.0], dmatrix![3.0, 0.9; 0.9, 6.0]).unwrap(),
            GaussianParams::new(dvector![2.0, 1.0], dmatrix![3.0, 0.9; 0.9, 6.0]).unwrap(),
        ])
        .unwrap();
        let s = MixtureFlowState::new(&init, vec![rule()], ExpectationMode::Stein).unwrap();
        let out = integrate_mixture_flow(&s, &m, 10.0, &OdeConfig::rk45(1e-10, 1e-12)).unwrap();
        for (c0, c1) in s.components.iter().zip(&out.components) {
            for j in 0..c0.particles.len() {
                let d0 = mahalanobis(&c0.particles.position(j), c0.mean(), c0.params.prec()).unwrap();
                let d1 = mahalanobis(&c1.particles.position(j), c1.mean(), c1.params.prec()).unwrap();
                assert!((d0 - d1).abs() < 1e-6);
            }
            let rec = c1.quadrature_particles().unwrap();
            assert!((rec.positions() - c1.particles.positions()).amax() < 1e-6);
        }
    }

    #[test]
    fn checkpoint_json_has_mixture_fields() {
        let m = gmm_posterior_analytic(&gmm_model()).unwrap();
        let s = MixtureFlowState::new(&m, vec![rule()], ExpectationMode::Stein).unwrap();
        let v = s.to_json();
        assert_eq!(v["components"].as_array().unwrap().len(), 4);
        assert_eq!(v["log_odds"].as_array().unwrap().len(), 4);
        assert_eq!(v["components"][0]["particles"].as_array().unwrap().len(), 16);
    }
}
