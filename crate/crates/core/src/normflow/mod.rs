//! Invertible transformations, the transformed joint density and the joint
//! base/transform flow.
//!
//! Every family exposes raw (unconstrained) parameters; invertibility is built
//! into the parameterization, so any raw vector gives a valid map.

mod joint;
mod planar;
mod radial;
mod triangular;

pub use joint::{
    integrate_nf, integrate_nf_run, joint_param_rhs, particle_kl, sample_base, sample_base_with_log_det, transform_gradient,
    transformed_velocity, BaseState, JointFlowRun, JointFlowState, JointRhs,
};
pub use planar::PlanarParams;
pub use radial::RadialParams;
pub use triangular::TriangularParams;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{Matrix, Vector};
use crate::targets::TargetModel;

/// `ln(eˣ − 1)`, the inverse of softplus on `(0, ∞)`.
pub(crate) fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

/// Everything the flow needs from one layer at one input point.
#[derive(Debug, Clone)]
pub struct LayerEval {
    pub x: Vector,
    pub log_det: f64,
    /// `∂x/∂u`.
    pub jac: Matrix,
    /// `∂ log|det ∂x/∂u| / ∂u`.
    pub log_det_grad_u: Vector,
    /// `∂x/∂θ` with respect to the raw parameters.
    pub param_jac: Matrix,
    /// `∂ log|det ∂x/∂u| / ∂θ`.
    pub log_det_grad_params: Vector,
}

pub trait Layer {
    fn dim(&self) -> usize;
    fn n_params(&self) -> usize;
    /// Raw parameter vector.
    fn params(&self) -> Vector;
    fn set_params(&mut self, theta: &[f64]);
    fn forward(&self, u: &Vector) -> (Vector, f64);
    fn eval(&self, u: &Vector) -> LayerEval;
    /// Whether the constructed map satisfies its invertibility inequality.
    fn invertible(&self) -> bool;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", content = "params", rename_all = "lowercase")]
pub enum Transform {
    Planar(PlanarParams),
    Radial(RadialParams),
    Triangular(TriangularParams),
}

impl Transform {
    fn layer(&self) -> &dyn Layer {
        match self {
            Transform::Planar(p) => p,
            Transform::Radial(p) => p,
            Transform::Triangular(p) => p,
        }
    }

    fn layer_mut(&mut self) -> &mut dyn Layer {
        match self {
            Transform::Planar(p) => p,
            Transform::Radial(p) => p,
            Transform::Triangular(p) => p,
        }
    }
}

/// `F = F_J ∘ … ∘ F_1`, stored in application order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TransformChain {
    layers: Vec<Transform>,
}

/// Intermediate quantities of a chain evaluation at one point.
#[derive(Debug, Clone)]
pub struct ChainEval {
    pub x: Vector,
    pub log_det: f64,
    /// Per layer, in application order.
    pub layers: Vec<LayerEval>,
}

impl TransformChain {
    pub fn new(layers: Vec<Transform>) -> Result<Self> {
        if let Some(first) = layers.first() {
            let n = first.layer().dim();
            for l in &layers {
                check_dim(n, l.layer().dim())?;
            }
        }
        Ok(Self { layers })
    }

    pub fn identity() -> Self {
        Self::default()
    }

    pub fn layers(&self) -> &[Transform] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.layer().n_params()).sum()
    }

    pub fn params(&self) -> Vector {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend(l.layer().params().iter());
        }
        Vector::from_vec(out)
    }

    pub fn set_params(&mut self, theta: &[f64]) {
        assert_eq!(theta.len(), self.n_params(), "parameter count");
        let mut off = 0;
        for l in &mut self.layers {
            let p = l.layer().n_params();
            l.layer_mut().set_params(&theta[off..off + p]);
            off += p;
        }
    }

    pub fn with_params(&self, theta: &[f64]) -> Self {
        let mut c = self.clone();
        c.set_params(theta);
        c
    }

    pub fn invertible(&self) -> bool {
        self.layers.iter().all(|l| l.layer().invertible())
    }

    pub fn forward(&self, u: &Vector) -> Result<(Vector, f64)> {
        let mut x = u.clone();
        let mut log_det = 0.0;
        for l in &self.layers {
            let (y, ld) = l.layer().forward(&x);
            x = y;
            log_det += ld;
        }
        if x.iter().all(|v| v.is_finite()) && log_det.is_finite() {
            Ok((x, log_det))
        } else {
            Err(FlowError::NonFiniteValue("transform output".into()))
        }
    }

    pub fn evaluate(&self, u: &Vector) -> Result<ChainEval> {
        let mut x = u.clone();
        let mut log_det = 0.0;
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let e = l.layer().eval(&x);
            x = e.x.clone();
            log_det += e.log_det;
            layers.push(e);
        }
        if x.iter().all(|v| v.is_finite()) && log_det.is_finite() {
            Ok(ChainEval { x, log_det, layers })
        } else {
            Err(FlowError::NonFiniteValue("transform output".into()))
        }
    }

    /// `∇_u F`.
    pub fn jacobian(&self, u: &Vector) -> Result<Matrix> {
        let e = self.evaluate(u)?;
        let mut j = Matrix::identity(u.len(), u.len());
        for l in &e.layers {
            j = &l.jac * j;
        }
        Ok(j)
    }

    /// Forward-mode `(∂F/∂u) u̇ + (∂F/∂θ) θ̇`.
    pub fn velocity(&self, u: &Vector, u_dot: &Vector, theta_dot: &[f64]) -> Result<Vector> {
        check_dim(self.n_params(), theta_dot.len())?;
        let e = self.evaluate(u)?;
        let mut v = u_dot.clone();
        let mut off = 0;
        for l in &e.layers {
            let p = l.param_jac.ncols();
            v = &l.jac * v + &l.param_jac * Vector::from_column_slice(&theta_dot[off..off + p]);
            off += p;
        }
        Ok(v)
    }

    /// `log p(F(u), z) + log|det ∇F(u)|` with its gradients in `u` and `θ`.
    pub fn log_joint_with_grads(&self, u: &Vector, model: &dyn TargetModel) -> Result<(f64, Vector, Vector)> {
        let e = self.evaluate(u)?;
        let value = model.log_joint(&e.x)? + e.log_det;
        let mut adj = model.grad_log_joint(&e.x)?;
        let mut grad_theta = vec![0.0; self.n_params()];
        let mut end = grad_theta.len();
        for l in e.layers.iter().rev() {
            let p = l.param_jac.ncols();
            let g = l.param_jac.tr_mul(&adj) + &l.log_det_grad_params;
            grad_theta[end - p..end].copy_from_slice(g.as_slice());
            end -= p;
            adj = l.jac.tr_mul(&adj) + &l.log_det_grad_u;
        }
        let grad_theta = Vector::from_vec(grad_theta);
        if !value.is_finite() || adj.iter().chain(grad_theta.iter()).any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("transformed log-joint".into()));
        }
        Ok((value, adj, grad_theta))
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("chain serializes")
    }
}

/// `log p(F(u), z) + log|det ∇F(u)|`.
pub fn transformed_log_joint(u: &Vector, chain: &TransformChain, model: &dyn TargetModel) -> Result<f64> {
    let (x, log_det) = chain.forward(u)?;
    let v = model.log_joint(&x)? + log_det;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(FlowError::NonFiniteValue("transformed log-joint".into()))
    }
}

/// The pulled-back target `p(u, z; θ_F)`, usable by the Fisher-Rao flows.
pub struct TransformedTarget<'a> {
    pub chain: &'a TransformChain,
    pub model: &'a dyn TargetModel,
}

impl TargetModel for TransformedTarget<'_> {
    fn dim(&self) -> usize {
        self.model.dim()
    }

    fn log_joint(&self, u: &Vector) -> Result<f64> {
        transformed_log_joint(u, self.chain, self.model)
    }

    fn has_grad(&self) -> bool {
        self.model.has_grad()
    }

    fn grad_log_joint(&self, u: &Vector) -> Result<Vector> {
        Ok(self.chain.log_joint_with_grads(u, self.model)?.1)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn fd_jacobian(f: impl Fn(&Vector) -> Vector, u: &Vector, h: f64) -> Matrix {
        let n = u.len();
        let m = f(u).len();
        let mut j = Matrix::zeros(m, n);
        for k in 0..n {
            let mut up = u.clone();
            let mut dn = u.clone();
            up[k] += h;
            dn[k] -= h;
            j.set_column(k, &((f(&up) - f(&dn)) / (2.0 * h)));
        }
        j
    }

    pub(crate) fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
        Vector::from_fn(n, |_, _| rng.gen_range(-scale..scale))
    }

    /// Checks every analytic derivative of a layer against central differences.
    pub(crate) fn check_layer(layer: &mut dyn Layer, u: &Vector) {
        let e = layer.eval(u);
        let (x, ld) = layer.forward(u);
        assert!((&x - &e.x).amax() < 1e-14 && (ld - e.log_det).abs() < 1e-14);

        let fd = fd_jacobian(|v| layer.forward(v).0, u, 1e-6);
        assert!((&fd - &e.jac).amax() < 1e-6 * e.jac.amax().max(1.0), "jacobian");
        let det = fd.determinant().abs().ln();
        assert!((det - e.log_det).abs() < 1e-5, "log_det {det} vs {}", e.log_det);

        let gu = fd_jacobian(|v| dvector![layer.forward(v).1], u, 1e-6);
        assert!((gu.row(0).transpose() - &e.log_det_grad_u).amax() < 1e-6, "log_det grad u");

        let theta = layer.params();
        let p = theta.len();
        let mut pj = Matrix::zeros(u.len(), p);
        let mut pg = Vector::zeros(p);
        for k in 0..p {
            let h = 1e-6;
            let mut up = theta.clone();
            up[k] += h;
            layer.set_params(up.as_slice());
            let (xu, lu) = layer.forward(u);
            let mut dn = theta.clone();
            dn[k] -= h;
            layer.set_params(dn.as_slice());
            let (xd, ldn) = layer.forward(u);
            pj.set_column(k, &((xu - xd) / (2.0 * h)));
            pg[k] = (lu - ldn) / (2.0 * h);
        }
        layer.set_params(theta.as_slice());
        assert!((&pj - &e.param_jac).amax() < 1e-6 * e.param_jac.amax().max(1.0), "param jacobian");
        assert!((&pg - &e.log_det_grad_params).amax() < 1e-6, "log_det param grad");
    }

    #[test]
    fn softplus_inverse_round_trip() {
        for y in [1e-6, 0.1, 1.0, 5.0, 40.0] {
            assert!((crate::targets::softplus(softplus_inv(y)) - y).abs() < 1e-12 * y.max(1.0));
        }
    }

    #[test]
    fn chain_gradients_match_finite_differences() {
        use crate::targets::RangeModel;
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = RangeModel::new(dvector![1.0, 1.0], nalgebra::dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.63).unwrap();
        let chain = TransformChain::new(vec![
            Transform::Planar(PlanarParams::from_raw(random_vec(&mut rng, 2, 1.0), random_vec(&mut rng, 2, 1.0), 0.3)),
            Transform::Radial(RadialParams::from_raw(random_vec(&mut rng, 2, 1.0), 0.2, -0.4)),
            Transform::Triangular(TriangularParams::from_raw(2, random_vec(&mut rng, 6, 0.5).as_slice())),
        ])
        .unwrap();
        let u = dvector![0.7, -1.3];
        let (v, gu, gt) = chain.log_joint_with_grads(&u, &model).unwrap();
        assert!((v - transformed_log_joint(&u, &chain, &model).unwrap()).abs() < 1e-12);
        let fu = fd_jacobian(|w| dvector![transformed_log_joint(w, &chain, &model).unwrap()], &u, 1e-6);
        assert!((fu.row(0).transpose() - gu).amax() < 1e-5);
        let theta = chain.params();
        let f = |t: &Vector| dvector![transformed_log_joint(&u, &chain.with_params(t.as_slice()), &model).unwrap()];
        let ft = fd_jacobian(f, &theta, 1e-6);
        assert!((ft.row(0).transpose() - gt).amax() < 1e-5);

        // the chain Jacobian is the product of layer Jacobians
        let j = chain.jacobian(&u).unwrap();
        let fd = fd_jacobian(|w| chain.forward(w).unwrap().0, &u, 1e-6);
        assert!((j - fd).amax() < 1e-6);
    }

    #[test]
    fn chain_velocity_is_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let chain = TransformChain::new(vec![
            Transform::Planar(PlanarParams::from_raw(random_vec(&mut rng, 3, 1.0), random_vec(&mut rng, 3, 1.0), -0.2)),
            Transform::Planar(PlanarParams::from_raw(random_vec(&mut rng, 3, 1.0), random_vec(&mut rng, 3, 1.0), 0.5)),
        ])
        .unwrap();
        let u = random_vec(&mut rng, 3, 1.0);
        let du = random_vec(&mut rng, 3, 1.0);
        let dt = random_vec(&mut rng, chain.n_params(), 1.0);
        let v = chain.velocity(&u, &du, dt.as_slice()).unwrap();
        let h = 1e-6;
        let at = |s: f64| {
            let c = chain.with_params((chain.params() + &dt * s).as_slice());
            c.forward(&(&u + &du * s)).unwrap().0
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!((v - fd).amax() < 1e-6);
    }

    #[test]
    fn identity_chain_is_model() {
        let model = crate::targets::FunnelModel::new(3).unwrap();
        let u = dvector![0.1, 0.5, -0.3];
        let c = TransformChain::identity();
        assert_eq!(transformed_log_joint(&u, &c, &model).unwrap(), model.log_joint(&u).unwrap());
    }

    #[test]
    fn scaling_change_of_variables() {
        // 1-d triangular with l = ln 2 is x = 2u
        use crate::targets::LinearGaussianModel;
        let m = LinearGaussianModel::new(
            dvector![0.5],
            nalgebra::dmatrix![2.0],
            nalgebra::dmatrix![1.0],
            nalgebra::dmatrix![0.5],
            dvector![1.0],
        )
        .unwrap();
        let t = TriangularParams::from_raw(1, &[0.0, 2f64.ln()]);
        let chain = TransformChain::new(vec![Transform::Triangular(t)]).unwrap();
        for u in [-1.0, 0.0, 0.3, 2.0] {
            let got = transformed_log_joint(&dvector![u], &chain, &m).unwrap();
            let want = m.log_joint(&dvector![2.0 * u]).unwrap() + 2f64.ln();
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn transformed_mass_is_conserved() {
        use crate::metrics::EvalGrid;
        use crate::targets::RangeModel;
        let model = RangeModel::new(dvector![1.0, 1.0], nalgebra::dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.63).unwrap();
        let chain = TransformChain::new(vec![
            Transform::Planar(PlanarParams::new(dvector![0.8, -0.3], dvector![0.5, 0.4], 0.1).unwrap()),
            Transform::Radial(RadialParams::new(dvector![0.5, 0.5], 1.0, 0.7).unwrap()),
        ])
        .unwrap();
        let grid = EvalGrid::cube(2, -25.0, 25.0, 800).unwrap();
        let mass = |f: &dyn Fn(&Vector) -> f64| {
            (0..grid.len())
                .map(|j| f(&grid.points().column(j).into_owned()).exp())
                .sum::<f64>()
                * grid.cell_volume()
        };
        let x_mass = mass(&|x| model.log_joint(x).unwrap());
        let u_mass = mass(&|u| transformed_log_joint(u, &chain, &model).unwrap());
        assert!((x_mass - u_mass).abs() < 1e-3 * x_mass, "{x_mass} {u_mass}");
    }

    #[test]
    fn chain_json_round_trip() {
        let chain = TransformChain::new(vec![
            Transform::Planar(PlanarParams::from_raw(dvector![0.1, 0.2], dvector![0.3, 0.4], 0.5)),
            Transform::Triangular(TriangularParams::identity(2)),
        ])
        .unwrap();
        let v = chain.to_json();
        assert_eq!(v[0]["type"], "planar");
        assert_eq!(v[1]["type"], "triangular");
        let back: TransformChain = serde_json::from_value(v.clone()).unwrap();
        assert_eq!(back, chain);
        assert_eq!(serde_json::to_string(&back).unwrap(), serde_json::to_string(&chain).unwrap());
        assert!(serde_json::to_string(&chain).unwrap().starts_with(r#"[{"type":"planar","params":{"y":"#));
    }
}
