use serde::{Deserialize, Serialize};

use super::{softplus_inv, Layer, LayerEval};
use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{Matrix, Vector};
use crate::targets::{sigmoid, softplus};

/// `F(u) = u + β/(α + r)·(u − u0)` with `r = ‖u − u0‖`.
///
/// Stored raw: `α = softplus(alpha_raw)` and `β = −α + softplus(beta_raw)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadialParams {
    u0: Vec<f64>,
    alpha_raw: f64,
    beta_raw: f64,
}

impl RadialParams {
    pub fn from_raw(u0: Vector, alpha_raw: f64, beta_raw: f64) -> Self {
        Self { u0: u0.as_slice().to_vec(), alpha_raw, beta_raw }
    }

    pub fn new(u0: Vector, alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0) || !(beta > -alpha) {
            return Err(FlowError::InvalidArgument(format!("radial map needs α > 0 and β > −α, got {alpha}, {beta}")));
        }
        Ok(Self::from_raw(u0, softplus_inv(alpha), softplus_inv(beta + alpha)))
    }

    pub fn identity(u0: Vector, alpha: f64) -> Result<Self> {
        Self::new(u0, alpha, 0.0)
    }

    pub fn center(&self) -> Vector {
        Vector::from_column_slice(&self.u0)
    }

    pub fn alpha(&self) -> f64 {
        softplus(self.alpha_raw)
    }

    pub fn beta(&self) -> f64 {
        -self.alpha() + softplus(self.beta_raw)
    }

    pub fn with_center(&self, u0: &Vector) -> Result<Self> {
        check_dim(self.u0.len(), u0.len())?;
        Ok(Self::from_raw(u0.clone(), self.alpha_raw, self.beta_raw))
    }
}

impl Layer for RadialParams {
    fn dim(&self) -> usize {
        self.u0.len()
    }

    fn n_params(&self) -> usize {
        self.u0.len() + 2
    }

    fn params(&self) -> Vector {
        let mut v = self.u0.clone();
        v.push(self.alpha_raw);
        v.push(self.beta_raw);
        Vector::from_vec(v)
    }

    fn set_params(&mut self, theta: &[f64]) {
        let n = self.u0.len();
        assert_eq!(theta.len(), n + 2);
        self.u0.copy_from_slice(&theta[..n]);
        self.alpha_raw = theta[n];
        self.beta_raw = theta[n + 1];
    }

    fn forward(&self, u: &Vector) -> (Vector, f64) {
        let n = u.len() as f64;
        let d = u - self.center();
        let r = d.norm();
        let (alpha, beta) = (self.alpha(), self.beta());
        let s = alpha + r;
        let a1 = 1.0 + beta / s;
        let a2 = 1.0 + beta * alpha / (s * s);
        (u + &d * (beta / s), (n - 1.0) * a1.ln() + a2.ln())
    }

    fn eval(&self, u: &Vector) -> LayerEval {
        let dim = u.len();
        let n = dim as f64;
        let d = u - self.center();
        let r = d.norm();
        let (alpha, beta) = (self.alpha(), self.beta());
        let s = alpha + r;
        let a1 = 1.0 + beta / s;
        let a2 = 1.0 + beta * alpha / (s * s);

        let x = u + &d * (beta / s);
        // d/r is the gradient of r; at the center the terms it multiplies vanish
        let unit = if r > 0.0 { &d / r } else { Vector::zeros(dim) };
        let jac = Matrix::identity(dim, dim) * a1 - &unit * unit.transpose() * (beta * r / (s * s));

        let dl_dr = (n - 1.0) * (-beta / (s * s)) / a1 + (-2.0 * beta * alpha / (s * s * s)) / a2;
        let log_det_grad_u = &unit * dl_dr;
        let dl_dalpha = (n - 1.0) * (-beta / (s * s)) / a1 + (beta / (s * s) - 2.0 * beta * alpha / (s * s * s)) / a2;
        let dl_dbeta = (n - 1.0) / (s * a1) + alpha / (s * s * a2);

        let sa = sigmoid(self.alpha_raw);
        let sb = sigmoid(self.beta_raw);
        let dx_dalpha = &d * (-beta / (s * s));
        let dx_dbeta = &d / s;

        let mut param_jac = Matrix::zeros(dim, dim + 2);
        param_jac
            .columns_mut(0, dim)
            .copy_from(&(Matrix::identity(dim, dim) - &jac));
        param_jac.set_column(dim, &((dx_dalpha - &dx_dbeta) * sa));
        param_jac.set_column(dim + 1, &(dx_dbeta * sb));

        let mut log_det_grad_params = Vector::zeros(dim + 2);
        log_det_grad_params.rows_mut(0, dim).copy_from(&(-&log_det_grad_u));
        log_det_grad_params[dim] = sa * (dl_dalpha - dl_dbeta);
        log_det_grad_params[dim + 1] = sb * dl_dbeta;

        LayerEval {
            x,
            log_det: (n - 1.0) * a1.ln() + a2.ln(),
            jac,
            log_det_grad_u,
            param_jac,
            log_det_grad_params,
        }
    }

    fn invertible(&self) -> bool {
        let a = self.alpha();
        a > 0.0 && self.beta() >= -a
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::normflow::tests::{check_layer, random_vec};
    use nalgebra::dvector;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_beta_is_identity() {
        let p = RadialParams::identity(dvector![0.5, -0.5], 1.3).unwrap();
        assert!(p.beta().abs() < 1e-15);
        let u = dvector![2.0, 1.0];
        let (x, ld) = p.forward(&u);
        assert!((x - &u).amax() < 1e-15);
        assert!(ld.abs() < 1e-15);
    }

    #[test]
    fn constrained_values_round_trip() {
        let p = RadialParams::new(dvector![0.0, 1.0], 0.7, -0.5).unwrap();
        assert!((p.alpha() - 0.7).abs() < 1e-14 && (p.beta() + 0.5).abs() < 1e-14);
        assert!(RadialParams::new(dvector![0.0], 0.7, -0.8).is_err());
        assert!(RadialParams::new(dvector![0.0], 0.0, 1.0).is_err());
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 3, 5] {
            for _ in 0..5 {
                let mut p = RadialParams::from_raw(
                    random_vec(&mut rng, n, 1.0),
                    random_vec(&mut rng, 1, 1.5)[0],
                    random_vec(&mut rng, 1, 1.5)[0],
                );
                let u = random_vec(&mut rng, n, 2.0);
                check_layer(&mut p, &u);
            }
        }
    }
}
