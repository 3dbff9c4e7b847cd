use serde::{Deserialize, Serialize};

use super::{softplus_inv, Layer, LayerEval};
use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{Matrix, Vector};
use crate::targets::{sigmoid, softplus};

/// `ln(e − 1)`: shifts the softplus so that `m(0) = 0`, making `y = 0` the identity.
const SHIFT: f64 = 0.541_324_854_612_918_1;

/// `F(u) = u + ŷ tanh(wᵀu + b)`.
///
/// `y` is unconstrained. The map uses `ŷ = y + (m(wᵀy) − wᵀy) w/‖w‖²` where
/// `m(a) = −1 + softplus(a + ln(e − 1))`, so `wᵀŷ > −1` for every `y`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanarParams {
    y: Vec<f64>,
    w: Vec<f64>,
    b: f64,
}

fn margin(a: f64) -> (f64, f64) {
    (-1.0 + softplus(a + SHIFT), sigmoid(a + SHIFT))
}

impl PlanarParams {
    pub fn from_raw(y: Vector, w: Vector, b: f64) -> Self {
        assert_eq!(y.len(), w.len(), "planar y and w lengths");
        Self { y: y.as_slice().to_vec(), w: w.as_slice().to_vec(), b }
    }

    /// Builds the map with effective scale vector `y_hat`, which must satisfy `wᵀŷ > −1`.
    pub fn new(y_hat: Vector, w: Vector, b: f64) -> Result<Self> {
        check_dim(w.len(), y_hat.len())?;
        let s = w.norm_squared();
        if s == 0.0 {
            return Ok(Self::from_raw(y_hat, w, b));
        }
        let target = w.dot(&y_hat);
        if !(target > -1.0) {
            return Err(FlowError::InvalidArgument(format!("planar map needs wᵀy > −1, got {target}")));
        }
        let a = softplus_inv(target + 1.0) - SHIFT;
        let y = &y_hat + &w * ((a - target) / s);
        Ok(Self::from_raw(y, w, b))
    }

    /// Identity map with a fixed direction `w`.
    pub fn identity(w: Vector) -> Self {
        let n = w.len();
        Self::from_raw(Vector::zeros(n), w, 0.0)
    }

    pub fn w(&self) -> Vector {
        Vector::from_column_slice(&self.w)
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    pub fn y_raw(&self) -> Vector {
        Vector::from_column_slice(&self.y)
    }

    pub fn y_hat(&self) -> Vector {
        self.constrained().0
    }

    /// `ŷ`, `m(a)` and `m'(a)`.
    fn constrained(&self) -> (Vector, f64, f64) {
        let y = self.y_raw();
        let w = self.w();
        let s = w.norm_squared();
        let a = w.dot(&y);
        let (m, dm) = margin(a);
        if s == 0.0 {
            return (y, a, dm);
        }
        (&y + &w * ((m - a) / s), m, dm)
    }

    fn constrained_jacobians(&self) -> (Matrix, Matrix) {
        let n = self.y.len();
        let y = self.y_raw();
        let w = self.w();
        let s = w.norm_squared();
        if s == 0.0 {
            return (Matrix::identity(n, n), Matrix::zeros(n, n));
        }
        let a = w.dot(&y);
        let (m, dm) = margin(a);
        let g = m - a;
        let dg = dm - 1.0;
        let dy = Matrix::identity(n, n) + &w * w.transpose() * (dg / s);
        let dw = Matrix::identity(n, n) * (g / s) + &w * y.transpose() * (dg / s)
            - &w * w.transpose() * (2.0 * g / (s * s));
        (dy, dw)
    }
}

impl Layer for PlanarParams {
    fn dim(&self) -> usize {
        self.y.len()
    }

    fn n_params(&self) -> usize {
        2 * self.y.len() + 1
    }

    fn params(&self) -> Vector {
        let mut v = self.y.clone();
        v.extend(&self.w);
        v.push(self.b);
        Vector::from_vec(v)
    }

    fn set_params(&mut self, theta: &[f64]) {
        let n = self.y.len();
        assert_eq!(theta.len(), 2 * n + 1);
        self.y.copy_from_slice(&theta[..n]);
        self.w.copy_from_slice(&theta[n..2 * n]);
        self.b = theta[2 * n];
    }

    fn forward(&self, u: &Vector) -> (Vector, f64) {
        let (yh, m, _) = self.constrained();
        let h = (self.w().dot(u) + self.b).tanh();
        let x = u + &yh * h;
        (x, (1.0 + (1.0 - h * h) * m).ln())
    }

    fn eval(&self, u: &Vector) -> LayerEval {
        let n = self.y.len();
        let w = self.w();
        let (yh, m, dm) = self.constrained();
        let (dyh_dy, dyh_dw) = self.constrained_jacobians();
        let h = (w.dot(u) + self.b).tanh();
        let h1 = 1.0 - h * h;
        let h2 = -2.0 * h * h1;
        let det = 1.0 + h1 * m;

        let x = u + &yh * h;
        let jac = Matrix::identity(n, n) + &yh * w.transpose() * h1;
        let log_det_grad_u = &w * (h2 * m / det);

        let mut param_jac = Matrix::zeros(n, 2 * n + 1);
        param_jac.columns_mut(0, n).copy_from(&(dyh_dy * h));
        param_jac.columns_mut(n, n).copy_from(&(&yh * u.transpose() * h1 + dyh_dw * h));
        param_jac.set_column(2 * n, &(&yh * h1));

        let mut log_det_grad_params = Vector::zeros(2 * n + 1);
        let y = self.y_raw();
        // the reparameterization is singular at w = 0; treat ŷ as frozen there
        let (gm_y, gm_w) = if w.norm_squared() == 0.0 {
            (Vector::zeros(n), Vector::zeros(n))
        } else {
            (&w * (h1 * dm / det), &y * (h1 * dm / det))
        };
        log_det_grad_params.rows_mut(0, n).copy_from(&gm_y);
        log_det_grad_params.rows_mut(n, n).copy_from(&(gm_w + u * (h2 * m / det)));
        log_det_grad_params[2 * n] = h2 * m / det;

        LayerEval {
            x,
            log_det: det.ln(),
            jac,
            log_det_grad_u,
            param_jac,
            log_det_grad_params,
        }
    }

    fn invertible(&self) -> bool {
        let (yh, _, _) = self.constrained();
        self.w().dot(&yh) > -1.0
    }
}
