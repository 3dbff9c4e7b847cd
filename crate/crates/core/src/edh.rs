//! Exact Daum-Huang flow for linear-Gaussian models: transient densities,
//! affine particle dynamics and the exponential pseudo-time schedule.

use nalgebra::Cholesky;

use crate::error::{FlowError, Result};
use crate::gaussian::{symmetrize, Matrix, Vector};
use crate::integrator::{integrate, NoHook, OdeConfig};
use crate::targets::LinearGaussianModel;

/// `λ(t) = 1 − e^{−t}`.
pub fn lambda_schedule(t: f64) -> f64 {
    -(-t).exp_m1()
}

/// `dλ/dt = e^{−t}`.
pub fn lambda_rate(t: f64) -> f64 {
    (-t).exp()
}

/// Gaussian transient density at homotopy parameter `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransientParams {
    pub lambda: f64,
    pub mean: Vector,
    pub cov: Matrix,
}

/// Affine particle velocity `A x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct EdhCoeffs {
    pub a: Matrix,
    pub b: Vector,
}

impl EdhCoeffs {
    pub fn velocity(&self, x: &Vector) -> Vector {
        &self.a * x + &self.b
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(FlowError::InvalidArgument(format!("lambda {lambda} outside [0, 1]")))
    }
}

/// Cholesky of `R + λ H P Hᵀ`.
fn innovation(m: &LinearGaussianModel, lambda: f64) -> Result<Cholesky<f64, nalgebra::Dyn>> {
    let s = &m.obs_cov + &m.obs_matrix * &m.prior_cov * m.obs_matrix.transpose() * lambda;
    Cholesky::new(symmetrize(&s)).ok_or(FlowError::NotPositiveDefinite)
}

pub fn transient_params(m: &LinearGaussianModel, lambda: f64) -> Result<TransientParams> {
    check_lambda(lambda)?;
    let s = innovation(m, lambda)?;
    let hp = &m.obs_matrix * &m.prior_cov;
    let cov = symmetrize(&(&m.prior_cov - hp.transpose() * s.solve(&hp) * lambda));
    Cholesky::new(cov.clone()).ok_or(FlowError::NotPositiveDefinite)?;
    let info_vec = m.prior_prec() * &m.prior_mean + m.obs_matrix.transpose() * (m.obs_prec() * &m.z) * lambda;
    Ok(TransientParams {
        lambda,
        mean: &cov * info_vec,
        cov,
    })
}

pub fn edh_coeffs(m: &LinearGaussianModel, lambda: f64) -> Result<EdhCoeffs> {
    check_lambda(lambda)?;
    let n = m.prior_mean.len();
    let s = innovation(m, lambda)?;
    let pht = &m.prior_cov * m.obs_matrix.transpose();
    let a = -0.5 * &pht * s.solve(&m.obs_matrix);
    let id = Matrix::identity(n, n);
    let inner = &a * &m.prior_mean + (&id + &a * lambda) * &pht * (m.obs_prec() * &m.z);
    let b = (&id + &a * (2.0 * lambda)) * inner;
    Ok(EdhCoeffs { a, b })
}

/// Moves particles (columns) with `dx/dλ = A_λ x + b_λ` under the schedule `λ(t)`,
/// i.e. `dx/dt = e^{−t}(A_{λ(t)} x + b_{λ(t)})`, from `t = 0` to `horizon`.
pub fn integrate_edh_particles(
    m: &LinearGaussianModel,
    particles: &Matrix,
    horizon: f64,
    ode: &OdeConfig,
) -> Result<Matrix> {
    let (n, count) = particles.shape();
    let rhs = |t: f64, y: &[f64]| -> Result<Vec<f64>> {
        let c = edh_coeffs(m, lambda_schedule(t))?;
        let x = Matrix::from_column_slice(n, count, y);
        let mut v = &c.a * x;
        for mut col in v.column_iter_mut() {
            col += &c.b;
        }
        Ok((v * lambda_rate(t)).as_slice().to_vec())
    };
    let out = integrate(rhs, particles.as_slice(), 0.0, horizon, ode, &mut NoHook)?;
    Ok(Matrix::from_vec(n, count, out.state))
}
