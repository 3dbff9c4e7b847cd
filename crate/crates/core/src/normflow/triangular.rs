use serde::{Deserialize, Serialize};

use super::{Layer, LayerEval};
use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{Matrix, Vector};

/// `F(u) = Bu + b + exp(Lu + l) ⊙ u` with `B`, `L` strictly lower triangular.
///
/// The Jacobian is lower triangular with diagonal `exp(Lu + l)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TriangularJson", into = "TriangularJson")]
pub struct TriangularParams {
    big_b: Matrix,
    big_l: Matrix,
    b: Vector,
    l: Vector,
}

#[allow(non_snake_case)]
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TriangularJson {
    B: Vec<Vec<f64>>,
    L: Vec<Vec<f64>>,
    b: Vec<f64>,
    l: Vec<f64>,
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(r: &[Vec<f64>], n: usize) -> Result<Matrix> {
    check_dim(n, r.len())?;
    for row in r {
        check_dim(n, row.len())?;
    }
    Ok(Matrix::from_fn(n, n, |i, j| r[i][j]))
}

impl From<TriangularParams> for TriangularJson {
    fn from(t: TriangularParams) -> Self {
        Self {
            B: rows(&t.big_b),
            L: rows(&t.big_l),
            b: t.b.as_slice().to_vec(),
            l: t.l.as_slice().to_vec(),
        }
    }
}

impl TryFrom<TriangularJson> for TriangularParams {
    type Error = FlowError;

    fn try_from(j: TriangularJson) -> Result<Self> {
        let n = j.b.len();
        TriangularParams::new(from_rows(&j.B, n)?, from_rows(&j.L, n)?, Vector::from_vec(j.b), Vector::from_vec(j.l))
    }
}

fn strictly_lower(m: &Matrix) -> bool {
    (0..m.nrows()).all(|i| (i..m.ncols()).all(|j| m[(i, j)] == 0.0))
}

impl TriangularParams {
    pub fn new(big_b: Matrix, big_l: Matrix, b: Vector, l: Vector) -> Result<Self> {
        let n = b.len();
        check_dim(n, l.len())?;
        for m in [&big_b, &big_l] {
            check_dim(n, m.nrows())?;
            check_dim(n, m.ncols())?;
            if !strictly_lower(m) {
                return Err(FlowError::InvalidArgument("triangular map needs strictly lower B and L".into()));
            }
        }
        Ok(Self { big_b, big_l, b, l })
    }

    pub fn identity(n: usize) -> Self {
        Self {
            big_b: Matrix::zeros(n, n),
            big_l: Matrix::zeros(n, n),
            b: Vector::zeros(n),
            l: Vector::zeros(n),
        }
    }

    /// Raw layout: strictly lower entries of `B` row by row, then those of `L`, then `b`, then `l`.
    pub fn from_raw(n: usize, theta: &[f64]) -> Self {
        let mut t = Self::identity(n);
        t.set_params(theta);
        t
    }

    pub fn big_b(&self) -> &Matrix {
        &self.big_b
    }

    pub fn big_l(&self) -> &Matrix {
        &self.big_l
    }

    pub fn shift(&self) -> &Vector {
        &self.b
    }

    pub fn log_scale(&self) -> &Vector {
        &self.l
    }

    fn exponent(&self, u: &Vector) -> Vector {
        &self.big_l * u + &self.l
    }

    /// `F⁻¹(x)` by forward substitution.
    pub fn inverse(&self, x: &Vector) -> Result<Vector> {
        let n = self.b.len();
        check_dim(n, x.len())?;
        let mut u = Vector::zeros(n);
        for i in 0..n {
            let mut lin = self.b[i];
            let mut e = self.l[i];
            for j in 0..i {
                lin += self.big_b[(i, j)] * u[j];
                e += self.big_l[(i, j)] * u[j];
            }
            u[i] = (x[i] - lin) * (-e).exp();
        }
        if u.iter().all(|v| v.is_finite()) {
            Ok(u)
        } else {
            Err(FlowError::NonFiniteValue("triangular inverse".into()))
        }
    }
}

fn lower_count(n: usize) -> usize {
    n * (n - 1) / 2
}

impl Layer for TriangularParams {
    fn dim(&self) -> usize {
        self.b.len()
    }

    fn n_params(&self) -> usize {
        let n = self.b.len();
        2 * lower_count(n) + 2 * n
    }

    fn params(&self) -> Vector {
        let n = self.b.len();
        let mut v = Vec::with_capacity(self.n_params());
        for m in [&self.big_b, &self.big_l] {
            for i in 0..n {
                for j in 0..i {
                    v.push(m[(i, j)]);
                }
            }
        }
        v.extend(self.b.iter());
        v.extend(self.l.iter());
        Vector::from_vec(v)
    }

    fn set_params(&mut self, theta: &[f64]) {
        let n = self.b.len();
        assert_eq!(theta.len(), self.n_params());
        let mut k = 0;
        for m in [&mut self.big_b, &mut self.big_l] {
            for i in 0..n {
                for j in 0..i {
                    m[(i, j)] = theta[k];
                    k += 1;
                }
            }
        }
        self.b.copy_from_slice(&theta[k..k + n]);
        self.l.copy_from_slice(&theta[k + n..k + 2 * n]);
    }

    fn forward(&self, u: &Vector) -> (Vector, f64) {
        let e = self.exponent(u);
        let x = &self.big_b * u + &self.b + e.map(f64::exp).component_mul(u);
        (x, e.sum())
    }

    fn eval(&self, u: &Vector) -> LayerEval {
        let n = self.b.len();
        let e = self.exponent(u);
        let s = e.map(f64::exp);
        let su = s.component_mul(u);
        let x = &self.big_b * u + &self.b + &su;
        let jac = &self.big_b + Matrix::from_diagonal(&s) + Matrix::from_diagonal(&su) * &self.big_l;
        // Σ_i L_ik, the column sums of L
        let log_det_grad_u = self.big_l.row_sum().transpose();

        let p = self.n_params();
        let lc = lower_count(n);
        let mut param_jac = Matrix::zeros(n, p);
        let mut log_det_grad_params = Vector::zeros(p);
        let mut k = 0;
        for i in 0..n {
            for j in 0..i {
                param_jac[(i, k)] = u[j];
                param_jac[(i, lc + k)] = su[i] * u[j];
                log_det_grad_params[lc + k] = u[j];
                k += 1;
            }
        }
        for i in 0..n {
            param_jac[(i, 2 * lc + i)] = 1.0;
            param_jac[(i, 2 * lc + n + i)] = su[i];
            log_det_grad_params[2 * lc + n + i] = 1.0;
        }

        LayerEval {
            x,
            log_det: e.sum(),
            jac,
            log_det_grad_u,
            param_jac,
            log_det_grad_params,
        }
    }

    fn invertible(&self) -> bool {
        strictly_lower(&self.big_b) && strictly_lower(&self.big_l)
    }
}
