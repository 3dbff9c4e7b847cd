//! Gaussian and Gaussian-mixture parameterizations, densities and closed-form
//! oracles.
//!
//! Every symmetric matrix that enters a parameter type goes through
//! [`symmetrize`], so small asymmetry from ODE integration never leaks into a
//! factorization.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::quadrature::{map_particles, weighted_sum, ParticleSet};

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Relative asymmetry accepted by [`cholesky_factor`] before it refuses the input.
pub const SYMMETRY_TOL: f64 = 1e-8;

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

/// Largest entry of `|M − Mᵀ|`.
pub fn asymmetry(m: &Matrix) -> f64 {
    let mut worst = 0.0_f64;
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

fn check_square(m: &Matrix, n: usize) -> Result<()> {
    check_dim(n, m.nrows())?;
    check_dim(n, m.ncols())
}

fn check_symmetric(m: &Matrix) -> Result<()> {
    let scale = m.amax().max(1.0);
    let asym = asymmetry(m);
    if asym > SYMMETRY_TOL * scale || !asym.is_finite() {
        return Err(FlowError::NotSymmetric { asym });
    }
    Ok(())
}

fn cholesky(m: &Matrix) -> Result<Cholesky<f64, Dyn>> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(FlowError::NotPositiveDefinite);
    }
    Cholesky::new(m.clone()).ok_or(FlowError::NotPositiveDefinite)
}

/// Lower-triangular `L` with `L Lᵀ = cov` and a strictly positive diagonal.
pub fn cholesky_factor(cov: &Matrix) -> Result<Matrix> {
    if cov.nrows() != cov.ncols() {
        return Err(FlowError::DimensionMismatch {
            expected: cov.nrows(),
            found: cov.ncols(),
        });
    }
    check_symmetric(cov)?;
    let l = cholesky(&symmetrize(cov))?.unpack();
    if l.diagonal().iter().any(|d| *d <= 0.0) {
        return Err(FlowError::NotPositiveDefinite);
    }
    Ok(l)
}

/// Inverse of a symmetric positive definite matrix, symmetrized.
pub fn spd_inverse(m: &Matrix) -> Result<Matrix> {
    check_symmetric(m)?;
    Ok(symmetrize(&cholesky(&symmetrize(m))?.inverse()))
}

/// `log det` of a symmetric positive definite matrix.
pub fn spd_logdet(m: &Matrix) -> Result<f64> {
    let c = cholesky(&symmetrize(m))?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>())
}

/// `log Σ exp(v_i)` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Mean–covariance form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    mean: Vector,
    cov: Matrix,
}

impl GaussianParams {
    pub fn new(mean: Vector, cov: Matrix) -> Result<Self> {
        check_square(&cov, mean.len())?;
        check_symmetric(&cov)?;
        let cov = symmetrize(&cov);
        cholesky(&cov)?;
        Ok(Self { mean, cov })
    }

    pub fn standard(n: usize) -> Self {
        Self {
            mean: Vector::zeros(n),
            cov: Matrix::identity(n, n),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Matrix {
        &self.cov
    }

    pub fn to_precision(&self) -> Result<PrecisionParams> {
        Ok(PrecisionParams {
            mean: self.mean.clone(),
            prec: spd_inverse(&self.cov)?,
        })
    }

    pub fn to_sqrt(&self) -> Result<SqrtParams> {
        Ok(SqrtParams {
            mean: self.mean.clone(),
            factor: cholesky_factor(&self.cov)?,
        })
    }

    pub fn to_natural(&self) -> Result<NaturalGaussianParams> {
        let prec = spd_inverse(&self.cov)?;
        Ok(NaturalGaussianParams {
            gamma: &prec * &self.mean,
            big_gamma: prec * -0.5,
        })
    }

    pub fn density(&self) -> Result<GaussianDensity> {
        GaussianDensity::from_cov(self.mean.clone(), &self.cov)
    }

    pub fn logpdf(&self, x: &Vector) -> Result<f64> {
        gaussian_logpdf(x, self)
    }
}

/// Mean–precision form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionParams {
    pub(crate) mean: Vector,
    pub(crate) prec: Matrix,
}

impl PrecisionParams {
    pub fn new(mean: Vector, prec: Matrix) -> Result<Self> {
        check_square(&prec, mean.len())?;
        check_symmetric(&prec)?;
        let prec = symmetrize(&prec);
        cholesky(&prec)?;
        Ok(Self { mean, prec })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn prec(&self) -> &Matrix {
        &self.prec
    }

    pub fn to_gaussian(&self) -> Result<GaussianParams> {
        Ok(GaussianParams {
            mean: self.mean.clone(),
            cov: spd_inverse(&self.prec)?,
        })
    }

    pub fn density(&self) -> Result<GaussianDensity> {
        GaussianDensity::from_prec(self.mean.clone(), &self.prec)
    }
}

/// Mean and a square-root factor `L` with `L Lᵀ = Σ`.
///
/// Factors built by [`GaussianParams::to_sqrt`] are lower-triangular with a
/// positive diagonal. Factors propagated by `dL/dt = Ã L` stay valid square
/// roots but are in general no longer triangular.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqrtParams {
    pub(crate) mean: Vector,
    pub(crate) factor: Matrix,
}

impl SqrtParams {
    pub fn new(mean: Vector, factor: Matrix) -> Result<Self> {
        check_square(&factor, mean.len())?;
        if factor.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("square-root factor".into()));
        }
        Ok(Self { mean, factor })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn factor(&self) -> &Matrix {
        &self.factor
    }

    pub fn cov(&self) -> Matrix {
        symmetrize(&(&self.factor * self.factor.transpose()))
    }

    pub fn to_gaussian(&self) -> Result<GaussianParams> {
        GaussianParams::new(self.mean.clone(), self.cov())
    }
}

/// Natural parameters `γ = Σ⁻¹μ`, `Γ = −½Σ⁻¹`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NaturalGaussianParams {
    pub(crate) gamma: Vector,
    pub(crate) big_gamma: Matrix,
}

impl NaturalGaussianParams {
    pub fn new(gamma: Vector, big_gamma: Matrix) -> Result<Self> {
        check_square(&big_gamma, gamma.len())?;
        check_symmetric(&big_gamma)?;
        let big_gamma = symmetrize(&big_gamma);
        cholesky(&(-&big_gamma))?;
        Ok(Self { gamma, big_gamma })
    }

    pub fn gamma(&self) -> &Vector {
        &self.gamma
    }

    pub fn big_gamma(&self) -> &Matrix {
        &self.big_gamma
    }

    pub fn to_gaussian(&self) -> Result<GaussianParams> {
        let prec = &self.big_gamma * -2.0;
        let c = cholesky(&prec)?;
        Ok(GaussianParams {
            mean: c.solve(&self.gamma),
            cov: symmetrize(&c.inverse()),
        })
    }
}

#[derive(Debug, Clone)]
enum Factor {
    /// Cholesky factor of the covariance.
    Cov(Matrix),
    /// Cholesky factor of the precision.
    Prec(Matrix),
}

/// A Gaussian prepared for repeated density evaluation.
#[derive(Debug, Clone)]
pub struct GaussianDensity {
    mean: Vector,
    prec: Matrix,
    factor: Factor,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn from_cov(mean: Vector, cov: &Matrix) -> Result<Self> {
        check_square(cov, mean.len())?;
        let c = cholesky(&symmetrize(cov))?;
        let n = mean.len() as f64;
        let half_logdet: f64 = c.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        let prec = symmetrize(&c.inverse());
        Ok(Self {
            mean,
            prec,
            factor: Factor::Cov(c.unpack()),
            log_norm: -0.5 * n * LN_2PI - half_logdet,
        })
    }

    pub fn from_prec(mean: Vector, prec: &Matrix) -> Result<Self> {
        check_square(prec, mean.len())?;
        let prec = symmetrize(prec);
        let c = cholesky(&prec)?;
        let n = mean.len() as f64;
        let half_logdet: f64 = c.l_dirty().diagonal().iter().map(|d| d.ln()).sum();
        Ok(Self {
            mean,
            prec,
            factor: Factor::Prec(c.unpack()),
            log_norm: -0.5 * n * LN_2PI + half_logdet,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn prec(&self) -> &Matrix {
        &self.prec
    }

    /// `(x − μ)ᵀ Σ⁻¹ (x − μ)`.
    pub fn quad_form(&self, x: &Vector) -> f64 {
        let d = x - &self.mean;
        match &self.factor {
            Factor::Cov(l) => {
                let y = l
                    .solve_lower_triangular(&d)
                    .expect("cholesky factor has positive diagonal");
                y.norm_squared()
            }
            Factor::Prec(c) => (c.transpose() * d).norm_squared(),
        }
    }

    pub fn logpdf(&self, x: &Vector) -> f64 {
        self.log_norm - 0.5 * self.quad_form(x)
    }
}

/// Log-density with first and second derivatives, as needed by the flows.
pub trait LogDensity: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, x: &Vector) -> f64;
    fn grad_log_density(&self, x: &Vector) -> Vector;
    fn hess_log_density(&self, x: &Vector) -> Matrix;

    /// Log density at every particle.
    fn log_density_batch(&self, ps: &ParticleSet) -> Vec<f64> {
        (0..ps.len()).map(|j| self.log_density(&ps.position(j))).collect()
    }

    /// Log densities and gradients (as columns) on every particle, plus the
    /// weighted sum of Hessians.
    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        let vals = map_particles(ps, |x| Ok((self.log_density(x), self.grad_log_density(x), self.hess_log_density(x))))?;
        let n = ps.dim();
        let mut log = Vec::with_capacity(ps.len());
        let mut grads = Matrix::zeros(n, ps.len());
        let mut hs = Vec::with_capacity(ps.len());
        for (j, (l, g, h)) in vals.into_iter().enumerate() {
            log.push(l);
            grads.set_column(j, &g);
            hs.push(h);
        }
        Ok(BatchTerms {
            log,
            grads,
            expected_hess: weighted_sum(ps.weights(), &hs)?,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BatchTerms {
    pub log: Vec<f64>,
    pub grads: Matrix,
    pub expected_hess: Matrix,
}

/// `Σ_i c_i g_i g_iᵀ` over the columns of `g`.
fn column_gram(g: &Matrix, c: impl Fn(usize) -> f64) -> Matrix {
    let mut scaled = g.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= c(j);
    }
    &scaled * g.transpose()
}

impl GaussianDensity {
    /// Log densities and gradients on all columns of `x` in two matrix products.
    fn batch_log_grad(&self, x: &Matrix) -> (Vec<f64>, Matrix) {
        let mut d = x.clone();
        for mut col in d.column_iter_mut() {
            col -= &self.mean;
        }
        let g = -(&self.prec * &d);
        let log = d
            .column_iter()
            .zip(g.column_iter())
            .map(|(dc, gc)| self.log_norm + 0.5 * dc.dot(&gc))
            .collect();
        (log, g)
    }
}

impl LogDensity for GaussianDensity {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, x: &Vector) -> f64 {
        self.logpdf(x)
    }

    fn grad_log_density(&self, x: &Vector) -> Vector {
        -(&self.prec * (x - &self.mean))
    }

    fn hess_log_density(&self, _x: &Vector) -> Matrix {
        -&self.prec
    }

    fn log_density_batch(&self, ps: &ParticleSet) -> Vec<f64> {
        self.batch_log_grad(ps.positions()).0
    }

    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        check_dim(self.dim(), ps.dim())?;
        let (log, grads) = self.batch_log_grad(ps.positions());
        Ok(BatchTerms {
            log,
            grads,
            expected_hess: -&self.prec * ps.weights().sum(),
        })
    }
}

/// `log N(x; μ, Σ)`.
pub fn gaussian_logpdf(x: &Vector, g: &GaussianParams) -> Result<f64> {
    check_dim(g.dim(), x.len())?;
    Ok(g.density()?.logpdf(x))
}

/// Closed-form `KL(q ‖ p)` between two Gaussians, clamped at zero.
pub fn gaussian_kl(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    check_dim(p.dim(), q.dim())?;
    if q == p {
        return Ok(0.0);
    }
    let n = q.dim() as f64;
    let cp = cholesky(&p.cov)?;
    let trace = cp.solve(&q.cov).trace();
    let d = &p.mean - &q.mean;
    let maha = d.dot(&cp.solve(&d));
    let kl = 0.5 * (trace + maha - n + spd_logdet(&p.cov)? - spd_logdet(&q.cov)?);
    Ok(kl.max(0.0))
}

/// `(x − μ)ᵀ prec (x − μ)`.
pub fn mahalanobis(x: &Vector, mean: &Vector, prec: &Matrix) -> Result<f64> {
    check_dim(mean.len(), x.len())?;
    check_square(prec, mean.len())?;
    let d = x - mean;
    Ok(d.dot(&(prec * &d)).max(0.0))
}

/// Softmax of the log-odds.
pub fn weights_from_log_odds(log_odds: &Vector) -> Vector {
    let m = log_odds.max();
    let e = log_odds.map(|v| (v - m).exp());
    let s = e.sum();
    e / s
}

/// Log of the softmax of the log-odds.
pub fn log_weights_from_log_odds(log_odds: &Vector) -> Vector {
    let lse = log_sum_exp(log_odds.as_slice());
    log_odds.map(|v| v - lse)
}

/// `K` Gaussian components with log-odds weights, the last one pinned to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    components: Vec<GaussianParams>,
    log_odds: Vector,
}

impl MixtureParams {
    pub fn new(components: Vec<GaussianParams>, log_odds: Vector) -> Result<Self> {
        let k = components.len();
        if k == 0 {
            return Err(FlowError::InvalidArgument("mixture needs at least one component".into()));
        }
        check_dim(k, log_odds.len())?;
        if log_odds[k - 1] != 0.0 {
            return Err(FlowError::InvalidArgument("last log-odds entry must be 0".into()));
        }
        if log_odds.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("log-odds".into()));
        }
        let n = components[0].dim();
        for c in &components {
            check_dim(n, c.dim())?;
        }
        Ok(Self { components, log_odds })
    }

    /// Builds the log-odds `ln π_k − ln π_K` from positive weights.
    pub fn from_weights(components: Vec<GaussianParams>, weights: &[f64]) -> Result<Self> {
        check_dim(components.len(), weights.len())?;
        if weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(FlowError::InvalidArgument("weights must be positive".into()));
        }
        let last = weights[weights.len() - 1].ln();
        let mut eta = Vector::from_iterator(weights.len(), weights.iter().map(|w| w.ln() - last));
        let k = eta.len();
        eta[k - 1] = 0.0;
        Self::new(components, eta)
    }

    pub fn uniform(components: Vec<GaussianParams>) -> Result<Self> {
        let k = components.len();
        Self::new(components, Vector::zeros(k))
    }

    pub fn dim(&self) -> usize {
        self.components[0].dim()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn components(&self) -> &[GaussianParams] {
        &self.components
    }

    pub fn log_odds(&self) -> &Vector {
        &self.log_odds
    }

    pub fn weights(&self) -> Vector {
        weights_from_log_odds(&self.log_odds)
    }

    pub fn density(&self) -> Result<MixtureDensity> {
        let comps = self
            .components
            .iter()
            .map(|c| c.density())
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureDensity::new(comps, &self.log_odds))
    }

    pub fn logpdf(&self, x: &Vector) -> Result<f64> {
        mixture_logpdf(x, self)
    }
}

/// `log Σ_k π_k N(x; μ_k, Σ_k)`.
pub fn mixture_logpdf(x: &Vector, m: &MixtureParams) -> Result<f64> {
    check_dim(m.dim(), x.len())?;
    Ok(m.density()?.log_density(x))
}

/// A mixture prepared for repeated evaluation of `log q` and its derivatives.
#[derive(Debug, Clone)]
pub struct MixtureDensity {
    components: Vec<GaussianDensity>,
    log_weights: Vec<f64>,
}

impl MixtureDensity {
    pub fn new(components: Vec<GaussianDensity>, log_odds: &Vector) -> Self {
        let log_weights = log_weights_from_log_odds(log_odds).iter().cloned().collect();
        Self {
            components,
            log_weights,
        }
    }

    pub fn components(&self) -> &[GaussianDensity] {
        &self.components
    }

    fn joint_terms(&self, x: &Vector) -> Vec<f64> {
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| lw + c.logpdf(x))
            .collect()
    }

    /// Posterior component probabilities `r_k(x)`.
    pub fn responsibilities(&self, x: &Vector) -> Vec<f64> {
        let terms = self.joint_terms(x);
        let lse = log_sum_exp(&terms);
        terms.iter().map(|t| (t - lse).exp()).collect()
    }
}

impl LogDensity for MixtureDensity {
    fn dim(&self) -> usize {
        self.components[0].dim()
    }

    fn log_density(&self, x: &Vector) -> f64 {
        log_sum_exp(&self.joint_terms(x))
    }

    fn grad_log_density(&self, x: &Vector) -> Vector {
        let r = self.responsibilities(x);
        let mut g = Vector::zeros(x.len());
        for (c, rk) in self.components.iter().zip(r) {
            g.axpy(rk, &c.grad_log_density(x), 1.0);
        }
        g
    }

    fn hess_log_density(&self, x: &Vector) -> Matrix {
        let n = x.len();
        let r = self.responsibilities(x);
        let mut h = Matrix::zeros(n, n);
        let mut gbar = Vector::zeros(n);
        for (c, rk) in self.components.iter().zip(r) {
            let g = c.grad_log_density(x);
            h += (&g * g.transpose() - &c.prec) * rk;
            gbar.axpy(rk, &g, 1.0);
        }
        symmetrize(&(h - &gbar * gbar.transpose()))
    }

    fn log_density_batch(&self, ps: &ParticleSet) -> Vec<f64> {
        let per: Vec<Vec<f64>> = self.components.iter().map(|c| c.batch_log_grad(ps.positions()).0).collect();
        (0..ps.len())
            .map(|j| {
                let terms: Vec<f64> = per.iter().zip(&self.log_weights).map(|(l, lw)| lw + l[j]).collect();
                log_sum_exp(&terms)
            })
            .collect()
    }

    /// `E[∇² log q] = Σ_k (E[r_k g_k g_kᵀ] − E[r_k] P_k) − E[ḡ ḡᵀ]`.
    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        check_dim(self.dim(), ps.dim())?;
        let m = ps.len();
        let w = ps.weights();
        let per: Vec<(Vec<f64>, Matrix)> = self.components.iter().map(|c| c.batch_log_grad(ps.positions())).collect();
        let mut log = Vec::with_capacity(m);
        let mut resp = vec![vec![0.0; m]; self.components.len()];
        for j in 0..m {
            let terms: Vec<f64> = per.iter().zip(&self.log_weights).map(|((l, _), lw)| lw + l[j]).collect();
            let lse = log_sum_exp(&terms);
            for (k, t) in terms.iter().enumerate() {
                resp[k][j] = (t - lse).exp();
            }
            log.push(lse);
        }
        let n = self.dim();
        let mut grads = Matrix::zeros(n, m);
        let mut hess = Matrix::zeros(n, n);
        for ((c, (_, g)), r) in self.components.iter().zip(&per).zip(&resp) {
            for (j, mut col) in grads.column_iter_mut().enumerate() {
                col.axpy(r[j], &g.column(j), 1.0);
            }
            hess += column_gram(g, |j| w[j] * r[j]);
            let mass: f64 = w.iter().zip(r).map(|(wi, ri)| wi * ri).sum();
            hess -= &c.prec * mass;
        }
        hess -= column_gram(&grads, |j| w[j]);
        Ok(BatchTerms {
            log,
            grads,
            expected_hess: symmetrize(&hess),
        })
    }
}
