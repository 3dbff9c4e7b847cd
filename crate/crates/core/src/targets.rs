//! Target models `log p(x, z)` with analytic derivatives, plus closed-form
//! posteriors used as oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, check_finite, FlowError, Result};
use crate::gaussian::{
    log_sum_exp, symmetrize, BatchTerms, GaussianDensity, GaussianParams, LogDensity, Matrix, MixtureDensity,
    MixtureParams, Vector,
};
use crate::quadrature::{map_particles, try_expect, ParticleSet};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Points closer than this to the origin are singular for [`RangeModel`].
pub const RANGE_SINGULAR_RADIUS: f64 = 1e-8;

/// An evaluable (possibly unnormalized) joint density `p(x, z)` for a fixed observation.
pub trait TargetModel: Sync {
    fn dim(&self) -> usize;

    fn log_joint(&self, x: &Vector) -> Result<f64>;

    fn has_grad(&self) -> bool {
        false
    }

    fn has_hess(&self) -> bool {
        false
    }

    fn grad_log_joint(&self, _x: &Vector) -> Result<Vector> {
        Err(FlowError::Unsupported("gradient"))
    }

    fn hess_log_joint(&self, _x: &Vector) -> Result<Matrix> {
        Err(FlowError::Unsupported("hessian"))
    }

    /// `Σ_i w_i ∇² log p(x_i, z)`. Models with cheap structure override this.
    fn expected_hess(&self, ps: &ParticleSet) -> Result<Matrix> {
        try_expect(ps, |x| self.hess_log_joint(x))
    }

    /// Log joint at every particle.
    fn log_joint_batch(&self, ps: &ParticleSet) -> Result<Vec<f64>> {
        map_particles(ps, |x| self.log_joint(x))
    }

    /// Log joint and gradient (as columns) at every particle, plus [`Self::expected_hess`].
    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        let vals = map_particles(ps, |x| Ok((self.log_joint(x)?, self.grad_log_joint(x)?)))?;
        let mut grads = Matrix::zeros(ps.dim(), ps.len());
        let log = vals
            .into_iter()
            .enumerate()
            .map(|(j, (v, g))| {
                grads.set_column(j, &g);
                v
            })
            .collect();
        Ok(BatchTerms {
            log,
            grads,
            expected_hess: self.expected_hess(ps)?,
        })
    }
}

impl<T: TargetModel + ?Sized> TargetModel for &T {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn log_joint(&self, x: &Vector) -> Result<f64> {
        (**self).log_joint(x)
    }
    fn has_grad(&self) -> bool {
        (**self).has_grad()
    }
    fn has_hess(&self) -> bool {
        (**self).has_hess()
    }
    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        (**self).grad_log_joint(x)
    }
    fn hess_log_joint(&self, x: &Vector) -> Result<Matrix> {
        (**self).hess_log_joint(x)
    }
    fn expected_hess(&self, ps: &ParticleSet) -> Result<Matrix> {
        (**self).expected_hess(ps)
    }
    fn log_joint_batch(&self, ps: &ParticleSet) -> Result<Vec<f64>> {
        (**self).log_joint_batch(ps)
    }
    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        (**self).batch_terms(ps)
    }
}

fn check_square(m: &Matrix, n: usize) -> Result<()> {
    check_dim(n, m.nrows())?;
    check_dim(n, m.ncols())
}

/// Gaussian prior, linear observation `z = Hx + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct LinearGaussianModel {
    pub prior_mean: Vector,
    pub prior_cov: Matrix,
    pub obs_matrix: Matrix,
    pub obs_cov: Matrix,
    pub z: Vector,
    prior: GaussianDensity,
    noise: GaussianDensity,
    info: Matrix,
}

impl LinearGaussianModel {
    pub fn new(prior_mean: Vector, prior_cov: Matrix, obs_matrix: Matrix, obs_cov: Matrix, z: Vector) -> Result<Self> {
        let n = prior_mean.len();
        let m = z.len();
        check_square(&prior_cov, n)?;
        check_square(&obs_cov, m)?;
        check_dim(m, obs_matrix.nrows())?;
        check_dim(n, obs_matrix.ncols())?;
        let prior = GaussianDensity::from_cov(prior_mean.clone(), &prior_cov)?;
        let noise = GaussianDensity::from_cov(Vector::zeros(m), &obs_cov)?;
        let info = symmetrize(&(obs_matrix.transpose() * noise.prec() * &obs_matrix));
        Ok(Self {
            prior_mean,
            prior_cov: symmetrize(&prior_cov),
            obs_matrix,
            obs_cov: symmetrize(&obs_cov),
            z,
            prior,
            noise,
            info,
        })
    }

    pub fn prior(&self) -> GaussianParams {
        GaussianParams::new(self.prior_mean.clone(), self.prior_cov.clone()).expect("validated prior")
    }

    pub fn prior_prec(&self) -> &Matrix {
        self.prior.prec()
    }

    pub fn obs_prec(&self) -> &Matrix {
        self.noise.prec()
    }

    /// `Hᵀ R⁻¹ H`.
    pub fn info_matrix(&self) -> &Matrix {
        &self.info
    }

    /// `log p(z)` in closed form.
    pub fn log_evidence(&self) -> Result<f64> {
        let s = &self.obs_cov + &self.obs_matrix * &self.prior_cov * self.obs_matrix.transpose();
        let pred = GaussianDensity::from_cov(&self.obs_matrix * &self.prior_mean, &s)?;
        Ok(pred.logpdf(&self.z))
    }
}

impl TargetModel for LinearGaussianModel {
    fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    fn log_joint(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let v = self.prior.logpdf(x) + self.noise.logpdf(&(&self.z - &self.obs_matrix * x));
        check_finite(v, "linear-Gaussian log joint")
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let resid = &self.z - &self.obs_matrix * x;
        Ok(self.prior.grad_log_density(x) + self.obs_matrix.transpose() * (self.noise.prec() * resid))
    }

    fn hess_log_joint(&self, _x: &Vector) -> Result<Matrix> {
        Ok(-(self.prior.prec() + &self.info))
    }

    fn expected_hess(&self, _ps: &ParticleSet) -> Result<Matrix> {
        self.hess_log_joint(&self.prior_mean)
    }
}

/// Gaussian-mixture prior with a linear-Gaussian observation.
#[derive(Debug, Clone)]
pub struct MixturePriorLinearModel {
    pub prior: MixtureParams,
    pub obs_matrix: Matrix,
    pub obs_cov: Matrix,
    pub z: Vector,
    prior_density: MixtureDensity,
    noise: GaussianDensity,
    info: Matrix,
}

impl MixturePriorLinearModel {
    pub fn new(prior: MixtureParams, obs_matrix: Matrix, obs_cov: Matrix, z: Vector) -> Result<Self> {
        let n = prior.dim();
        let m = z.len();
        check_square(&obs_cov, m)?;
        check_dim(m, obs_matrix.nrows())?;
        check_dim(n, obs_matrix.ncols())?;
        let prior_density = prior.density()?;
        let noise = GaussianDensity::from_cov(Vector::zeros(m), &obs_cov)?;
        let info = symmetrize(&(obs_matrix.transpose() * noise.prec() * &obs_matrix));
        Ok(Self {
            prior,
            obs_matrix,
            obs_cov: symmetrize(&obs_cov),
            z,
            prior_density,
            noise,
            info,
        })
    }
}

impl TargetModel for MixturePriorLinearModel {
    fn dim(&self) -> usize {
        self.prior.dim()
    }

    fn log_joint(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let v = self.prior_density.log_density(x) + self.noise.logpdf(&(&self.z - &self.obs_matrix * x));
        check_finite(v, "mixture-prior log joint")
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let resid = &self.z - &self.obs_matrix * x;
        Ok(self.prior_density.grad_log_density(x) + self.obs_matrix.transpose() * (self.noise.prec() * resid))
    }

    fn hess_log_joint(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.dim(), x.len())?;
        Ok(self.prior_density.hess_log_density(x) - &self.info)
    }
}

/// Gaussian prior with a scalar range measurement `z = ‖x‖ + v`, `v ~ N(0, R)`.
#[derive(Debug, Clone)]
pub struct RangeModel {
    pub prior_mean: Vector,
    pub prior_cov: Matrix,
    pub obs_var: f64,
    pub z: f64,
    prior: GaussianDensity,
}

impl RangeModel {
    pub fn new(prior_mean: Vector, prior_cov: Matrix, obs_var: f64, z: f64) -> Result<Self> {
        if !(obs_var > 0.0) || !obs_var.is_finite() {
            return Err(FlowError::InvalidArgument("range noise variance must be positive".into()));
        }
        check_finite(z, "range observation")?;
        let prior = GaussianDensity::from_cov(prior_mean.clone(), &prior_cov)?;
        Ok(Self {
            prior_mean,
            prior_cov: symmetrize(&prior_cov),
            obs_var,
            z,
            prior,
        })
    }

    pub fn prior(&self) -> GaussianParams {
        GaussianParams::new(self.prior_mean.clone(), self.prior_cov.clone()).expect("validated prior")
    }
}

impl TargetModel for RangeModel {
    fn dim(&self) -> usize {
        self.prior_mean.len()
    }

    fn log_joint(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let r = x.norm();
        let lik = -0.5 * (LN_2PI + self.obs_var.ln()) - (self.z - r).powi(2) / (2.0 * self.obs_var);
        check_finite(self.prior.logpdf(x) + lik, "range log joint")
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let r = x.norm();
        if r < RANGE_SINGULAR_RADIUS {
            return Err(FlowError::SingularPoint);
        }
        Ok(self.prior.grad_log_density(x) + x * ((self.z - r) / (self.obs_var * r)))
    }

    fn hess_log_joint(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.dim(), x.len())?;
        let n = x.len();
        let r = x.norm();
        if r < RANGE_SINGULAR_RADIUS {
            return Err(FlowError::SingularPoint);
        }
        let u = x / r;
        let uu = &u * u.transpose();
        let curvature = (Matrix::identity(n, n) - &uu) / r;
        let lik = (curvature * (self.z - r) - uu) / self.obs_var;
        Ok(symmetrize(&(self.prior.hess_log_density(x) + lik)))
    }
}

pub(crate) fn sigmoid(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(s: f64) -> f64 {
    s.max(0.0) + (-s.abs()).exp().ln_1p()
}

/// `(softplus(s), sigmoid(s))` sharing one exponential.
fn softplus_sigmoid(s: f64) -> (f64, f64) {
    let e = (-s.abs()).exp();
    let sig = if s >= 0.0 { 1.0 / (1.0 + e) } else { e / (1.0 + e) };
    (s.max(0.0) + e.ln_1p(), sig)
}

/// Bayesian logistic regression with an improper flat prior (unnormalized posterior).
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegressionModel {
    /// One datum per row.
    pub features: Matrix,
    pub labels: Vec<f64>,
    /// Coefficients used to generate synthetic labels, if known.
    pub truth: Option<Vector>,
}

impl LogisticRegressionModel {
    pub fn new(features: Matrix, labels: Vec<f64>) -> Result<Self> {
        check_dim(features.nrows(), labels.len())?;
        if labels.iter().any(|z| *z != 0.0 && *z != 1.0) {
            return Err(FlowError::InvalidArgument("labels must be 0 or 1".into()));
        }
        Ok(Self {
            features,
            labels,
            truth: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// CSV with header `y_1,...,y_n,z`; features in 17 significant digits.
    pub fn to_csv(&self) -> String {
        let n = self.features.ncols();
        let mut out = String::new();
        let header: Vec<String> = (1..=n).map(|i| format!("y_{i}")).chain(std::iter::once("z".into())).collect();
        out.push_str(&header.join(","));
        out.push('\n');
        for (i, z) in self.labels.iter().enumerate() {
            for j in 0..n {
                out.push_str(&format!("{:.16e},", self.features[(i, j)]));
            }
            out.push_str(if *z == 1.0 { "1\n" } else { "0\n" });
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines
            .next()
            .ok_or_else(|| FlowError::InvalidArgument("empty dataset".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        let n = cols.len().saturating_sub(1);
        let expected: Vec<String> = (1..=n).map(|i| format!("y_{i}")).chain(std::iter::once("z".into())).collect();
        if n == 0 || cols != expected {
            return Err(FlowError::InvalidArgument(format!("bad dataset header `{header}`")));
        }
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for (row, line) in lines.enumerate() {
            let vals: Vec<&str> = line.split(',').map(str::trim).collect();
            if vals.len() != n + 1 {
                return Err(FlowError::InvalidArgument(format!("row {} has {} fields", row + 1, vals.len())));
            }
            for v in &vals[..n] {
                data.push(
                    v.parse::<f64>()
                        .map_err(|e| FlowError::InvalidArgument(format!("row {}: {e}", row + 1)))?,
                );
            }
            labels.push(
                vals[n]
                    .parse::<f64>()
                    .map_err(|e| FlowError::InvalidArgument(format!("row {}: {e}", row + 1)))?,
            );
        }
        let features = Matrix::from_row_slice(labels.len(), n, &data);
        Self::new(features, labels)
    }

    fn scores(&self, x: &Vector) -> Vector {
        &self.features * x
    }
}

impl TargetModel for LogisticRegressionModel {
    fn dim(&self) -> usize {
        self.features.ncols()
    }

    fn log_joint(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim(), x.len())?;
        let s = self.scores(x);
        let v: f64 = s.iter().zip(&self.labels).map(|(s, z)| z * s - softplus(*s)).sum();
        check_finite(v, "logistic log joint")
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim(), x.len())?;
        let s = self.scores(x);
        let resid = Vector::from_iterator(s.len(), s.iter().zip(&self.labels).map(|(s, z)| z - sigmoid(*s)));
        Ok(self.features.transpose() * resid)
    }

    fn hess_log_joint(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.dim(), x.len())?;
        let s = self.scores(x);
        let c = s.map(|s| {
            let p = sigmoid(s);
            p * (1.0 - p)
        });
        Ok(self.weighted_gram(&c))
    }

    fn expected_hess(&self, ps: &ParticleSet) -> Result<Matrix> {
        // scores for all particles at once, one datum per row
        let s = &self.features * ps.positions();
        let c = s.map(|s| {
            let p = sigmoid(s);
            p * (1.0 - p)
        }) * ps.weights();
        if c.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("logistic curvature".into()));
        }
        Ok(self.weighted_gram(&c))
    }

    fn log_joint_batch(&self, ps: &ParticleSet) -> Result<Vec<f64>> {
        check_dim(self.dim(), ps.dim())?;
        let s = &self.features * ps.positions();
        s.column_iter()
            .map(|col| {
                let v: f64 = col.iter().zip(&self.labels).map(|(s, z)| z * s - softplus(*s)).sum();
                check_finite(v, "logistic log joint")
            })
            .collect()
    }

    fn batch_terms(&self, ps: &ParticleSet) -> Result<BatchTerms> {
        check_dim(self.dim(), ps.dim())?;
        // one datum per row, one particle per column
        let mut s = &self.features * ps.positions();
        let w = ps.weights();
        let mut log = vec![0.0; ps.len()];
        let mut curv = Vector::zeros(self.labels.len());
        for (j, mut col) in s.column_iter_mut().enumerate() {
            let mut v = 0.0;
            for ((si, z), c) in col.iter_mut().zip(&self.labels).zip(curv.iter_mut()) {
                let (sp, sig) = softplus_sigmoid(*si);
                v += z * *si - sp;
                *c += w[j] * sig * (1.0 - sig);
                *si = z - sig;
            }
            log[j] = check_finite(v, "logistic log joint")?;
        }
        if curv.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("logistic curvature".into()));
        }
        Ok(BatchTerms {
            log,
            grads: self.features.transpose() * s,
            expected_hess: self.weighted_gram(&curv),
        })
    }
}

impl LogisticRegressionModel {
    /// `−Yᵀ diag(c) Y`.
    fn weighted_gram(&self, c: &Vector) -> Matrix {
        let mut scaled = self.features.clone();
        for (mut row, ci) in scaled.row_iter_mut().zip(c.iter()) {
            row *= *ci;
        }
        symmetrize(&(-(self.features.transpose() * scaled)))
    }
}

/// Synthetic two-class data: `x* ~ N(0, I)`, `y_i ~ N(0, I)`, `z_i ~ Bernoulli(σ(y_iᵀx*))`.
pub fn generate_logreg_dataset(n: usize, count: usize, seed: u64) -> Result<LogisticRegressionModel> {
    if count == 0 || n == 0 {
        return Err(FlowError::InvalidArgument("dataset needs n >= 1 and N >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth = Vector::from_fn(n, |_, _| rng.sample(StandardNormal));
    let mut features = Matrix::zeros(count, n);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        for j in 0..n {
            features[(i, j)] = rng.sample(StandardNormal);
        }
        let s = features.row(i).transpose().dot(&truth);
        let u: f64 = rng.gen();
        labels.push(if u < sigmoid(s) { 1.0 } else { 0.0 });
    }
    let mut model = LogisticRegressionModel::new(features, labels)?;
    model.truth = Some(truth);
    Ok(model)
}

/// `p(x) = N(x₁; 0, 9) Π_{i≥2} N(x_i; 0, e^{x₁})`, unnormalized posterior without observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FunnelModel {
    pub dim: usize,
}

impl FunnelModel {
    pub const TOP_VAR: f64 = 9.0;

    pub fn new(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(FlowError::InvalidArgument("funnel needs dim >= 2".into()));
        }
        Ok(Self { dim })
    }

    /// `e^{−x₁} Σ_{i≥2} x_i²`, formed in log space.
    fn scaled_tail(x: &Vector) -> f64 {
        let s: f64 = x.iter().skip(1).map(|v| v * v).sum();
        if s == 0.0 {
            0.0
        } else {
            (s.ln() - x[0]).exp()
        }
    }
}

impl TargetModel for FunnelModel {
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_joint(&self, x: &Vector) -> Result<f64> {
        check_dim(self.dim, x.len())?;
        let m = (self.dim - 1) as f64;
        let top = -0.5 * (LN_2PI + Self::TOP_VAR.ln()) - x[0] * x[0] / (2.0 * Self::TOP_VAR);
        let tail = -0.5 * m * (LN_2PI + x[0]) - 0.5 * Self::scaled_tail(x);
        check_finite(top + tail, "funnel log joint")
    }

    fn has_grad(&self) -> bool {
        true
    }

    fn has_hess(&self) -> bool {
        true
    }

    fn grad_log_joint(&self, x: &Vector) -> Result<Vector> {
        check_dim(self.dim, x.len())?;
        let m = (self.dim - 1) as f64;
        let inv = (-x[0]).exp();
        let mut g = x.map(|v| -v * inv);
        g[0] = -x[0] / Self::TOP_VAR - 0.5 * m + 0.5 * Self::scaled_tail(x);
        if g.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("funnel gradient".into()));
        }
        Ok(g)
    }

    fn hess_log_joint(&self, x: &Vector) -> Result<Matrix> {
        check_dim(self.dim, x.len())?;
        let inv = (-x[0]).exp();
        let mut h = Matrix::zeros(self.dim, self.dim);
        h[(0, 0)] = -1.0 / Self::TOP_VAR - 0.5 * Self::scaled_tail(x);
        for i in 1..self.dim {
            h[(i, i)] = -inv;
            h[(0, i)] = x[i] * inv;
            h[(i, 0)] = x[i] * inv;
        }
        if h.iter().any(|v| !v.is_finite()) {
            return Err(FlowError::NonFiniteValue("funnel hessian".into()));
        }
        Ok(h)
    }
}

/// Exact posterior of a linear-Gaussian model.
pub fn kalman_posterior(m: &LinearGaussianModel) -> Result<GaussianParams> {
    kalman_update(&m.prior_mean, &m.prior_cov, &m.obs_matrix, &m.obs_cov, &m.z)
}

fn kalman_update(mean: &Vector, cov: &Matrix, h: &Matrix, r: &Matrix, z: &Vector) -> Result<GaussianParams> {
    let s = symmetrize(&(r + h * cov * h.transpose()));
    let chol = nalgebra::Cholesky::new(s).ok_or(FlowError::NotPositiveDefinite)?;
    let hp = h * cov;
    // K = P Hᵀ S⁻¹ = (S⁻¹ H P)ᵀ
    let gain = chol.solve(&hp).transpose();
    let post_mean = mean + &gain * (z - h * mean);
    let post_cov = symmetrize(&(cov - &gain * hp));
    GaussianParams::new(post_mean, post_cov)
}

/// Exact posterior mixture of a mixture-prior linear-Gaussian model.
pub fn gmm_posterior_analytic(m: &MixturePriorLinearModel) -> Result<MixtureParams> {
    let prior_w = m.prior.weights();
    let mut comps = Vec::with_capacity(m.prior.len());
    let mut logw = Vec::with_capacity(m.prior.len());
    for (k, c) in m.prior.components().iter().enumerate() {
        comps.push(kalman_update(c.mean(), c.cov(), &m.obs_matrix, &m.obs_cov, &m.z)?);
        let s = &m.obs_cov + &m.obs_matrix * c.cov() * m.obs_matrix.transpose();
        let pred = GaussianDensity::from_cov(&m.obs_matrix * c.mean(), &s)?;
        logw.push(prior_w[k].ln() + pred.logpdf(&m.z));
    }
    let lse = log_sum_exp(&logw);
    let last = logw[logw.len() - 1];
    let mut eta = Vector::from_iterator(logw.len(), logw.iter().map(|l| l - last));
    let k = eta.len();
    eta[k - 1] = 0.0;
    debug_assert!(lse.is_finite());
    MixtureParams::new(comps, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    pub(crate) fn reference_linear(z_from: &Vector) -> LinearGaussianModel {
        let h = dmatrix![1.0, 1.5; 0.2, 2.0];
        LinearGaussianModel::new(
            dvector![0.0, 0.0],
            dmatrix![1.5, 0.5; 0.5, 5.5],
            h.clone(),
            dmatrix![0.2, 0.1; 0.1, 0.2],
            &h * z_from,
        )
        .unwrap()
    }

    fn fd_grad(m: &dyn TargetModel, x: &Vector, h: f64) -> Vector {
        Vector::from_fn(x.len(), |i, _| {
            let mut xp = x.clone();
            let mut xm = x.clone();
            xp[i] += h;
            xm[i] -= h;
            (m.log_joint(&xp).unwrap() - m.log_joint(&xm).unwrap()) / (2.0 * h)
        })
    }

    fn rel_err(a: &Vector, b: &Vector) -> f64 {
        (a - b).amax() / b.amax().max(1.0)
    }

    #[test]
    fn linear_log_joint_at_prior_mean() {
        let m = reference_linear(&dvector![0.0, 0.0]);
        let p = m.prior_cov.clone() * (2.0 * std::f64::consts::PI);
        let r = m.obs_cov.clone() * (2.0 * std::f64::consts::PI);
        let expect = -0.5 * p.determinant().ln() - 0.5 * r.determinant().ln();
        assert!((m.log_joint(&m.prior_mean).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn linear_hessian_is_constant() {
        let m = reference_linear(&dvector![-1.18, 4.12]);
        let p_inv = m.prior_cov.clone().try_inverse().unwrap();
        let r_inv = m.obs_cov.clone().try_inverse().unwrap();
        let expect = -(p_inv + m.obs_matrix.transpose() * r_inv * &m.obs_matrix);
        for x in [dvector![0.0, 0.0], dvector![3.0, -7.0]] {
            assert!((m.hess_log_joint(&x).unwrap() - &expect).amax() < 1e-12);
        }
    }

    #[test]
    fn logistic_single_datum() {
        for label in [0.0, 1.0] {
            let m = LogisticRegressionModel::new(Matrix::zeros(1, 3), vec![label]).unwrap();
            let v = m.log_joint(&dvector![0.3, -2.0, 5.0]).unwrap();
            assert!((v - 0.5f64.ln()).abs() < 1e-15);
        }
        assert!(LogisticRegressionModel::new(Matrix::zeros(1, 1), vec![0.5]).is_err());
    }

    #[test]
    fn funnel_at_origin() {
        let f = FunnelModel::new(30).unwrap();
        let x = Vector::zeros(30);
        let n0 = -0.5 * (LN_2PI + 9f64.ln());
        let expect = n0 + 29.0 * (-0.5 * LN_2PI);
        assert!((f.log_joint(&x).unwrap() - expect).abs() < 1e-12);
        let g = f.grad_log_joint(&x).unwrap();
        assert!((g[0] + 14.5).abs() < 1e-15);
        assert!((fd_grad(&f, &x, 1e-5)[0] + 14.5).abs() < 1e-6);
        assert!(f.log_joint(&Vector::from_element(30, 1.0).map(|v| v * 800.0)).is_ok());
        assert!(FunnelModel::new(1).is_err());
    }

    #[test]
    fn range_singular_at_origin() {
        let m = RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.6).unwrap();
        assert!(m.log_joint(&dvector![0.0, 0.0]).is_ok());
        assert_eq!(m.grad_log_joint(&dvector![0.0, 0.0]), Err(FlowError::SingularPoint));
        assert_eq!(m.hess_log_joint(&dvector![1e-9, 0.0]), Err(FlowError::SingularPoint));
    }

    fn all_models() -> Vec<Box<dyn TargetModel>> {
        let gmm_prior = MixtureParams::uniform(
            [(5.0, 5.0), (-5.0, 5.0), (5.0, -5.0), (-5.0, -5.0)]
                .iter()
                .map(|(a, b)| GaussianParams::new(dvector![*a, *b], Matrix::identity(2, 2) * 5.0).unwrap())
                .collect(),
        )
        .unwrap();
        vec![
            Box::new(reference_linear(&dvector![-1.18, 4.12])),
            Box::new(
                MixturePriorLinearModel::new(
                    gmm_prior,
                    dmatrix![2.0, -0.2; 0.3, 2.5],
                    dmatrix![170.0, 64.0; 64.0, 230.0],
                    dvector![5.0, 4.975],
                )
                .unwrap(),
            ),
            Box::new(RangeModel::new(dvector![1.0, 1.0], dmatrix![5.5, -1.5; -1.5, 5.5], 2.0, 5.63).unwrap()),
            Box::new(generate_logreg_dataset(2, 40, 9).unwrap()),
            Box::new(FunnelModel::new(4).unwrap()),
        ]
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for (mi, model) in all_models().iter().enumerate() {
            let n = model.dim();
            for _ in 0..100 {
                let x = Vector::from_fn(n, |_, _| 2.0 * rng.sample::<f64, _>(StandardNormal));
                let g = model.grad_log_joint(&x).unwrap();
                assert!(rel_err(&fd_grad(model.as_ref(), &x, 1e-5), &g) < 1e-4, "model {mi} at {x}");
                let hs = model.hess_log_joint(&x).unwrap();
                for i in 0..n {
                    let mut xp = x.clone();
                    let mut xm = x.clone();
                    xp[i] += 1e-5;
                    xm[i] -= 1e-5;
                    let col = (model.grad_log_joint(&xp).unwrap() - model.grad_log_joint(&xm).unwrap()) / 2e-5;
                    assert!(rel_err(&col, &hs.column(i).into_owned()) < 1e-4, "model {mi} hess col {i}");
                }
            }
        }
    }

    #[test]
    fn kalman_equal_precision_average() {
        let i2 = Matrix::identity(2, 2);
        let m = LinearGaussianModel::new(dvector![0.0, 0.0], i2.clone(), i2.clone(), i2.clone(), dvector![2.0, 2.0]).unwrap();
        let post = kalman_posterior(&m).unwrap();
        assert!((post.mean() - dvector![1.0, 1.0]).amax() < 1e-14);
        assert!((post.cov() - &i2 * 0.5).amax() < 1e-14);
    }

    #[test]
    fn kalman_uninformative_limit() {
        let i2 = Matrix::identity(2, 2);
        let m = LinearGaussianModel::new(dvector![0.5, -1.0], i2.clone(), i2.clone(), &i2 * 1e8, dvector![30.0, 30.0]).unwrap();
        let post = kalman_posterior(&m).unwrap();
        assert!((post.mean() - dvector![0.5, -1.0]).amax() < 1e-6);
    }

    #[test]
    fn kalman_information_form() {
        let m = reference_linear(&dvector![-1.18, 4.12]);
        let post = kalman_posterior(&m).unwrap();
        let prec = post.to_precision().unwrap();
        let expect_prec = m.prior_prec() + m.info_matrix();
        assert!((prec.prec() - &expect_prec).amax() < 1e-10 * expect_prec.amax());
        let lhs = prec.prec() * post.mean();
        let rhs = m.prior_prec() * &m.prior_mean + m.obs_matrix.transpose() * m.obs_prec() * &m.z;
        assert!((lhs - &rhs).amax() < 1e-10 * rhs.amax());
    }

    #[test]
    fn gmm_posterior_cases() {
        let h = dmatrix![2.0, -0.2; 0.3, 2.5];
        let r = dmatrix![170.0, 64.0; 64.0, 230.0];
        let z = dvector![5.0, 4.975];
        let single = GaussianParams::new(dvector![1.0, -1.0], Matrix::identity(2, 2) * 5.0).unwrap();
        let m1 = MixturePriorLinearModel::new(MixtureParams::uniform(vec![single.clone()]).unwrap(), h.clone(), r.clone(), z.clone()).unwrap();
        let lg = LinearGaussianModel::new(single.mean().clone(), single.cov().clone(), h.clone(), r.clone(), z.clone()).unwrap();
        let a = gmm_posterior_analytic(&m1).unwrap();
        let b = kalman_posterior(&lg).unwrap();
        assert!((a.weights()[0] - 1.0).abs() < 1e-15);
        assert!((a.components()[0].mean() - b.mean()).amax() < 1e-12);

        // symmetric components, z equidistant from both predictions
        let i2 = Matrix::identity(2, 2);
        let sym = MixtureParams::uniform(vec![
            GaussianParams::new(dvector![1.0, 0.0], i2.clone()).unwrap(),
            GaussianParams::new(dvector![-1.0, 0.0], i2.clone()).unwrap(),
        ])
        .unwrap();
        let ms = MixturePriorLinearModel::new(sym, i2.clone(), i2.clone(), dvector![0.0, 3.0]).unwrap();
        let w = gmm_posterior_analytic(&ms).unwrap().weights();
        assert!((w[0] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn gmm_posterior_normalized_on_grid() {
        let prior = MixtureParams::uniform(
            [(5.0, 5.0), (-5.0, 5.0), (5.0, -5.0), (-5.0, -5.0)]
                .iter()
                .map(|(a, b)| GaussianParams::new(dvector![*a, *b], Matrix::identity(2, 2) * 5.0).unwrap())
                .collect(),
        )
        .unwrap();
        let h = dmatrix![2.0, -0.2; 0.3, 2.5];
        let z = &h * dvector![2.67, 1.67];
        let m = MixturePriorLinearModel::new(prior, h, dmatrix![170.0, 64.0; 64.0, 230.0], z).unwrap();
        let post = gmm_posterior_analytic(&m).unwrap();
        assert!((post.weights().sum() - 1.0).abs() < 1e-12);
        let d = post.density().unwrap();
        let (lo, hi, k) = (-20.0, 20.0, 400);
        let dx = (hi - lo) / k as f64;
        let mut mass = 0.0;
        for i in 0..k {
            for j in 0..k {
                let x = dvector![lo + (i as f64 + 0.5) * dx, lo + (j as f64 + 0.5) * dx];
                mass += d.log_density(&x).exp() * dx * dx;
            }
        }
        assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
    }

    #[test]
    fn dataset_generation() {
        let a = generate_logreg_dataset(3, 20, 5).unwrap();
        assert_eq!(a, generate_logreg_dataset(3, 20, 5).unwrap());
        assert_ne!(a, generate_logreg_dataset(3, 20, 6).unwrap());
        let big = generate_logreg_dataset(2, 10_000, 1).unwrap();
        let truth = big.truth.clone().unwrap();
        let freq = big.labels.iter().sum::<f64>() / 10_000.0;
        let mean_p = (0..10_000)
            .map(|i| sigmoid(big.features.row(i).transpose().dot(&truth)))
            .sum::<f64>()
            / 10_000.0;
        assert!((freq - mean_p).abs() < 0.03);
        let shaped = generate_logreg_dataset(50, 500, 2).unwrap();
        assert_eq!(shaped.features.shape(), (500, 50));
        assert_eq!(shaped.labels.len(), 500);
    }

    #[test]
    fn dataset_csv_round_trip() {
        let a = generate_logreg_dataset(3, 25, 8).unwrap();
        let text = a.to_csv();
        assert!(text.starts_with("y_1,y_2,y_3,z\n"));
        let b = LogisticRegressionModel::from_csv(&text).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.labels, b.labels);
        assert_eq!(text, b.to_csv());
        assert!(LogisticRegressionModel::from_csv("a,b\n1,0\n").is_err());
    }

    #[test]
    fn logistic_expected_hess_matches_pointwise_average() {
        let m = generate_logreg_dataset(3, 50, 4).unwrap();
        let rule = crate::quadrature::gh_rule_nd(3, 3).unwrap();
        let ps = crate::quadrature::transport(&rule, &dvector![0.1, -0.2, 0.3], &Matrix::identity(3, 3)).unwrap();
        let fast = m.expected_hess(&ps).unwrap();
        let slow: Matrix = try_expect(&ps, |x| m.hess_log_joint(x)).unwrap();
        assert!((fast - slow).amax() < 1e-10);
    }

    #[test]
    fn logistic_batch_matches_pointwise() {
        let m = generate_logreg_dataset(4, 60, 5).unwrap();
        let rule = crate::quadrature::mc_rule(4, 30, 2).unwrap();
        let ps = crate::quadrature::transport(&rule, &dvector![0.5, -1.0, 2.0, 0.0], &(Matrix::identity(4, 4) * 3.0)).unwrap();
        let b = m.batch_terms(&ps).unwrap();
        for j in 0..ps.len() {
            let x = ps.position(j);
            assert!((b.log[j] - m.log_joint(&x).unwrap()).abs() < 1e-10 * b.log[j].abs().max(1.0));
            assert!((b.grads.column(j) - m.grad_log_joint(&x).unwrap()).amax() < 1e-10);
        }
        let slow: Matrix = try_expect(&ps, |x| m.hess_log_joint(x)).unwrap();
        assert!((b.expected_hess - slow).amax() < 1e-9);
        for (a, c) in m.log_joint_batch(&ps).unwrap().iter().zip(&b.log) {
            assert!((a - c).abs() < 1e-10 * c.abs().max(1.0));
        }
        let range = RangeModel::new(dvector![1.0, 1.0], Matrix::identity(2, 2), 2.0, 3.0).unwrap();
        let ps = crate::quadrature::transport(&crate::quadrature::gh_rule_nd(3, 2).unwrap(), &dvector![1.0, 2.0], &Matrix::identity(2, 2)).unwrap();
        let b = range.batch_terms(&ps).unwrap();
        assert_eq!(b.log[4], range.log_joint(&ps.position(4)).unwrap());
        assert_eq!(b.grads.column(4).into_owned(), range.grad_log_joint(&ps.position(4)).unwrap());
        assert_eq!(b.expected_hess, range.expected_hess(&ps).unwrap());
    }
}
