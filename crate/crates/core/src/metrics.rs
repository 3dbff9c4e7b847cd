//! KL and ELBO estimators, evaluation grids and mode-coverage checks.

use rayon::prelude::*;

use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{log_sum_exp, mahalanobis, Matrix, MixtureParams, Vector};
use crate::quadrature::ParticleSet;

/// Cell-centered tensor grid; points are columns, first coordinate varies slowest.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalGrid {
    bounds: Vec<(f64, f64)>,
    resolution: Vec<usize>,
    points: Matrix,
    cell_volume: f64,
}

impl EvalGrid {
    pub fn new(bounds: Vec<(f64, f64)>, resolution: Vec<usize>) -> Result<Self> {
        if bounds.is_empty() || bounds.len() != resolution.len() {
            return Err(FlowError::InvalidArgument("grid bounds and resolution must match".into()));
        }
        if bounds.iter().any(|(lo, hi)| !(lo.is_finite() && hi.is_finite() && hi > lo)) {
            return Err(FlowError::InvalidArgument("grid bounds must be finite with lo < hi".into()));
        }
        if resolution.iter().any(|r| *r == 0) {
            return Err(FlowError::InvalidArgument("grid resolution must be positive".into()));
        }
        let n = bounds.len();
        let total: usize = resolution.iter().product();
        let steps: Vec<f64> = bounds
            .iter()
            .zip(&resolution)
            .map(|((lo, hi), r)| (hi - lo) / *r as f64)
            .collect();
        let mut points = Matrix::zeros(n, total);
        for j in 0..total {
            let mut rest = j;
            for d in (0..n).rev() {
                let i = rest % resolution[d];
                rest /= resolution[d];
                points[(d, j)] = bounds[d].0 + (i as f64 + 0.5) * steps[d];
            }
        }
        Ok(Self {
            cell_volume: steps.iter().product(),
            bounds,
            resolution,
            points,
        })
    }

    /// Square grid `[lo, hi]ⁿ` with `res` cells per axis.
    pub fn cube(n: usize, lo: f64, hi: f64, res: usize) -> Result<Self> {
        Self::new(vec![(lo, hi); n], vec![res; n])
    }

    /// Box of `±half_width` standard deviations around `mean` along each axis.
    pub fn around(mean: &Vector, cov: &Matrix, half_width: f64, res: usize) -> Result<Self> {
        let bounds = (0..mean.len())
            .map(|i| {
                let s = cov[(i, i)].sqrt();
                (mean[i] - half_width * s, mean[i] + half_width * s)
            })
            .collect();
        Self::new(bounds, vec![res; mean.len()])
    }

    pub fn dim(&self) -> usize {
        self.bounds.len()
    }

    pub fn len(&self) -> usize {
        self.points.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> &[(f64, f64)] {
        &self.bounds
    }

    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn points(&self) -> &Matrix {
        &self.points
    }

    pub fn cell_volume(&self) -> f64 {
        self.cell_volume
    }
}

fn eval_columns<F>(points: &Matrix, f: &F, what: &str) -> Result<Vec<f64>>
where
    F: Fn(&Vector) -> Result<f64> + Sync,
{
    let vals = (0..points.ncols())
        .into_par_iter()
        .map(|j| f(&points.column(j).into_owned()))
        .collect::<Result<Vec<_>>>()?;
    if vals.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
        return Err(FlowError::NonFiniteValue(what.into()));
    }
    Ok(vals)
}

/// `(1/N)Σ log(q(xᵢ)/p(xᵢ,z)) + (1/N) log Σ p(xⱼ,z)`, evaluated as written.
pub fn paper_kl_estimate<Q, P>(q_logpdf: Q, joint_logpdf: P, points: &Matrix) -> Result<f64>
where
    Q: Fn(&Vector) -> Result<f64> + Sync,
    P: Fn(&Vector) -> Result<f64> + Sync,
{
    let n = points.ncols();
    if n == 0 {
        return Err(FlowError::InvalidArgument("no evaluation points".into()));
    }
    let lq = eval_columns(points, &q_logpdf, "q log-density")?;
    let lp = eval_columns(points, &joint_logpdf, "joint log-density")?;
    let mean_ratio = lq.iter().zip(&lp).map(|(a, b)| a - b).sum::<f64>() / n as f64;
    let out = mean_ratio + log_sum_exp(&lp) / n as f64;
    if out.is_finite() {
        Ok(out)
    } else {
        Err(FlowError::NonFiniteValue("KL estimate".into()))
    }
}

/// Riemann-sum KL under `q` with evidence `p(z) ≈ vol·Σ p(xⱼ,z)`.
pub fn importance_kl_estimate<Q, P>(q_logpdf: Q, joint_logpdf: P, grid: &EvalGrid) -> Result<f64>
where
    Q: Fn(&Vector) -> Result<f64> + Sync,
    P: Fn(&Vector) -> Result<f64> + Sync,
{
    let lq = eval_columns(grid.points(), &q_logpdf, "q log-density")?;
    let lp = eval_columns(grid.points(), &joint_logpdf, "joint log-density")?;
    let log_vol = grid.cell_volume().ln();
    let log_evidence = log_sum_exp(&lp) + log_vol;
    let mut kl = 0.0;
    for (a, b) in lq.iter().zip(&lp) {
        let mass = (a + log_vol).exp();
        if mass > 0.0 {
            kl += mass * (a - b + log_evidence);
        }
    }
    if kl.is_finite() {
        Ok(kl)
    } else {
        Err(FlowError::NonFiniteValue("KL estimate".into()))
    }
}

/// `Σ wᵢ log(p(xᵢ,z)/q(xᵢ))`; uniform weights give the plain particle average.
pub fn elbo_estimate<Q, P>(particles: &ParticleSet, q_logpdf: Q, joint_logpdf: P) -> Result<f64>
where
    Q: Fn(&Vector) -> Result<f64> + Sync,
    P: Fn(&Vector) -> Result<f64> + Sync,
{
    let lq = eval_columns(particles.positions(), &q_logpdf, "q log-density")?;
    let lp = eval_columns(particles.positions(), &joint_logpdf, "joint log-density")?;
    elbo_from_values(particles, &lq, &lp)
}

/// [`elbo_estimate`] from precomputed `log q(xᵢ)` and `log p(xᵢ, z)`.
pub fn elbo_from_values(particles: &ParticleSet, lq: &[f64], lp: &[f64]) -> Result<f64> {
    check_dim(particles.len(), lq.len())?;
    check_dim(particles.len(), lp.len())?;
    let out: f64 = particles
        .weights()
        .iter()
        .zip(lq.iter().zip(lp))
        .map(|(w, (a, b))| w * (b - a))
        .sum();
    if out.is_finite() {
        Ok(out)
    } else {
        Err(FlowError::NonFiniteValue("ELBO estimate".into()))
    }
}

/// Per reference mode: does some approximating mean lie within `radius`
/// Mahalanobis units (under that mode's covariance)?
pub fn mode_coverage(approx: &MixtureParams, reference: &MixtureParams, radius: f64) -> Vec<bool> {
    reference
        .components()
        .iter()
        .map(|r| {
            let Ok(prec) = r.to_precision() else { return false };
            approx.components().iter().any(|a| {
                mahalanobis(a.mean(), r.mean(), prec.prec())
                    .map(|d| d.sqrt() <= radius)
                    .unwrap_or(false)
            })
        })
        .collect()
}

/// Moving average over `window` consecutive points; `len − window + 1` entries.
pub fn moving_average(series: &[f64], window: usize) -> Vec<f64> {
    if window == 0 || series.len() < window {
        return Vec::new();
    }
    series
        .windows(window)
        .map(|w| w.iter().sum::<f64>() / window as f64)
        .collect()
}

pub fn strictly_increasing(series: &[f64]) -> bool {
    series.windows(2).all(|w| w[1] > w[0])
}
