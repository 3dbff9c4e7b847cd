//! Gauss-Hermite rules, Monte-Carlo fallback rules, affine transport of
//! standard-normal nodes and weighted expectations over particle sets.
//!
//! All rules use the probabilists' convention: nodes integrate against the
//! standard normal density `exp(−ξ²/2)/√(2π)`.

use nalgebra::SymmetricEigen;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, FlowError, Result};
use crate::gaussian::{Matrix, Vector};

/// Largest supported 1-d degree.
pub const MAX_DEGREE: usize = 64;

/// Default cap on the node count of a tensor-product rule.
pub const DEFAULT_NODE_BUDGET: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    GaussHermite { degree: usize },
    MonteCarlo { seed: u64, count: usize },
}

/// Standard-normal nodes (one per column) and their weights.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule {
    nodes: Matrix,
    weights: Vector,
    provenance: Provenance,
}

impl QuadratureRule {
    pub fn dim(&self) -> usize {
        self.nodes.nrows()
    }

    pub fn len(&self) -> usize {
        self.nodes.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.ncols() == 0
    }

    /// Nodes as columns of an `n × M` matrix.
    pub fn nodes(&self) -> &Matrix {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> Vector {
        self.nodes.column(i).into_owned()
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    pub fn provenance(&self) -> Provenance {
        self.provenance
    }
}

/// Probabilists' Hermite polynomials `(h_p(x), h_{p−1}(x))` by recurrence.
pub fn hermite_pair(p: usize, x: f64) -> (f64, f64) {
    let mut prev = 1.0; // h_0
    if p == 0 {
        return (prev, 0.0);
    }
    let mut cur = x; // h_1
    for k in 1..p {
        let next = x * cur - k as f64 * prev;
        prev = cur;
        cur = next;
    }
    (cur, prev)
}

/// 1-d Gauss-Hermite rule of degree `p`, nodes in ascending order.
pub fn gh_rule_1d(p: usize) -> Result<QuadratureRule> {
    if p == 0 || p > MAX_DEGREE {
        return Err(FlowError::DegreeOutOfRange(p));
    }
    let mut jacobi = Matrix::zeros(p, p);
    for k in 1..p {
        let b = (k as f64).sqrt();
        jacobi[(k - 1, k)] = b;
        jacobi[(k, k - 1)] = b;
    }
    let mut x: Vec<f64> = SymmetricEigen::new(jacobi).eigenvalues.iter().cloned().collect();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));

    for xi in x.iter_mut() {
        for _ in 0..8 {
            let (hp, hpm1) = hermite_pair(p, *xi);
            let step = hp / (p as f64 * hpm1);
            *xi -= step;
            if step.abs() < 1e-15 * xi.abs().max(1.0) {
                break;
            }
        }
    }
    for i in 0..p / 2 {
        let a = 0.5 * (x[p - 1 - i] - x[i]);
        x[i] = -a;
        x[p - 1 - i] = a;
    }
    if p % 2 == 1 {
        x[p / 2] = 0.0;
    }

    let ln_fact: f64 = (1..=p).map(|k| (k as f64).ln()).sum();
    let mut w: Vec<f64> = x
        .iter()
        .map(|xi| {
            let (_, hpm1) = hermite_pair(p, *xi);
            (ln_fact - 2.0 * (p as f64 * hpm1.abs()).ln()).exp()
        })
        .collect();
    for i in 0..p / 2 {
        let a = 0.5 * (w[i] + w[p - 1 - i]);
        w[i] = a;
        w[p - 1 - i] = a;
    }

    Ok(QuadratureRule {
        nodes: Matrix::from_row_slice(1, p, &x),
        weights: Vector::from_vec(w),
        provenance: Provenance::GaussHermite { degree: p },
    })
}

/// Tensor-product rule with the default node budget.
pub fn gh_rule_nd(p: usize, n: usize) -> Result<QuadratureRule> {
    gh_rule_nd_with_budget(p, n, DEFAULT_NODE_BUDGET)
}

/// Tensor-product rule; the first coordinate varies slowest.
pub fn gh_rule_nd_with_budget(p: usize, n: usize, budget: usize) -> Result<QuadratureRule> {
    if n == 0 {
        return Err(FlowError::InvalidArgument("dimension must be positive".into()));
    }
    let one = gh_rule_1d(p)?;
    let total = (p as u128).checked_pow(n as u32).unwrap_or(u128::MAX);
    if total > budget as u128 {
        return Err(FlowError::NodeBudgetExceeded {
            nodes: total,
            budget,
        });
    }
    let m = total as usize;
    let mut nodes = Matrix::zeros(n, m);
    let mut weights = Vector::zeros(m);
    let mut digits = vec![0usize; n];
    for j in 0..m {
        let mut w = 1.0;
        for (d, &k) in digits.iter().enumerate() {
            nodes[(d, j)] = one.nodes[(0, k)];
            w *= one.weights[k];
        }
        weights[j] = w;
        for d in (0..n).rev() {
            digits[d] += 1;
            if digits[d] < p {
                break;
            }
            digits[d] = 0;
        }
    }
    Ok(QuadratureRule {
        nodes,
        weights,
        provenance: Provenance::GaussHermite { degree: p },
    })
}

/// `count` seeded standard-normal draws with uniform weights.
pub fn mc_rule(n: usize, count: usize, seed: u64) -> Result<QuadratureRule> {
    if count < 2 {
        return Err(FlowError::InvalidArgument("Monte-Carlo rule needs count >= 2".into()));
    }
    if n == 0 {
        return Err(FlowError::InvalidArgument("dimension must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nodes = Matrix::from_fn(n, count, |_, _| StandardNormal.sample(&mut rng));
    Ok(QuadratureRule {
        nodes,
        weights: Vector::from_element(count, 1.0 / count as f64),
        provenance: Provenance::MonteCarlo { seed, count },
    })
}

/// Gauss-Hermite when `p^n` fits the budget, Monte-Carlo with `mc_count` nodes otherwise.
pub fn rule_for_dim(p: usize, n: usize, mc_count: usize, seed: u64) -> Result<QuadratureRule> {
    match gh_rule_nd(p, n) {
        Err(FlowError::NodeBudgetExceeded { .. }) => mc_rule(n, mc_count, seed),
        other => other,
    }
}

/// Weighted particle ensemble, positions stored as columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSet {
    positions: Matrix,
    weights: Vector,
}

impl ParticleSet {
    pub fn new(positions: Matrix, weights: Vector) -> Result<Self> {
        check_dim(positions.ncols(), weights.len())?;
        if weights.iter().any(|w| !(*w > 0.0)) {
            return Err(FlowError::InvalidArgument("particle weights must be positive".into()));
        }
        Ok(Self { positions, weights })
    }

    pub fn uniform(positions: Matrix) -> Self {
        let m = positions.ncols();
        Self {
            positions,
            weights: Vector::from_element(m, 1.0 / m as f64),
        }
    }

    pub fn dim(&self) -> usize {
        self.positions.nrows()
    }

    pub fn len(&self) -> usize {
        self.positions.ncols()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.ncols() == 0
    }

    pub fn positions(&self) -> &Matrix {
        &self.positions
    }

    pub fn position(&self, i: usize) -> Vector {
        self.positions.column(i).into_owned()
    }

    pub fn weights(&self) -> &Vector {
        &self.weights
    }

    pub fn weighted_mean(&self) -> Vector {
        &self.positions * &self.weights
    }

    pub fn weighted_cov(&self) -> Matrix {
        let mu = self.weighted_mean();
        let mut c = Matrix::zeros(self.dim(), self.dim());
        for (i, w) in self.weights.iter().enumerate() {
            let d = self.positions.column(i) - &mu;
            c += &d * d.transpose() * *w;
        }
        crate::gaussian::symmetrize(&c)
    }
}

/// Affine transport `x_i = L ξ_i + μ`.
pub fn transport(rule: &QuadratureRule, mean: &Vector, factor: &Matrix) -> Result<ParticleSet> {
    check_dim(rule.dim(), mean.len())?;
    check_dim(rule.dim(), factor.nrows())?;
    check_dim(rule.dim(), factor.ncols())?;
    let mut positions = factor * &rule.nodes;
    for mut col in positions.column_iter_mut() {
        col += mean;
    }
    Ok(ParticleSet {
        positions,
        weights: rule.weights.clone(),
    })
}

/// Values that can be averaged with scalar weights.
pub trait Accumulate: Send + Sized {
    fn scale(self, w: f64) -> Self;
    fn add_scaled(&mut self, other: &Self, w: f64);
    fn all_finite(&self) -> bool;
}

impl Accumulate for f64 {
    fn scale(self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += w * other;
    }
    fn all_finite(&self) -> bool {
        self.is_finite()
    }
}

impl Accumulate for Vector {
    fn scale(self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        self.axpy(w, other, 1.0);
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

impl Accumulate for Matrix {
    fn scale(self, w: f64) -> Self {
        self * w
    }
    fn add_scaled(&mut self, other: &Self, w: f64) {
        *self += other * w;
    }
    fn all_finite(&self) -> bool {
        self.iter().all(|v| v.is_finite())
    }
}

/// Evaluates `f` on every particle, in parallel, returning values in index order.
pub fn map_particles<T, F>(ps: &ParticleSet, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Vector) -> Result<T> + Sync,
{
    (0..ps.len())
        .into_par_iter()
        .map(|i| f(&ps.position(i)))
        .collect()
}

/// Index-ordered weighted sum of precomputed values.
pub fn weighted_sum<T: Accumulate + Clone>(weights: &Vector, values: &[T]) -> Result<T> {
    if values.is_empty() {
        return Err(FlowError::InvalidArgument("empty particle set".into()));
    }
    check_dim(weights.len(), values.len())?;
    if values.iter().any(|v| !v.all_finite()) {
        return Err(FlowError::NonFiniteValue("expectation integrand".into()));
    }
    let mut acc = values[0].clone().scale(weights[0]);
    for (v, w) in values.iter().zip(weights.iter()).skip(1) {
        acc.add_scaled(v, *w);
    }
    Ok(acc)
}

/// `Σ_i w_i f(x_i)`.
pub fn expect<T, F>(ps: &ParticleSet, f: F) -> Result<T>
where
    T: Accumulate + Clone,
    F: Fn(&Vector) -> T + Sync,
{
    let values = map_particles(ps, |x| Ok(f(x)))?;
    weighted_sum(&ps.weights, &values)
}

/// [`expect`] for integrands that can fail.
pub fn try_expect<T, F>(ps: &ParticleSet, f: F) -> Result<T>
where
    T: Accumulate + Clone,
    F: Fn(&Vector) -> Result<T> + Sync,
{
    let values = map_particles(ps, f)?;
    weighted_sum(&ps.weights, &values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn degree_one_two_three_tables() {
        let r = gh_rule_1d(1).unwrap();
        assert_eq!(r.nodes()[(0, 0)], 0.0);
        assert!((r.weights()[0] - 1.0).abs() < 1e-12);

        let r = gh_rule_1d(2).unwrap();
        assert!((r.nodes()[(0, 0)] + 1.0).abs() < 1e-12);
        assert!((r.nodes()[(0, 1)] - 1.0).abs() < 1e-12);
        assert!((r.weights()[0] - 0.5).abs() < 1e-12 && (r.weights()[1] - 0.5).abs() < 1e-12);

        let r = gh_rule_1d(3).unwrap();
        let s3 = 3f64.sqrt();
        assert!((r.nodes()[(0, 0)] + s3).abs() < 1e-12);
        assert_eq!(r.nodes()[(0, 1)], 0.0);
        assert!((r.nodes()[(0, 2)] - s3).abs() < 1e-12);
        let w = r.weights();
        assert!((w[0] - 1.0 / 6.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((w[2] - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn degree_range_enforced() {
        assert_eq!(gh_rule_1d(0), Err(FlowError::DegreeOutOfRange(0)));
        assert_eq!(gh_rule_1d(65), Err(FlowError::DegreeOutOfRange(65)));
        assert!(gh_rule_1d(64).is_ok());
    }

    #[test]
    fn all_degrees_have_unit_positive_weights_and_roots() {
        for p in 1..=MAX_DEGREE {
            let r = gh_rule_1d(p).unwrap();
            assert!(r.weights().iter().all(|w| *w > 0.0), "p = {p}");
            assert!((r.weights().sum() - 1.0).abs() < 1e-12, "p = {p}: {}", r.weights().sum());
            for i in 0..p {
                let x = r.nodes()[(0, i)];
                assert_eq!(x, -r.nodes()[(0, p - 1 - i)]);
                let (hp, hpm1) = hermite_pair(p, x);
                // relative residual of the polynomial at the root
                assert!(hp.abs() <= 1e-10 * (p as f64 * hpm1).abs().max(1.0), "p = {p}, i = {i}");
            }
        }
    }

    #[test]
    fn tensor_rules() {
        let r = gh_rule_nd(1, 5).unwrap();
        assert_eq!(r.len(), 1);
        assert!(r.node(0).iter().all(|v| *v == 0.0));
        assert!((r.weights()[0] - 1.0).abs() < 1e-15);

        let r = gh_rule_nd(2, 2).unwrap();
        assert_eq!(r.len(), 4);
        for i in 0..4 {
            let x = r.node(i);
            assert!(x.iter().all(|v| (v.abs() - 1.0).abs() < 1e-12));
            assert!((r.weights()[i] - 0.25).abs() < 1e-12);
        }
        assert_eq!(gh_rule_nd(4, 2).unwrap().len(), 16);
    }

    #[test]
    fn node_budget() {
        assert!(matches!(
            gh_rule_nd(4, 11),
            Err(FlowError::NodeBudgetExceeded { nodes: 4194304, .. })
        ));
        assert!(gh_rule_nd(4, 9).is_ok());
        assert!(matches!(gh_rule_nd(4, 100), Err(FlowError::NodeBudgetExceeded { .. })));
        let r = rule_for_dim(4, 50, 500, 3).unwrap();
        assert_eq!(r.provenance(), Provenance::MonteCarlo { seed: 3, count: 500 });
    }

    #[test]
    fn mc_determinism_and_moments() {
        assert_eq!(mc_rule(3, 50, 11).unwrap(), mc_rule(3, 50, 11).unwrap());
        assert_ne!(mc_rule(3, 50, 11).unwrap().nodes(), mc_rule(3, 50, 12).unwrap().nodes());
        let r = mc_rule(1, 100_000, 5).unwrap();
        let xs = r.nodes().row(0);
        let mean = xs.mean();
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.02 && (var - 1.0).abs() < 0.02);
        assert!(r.weights().iter().all(|w| *w == 1.0 / 100_000.0));
        assert!(mc_rule(2, 1, 0).is_err());
    }

    #[test]
    fn transport_cases() {
        let r = gh_rule_nd(3, 2).unwrap();
        let id = transport(&r, &Vector::zeros(2), &Matrix::identity(2, 2)).unwrap();
        assert_eq!(id.positions(), r.nodes());

        let single = QuadratureRule {
            nodes: dmatrix![1.0; 1.0],
            weights: dvector![1.0],
            provenance: Provenance::GaussHermite { degree: 1 },
        };
        let ps = transport(&single, &dvector![1.0, 1.0], &dmatrix![2.0, 0.0; 0.0, 3.0]).unwrap();
        assert_eq!(ps.position(0), dvector![3.0, 4.0]);

        let l = dmatrix![1.2, 0.0; -0.4, 2.1];
        let mu = dvector![0.7, -3.0];
        let ps = transport(&gh_rule_nd(2, 2).unwrap(), &mu, &l).unwrap();
        assert!((ps.weighted_mean() - &mu).amax() < 1e-12);
        assert!((ps.weighted_cov() - &l * l.transpose()).amax() < 1e-10);
        assert!(transport(&r, &Vector::zeros(3), &Matrix::identity(3, 3)).is_err());
    }

    #[test]
    fn expectations() {
        let ps = transport(&gh_rule_nd(4, 2).unwrap(), &Vector::zeros(2), &Matrix::identity(2, 2)).unwrap();
        let c: f64 = expect(&ps, |_| 3.5).unwrap();
        assert!((c - 3.5).abs() < 1e-14);
        let m: Vector = expect(&ps, |x| x.clone()).unwrap();
        assert!(m.amax() < 1e-14);
        let s: f64 = expect(&ps, |x| x.norm_squared()).unwrap();
        assert!((s - 2.0).abs() < 1e-13);
        let outer: Matrix = expect(&ps, |x| x * x.transpose()).unwrap();
        assert!((outer - Matrix::identity(2, 2)).amax() < 1e-13);
        let bad = expect(&ps, |x| if x[0] > 0.0 { f64::NAN } else { 0.0 });
        assert!(matches!(bad, Err(FlowError::NonFiniteValue(_))));
    }
}
