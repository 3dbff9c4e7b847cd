//! Explicit Runge-Kutta integration of flat composite states.
//!
//! Flows pack their parameters, particles and transform parameters into one
//! `Vec<f64>` described by a [`Layout`]; the integrator only sees the flat
//! vector.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{FlowError, Result};
use crate::gaussian::{Matrix, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OdeMethod {
    Rk4,
    Rk45,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OdeConfig {
    pub method: OdeMethod,
    /// Fixed step for RK4, initial step for RK45.
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_steps: usize,
    /// Spacing of checkpoint snapshots; `None` records none.
    pub checkpoint_every: Option<f64>,
}

impl Default for OdeConfig {
    fn default() -> Self {
        Self {
            method: OdeMethod::Rk4,
            step: 1e-2,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
            max_steps: 10_000_000,
            checkpoint_every: None,
        }
    }
}

impl OdeConfig {
    pub fn rk4(step: f64) -> Self {
        Self {
            step,
            ..Self::default()
        }
    }

    pub fn rk45(rel_tol: f64, abs_tol: f64) -> Self {
        Self {
            method: OdeMethod::Rk45,
            step: 1e-4,
            rel_tol,
            abs_tol,
            ..Self::default()
        }
    }

    pub fn with_checkpoints(mut self, every: f64) -> Self {
        self.checkpoint_every = Some(every);
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.step) {
            return Err(FlowError::InvalidArgument("ode step must be positive".into()));
        }
        if !positive(self.rel_tol) || !positive(self.abs_tol) {
            return Err(FlowError::InvalidArgument("ode tolerances must be positive".into()));
        }
        if self.max_steps == 0 {
            return Err(FlowError::InvalidArgument("max_steps must be positive".into()));
        }
        if let Some(c) = self.checkpoint_every {
            if !positive(c) {
                return Err(FlowError::InvalidArgument("checkpoint_every must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A named block of the flat state, stored column-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Maps segment names to ranges of a flat state vector.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    order: Vec<String>,
    segments: BTreeMap<String, Segment>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a `rows × cols` block. Names must be unique.
    pub fn push(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> &mut Self {
        let name = name.into();
        assert!(!self.segments.contains_key(&name), "duplicate segment {name}");
        let seg = Segment {
            offset: self.total,
            rows,
            cols,
        };
        self.total += seg.len();
        self.order.push(name.clone());
        self.segments.insert(name, seg);
        self
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn names(&self) -> &[String] {
        &self.order
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.get(name)
    }

    fn expect(&self, name: &str) -> &Segment {
        self.segments
            .get(name)
            .unwrap_or_else(|| panic!("unknown segment {name}"))
    }

    pub fn read_matrix(&self, data: &[f64], name: &str) -> Matrix {
        let s = self.expect(name);
        Matrix::from_column_slice(s.rows, s.cols, &data[s.range()])
    }

    pub fn read_vector(&self, data: &[f64], name: &str) -> Vector {
        let s = self.expect(name);
        Vector::from_column_slice(&data[s.range()])
    }

    pub fn write(&self, data: &mut [f64], name: &str, values: &[f64]) {
        let s = self.expect(name);
        assert_eq!(values.len(), s.len(), "segment {name} size");
        data[s.range()].copy_from_slice(values);
    }
}

/// Flat state vector plus its layout.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositeState {
    pub layout: Layout,
    pub data: Vec<f64>,
}

impl CompositeState {
    pub fn zeros(layout: Layout) -> Self {
        let data = vec![0.0; layout.len()];
        Self { layout, data }
    }

    pub fn matrix(&self, name: &str) -> Matrix {
        self.layout.read_matrix(&self.data, name)
    }

    pub fn vector(&self, name: &str) -> Vector {
        self.layout.read_vector(&self.data, name)
    }

    pub fn set_matrix(&mut self, name: &str, m: &Matrix) {
        self.layout.write(&mut self.data, name, m.as_slice());
    }

    pub fn set_vector(&mut self, name: &str, v: &Vector) {
        self.layout.write(&mut self.data, name, v.as_slice());
    }
}

fn finite_or(v: Vec<f64>, what: &str) -> Result<Vec<f64>> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(v)
    } else {
        Err(FlowError::NonFiniteValue(what.to_string()))
    }
}

fn axpy(y: &[f64], h: f64, k: &[f64]) -> Vec<f64> {
    y.iter().zip(k).map(|(a, b)| a + h * b).collect()
}

/// Classical fourth-order Runge-Kutta step.
pub fn rk4_step<F>(rhs: &mut F, y: &[f64], t: f64, h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = finite_or(rhs(t, y)?, "rk4 stage 1")?;
    let k2 = finite_or(rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k1))?, "rk4 stage 2")?;
    let k3 = finite_or(rhs(t + 0.5 * h, &axpy(y, 0.5 * h, &k2))?, "rk4 stage 3")?;
    let k4 = finite_or(rhs(t + h, &axpy(y, h, &k3))?, "rk4 stage 4")?;
    let out: Vec<f64> = (0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect();
    finite_or(out, "rk4 update")
}

// Dormand-Prince 5(4) tableau.
const DP_C: [f64; 7] = [0.0, 0.2, 0.3, 0.8, 8.0 / 9.0, 1.0, 1.0];
const DP_A: [[f64; 6]; 7] = [
    [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.2, 0.0, 0.0, 0.0, 0.0, 0.0],
    [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
    [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
    [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
    [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
    [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
];
const DP_B5: [f64; 7] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
    0.0,
];
const DP_B4: [f64; 7] = [
    5179.0 / 57600.0,
    0.0,
    7571.0 / 16695.0,
    393.0 / 640.0,
    -92097.0 / 339200.0,
    187.0 / 2100.0,
    1.0 / 40.0,
];

// Shampine's continuous extension: y(t + θh) = y + h Σ_s k_s Σ_j P[s][j] θ^(j+1).
const DP_DENSE: [[f64; 4]; 7] = [
    [
        1.0,
        -8048581381.0 / 2820520608.0,
        8663915743.0 / 2820520608.0,
        -12715105075.0 / 11282082432.0,
    ],
    [0.0, 0.0, 0.0, 0.0],
    [
        0.0,
        131558114200.0 / 32700410799.0,
        -68118460800.0 / 10900136933.0,
        87487479700.0 / 32700410799.0,
    ],
    [
        0.0,
        -1754552775.0 / 470086768.0,
        14199869525.0 / 1410260304.0,
        -10690763975.0 / 1880347072.0,
    ],
    [
        0.0,
        127303824393.0 / 49829197408.0,
        -318862633887.0 / 49829197408.0,
        701980252875.0 / 199316789632.0,
    ],
    [
        0.0,
        -282668133.0 / 205662961.0,
        2019193451.0 / 616988883.0,
        -1453857185.0 / 822651844.0,
    ],
    [0.0, 40617522.0 / 29380423.0, -110615467.0 / 29380423.0, 69997945.0 / 29380423.0],
];

struct DpStep {
    y5: Vec<f64>,
    err: f64,
    k: Vec<Vec<f64>>,
}

impl DpStep {
    /// State at `t + θh` on the step that started at `y`.
    fn interpolate(&self, y: &[f64], h: f64, theta: f64) -> Vec<f64> {
        let powers = [theta, theta * theta, theta.powi(3), theta.powi(4)];
        let coef: Vec<f64> = DP_DENSE
            .iter()
            .map(|row| row.iter().zip(&powers).map(|(p, x)| p * x).sum::<f64>() * h)
            .collect();
        let mut out = y.to_vec();
        for (ks, c) in self.k.iter().zip(&coef) {
            if *c != 0.0 {
                for (o, v) in out.iter_mut().zip(ks) {
                    *o += c * v;
                }
            }
        }
        out
    }
}

/// Dormand-Prince stages; `first` reuses a known `rhs(t, y)`.
fn dp_step<F>(rhs: &mut F, y: &[f64], t: f64, h: f64, tol: (f64, f64), first: Option<&[f64]>) -> Result<DpStep>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let (rel_tol, abs_tol) = tol;
    let n = y.len();
    let mut k: Vec<Vec<f64>> = Vec::with_capacity(7);
    if let Some(k1) = first {
        k.push(k1.to_vec());
    }
    for s in k.len()..7 {
        let mut ys = y.to_vec();
        for (j, kj) in k.iter().enumerate() {
            let a = DP_A[s][j];
            if a != 0.0 {
                for i in 0..n {
                    ys[i] += h * a * kj[i];
                }
            }
        }
        k.push(finite_or(rhs(t + DP_C[s] * h, &ys)?, "rk45 stage")?);
    }
    let mut y5 = y.to_vec();
    let mut err = 0.0;
    for i in 0..n {
        let mut d5 = 0.0;
        let mut d4 = 0.0;
        for s in 0..7 {
            d5 += DP_B5[s] * k[s][i];
            d4 += DP_B4[s] * k[s][i];
        }
        y5[i] += h * d5;
        let scale = abs_tol + rel_tol * y[i].abs().max(y5[i].abs());
        err += (h * (d5 - d4) / scale).powi(2);
    }
    let err = if n == 0 { 0.0 } else { (err / n as f64).sqrt() };
    Ok(DpStep {
        y5: finite_or(y5, "rk45 update")?,
        err,
        k,
    })
}

/// One Dormand-Prince step: returns the fifth-order update and the scaled error norm.
pub fn rk45_step<F>(
    rhs: &mut F,
    y: &[f64],
    t: f64,
    h: f64,
    rel_tol: f64,
    abs_tol: f64,
) -> Result<(Vec<f64>, f64)>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let step = dp_step(rhs, y, t, h, (rel_tol, abs_tol), None)?;
    Ok((step.y5, step.err))
}

/// Called after every accepted step; returning `Err` aborts the run.
pub trait StepHook {
    fn after_step(&mut self, t: f64, state: &[f64]) -> std::result::Result<(), String>;
}

/// Hook that accepts every step.
pub struct NoHook;

impl StepHook for NoHook {
    fn after_step(&mut self, _t: f64, _state: &[f64]) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl<F> StepHook for F
where
    F: FnMut(f64, &[f64]) -> std::result::Result<(), String>,
{
    fn after_step(&mut self, t: f64, state: &[f64]) -> std::result::Result<(), String> {
        self(t, state)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub t: f64,
    pub state: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub t: f64,
    pub state: Vec<f64>,
    pub steps: usize,
    pub checkpoints: Vec<Checkpoint>,
}

/// Segment end points: checkpoint times strictly inside `(t0, t_end)`, then `t_end`.
fn boundaries(t0: f64, t_end: f64, every: Option<f64>) -> Vec<f64> {
    let mut out = Vec::new();
    if let Some(c) = every {
        let mut k = 1usize;
        loop {
            let tk = t0 + k as f64 * c;
            if tk >= t_end - 1e-12 * c {
                break;
            }
            out.push(tk);
            k += 1;
        }
    }
    out.push(t_end);
    out
}

fn wrap_rhs_error(e: FlowError, t: f64) -> FlowError {
    match e {
        FlowError::DivergedFlow { .. } => e,
        other => FlowError::DivergedFlow {
            t,
            reason: other.to_string(),
            component: None,
        },
    }
}

fn diverged(t: f64, reason: String) -> FlowError {
    FlowError::DivergedFlow {
        t,
        reason,
        component: None,
    }
}

/// Integrates `dy/dt = rhs(t, y)` from `t0` to `t_end`.
///
/// With `checkpoint_every = Some(c)` a snapshot is recorded at every
/// multiple of `c` after `t0` and at `t_end`. RK4 shortens its step so that
/// snapshots fall exactly on those times; RK45 keeps its adaptive steps and
/// fills in interior snapshots from the dense-output interpolant.
pub fn integrate<F>(
    mut rhs: F,
    init: &[f64],
    t0: f64,
    t_end: f64,
    config: &OdeConfig,
    hook: &mut dyn StepHook,
) -> Result<Trajectory>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    config.validate()?;
    if !(t_end >= t0) {
        return Err(FlowError::InvalidArgument("horizon precedes start time".into()));
    }
    let mut traj = Trajectory {
        t: t0,
        state: init.to_vec(),
        steps: 0,
        checkpoints: Vec::new(),
    };
    if t_end == t0 {
        return Ok(traj);
    }
    let marks = boundaries(t0, t_end, config.checkpoint_every);
    match config.method {
        OdeMethod::Rk4 => rk4_run(&mut rhs, &mut traj, &marks, config, hook)?,
        OdeMethod::Rk45 => rk45_run(&mut rhs, &mut traj, &marks, t_end, config, hook)?,
    }
    if config.checkpoint_every.is_none() {
        traj.checkpoints.clear();
    }
    Ok(traj)
}

fn rk4_run<F>(
    rhs: &mut F,
    traj: &mut Trajectory,
    marks: &[f64],
    config: &OdeConfig,
    hook: &mut dyn StepHook,
) -> Result<()>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let mut a = traj.t;
    for &b in marks {
        let n = ((b - a) / config.step - 1e-9).ceil().max(1.0) as usize;
        let h = (b - a) / n as f64;
        for i in 0..n {
            if traj.steps >= config.max_steps {
                return Err(FlowError::MaxStepsExceeded {
                    steps: traj.steps,
                    t: traj.t,
                });
            }
            let t = a + i as f64 * h;
            let next = rk4_step(rhs, &traj.state, t, h).map_err(|e| wrap_rhs_error(e, t))?;
            let t_next = if i + 1 == n { b } else { a + (i + 1) as f64 * h };
            traj.state = next;
            traj.t = t_next;
            traj.steps += 1;
            hook.after_step(t_next, &traj.state).map_err(|r| diverged(t_next, r))?;
        }
        a = b;
        traj.checkpoints.push(Checkpoint {
            t: b,
            state: traj.state.clone(),
        });
    }
    Ok(())
}

fn rk45_run<F>(
    rhs: &mut F,
    traj: &mut Trajectory,
    marks: &[f64],
    t_end: f64,
    config: &OdeConfig,
    hook: &mut dyn StepHook,
) -> Result<()>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let tol = (config.rel_tol, config.abs_tol);
    let mut h_adapt = config.step;
    let mut next_mark = 0;
    // rhs at the current state, carried over from the last stage of the previous step
    let mut first: Option<Vec<f64>> = None;
    while traj.t < t_end {
        if traj.steps >= config.max_steps {
            return Err(FlowError::MaxStepsExceeded {
                steps: traj.steps,
                t: traj.t,
            });
        }
        let last = traj.t + h_adapt >= t_end;
        let h = if last { t_end - traj.t } else { h_adapt };
        let t = traj.t;
        let step = dp_step(rhs, &traj.state, t, h, tol, first.as_deref()).map_err(|e| wrap_rhs_error(e, t))?;
        traj.steps += 1;
        let factor = if step.err == 0.0 {
            5.0
        } else {
            (0.9 * step.err.powf(-0.2)).clamp(0.2, 5.0)
        };
        if step.err > 1.0 {
            first = step.k.first().cloned();
            h_adapt = h * factor;
            if h_adapt < 1e-14 * t_end.abs().max(1.0) {
                return Err(diverged(t, "adaptive step underflow".into()));
            }
            continue;
        }
        let t_next = if last { t_end } else { t + h };
        while next_mark < marks.len() && marks[next_mark] < t_next {
            let theta = (marks[next_mark] - t) / h;
            traj.checkpoints.push(Checkpoint {
                t: marks[next_mark],
                state: step.interpolate(&traj.state, h, theta),
            });
            next_mark += 1;
        }
        traj.t = t_next;
        traj.state = step.y5;
        hook.after_step(traj.t, &traj.state).map_err(|r| diverged(traj.t, r))?;
        if next_mark < marks.len() && marks[next_mark] <= t_next {
            traj.checkpoints.push(Checkpoint {
                t: marks[next_mark],
                state: traj.state.clone(),
            });
            next_mark += 1;
        }
        first = step.k.into_iter().next_back();
        if !last {
            h_adapt = h * factor;
        }
    }
    Ok(())
}
