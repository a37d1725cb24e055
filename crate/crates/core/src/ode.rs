//! Fixed-step neural ODEs for length-of-stay and inter-visit states.
//!
//! Each segment `[t0, t1]` is split into `max(1, ceil(steps_per_unit · (t1 - t0)))`
//! equal steps. Zero-length segments return their input unchanged. The
//! vector field never sees `t`, so only time differences matter.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embedding::EMBED_INIT;
use crate::error::{Error, Result};
use crate::graph::{CustomOp, Graph, Var};
use crate::nn::{LayerNorm, Linear};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{matmul_raw, matmul_t_raw, t_matmul_raw, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    #[default]
    Rk4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientMode {
    /// Differentiate through every solver step on the tape.
    #[default]
    Backprop,
    /// Integrate the adjoint system backwards in time.
    Adjoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub steps_per_unit: u32,
    pub gradient: GradientMode,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps_per_unit: 2,
            gradient: GradientMode::Backprop,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit == 0 {
            return Err(Error::Config("solver.steps_per_unit must be positive".into()));
        }
        Ok(())
    }

    /// Number of steps for a segment of length `span`.
    pub fn steps_for(&self, span: f64) -> usize {
        ((self.steps_per_unit as f64 * span.abs()).ceil() as usize).max(1)
    }
}

/// How the first interval state is derived from the first pooled visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IntervalInit {
    /// `h_1 = v_1`.
    #[default]
    Identity,
    /// `h_1 = A v_1 + b`.
    Affine,
}

/// A time-invariant map `f: R^d → R^d`, applied to every row.
pub trait VectorField {
    fn eval(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var>;
}

/// `f(h) = W₂ tanh(W₁ h + b₁) + b₂`.
#[derive(Debug, Clone, Copy)]
pub struct OdeFunc {
    pub first: Linear,
    pub second: Linear,
}

/// Output-layer init scale, small so early trajectories stay near their start.
const OUTPUT_INIT_SCALE: f64 = 0.1;

impl OdeFunc {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            first: Linear::new(store, &format!("{name}.first"), d, d, true, rng)?,
            second: Linear::with_scale(store, &format!("{name}.second"), d, d, true, OUTPUT_INIT_SCALE, rng)?,
        })
    }

    fn param_ids(&self) -> [ParamId; 4] {
        [
            self.first.weight,
            self.first.bias.expect("ode layers carry a bias"),
            self.second.weight,
            self.second.bias.expect("ode layers carry a bias"),
        ]
    }

    /// Solves each row of `h0` over its own `(dt, steps)` plan, either on the
    /// tape or through the adjoint op.
    fn solve_plan(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        h0: Var,
        plan: &[(f64, usize)],
        cfg: &SolverConfig,
    ) -> Result<Var> {
        if plan.iter().all(|p| p.1 == 0) {
            return Ok(h0);
        }
        match cfg.gradient {
            GradientMode::Backprop => integrate(g, store, self, h0, plan, cfg.method),
            GradientMode::Adjoint => {
                let ids = self.param_ids();
                let vars: Vec<Var> = ids.iter().map(|id| g.param(store, *id)).collect();
                let mlp = RawMlp::from_values(ids.map(|id| store.value(id).clone()));
                let op = AdjointSolve {
                    mlp,
                    plan: plan.to_vec(),
                    method: cfg.method,
                };
                let out = op.forward(g.value(h0))?;
                let mut inputs = vec![h0];
                inputs.extend(vars);
                Ok(g.custom(&inputs, out, Arc::new(op)))
            }
        }
    }
}

impl VectorField for OdeFunc {
    fn eval(&self, g: &mut Graph, store: &ParamStore, h: Var) -> Result<Var> {
        let z = self.first.forward(g, store, h)?;
        let z = g.tanh(z);
        self.second.forward(g, store, z)
    }
}

fn dt_column(g: &mut Graph, plan: &[(f64, usize)], step: usize, factor: f64) -> Result<Var> {
    let col = plan
        .iter()
        .map(|&(dt, n)| if step < n { dt * factor } else { 0.0 })
        .collect();
    Ok(g.constant(Tensor::matrix(plan.len(), 1, col)?))
}

/// Fixed-step integration where row `i` takes `plan[i].1` steps of size
/// `plan[i].0`; rows that finish early are held fixed.
pub fn integrate<F: VectorField + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    field: &F,
    h0: Var,
    plan: &[(f64, usize)],
    method: Method,
) -> Result<Var> {
    if g.value(h0).rows() != plan.len() {
        return Err(Error::shape(
            "ode_solve",
            format!("{} rows for {} plans", g.value(h0).rows(), plan.len()),
        ));
    }
    let steps = plan.iter().map(|p| p.1).max().unwrap_or(0);
    let mut h = h0;
    for s in 0..steps {
        let full = dt_column(g, plan, s, 1.0)?;
        h = match method {
            Method::Euler => {
                let k = field.eval(g, store, h)?;
                let dk = g.mul_col(k, full)?;
                g.add(h, dk)?
            }
            Method::Rk4 => {
                let half = dt_column(g, plan, s, 0.5)?;
                let sixth = dt_column(g, plan, s, 1.0 / 6.0)?;
                let k1 = field.eval(g, store, h)?;
                let x = g.mul_col(k1, half)?;
                let x = g.add(h, x)?;
                let k2 = field.eval(g, store, x)?;
                let x = g.mul_col(k2, half)?;
                let x = g.add(h, x)?;
                let k3 = field.eval(g, store, x)?;
                let x = g.mul_col(k3, full)?;
                let x = g.add(h, x)?;
                let k4 = field.eval(g, store, x)?;
                let k2 = g.scale(k2, 2.0);
                let k3 = g.scale(k3, 2.0);
                let sum = g.add_all(&[k1, k2, k3, k4])?;
                let inc = g.mul_col(sum, sixth)?;
                g.add(h, inc)?
            }
        };
    }
    Ok(h)
}

fn check_times(times: &[f64]) -> Result<()> {
    if times.is_empty() {
        return Err(Error::Time("no time points".into()));
    }
    if let Some(t) = times.iter().find(|t| !t.is_finite()) {
        return Err(Error::Time(format!("non-finite time {t}")));
    }
    if let Some(w) = times.windows(2).find(|w| w[1] < w[0]) {
        return Err(Error::Time(format!("times decrease from {} to {}", w[0], w[1])));
    }
    Ok(())
}

fn segment_plan(rows: usize, span: f64, cfg: &SolverConfig) -> Vec<(f64, usize)> {
    if span == 0.0 {
        return vec![(0.0, 0); rows];
    }
    let n = cfg.steps_for(span);
    vec![(span / n as f64, n); rows]
}

/// States at each of `times`, starting from `h0` at `times[0]`. Every row of
/// `h0` is an independent trajectory. Always differentiates on the tape.
pub fn ode_solve<F: VectorField + ?Sized>(
    g: &mut Graph,
    store: &ParamStore,
    field: &F,
    h0: Var,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Var>> {
    check_times(times)?;
    let rows = g.value(h0).rows();
    let mut out = vec![h0];
    for w in times.windows(2) {
        let plan = segment_plan(rows, w[1] - w[0], cfg);
        let prev = *out.last().expect("non-empty");
        let next = if plan[0].1 == 0 {
            prev
        } else {
            integrate(g, store, field, prev, &plan, cfg.method)?
        };
        out.push(next);
    }
    Ok(out)
}

/// [`ode_solve`] for an [`OdeFunc`], honouring the configured gradient mode.
pub fn solve_func(
    g: &mut Graph,
    store: &ParamStore,
    func: &OdeFunc,
    h0: Var,
    times: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Var>> {
    check_times(times)?;
    let rows = g.value(h0).rows();
    let mut out = vec![h0];
    for w in times.windows(2) {
        let plan = segment_plan(rows, w[1] - w[0], cfg);
        let prev = *out.last().expect("non-empty");
        out.push(func.solve_plan(g, store, prev, &plan, cfg)?);
    }
    Ok(out)
}

/// Discharge states: row `i` of `v` integrated from `admits[i]` to `discharges[i]`.
pub fn los_state(
    g: &mut Graph,
    store: &ParamStore,
    func: &OdeFunc,
    v: Var,
    admits: &[f64],
    discharges: &[f64],
    cfg: &SolverConfig,
) -> Result<Var> {
    let rows = g.value(v).rows();
    if admits.len() != rows || discharges.len() != rows {
        return Err(Error::shape("los_state", format!("{rows} visits, {} admits", admits.len())));
    }
    let mut plan = Vec::with_capacity(rows);
    for (&a, &b) in admits.iter().zip(discharges) {
        check_times(&[a, b])?;
        plan.push(if b == a {
            (0.0, 0)
        } else {
            let n = cfg.steps_for(b - a);
            ((b - a) / n as f64, n)
        });
    }
    func.solve_plan(g, store, v, &plan, cfg)
}

/// Interval states `h_1..h_T` at the admission times, `h_1` derived from
/// the first pooled visit `v1` (`1 × d`).
pub fn interval_states(
    g: &mut Graph,
    store: &ParamStore,
    func: &OdeFunc,
    init: Option<&Linear>,
    v1: Var,
    admits: &[f64],
    cfg: &SolverConfig,
) -> Result<Vec<Var>> {
    let h1 = match init {
        Some(lin) => lin.forward(g, store, v1)?,
        None => v1,
    };
    solve_func(g, store, func, h1, admits, cfg)
}

/// `LN(v + v_dis + h)`; absent terms are dropped.
pub fn fuse(
    g: &mut Graph,
    store: &ParamStore,
    norm: &LayerNorm,
    v: Var,
    discharge: Option<Var>,
    interval: Option<Var>,
) -> Result<Var> {
    let mut terms = vec![v];
    terms.extend(discharge);
    terms.extend(interval);
    let s = g.add_all(&terms)?;
    norm.forward(g, store, s)
}

/// Learnable per-position rows used in place of the ODE states.
#[derive(Debug, Clone, Copy)]
pub struct PositionalTable {
    pub table: ParamId,
    max_len: usize,
}

impl PositionalTable {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        max_len: usize,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            table: store.add_uniform(name, &[max_len, d], EMBED_INIT, rng)?,
            max_len,
        })
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    /// Rows for positions `0..len`.
    pub fn lookup(&self, g: &mut Graph, store: &ParamStore, positions: &[usize]) -> Result<Var> {
        if let Some(&p) = positions.iter().find(|&&p| p >= self.max_len) {
            return Err(Error::OutOfRange { index: p, len: self.max_len });
        }
        let t = g.param(store, self.table);
        let rows: Vec<Option<usize>> = positions.iter().map(|&p| Some(p)).collect();
        g.gather(t, &rows)
    }
}

/// Plain-`f64` copy of an [`OdeFunc`] for the adjoint solve.
#[derive(Debug, Clone)]
struct RawMlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    d: usize,
}

impl RawMlp {
    fn from_values([w1, b1, w2, b2]: [Tensor; 4]) -> Self {
        let d = w1.cols();
        Self { w1, b1, w2, b2, d }
    }

    fn hidden(&self, h: &[f64]) -> Vec<f64> {
        let mut z = matmul_t_raw(h, self.w1.data(), 1, self.d, self.d);
        for (zi, b) in z.iter_mut().zip(self.b1.data()) {
            *zi = (*zi + b).tanh();
        }
        z
    }

    fn eval(&self, h: &[f64]) -> Vec<f64> {
        let z = self.hidden(h);
        let mut y = matmul_t_raw(&z, self.w2.data(), 1, self.d, self.d);
        for (yi, b) in y.iter_mut().zip(self.b2.data()) {
            *yi += b;
        }
        y
    }

    /// `(aᵀ ∂f/∂h, aᵀ ∂f/∂θ)` with θ laid out as `[W₁, b₁, W₂, b₂]`.
    fn vjp(&self, h: &[f64], a: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.d;
        let z = self.hidden(h);
        let aw2 = matmul_raw(a, self.w2.data(), 1, d, d);
        let u: Vec<f64> = aw2.iter().zip(&z).map(|(g, z)| g * (1.0 - z * z)).collect();
        let ah = matmul_raw(&u, self.w1.data(), 1, d, d);
        let mut theta = Vec::with_capacity(2 * d * d + 2 * d);
        theta.extend(t_matmul_raw(&u, h, 1, d, d));
        theta.extend_from_slice(&u);
        theta.extend(t_matmul_raw(a, &z, 1, d, d));
        theta.extend_from_slice(a);
        (ah, theta)
    }

    fn theta_len(&self) -> usize {
        2 * self.d * self.d + 2 * self.d
    }
}

fn axpy(y: &[f64], a: f64, x: &[f64]) -> Vec<f64> {
    y.iter().zip(x).map(|(y, x)| y + a * x).collect()
}

fn raw_step(method: Method, state: &[f64], dt: f64, f: &dyn Fn(&[f64]) -> Vec<f64>) -> Vec<f64> {
    match method {
        Method::Euler => axpy(state, dt, &f(state)),
        Method::Rk4 => {
            let k1 = f(state);
            let k2 = f(&axpy(state, dt * 0.5, &k1));
            let k3 = f(&axpy(state, dt * 0.5, &k2));
            let k4 = f(&axpy(state, dt, &k3));
            let sixth = dt / 6.0;
            (0..state.len())
                .map(|i| state[i] + sixth * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
                .collect()
        }
    }
}

/// One solve whose gradient comes from integrating
/// `ȧ = -aᵀ ∂f/∂h`, `θ̇ = -aᵀ ∂f/∂θ` backwards alongside `h`.
#[derive(Debug)]
struct AdjointSolve {
    mlp: RawMlp,
    plan: Vec<(f64, usize)>,
    method: Method,
}

impl AdjointSolve {
    fn forward(&self, h0: &Tensor) -> Result<Tensor> {
        let d = self.mlp.d;
        let mut out = Vec::with_capacity(h0.len());
        for (i, &(dt, n)) in self.plan.iter().enumerate() {
            let mut h = h0.row_slice(i).to_vec();
            for _ in 0..n {
                h = raw_step(self.method, &h, dt, &|x| self.mlp.eval(x));
            }
            out.extend(h);
        }
        Tensor::matrix(self.plan.len(), d, out)
    }
}

impl CustomOp for AdjointSolve {
    fn name(&self) -> &'static str {
        "ode_adjoint"
    }

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &Tensor) -> Result<Vec<Tensor>> {
        let d = self.mlp.d;
        let p = self.mlp.theta_len();
        let mut grad_h0 = Vec::with_capacity(inputs[0].len());
        let mut grad_theta = vec![0.0; p];
        for (i, &(dt, n)) in self.plan.iter().enumerate() {
            // state = [h, a, θ-adjoint], integrated from t1 back to t0
            let mut state = Vec::with_capacity(2 * d + p);
            state.extend_from_slice(output.row_slice(i));
            state.extend_from_slice(grad_output.row_slice(i));
            state.extend(std::iter::repeat_n(0.0, p));
            let dynamics = |s: &[f64]| {
                let (h, a) = (&s[..d], &s[d..2 * d]);
                let (ah, at) = self.mlp.vjp(h, a);
                let mut ds = self.mlp.eval(h);
                ds.extend(ah.iter().map(|v| -v));
                ds.extend(at.iter().map(|v| -v));
                ds
            };
            for _ in 0..n {
                state = raw_step(self.method, &state, -dt, &dynamics);
            }
            grad_h0.extend_from_slice(&state[d..2 * d]);
            for (g, v) in grad_theta.iter_mut().zip(&state[2 * d..]) {
                *g += v;
            }
        }
        let dd = d * d;
        Ok(vec![
            Tensor::new(inputs[0].shape().to_vec(), grad_h0)?,
            Tensor::matrix(d, d, grad_theta[..dd].to_vec())?,
            Tensor::matrix(1, d, grad_theta[dd..dd + d].to_vec())?,
            Tensor::matrix(d, d, grad_theta[dd + d..2 * dd + d].to_vec())?,
            Tensor::matrix(1, d, grad_theta[2 * dd + d..].to_vec())?,
        ])
    }
}
