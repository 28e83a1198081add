//! Per-path deterministic optimal control.
//!
//! Everything here optimizes the pathwise functional
//!
//! ```text
//! Ξ[η, μ] = Σ_k f(t_k, X_k, μ_k) Δt_k + g(X_T)          (left-endpoint quadrature)
//! ```
//!
//! over piecewise-constant controls with values in a finite grid `U_h`, with
//! `X` produced by the second-order Davie scheme of [`crate::rde`].
//!
//! `inner_sup_dp` runs backward dynamic programming on a state mesh with
//! multilinear interpolation; `rough_hjb_solve` marches the classical HJB
//! equation along smooth (piecewise-linear) approximations of the driver with
//! a monotone upwind scheme; `pmp_hamiltonian_residual` and
//! `spike_variation_check` are first-order optimality diagnostics built on the
//! backward adjoint equation.

use std::sync::Arc;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::rde::{
    davie_noise_into, davie_step_into, linear_davie_step, solve_controlled_rde, ControlPath,
    RdeSolution, VectorFieldSet,
};
use crate::rough_path::{hoelder_distance, GridRoughPath};

pub type RunningGain = dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync;
/// Fused hot-loop kernel: writes the drift `b(x,u)` and returns `f(t,x,u)`
/// in one call. Must agree exactly with the separate `vf.b` and `f` closures.
pub type StepGain = dyn Fn(f64, &[f64], &[f64], &mut [f64]) -> f64 + Send + Sync;
/// A [`StepGain`] with the time argument already folded in.
pub type PreparedStepGain = Box<dyn Fn(&[f64], &[f64], &mut [f64]) -> f64 + Send + Sync>;
/// Per-step kernel factory: called once per time step, the returned closure
/// serves every (state, control) pair of that step.
pub type StepGainFactory = dyn Fn(f64) -> PreparedStepGain + Send + Sync;
pub type TerminalGain = dyn Fn(&[f64]) -> f64 + Send + Sync;
pub type TerminalGradient = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type RunningGradient = dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync;

/// Finite control grid `U_h` inside a coordinate box.
#[derive(Clone)]
pub struct ControlSet {
    dim: usize,
    points: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
}

impl ControlSet {
    pub fn from_points(dim: usize, points: Vec<f64>, lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if points.is_empty() || points.len() % dim != 0 {
            return Err(Error::invalid(
                "control grid must be a nonempty list of points",
            ));
        }
        let set = ControlSet { dim, points, lo, hi };
        for i in 0..set.len() {
            if !set.contains(set.point(i)) {
                return Err(Error::invalid("control grid point outside the control box"));
            }
        }
        Ok(set)
    }

    /// Tensor grid with `per_axis` equispaced points per axis.
    pub fn equispaced(dim: usize, per_axis: usize, lo: &[f64], hi: &[f64]) -> Result<Self> {
        if per_axis == 0 {
            return Err(Error::invalid("need at least one control point per axis"));
        }
        let count = per_axis.pow(dim as u32);
        let mut points = Vec::with_capacity(count * dim);
        for flat in 0..count {
            let mut rem = flat;
            for a in 0..dim {
                let idx = rem % per_axis;
                rem /= per_axis;
                let w = if per_axis == 1 {
                    0.5
                } else {
                    idx as f64 / (per_axis - 1) as f64
                };
                points.push(lo[a] + w * (hi[a] - lo[a]));
            }
        }
        ControlSet::from_points(dim, points, lo.to_vec(), hi.to_vec())
    }

    pub fn single(u: &[f64]) -> Self {
        ControlSet {
            dim: u.len(),
            points: u.to_vec(),
            lo: u.to_vec(),
            hi: u.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn bounds(&self) -> (&[f64], &[f64]) {
        (&self.lo, &self.hi)
    }

    pub fn contains(&self, u: &[f64]) -> bool {
        let tol = 1e-12;
        u.iter()
            .enumerate()
            .all(|(a, &v)| v >= self.lo[a] - tol && v <= self.hi[a] + tol)
    }

    /// True when the box is a single point per axis.
    pub fn is_degenerate(&self) -> bool {
        self.lo.iter().zip(self.hi.iter()).all(|(a, b)| a == b)
    }
}

/// Pathwise control problem data. Cloning is cheap (shared closures).
#[derive(Clone)]
pub struct ControlProblem {
    pub vf: Arc<VectorFieldSet>,
    pub f: Arc<RunningGain>,
    pub g: Arc<TerminalGain>,
    pub dg: Option<Arc<TerminalGradient>>,
    pub df_x: Option<Arc<RunningGradient>>,
    /// Optional fused drift+gain kernel for the dynamic-programming inner
    /// loop; semantics must match `vf.b` and `f` bit-for-bit.
    pub step_gain: Option<Arc<StepGain>>,
    /// Optional per-step kernel factory; takes precedence over `step_gain`
    /// in the inner loop. Semantics must match `vf.b` and `f` bit-for-bit.
    pub step_gain_at: Option<Arc<StepGainFactory>>,
    pub control_set: ControlSet,
    pub horizon: f64,
}

impl ControlProblem {
    pub fn new(
        vf: VectorFieldSet,
        f: impl Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync + 'static,
        g: impl Fn(&[f64]) -> f64 + Send + Sync + 'static,
        control_set: ControlSet,
        horizon: f64,
    ) -> Self {
        ControlProblem {
            vf: Arc::new(vf),
            f: Arc::new(f),
            g: Arc::new(g),
            dg: None,
            df_x: None,
            step_gain: None,
            step_gain_at: None,
            control_set,
            horizon,
        }
    }

    pub fn with_step_gain(
        mut self,
        fused: impl Fn(f64, &[f64], &[f64], &mut [f64]) -> f64 + Send + Sync + 'static,
    ) -> Self {
        self.step_gain = Some(Arc::new(fused));
        self
    }

    pub fn with_step_gain_at(
        mut self,
        factory: impl Fn(f64) -> PreparedStepGain + Send + Sync + 'static,
    ) -> Self {
        self.step_gain_at = Some(Arc::new(factory));
        self
    }

    /// Largest discrepancy between the fused kernel and the separate drift
    /// and gain closures on probe points; 0 when no kernel is installed.
    pub fn fused_kernel_probe(&self, probes: &[(f64, Vec<f64>, Vec<f64>)]) -> f64 {
        let e = self.vf.state_dim();
        let mut b_fused = vec![0.0; e];
        let mut b_ref = vec![0.0; e];
        let mut worst = 0.0f64;
        for (t, x, u) in probes {
            self.vf.eval_b(x, u, &mut b_ref);
            let f_ref = (self.f)(*t, x, u);
            if let Some(fused) = &self.step_gain {
                let fv = fused(*t, x, u, &mut b_fused);
                worst = worst.max((fv - f_ref).abs());
                for r in 0..e {
                    worst = worst.max((b_fused[r] - b_ref[r]).abs());
                }
            }
            if let Some(factory) = &self.step_gain_at {
                let prepared = factory(*t);
                let fv = prepared(x, u, &mut b_fused);
                worst = worst.max((fv - f_ref).abs());
                for r in 0..e {
                    worst = worst.max((b_fused[r] - b_ref[r]).abs());
                }
            }
        }
        worst
    }

    pub fn with_dg(mut self, dg: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        self.dg = Some(Arc::new(dg));
        self
    }

    pub fn with_df_x(
        mut self,
        df_x: impl Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.df_x = Some(Arc::new(df_x));
        self
    }

    pub fn eval_dg(&self, x: &[f64], out: &mut [f64]) {
        if let Some(dg) = &self.dg {
            dg(x, out);
            return;
        }
        let h0 = f64::EPSILON.powf(1.0 / 3.0);
        let amp = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = h0 * (1.0 + amp);
        let mut xe = x.to_vec();
        for c in 0..x.len() {
            xe[c] = x[c] + h;
            let fp = (self.g)(&xe);
            xe[c] = x[c] - h;
            let fm = (self.g)(&xe);
            xe[c] = x[c];
            out[c] = (fp - fm) / (2.0 * h);
        }
    }

    pub fn eval_df_x(&self, t: f64, x: &[f64], u: &[f64], out: &mut [f64]) {
        if let Some(df) = &self.df_x {
            df(t, x, u, out);
            return;
        }
        let h0 = f64::EPSILON.powf(1.0 / 3.0);
        let amp = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = h0 * (1.0 + amp);
        let mut xe = x.to_vec();
        for c in 0..x.len() {
            xe[c] = x[c] + h;
            let fp = (self.f)(t, &xe, u);
            xe[c] = x[c] - h;
            let fm = (self.f)(t, &xe, u);
            xe[c] = x[c];
            out[c] = (fp - fm) / (2.0 * h);
        }
    }
}

/// Uniform tensor mesh (one or two axes at desk scale).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Mesh {
    axes: Vec<MeshAxis>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MeshAxis {
    pub lo: f64,
    pub hi: f64,
    pub nodes: usize,
}

impl MeshAxis {
    fn step(&self) -> f64 {
        (self.hi - self.lo) / (self.nodes - 1) as f64
    }
}

impl Mesh {
    pub fn new(axes: Vec<MeshAxis>) -> Result<Self> {
        if axes.is_empty() || axes.len() > 4 {
            return Err(Error::invalid("mesh needs between one and four axes"));
        }
        for ax in &axes {
            if ax.nodes < 2 || !(ax.hi > ax.lo) {
                return Err(Error::invalid("each mesh axis needs hi > lo and ≥ 2 nodes"));
            }
        }
        Ok(Mesh { axes })
    }

    pub fn uniform_1d(lo: f64, hi: f64, nodes: usize) -> Result<Self> {
        Mesh::new(vec![MeshAxis { lo, hi, nodes }])
    }

    /// Centered box mesh: `center ± halfwidth` per axis.
    pub fn centered(center: &[f64], halfwidth: f64, nodes: usize) -> Result<Self> {
        Mesh::new(
            center
                .iter()
                .map(|&c| MeshAxis {
                    lo: c - halfwidth,
                    hi: c + halfwidth,
                    nodes,
                })
                .collect(),
        )
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn axes(&self) -> &[MeshAxis] {
        &self.axes
    }

    pub fn len(&self) -> usize {
        self.axes.iter().map(|a| a.nodes).product()
    }

    pub fn min_step(&self) -> f64 {
        self.axes
            .iter()
            .map(|a| a.step())
            .fold(f64::INFINITY, f64::min)
    }

    /// Coordinates of the flat node index (row-major, first axis slowest).
    pub fn node(&self, flat: usize, out: &mut [f64]) {
        let mut rem = flat;
        for a in (0..self.axes.len()).rev() {
            let ax = &self.axes[a];
            let idx = rem % ax.nodes;
            rem /= ax.nodes;
            out[a] = ax.lo + idx as f64 * ax.step();
        }
    }

    /// Multilinear interpolation with clamping; the flag reports whether `x`
    /// fell outside the box.
    pub fn interp(&self, values: &[f64], x: &[f64]) -> (f64, bool) {
        debug_assert_eq!(values.len(), self.len());
        if self.axes.len() == 1 {
            let ax = &self.axes[0];
            let step = ax.step();
            let mut clamped = false;
            let mut t = (x[0] - ax.lo) / step;
            if !(t >= 0.0) {
                t = 0.0;
                clamped = true;
            }
            let max_t = (ax.nodes - 1) as f64;
            if t > max_t {
                t = max_t;
                clamped = true;
            }
            let i = (t as usize).min(ax.nodes - 2);
            let w = t - i as f64;
            return (values[i] * (1.0 - w) + values[i + 1] * w, clamped);
        }
        let dim = self.axes.len();
        let mut base = [0usize; 4];
        let mut frac = [0.0f64; 4];
        let mut clamped = false;
        for a in 0..dim {
            let ax = &self.axes[a];
            let mut t = (x[a] - ax.lo) / ax.step();
            if !(t >= 0.0) {
                t = 0.0;
                clamped = true;
            }
            let max_t = (ax.nodes - 1) as f64;
            if t > max_t {
                t = max_t;
                clamped = true;
            }
            let i = (t as usize).min(ax.nodes - 2);
            base[a] = i;
            frac[a] = t - i as f64;
        }
        let mut acc = 0.0;
        for corner in 0..(1usize << dim) {
            let mut weight = 1.0;
            let mut flat = 0usize;
            for a in 0..dim {
                let hi_side = (corner >> a) & 1 == 1;
                let idx = base[a] + hi_side as usize;
                weight *= if hi_side { frac[a] } else { 1.0 - frac[a] };
                flat = flat * self.axes[a].nodes + idx;
            }
            acc += weight * values[flat];
        }
        (acc, clamped)
    }
}

/// Value slices on (time grid) × (state mesh), with optional argmax indices.
#[derive(Debug, Clone, Serialize)]
pub struct ValueGrid {
    pub times: Vec<f64>,
    pub mesh: Mesh,
    /// One flat mesh slice per stored time.
    pub values: Vec<Vec<f64>>,
    pub argmax: Option<Vec<Vec<u16>>>,
}

impl ValueGrid {
    /// Value at `(t, x)`: linear in time between stored slices, multilinear
    /// in space.
    pub fn at(&self, t: f64, x: &[f64]) -> f64 {
        let n = self.times.len();
        let hi = self.times.partition_point(|&v| v < t).clamp(1, n - 1);
        let lo = hi - 1;
        let w = ((t - self.times[lo]) / (self.times[hi] - self.times[lo])).clamp(0.0, 1.0);
        let (a, _) = self.mesh.interp(&self.values[lo], x);
        let (b, _) = self.mesh.interp(&self.values[hi], x);
        a * (1.0 - w) + b * w
    }

    /// Sup-norm difference over the union of both time grids, restricted to
    /// mesh nodes at least `margin_nodes` away from the boundary. Values are
    /// interpolated linearly in time where a grid lacks a slice.
    pub fn sup_diff_interior(&self, other: &ValueGrid, margin_nodes: usize) -> f64 {
        let mut times: Vec<f64> = self
            .times
            .iter()
            .chain(other.times.iter())
            .copied()
            .collect();
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        times.dedup();
        let mut worst = 0.0f64;
        let mut coords = vec![0.0; self.mesh.dim()];
        for &t in &times {
            for flat in 0..self.mesh.len() {
                if !self.is_interior(flat, margin_nodes) {
                    continue;
                }
                self.mesh.node(flat, &mut coords);
                let mine = self.at(t, &coords);
                let theirs = other.at(t, &coords);
                worst = worst.max((mine - theirs).abs());
            }
        }
        worst
    }

    fn is_interior(&self, flat: usize, margin: usize) -> bool {
        let mut rem = flat;
        for a in (0..self.mesh.dim()).rev() {
            let nodes = self.mesh.axes()[a].nodes;
            let idx = rem % nodes;
            rem /= nodes;
            if idx < margin || idx + margin >= nodes {
                return false;
            }
        }
        true
    }
}

/// Left-endpoint payoff of a concrete control along a driver.
pub fn payoff(
    problem: &ControlProblem,
    mu: &ControlPath,
    eta: &GridRoughPath,
    t0: f64,
    x0: &[f64],
) -> Result<f64> {
    let traj = solve_controlled_rde(x0, t0, &problem.vf, mu, eta)?;
    payoff_along(problem, &traj, mu)
}

/// Payoff of an already-computed trajectory.
pub fn payoff_along(problem: &ControlProblem, traj: &RdeSolution, mu: &ControlPath) -> Result<f64> {
    let grid = traj.grid();
    let mut acc = 0.0;
    for k in traj.start()..grid.n_intervals() {
        acc += (problem.f)(grid.t(k), traj.state(k), mu.u(k)) * grid.dt(k);
    }
    Ok(acc + (problem.g)(traj.terminal()))
}

/// Tuning knobs for [`inner_sup_dp`].
#[derive(Debug, Clone)]
pub struct DpSettings {
    pub keep_value_grid: bool,
    /// Fraction of clamped interpolation lookups above which the result is
    /// flagged out-of-domain.
    pub boundary_warn_fraction: f64,
}

impl Default for DpSettings {
    fn default() -> Self {
        DpSettings {
            keep_value_grid: false,
            boundary_warn_fraction: 0.01,
        }
    }
}

/// Result of a per-path optimization.
#[derive(Clone)]
pub struct PathwiseResult {
    /// Payoff of the extracted argmax pair; re-evaluating [`payoff`] on
    /// `(control, trajectory)` reproduces it exactly.
    pub value: f64,
    /// Backward-induction value at `(t0, x0)` (interpolated).
    pub dp_value: f64,
    pub control: ControlPath,
    pub trajectory: RdeSolution,
    pub boundary_hits: u64,
    pub interp_evals: u64,
    pub out_of_domain_warning: bool,
    pub value_grid: Option<ValueGrid>,
}

/// Backward dynamic programming over `mesh × U_h`, then a forward argmax
/// sweep from `(t0, x0)`.
///
/// Each transition applies one Davie step and a left-endpoint running-gain
/// increment, interpolating the next value slice multilinearly (clamped at
/// the boundary, with clamp accounting). Ties in the maximization resolve to
/// the smallest control index. The noise part of the step is hoisted out of
/// the control loop; this is exact because the scheme carries no drift–noise
/// cross terms.
pub fn inner_sup_dp(
    problem: &ControlProblem,
    eta: &GridRoughPath,
    mesh: &Mesh,
    t0: f64,
    x0: &[f64],
    settings: &DpSettings,
) -> Result<PathwiseResult> {
    let vf = &problem.vf;
    let e = vf.state_dim();
    if mesh.dim() != e {
        return Err(Error::invalid(
            "mesh dimension must match the state dimension",
        ));
    }
    if problem.control_set.is_empty() {
        return Err(Error::invalid("control grid is empty"));
    }
    let grid = eta.grid();
    let n = grid.n_intervals();
    let k0 = grid.index_of(t0)?;
    let n_nodes = mesh.len();
    let n_controls = problem.control_set.len();
    let mut scratch = vf.scratch();

    let mut nodes = vec![0.0; n_nodes * e];
    {
        let mut buf = [0.0; 4];
        for j in 0..n_nodes {
            mesh.node(j, &mut buf[..e]);
            nodes[j * e..(j + 1) * e].copy_from_slice(&buf[..e]);
        }
    }

    let mut slices: Vec<Vec<f64>> = vec![Vec::new(); n - k0 + 1];
    let mut argmax: Vec<Vec<u16>> = Vec::new();
    let mut terminal = vec![0.0; n_nodes];
    for j in 0..n_nodes {
        terminal[j] = (problem.g)(&nodes[j * e..(j + 1) * e]);
    }
    slices[n - k0] = terminal;

    let mut boundary_hits: u64 = 0;
    let mut interp_evals: u64 = 0;
    let mut y_next = [0.0f64; 4];
    let y_next = &mut y_next[..e];
    for k in (k0..n).rev() {
        let (delta, area, dt, t) = (eta.inc(k), eta.area(k), grid.dt(k), grid.t(k));
        let prepared = problem.step_gain_at.as_ref().map(|factory| factory(t));
        let (head, tail) = slices.split_at_mut(k - k0 + 1);
        let next_slice: &[f64] = &tail[0];
        let cur = &mut head[k - k0];
        cur.resize(n_nodes, 0.0);
        let mut arg_slice = if settings.keep_value_grid {
            vec![0u16; n_nodes]
        } else {
            Vec::new()
        };
        for j in 0..n_nodes {
            let y = &nodes[j * e..(j + 1) * e];
            davie_noise_into(vf, y, delta, area, &mut scratch);
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0usize;
            for ui in 0..n_controls {
                let u = problem.control_set.point(ui);
                let fval = match (&prepared, &problem.step_gain) {
                    (Some(pk), _) => pk(y, u, &mut scratch.b),
                    (None, Some(fused)) => fused(t, y, u, &mut scratch.b),
                    (None, None) => {
                        vf.eval_b(y, u, &mut scratch.b);
                        (problem.f)(t, y, u)
                    }
                };
                let mut finite = true;
                for r in 0..e {
                    let v = y[r] + scratch.b[r] * dt + scratch.noise[r];
                    y_next[r] = v;
                    finite &= v.is_finite();
                }
                if !finite {
                    return Err(Error::NumericalOverflow {
                        step: k,
                        context: "dynamic programming step left the finite range".into(),
                    });
                }
                let (cont, clamped) = mesh.interp(next_slice, y_next);
                interp_evals += 1;
                boundary_hits += clamped as u64;
                let cand = fval * dt + cont;
                if cand > best {
                    best = cand;
                    best_i = ui;
                }
            }
            cur[j] = best;
            if settings.keep_value_grid {
                arg_slice[j] = best_i as u16;
            }
        }
        if settings.keep_value_grid {
            argmax.push(arg_slice);
        }
    }
    if settings.keep_value_grid {
        argmax.reverse();
    }

    let (dp_value, _) = mesh.interp(&slices[0], x0);

    // forward argmax extraction from the exact state
    let m = problem.control_set.dim();
    let mut controls = vec![0.0; n * m];
    let mut states = Vec::with_capacity(n - k0 + 1);
    let mut y = x0.to_vec();
    states.push(y.clone());
    let mut value = 0.0;
    let mut y_cur = vec![0.0; e];
    for k in k0..n {
        let (delta, area, dt, t) = (eta.inc(k), eta.area(k), grid.dt(k), grid.t(k));
        let prepared = problem.step_gain_at.as_ref().map(|factory| factory(t));
        davie_noise_into(vf, &y, delta, area, &mut scratch);
        let next_slice = &slices[k - k0 + 1];
        let mut best = f64::NEG_INFINITY;
        let mut best_i = 0usize;
        for ui in 0..n_controls {
            let u = problem.control_set.point(ui);
            let fval = match (&prepared, &problem.step_gain) {
                (Some(pk), _) => pk(&y, u, &mut scratch.b),
                (None, Some(fused)) => fused(t, &y, u, &mut scratch.b),
                (None, None) => {
                    vf.eval_b(&y, u, &mut scratch.b);
                    (problem.f)(t, &y, u)
                }
            };
            for r in 0..e {
                y_next[r] = y[r] + scratch.b[r] * dt + scratch.noise[r];
            }
            let (cont, clamped) = mesh.interp(next_slice, y_next);
            interp_evals += 1;
            boundary_hits += clamped as u64;
            let cand = fval * dt + cont;
            if cand > best {
                best = cand;
                best_i = ui;
            }
        }
        let u = problem.control_set.point(best_i);
        controls[k * m..(k + 1) * m].copy_from_slice(u);
        value += (problem.f)(t, &y, u) * dt;
        y_cur.copy_from_slice(&y);
        let ok = davie_step_into(vf, &y_cur, u, delta, area, dt, &mut scratch, &mut y);
        if !ok {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "forward extraction left the finite range".into(),
            });
        }
        states.push(y.clone());
    }
    value += (problem.g)(&y);

    let out_of_domain_warning =
        (boundary_hits as f64) > settings.boundary_warn_fraction * interp_evals as f64;
    let value_grid = if settings.keep_value_grid {
        Some(ValueGrid {
            times: grid.times()[k0..].to_vec(),
            mesh: mesh.clone(),
            values: slices,
            argmax: Some(argmax),
        })
    } else {
        None
    };
    Ok(PathwiseResult {
        value,
        dp_value,
        control: ControlPath::from_values(grid.clone(), m, controls)?,
        trajectory: RdeSolution::new(grid.clone(), k0, states),
        boundary_hits,
        interp_evals,
        out_of_domain_warning,
        value_grid,
    })
}

/// State-independent additive problem: `σ ≡ Id`, `b = b(s,u)`, `f = f(s,u)`.
#[derive(Clone)]
pub struct AdditiveProblem {
    pub state_dim: usize,
    pub b: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    pub f: Arc<dyn Fn(f64, &[f64]) -> f64 + Send + Sync>,
    pub g: Arc<TerminalGain>,
    pub control_set: ControlSet,
    pub horizon: f64,
}

impl AdditiveProblem {
    pub fn to_control_problem(&self) -> ControlProblem {
        let e = self.state_dim;
        let b = Arc::clone(&self.b);
        let f = Arc::clone(&self.f);
        let vf = VectorFieldSet::new(
            e,
            e,
            self.control_set.dim(),
            move |_x, u, out| {
                let v = b(0.0, u);
                out.copy_from_slice(&v);
            },
            move |_x, out| {
                out.fill(0.0);
                for i in 0..e {
                    out[i * e + i] = 1.0;
                }
            },
        )
        .with_d_sigma(move |_x, out| out.fill(0.0));
        ControlProblem {
            vf: Arc::new(vf),
            f: Arc::new(move |t: f64, _x: &[f64], u: &[f64]| f(t, u)),
            g: Arc::clone(&self.g),
            dg: None,
            df_x: None,
            step_gain: None,
            step_gain_at: None,
            control_set: self.control_set.clone(),
            horizon: self.horizon,
        }
    }

    /// Structural detection from a generic problem by probing `σ ≈ Id` and
    /// state independence of `b` and `f` at the given states.
    pub fn try_from_problem(
        problem: &ControlProblem,
        probes: &[Vec<f64>],
    ) -> Result<AdditiveProblem> {
        let vf = &problem.vf;
        let e = vf.state_dim();
        if vf.driver_dim() != e {
            return Err(Error::invalid(
                "problem is not in additive form: driver and state dimensions differ",
            ));
        }
        if probes.len() < 2 {
            return Err(Error::invalid("need at least two probe states"));
        }
        let tol = 1e-9;
        let mut sig = vec![0.0; e * e];
        let u0 = vec![0.0; vf.control_dim()];
        let mut b_ref = vec![0.0; e];
        let mut b_cur = vec![0.0; e];
        for (pi, x) in probes.iter().enumerate() {
            vf.eval_sigma(x, &mut sig);
            for col in 0..e {
                for row in 0..e {
                    let want = if row == col { 1.0 } else { 0.0 };
                    if (sig[col * e + row] - want).abs() > tol {
                        return Err(Error::invalid("problem is not in additive form: σ ≠ Id"));
                    }
                }
            }
            vf.eval_b(x, &u0, &mut b_cur);
            if pi == 0 {
                b_ref.copy_from_slice(&b_cur);
            } else if b_ref
                .iter()
                .zip(b_cur.iter())
                .any(|(a, b)| (a - b).abs() > tol)
            {
                return Err(Error::invalid(
                    "problem is not in additive form: b depends on the state",
                ));
            }
            let f0 = (problem.f)(0.0, &probes[0], &u0);
            if ((problem.f)(0.0, x, &u0) - f0).abs() > tol {
                return Err(Error::invalid(
                    "problem is not in additive form: f depends on the state",
                ));
            }
        }
        let vf2 = Arc::clone(&problem.vf);
        let f2 = Arc::clone(&problem.f);
        let e2 = e;
        Ok(AdditiveProblem {
            state_dim: e,
            b: Arc::new(move |_t, u| {
                let origin = vec![0.0; e2];
                let mut out = vec![0.0; e2];
                vf2.eval_b(&origin, u, &mut out);
                out
            }),
            f: Arc::new(move |t, u| {
                let origin = vec![0.0; e2];
                f2(t, &origin, u)
            }),
            g: Arc::clone(&problem.g),
            control_set: problem.control_set.clone(),
            horizon: problem.horizon,
        })
    }
}

fn golden_section_max(mut lo: f64, mut hi: f64, f: &dyn Fn(f64) -> f64) -> (f64, f64) {
    const INV_PHI: f64 = 0.618_033_988_749_894_8;
    let mut c = hi - INV_PHI * (hi - lo);
    let mut d = lo + INV_PHI * (hi - lo);
    let mut fc = f(c);
    let mut fd = f(d);
    for _ in 0..60 {
        if fc > fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - INV_PHI * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + INV_PHI * (hi - lo);
            fd = f(d);
        }
    }
    let mid = 0.5 * (lo + hi);
    (mid, f(mid))
}

/// Closed-form pathwise value for additive problems:
/// `v^η(t,x) = v⁰(t, x + η_T − η_t)` with `v⁰` the constant-control optimum
/// refined by golden-section search along each control axis. Exact whenever
/// `f ≡ 0`, `b(s,u) = u` and `U` is a convex box (constant controls realize
/// the whole reachable set there).
pub fn additive_closed_form_value(
    ap: &AdditiveProblem,
    eta: &GridRoughPath,
    t0: f64,
    x0: &[f64],
) -> Result<f64> {
    if eta.dim() != ap.state_dim {
        return Err(Error::GridMismatch(
            "driver dimension must equal the state dimension".into(),
        ));
    }
    let grid = eta.grid();
    let k0 = grid.index_of(t0)?;
    let shift = eta.total_increment_from(k0);
    let y: Vec<f64> = x0.iter().zip(shift.iter()).map(|(a, b)| a + b).collect();

    let value_of = |u: &[f64]| -> f64 {
        let mut running = 0.0;
        let mut drift = vec![0.0; ap.state_dim];
        for k in k0..grid.n_intervals() {
            let t = grid.t(k);
            let dt = grid.dt(k);
            running += (ap.f)(t, u) * dt;
            let b = (ap.b)(t, u);
            for (dr, bv) in drift.iter_mut().zip(b.iter()) {
                *dr += bv * dt;
            }
        }
        let endpoint: Vec<f64> = y.iter().zip(drift.iter()).map(|(a, b)| a + b).collect();
        running + (ap.g)(&endpoint)
    };

    let set = &ap.control_set;
    let mut best = f64::NEG_INFINITY;
    let mut best_u = set.point(0).to_vec();
    for i in 0..set.len() {
        let v = value_of(set.point(i));
        if v > best {
            best = v;
            best_u = set.point(i).to_vec();
        }
    }
    if !set.is_degenerate() {
        // coordinate-wise golden refinement over the convex hull
        let (lo, hi) = set.bounds();
        for _ in 0..2 {
            for a in 0..set.dim() {
                let u_fixed = best_u.clone();
                let (ua, va) = golden_section_max(lo[a], hi[a], &|v| {
                    let mut u = u_fixed.clone();
                    u[a] = v;
                    value_of(&u)
                });
                if va > best {
                    best = va;
                    best_u[a] = ua;
                }
            }
        }
    }
    Ok(best)
}

/// Tuning knobs for [`rough_hjb_solve`].
#[derive(Debug, Clone)]
pub struct HjbSettings {
    pub cfl: f64,
    pub max_substeps_per_interval: usize,
    /// Hölder exponent for the driver-distance diagnostic.
    pub alpha: f64,
    /// Boundary margin (in nodes) excluded from the convergence diagnostic;
    /// one-sided differencing pollutes a few cells near the edges.
    pub diff_margin: usize,
}

impl Default for HjbSettings {
    fn default() -> Self {
        HjbSettings {
            cfl: 0.9,
            max_substeps_per_interval: 200_000,
            alpha: 0.4,
            diff_margin: 1,
        }
    }
}

/// Per-level convergence diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct HjbLevelReport {
    pub level: usize,
    pub grid_n: usize,
    /// Sup-norm difference to the previous level on interior nodes.
    pub sup_diff: Option<f64>,
    /// Hölder distance between this driver (coarsened) and the previous one.
    pub driver_distance: Option<f64>,
}

/// Classical HJB marching along each smooth (piecewise-linear) approximation:
///
/// ```text
/// −∂_t v − sup_u { ⟨b(x,u) + σ(x) η̇ⁿ, Dv⟩ + f(t,x,u) } = 0,    v(T,·) = g,
/// ```
///
/// discretized backward with per-axis upwind differences chosen by the sign
/// of the total velocity, sub-stepping each grid interval under a CFL bound.
/// Returns one value grid per approximation plus the sup-norm convergence
/// ladder between successive levels.
pub fn rough_hjb_solve(
    problem: &ControlProblem,
    etas: &[GridRoughPath],
    mesh: &Mesh,
    settings: &HjbSettings,
) -> Result<(Vec<ValueGrid>, Vec<HjbLevelReport>)> {
    if etas.is_empty() {
        return Err(Error::invalid("need at least one driver approximation"));
    }
    let mut grids: Vec<ValueGrid> = Vec::with_capacity(etas.len());
    let mut reports = Vec::with_capacity(etas.len());
    for (lvl, eta) in etas.iter().enumerate() {
        let vg = hjb_single(problem, eta, mesh, settings)?;
        let (sup_diff, driver_distance) = if lvl == 0 {
            (None, None)
        } else {
            let prev = &grids[lvl - 1];
            let diff = prev.sup_diff_interior(&vg, settings.diff_margin);
            let dist = match etas[lvl].coarsen_to(etas[lvl - 1].grid()) {
                Ok(coarse) => {
                    Some(hoelder_distance(&etas[lvl - 1], &coarse, settings.alpha)?.distance)
                }
                Err(_) => None,
            };
            (Some(diff), dist)
        };
        reports.push(HjbLevelReport {
            level: lvl,
            grid_n: eta.n_intervals(),
            sup_diff,
            driver_distance,
        });
        grids.push(vg);
    }
    Ok((grids, reports))
}

fn hjb_single(
    problem: &ControlProblem,
    eta: &GridRoughPath,
    mesh: &Mesh,
    settings: &HjbSettings,
) -> Result<ValueGrid> {
    let vf = &problem.vf;
    let e = vf.state_dim();
    let d = vf.driver_dim();
    if mesh.dim() != e {
        return Err(Error::invalid(
            "mesh dimension must match the state dimension",
        ));
    }
    let grid = eta.grid();
    let n = grid.n_intervals();
    let n_nodes = mesh.len();
    let n_controls = problem.control_set.len();
    let mut scratch = vf.scratch();

    let mut nodes = vec![0.0; n_nodes * e];
    {
        let mut buf = [0.0; 4];
        for j in 0..n_nodes {
            mesh.node(j, &mut buf[..e]);
            nodes[j * e..(j + 1) * e].copy_from_slice(&buf[..e]);
        }
    }

    // strides for neighbor lookups (row-major, first axis slowest)
    let mut strides = vec![1usize; e];
    for a in (0..e.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * mesh.axes()[a + 1].nodes;
    }

    let mut slices = vec![Vec::new(); n + 1];
    let mut terminal = vec![0.0; n_nodes];
    for j in 0..n_nodes {
        terminal[j] = (problem.g)(&nodes[j * e..(j + 1) * e]);
    }
    slices[n] = terminal;

    let mut w_table = vec![0.0; n_nodes * n_controls * e];
    let mut f_table = vec![0.0; n_nodes * n_controls];
    for k in (0..n).rev() {
        let dt = grid.dt(k);
        let eta_dot: Vec<f64> = eta.inc(k).iter().map(|&v| v / dt).collect();
        let t_left = grid.t(k);
        let mut max_speed = 0.0f64;
        // velocity w(x,u) = b(x,u) + σ(x) η̇ frozen over the interval
        for j in 0..n_nodes {
            let x = &nodes[j * e..(j + 1) * e];
            vf.eval_sigma(x, &mut scratch.sig);
            let mut sig_eta = [0.0f64; 4];
            for r in 0..e {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += scratch.sig[i * e + r] * eta_dot[i];
                }
                sig_eta[r] = acc;
            }
            for ui in 0..n_controls {
                let u = problem.control_set.point(ui);
                vf.eval_b(x, u, &mut scratch.b);
                let mut speed = 0.0;
                for r in 0..e {
                    let w = scratch.b[r] + sig_eta[r];
                    w_table[(j * n_controls + ui) * e + r] = w;
                    speed += w.abs() / mesh.axes()[r].step();
                }
                max_speed = max_speed.max(speed);
                f_table[j * n_controls + ui] = (problem.f)(t_left, x, u);
            }
        }
        let n_sub = ((dt * max_speed / settings.cfl).ceil() as usize).max(1);
        if n_sub > settings.max_substeps_per_interval {
            return Err(Error::Resolution(format!(
                "interval {k} needs {n_sub} CFL substeps (cap {})",
                settings.max_substeps_per_interval
            )));
        }
        let tau = dt / n_sub as f64;
        let mut cur = slices[k + 1].clone();
        let mut next = vec![0.0; n_nodes];
        for _ in 0..n_sub {
            for j in 0..n_nodes {
                let mut best = f64::NEG_INFINITY;
                for ui in 0..n_controls {
                    let mut ham = f_table[j * n_controls + ui];
                    for a in 0..e {
                        let w = w_table[(j * n_controls + ui) * e + a];
                        let step = mesh.axes()[a].step();
                        let idx_a = (j / strides[a]) % mesh.axes()[a].nodes;
                        let dv = if w >= 0.0 {
                            if idx_a + 1 < mesh.axes()[a].nodes {
                                (cur[j + strides[a]] - cur[j]) / step
                            } else {
                                (cur[j] - cur[j - strides[a]]) / step
                            }
                        } else if idx_a > 0 {
                            (cur[j] - cur[j - strides[a]]) / step
                        } else {
                            (cur[j + strides[a]] - cur[j]) / step
                        };
                        ham += w * dv;
                    }
                    if ham > best {
                        best = ham;
                    }
                }
                next[j] = cur[j] + tau * best;
                if !next[j].is_finite() {
                    return Err(Error::NumericalOverflow {
                        step: k,
                        context: "HJB marching produced a non-finite value".into(),
                    });
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        slices[k] = cur;
    }
    Ok(ValueGrid {
        times: grid.times().to_vec(),
        mesh: mesh.clone(),
        values: slices,
        argmax: None,
    })
}

/// Pointwise Hamiltonian optimality gap along a candidate pair:
///
/// ```text
/// r(t_k) = max(sup_{u∈U_h}, u = μ̄_k) [⟨b(X̄_k,u), p_k⟩ + f(t_k, X̄_k, u)]
///          − [⟨b(X̄_k, μ̄_k), p_k⟩ + f(t_k, X̄_k, μ̄_k)]  ≥ 0,
/// ```
///
/// with `p` the backward adjoint started from `Dg(X̄_T)`. The candidate
/// control itself enters the maximization, so the residual is nonnegative
/// even for feedback controls off the grid.
pub fn pmp_hamiltonian_residual(
    problem: &ControlProblem,
    candidate: &PathwiseResult,
    eta: &GridRoughPath,
) -> Result<Vec<f64>> {
    let vf = &problem.vf;
    let e = vf.state_dim();
    let traj = &candidate.trajectory;
    let mu = &candidate.control;
    let mut p_terminal = vec![0.0; e];
    problem.eval_dg(traj.terminal(), &mut p_terminal);
    let pr = problem.clone();
    let df = move |t: f64, x: &[f64], u: &[f64], out: &mut [f64]| pr.eval_df_x(t, x, u, out);
    let ps = crate::rde::solve_adjoint_backward(&p_terminal, traj, mu, vf, &df, eta)?;

    let grid = eta.grid();
    let k0 = traj.start();
    let mut b_buf = vec![0.0; e];
    let mut out = Vec::with_capacity(grid.n_intervals() - k0);
    for k in k0..grid.n_intervals() {
        let x = traj.state(k);
        let p = &ps[k - k0];
        let t = grid.t(k);
        let mut ham = |u: &[f64]| -> f64 {
            vf.eval_b(x, u, &mut b_buf);
            let dot: f64 = b_buf.iter().zip(p.iter()).map(|(a, b)| a * b).sum();
            dot + (problem.f)(t, x, u)
        };
        let at_candidate = ham(mu.u(k));
        let mut best = at_candidate;
        for ui in 0..problem.control_set.len() {
            let v = ham(problem.control_set.point(ui));
            if v > best {
                best = v;
            }
        }
        out.push(best - at_candidate);
    }
    Ok(out)
}

/// One row of the spike-variation diagnostic ladder.
#[derive(Debug, Clone, Serialize)]
pub struct SpikeRow {
    pub eps: f64,
    /// Length actually covered by whole grid intervals.
    pub eps_actual: f64,
    pub sup_state_diff: f64,
    pub sup_linearization_err: f64,
    pub payoff_expansion_err: f64,
}

/// Spike variation around a candidate pair: replace the control by `alt_u` on
/// `[t_spike, t_spike+ε)`, solve the perturbed equation and the linearized
/// one, and report `sup|X^ε−X̄|` (expected `O(ε)`), `sup|X^ε−X̄−Y^ε|`
/// (expected `o(ε)`), and the first-order payoff expansion error.
pub fn spike_variation_check(
    problem: &ControlProblem,
    candidate: &PathwiseResult,
    eta: &GridRoughPath,
    alt_u: &[f64],
    t_spike: f64,
    eps_list: &[f64],
) -> Result<Vec<SpikeRow>> {
    let vf = &problem.vf;
    let e = vf.state_dim();
    let d = vf.driver_dim();
    if alt_u.len() != problem.control_set.dim() {
        return Err(Error::invalid("alternative control has wrong dimension"));
    }
    let traj = &candidate.trajectory;
    let mu = &candidate.control;
    let grid = eta.grid();
    let k0 = traj.start();
    let n = grid.n_intervals();
    let max_eps = eps_list.iter().fold(0.0f64, |a, &b| a.max(b));
    if t_spike + max_eps > grid.horizon() + 1e-12 {
        return Err(Error::invalid("spike window must fit inside the horizon"));
    }

    let base_payoff = payoff_along(problem, traj, mu)?;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let spike: Vec<usize> = (k0..n)
            .filter(|&k| {
                grid.t(k) >= t_spike - 1e-12 && grid.t(k + 1) <= t_spike + eps + 1e-12
            })
            .collect();
        if spike.is_empty() {
            return Err(Error::invalid(format!(
                "spike of length {eps} covers no whole grid interval"
            )));
        }
        let eps_actual: f64 = spike.iter().map(|&k| grid.dt(k)).sum();
        let mut mu_eps = mu.clone();
        for &k in &spike {
            mu_eps.set_u(k, alt_u);
        }
        let x_eps = solve_controlled_rde(traj.state(k0), grid.t(k0), vf, &mu_eps, eta)?;

        // linearized equation along the frozen pair
        let mut fmat = vec![0.0; e * e];
        let mut gmats = vec![0.0; d * e * e];
        let mut extra = vec![0.0; e * e];
        let mut src = vec![0.0; e];
        let mut b_alt = vec![0.0; e];
        let mut b_bar = vec![0.0; e];
        let mut z = vec![0.0; d.max(1) * e];
        let mut ybuf = vec![0.0; e];
        let mut y = vec![0.0; e];
        let mut ys = Vec::with_capacity(n - k0 + 1);
        ys.push(y.clone());
        let mut scratch = vf.scratch();
        for k in k0..n {
            let x = traj.state(k);
            vf.eval_d_b(x, mu.u(k), &mut fmat, &mut scratch.fd);
            vf.eval_d_sigma(x, &mut gmats, &mut scratch.fd);
            vf.variation_l2_extra(x, eta.area(k), &mut extra, &mut scratch);
            if spike.binary_search(&k).is_ok() {
                vf.eval_b(x, alt_u, &mut b_alt);
                vf.eval_b(x, mu.u(k), &mut b_bar);
                for r in 0..e {
                    src[r] = b_alt[r] - b_bar[r];
                }
            } else {
                src.fill(0.0);
            }
            linear_davie_step(
                e,
                d,
                &fmat,
                &gmats,
                Some(&extra),
                &src,
                &y,
                eta.inc(k),
                eta.area(k),
                grid.dt(k),
                &mut z,
                &mut ybuf,
            );
            y.copy_from_slice(&ybuf);
            ys.push(y.clone());
        }

        let mut sup_state_diff = 0.0f64;
        let mut sup_lin_err = 0.0f64;
        for k in k0..=n {
            let xb = traj.state(k);
            let xe = x_eps.state(k);
            let yk = &ys[k - k0];
            for r in 0..e {
                sup_state_diff = sup_state_diff.max((xe[r] - xb[r]).abs());
                sup_lin_err = sup_lin_err.max((xe[r] - xb[r] - yk[r]).abs());
            }
        }

        // first-order payoff expansion around the base pair
        let perturbed_payoff = payoff_along(problem, &x_eps, &mu_eps)?;
        let mut dg = vec![0.0; e];
        problem.eval_dg(traj.terminal(), &mut dg);
        let mut first_order: f64 = dg
            .iter()
            .zip(ys.last().unwrap().iter())
            .map(|(a, b)| a * b)
            .sum();
        let mut dfb = vec![0.0; e];
        for k in k0..n {
            let t = grid.t(k);
            let x = traj.state(k);
            problem.eval_df_x(t, x, mu.u(k), &mut dfb);
            let yk = &ys[k - k0];
            let mut inc: f64 = dfb.iter().zip(yk.iter()).map(|(a, b)| a * b).sum();
            if spike.binary_search(&k).is_ok() {
                inc += (problem.f)(t, x, alt_u) - (problem.f)(t, x, mu.u(k));
            }
            first_order += inc * grid.dt(k);
        }
        let payoff_expansion_err = ((perturbed_payoff - base_payoff) - first_order).abs();

        rows.push(SpikeRow {
            eps,
            eps_actual,
            sup_state_diff,
            sup_linearization_err: sup_lin_err,
            payoff_expansion_err,
        });
    }
    Ok(rows)
}
