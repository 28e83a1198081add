//! Forward and backward differential equations driven by a [`GridRoughPath`].
//!
//! The stepping scheme is the explicit second-order Davie step
//!
//! ```text
//! y' = y + b(y,u)·Δt + Σ_i σ_i(y) δη^i + Σ_{ij} (Dσ_j σ_i)(y) A^{ij},
//! ```
//!
//! which is Stratonovich-consistent for geometric drivers. Drift–noise cross
//! terms of order `Δt·δ` are omitted; they are higher order for α > 1/3 (see
//! [`SchemeMeta`]).

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::rough_path::{GridRoughPath, TimeGrid};

pub type DriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;
pub type SigmaFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type DSigmaFn = dyn Fn(&[f64], &mut [f64]) + Send + Sync;
pub type DDriftFn = dyn Fn(&[f64], &[f64], &mut [f64]) + Send + Sync;

/// Default finite-difference step factor: `eps^{1/3}`, scaled by `1 + |x|`.
pub fn default_fd_step() -> f64 {
    f64::EPSILON.powf(1.0 / 3.0)
}

/// Dynamics data for `dX = b(X,u) dt + σ(X) dη`.
///
/// `sigma` writes the `e×d` matrix column-major (`out[j*e + i] = σ_j^i(x)`),
/// so that driving column `j` is contiguous. `d_sigma` writes `d` row-major
/// `e×e` matrices (`out[j*e*e + r*e + c] = ∂σ_j^r/∂x^c`). Missing derivatives
/// fall back to central finite differences with step `h_fd · (1 + |x|_∞)`.
pub struct VectorFieldSet {
    state_dim: usize,
    driver_dim: usize,
    control_dim: usize,
    b: Arc<DriftFn>,
    sigma: Arc<SigmaFn>,
    d_sigma: Option<Arc<DSigmaFn>>,
    d_b: Option<Arc<DDriftFn>>,
    d_b_u: Option<Arc<DDriftFn>>,
    h_fd: f64,
}

impl VectorFieldSet {
    pub fn new(
        state_dim: usize,
        driver_dim: usize,
        control_dim: usize,
        b: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
        sigma: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        VectorFieldSet {
            state_dim,
            driver_dim,
            control_dim,
            b: Arc::new(b),
            sigma: Arc::new(sigma),
            d_sigma: None,
            d_b: None,
            d_b_u: None,
            h_fd: default_fd_step(),
        }
    }

    pub fn with_d_sigma(
        mut self,
        d_sigma: impl Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.d_sigma = Some(Arc::new(d_sigma));
        self
    }

    pub fn with_d_b(
        mut self,
        d_b: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.d_b = Some(Arc::new(d_b));
        self
    }

    pub fn with_d_b_u(
        mut self,
        d_b_u: impl Fn(&[f64], &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.d_b_u = Some(Arc::new(d_b_u));
        self
    }

    pub fn with_fd_step(mut self, h_fd: f64) -> Self {
        self.h_fd = h_fd;
        self
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn driver_dim(&self) -> usize {
        self.driver_dim
    }

    pub fn control_dim(&self) -> usize {
        self.control_dim
    }

    pub fn scratch(&self) -> VfScratch {
        VfScratch::new(self.state_dim, self.driver_dim, self.control_dim)
    }

    fn fd_h(&self, x: &[f64]) -> f64 {
        let amp = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        self.h_fd * (1.0 + amp)
    }

    pub fn eval_b(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        (self.b)(x, u, out);
    }

    pub fn eval_sigma(&self, x: &[f64], out: &mut [f64]) {
        (self.sigma)(x, out);
    }

    /// `out[j*e*e + r*e + c] = ∂σ_j^r/∂x^c`.
    pub fn eval_d_sigma(&self, x: &[f64], out: &mut [f64], s: &mut FdScratch) {
        if let Some(ds) = &self.d_sigma {
            ds(x, out);
            return;
        }
        let (e, d) = (self.state_dim, self.driver_dim);
        let h = self.fd_h(x);
        s.xbuf.copy_from_slice(x);
        for c in 0..e {
            s.xbuf[c] = x[c] + h;
            (self.sigma)(&s.xbuf, &mut s.sig_p);
            s.xbuf[c] = x[c] - h;
            (self.sigma)(&s.xbuf, &mut s.sig_m);
            s.xbuf[c] = x[c];
            for j in 0..d {
                for r in 0..e {
                    out[j * e * e + r * e + c] =
                        (s.sig_p[j * e + r] - s.sig_m[j * e + r]) / (2.0 * h);
                }
            }
        }
    }

    /// `out[r*e + c] = ∂b^r/∂x^c`.
    pub fn eval_d_b(&self, x: &[f64], u: &[f64], out: &mut [f64], s: &mut FdScratch) {
        if let Some(db) = &self.d_b {
            db(x, u, out);
            return;
        }
        let e = self.state_dim;
        let h = self.fd_h(x);
        s.xbuf.copy_from_slice(x);
        for c in 0..e {
            s.xbuf[c] = x[c] + h;
            (self.b)(&s.xbuf, u, &mut s.vec_p);
            s.xbuf[c] = x[c] - h;
            (self.b)(&s.xbuf, u, &mut s.vec_m);
            s.xbuf[c] = x[c];
            for r in 0..e {
                out[r * e + c] = (s.vec_p[r] - s.vec_m[r]) / (2.0 * h);
            }
        }
    }

    /// `out[r*m + a] = ∂b^r/∂u^a`.
    pub fn eval_d_b_u(&self, x: &[f64], u: &[f64], out: &mut [f64], s: &mut FdScratch) {
        if let Some(dbu) = &self.d_b_u {
            dbu(x, u, out);
            return;
        }
        let (e, m) = (self.state_dim, self.control_dim);
        let amp = u.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = self.h_fd * (1.0 + amp);
        s.ubuf.copy_from_slice(u);
        for a in 0..m {
            s.ubuf[a] = u[a] + h;
            (self.b)(x, &s.ubuf, &mut s.vec_p);
            s.ubuf[a] = u[a] - h;
            (self.b)(x, &s.ubuf, &mut s.vec_m);
            s.ubuf[a] = u[a];
            for r in 0..e {
                out[r * m + a] = (s.vec_p[r] - s.vec_m[r]) / (2.0 * h);
            }
        }
    }

    /// Directional derivative of every `Dσ_j` along `v`:
    /// `out[j*e*e + r*e + c] = Σ_m ∂²σ_j^r/∂x^c∂x^m · v^m`,
    /// by central differences of `Dσ` along `x ± h v`.
    pub fn eval_d2_sigma_dir(&self, x: &[f64], v: &[f64], out: &mut [f64], s: &mut FdScratch) {
        let (e, d) = (self.state_dim, self.driver_dim);
        let vamp = v.iter().fold(0.0f64, |a, &w| a.max(w.abs()));
        if vamp == 0.0 {
            out.fill(0.0);
            return;
        }
        let xamp = x.iter().fold(0.0f64, |a, &w| a.max(w.abs()));
        let h = f64::EPSILON.powf(0.25) * (1.0 + xamp) / vamp;
        // reuse xbuf through raw copies to keep the borrow checker happy
        let mut xp = vec![0.0; e];
        let mut xm = vec![0.0; e];
        for c in 0..e {
            xp[c] = x[c] + h * v[c];
            xm[c] = x[c] - h * v[c];
        }
        let mut dp = std::mem::take(&mut s.dsig_p);
        let mut dm = std::mem::take(&mut s.dsig_m);
        self.eval_d_sigma(&xp, &mut dp, s);
        self.eval_d_sigma(&xm, &mut dm, s);
        for idx in 0..d * e * e {
            out[idx] = (dp[idx] - dm[idx]) / (2.0 * h);
        }
        s.dsig_p = dp;
        s.dsig_m = dm;
    }

    /// Level-2 coefficient correction for first-variation and adjoint flows:
    /// `out = Σ_{ij} D²σ_j[σ_i](x) A^{ij}` as an `e×e` matrix. This is the
    /// derivative-of-coefficient term of the joint system `(X, Y)`; dropping
    /// it degrades the linearization error from o(ε) to O(ε).
    pub fn variation_l2_extra(
        &self,
        x: &[f64],
        area: &[f64],
        out: &mut [f64],
        s: &mut VfScratch,
    ) {
        let (e, d) = (self.state_dim, self.driver_dim);
        out.fill(0.0);
        if area.iter().all(|&a| a == 0.0) {
            return;
        }
        self.eval_sigma(x, &mut s.sig);
        let mut dir = vec![0.0; e];
        let mut m = vec![0.0; d * e * e];
        for i in 0..d {
            dir.copy_from_slice(&s.sig[i * e..(i + 1) * e]);
            self.eval_d2_sigma_dir(x, &dir, &mut m, &mut s.fd);
            for j in 0..d {
                let a = area[i * d + j];
                if a == 0.0 {
                    continue;
                }
                for idx in 0..e * e {
                    out[idx] += m[j * e * e + idx] * a;
                }
            }
        }
    }

    /// Largest discrepancy between supplied derivatives and fresh central
    /// differences at `(x, u)`; 0 when everything is finite-difference based.
    pub fn derivative_probe(&self, x: &[f64], u: &[f64]) -> f64 {
        let (e, d, m) = (self.state_dim, self.driver_dim, self.control_dim);
        let mut s = FdScratch::new(e, d, m);
        let mut worst = 0.0f64;
        if self.d_sigma.is_some() {
            let mut supplied = vec![0.0; d * e * e];
            self.eval_d_sigma(x, &mut supplied, &mut s);
            let probe = VectorFieldSet {
                d_sigma: None,
                ..self.shallow_clone()
            };
            let mut fd = vec![0.0; d * e * e];
            probe.eval_d_sigma(x, &mut fd, &mut s);
            for (a, b) in supplied.iter().zip(fd.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        if self.d_b.is_some() {
            let mut supplied = vec![0.0; e * e];
            self.eval_d_b(x, u, &mut supplied, &mut s);
            let probe = VectorFieldSet {
                d_b: None,
                ..self.shallow_clone()
            };
            let mut fd = vec![0.0; e * e];
            probe.eval_d_b(x, u, &mut fd, &mut s);
            for (a, b) in supplied.iter().zip(fd.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        if self.d_b_u.is_some() {
            let mut supplied = vec![0.0; e * m];
            self.eval_d_b_u(x, u, &mut supplied, &mut s);
            let probe = VectorFieldSet {
                d_b_u: None,
                ..self.shallow_clone()
            };
            let mut fd = vec![0.0; e * m];
            probe.eval_d_b_u(x, u, &mut fd, &mut s);
            for (a, b) in supplied.iter().zip(fd.iter()) {
                worst = worst.max((a - b).abs());
            }
        }
        worst
    }

    fn shallow_clone(&self) -> Self {
        VectorFieldSet {
            state_dim: self.state_dim,
            driver_dim: self.driver_dim,
            control_dim: self.control_dim,
            b: Arc::clone(&self.b),
            sigma: Arc::clone(&self.sigma),
            d_sigma: self.d_sigma.clone(),
            d_b: self.d_b.clone(),
            d_b_u: self.d_b_u.clone(),
            h_fd: self.h_fd,
        }
    }
}

impl Clone for VectorFieldSet {
    fn clone(&self) -> Self {
        self.shallow_clone()
    }
}

/// Finite-difference work buffers.
pub struct FdScratch {
    xbuf: Vec<f64>,
    ubuf: Vec<f64>,
    sig_p: Vec<f64>,
    sig_m: Vec<f64>,
    vec_p: Vec<f64>,
    vec_m: Vec<f64>,
    dsig_p: Vec<f64>,
    dsig_m: Vec<f64>,
}

impl FdScratch {
    fn new(e: usize, d: usize, m: usize) -> Self {
        FdScratch {
            xbuf: vec![0.0; e],
            ubuf: vec![0.0; m.max(1)],
            sig_p: vec![0.0; e * d],
            sig_m: vec![0.0; e * d],
            vec_p: vec![0.0; e],
            vec_m: vec![0.0; e],
            dsig_p: vec![0.0; d * e * e],
            dsig_m: vec![0.0; d * e * e],
        }
    }
}

/// Reusable buffers for a stepping loop.
pub struct VfScratch {
    pub(crate) b: Vec<f64>,
    pub(crate) sig: Vec<f64>,
    pub(crate) dsig: Vec<f64>,
    pub(crate) w: Vec<f64>,
    pub(crate) noise: Vec<f64>,
    pub(crate) fd: FdScratch,
}

impl VfScratch {
    fn new(e: usize, d: usize, m: usize) -> Self {
        VfScratch {
            b: vec![0.0; e],
            sig: vec![0.0; e * d],
            dsig: vec![0.0; d * e * e],
            w: vec![0.0; e],
            noise: vec![0.0; e],
            fd: FdScratch::new(e, d, m),
        }
    }
}

/// Control-independent part of the Davie step:
/// `Σ_i σ_i(y) δ^i + Σ_{ij} (Dσ_j σ_i)(y) A^{ij}`, written into `s.noise`.
pub(crate) fn davie_noise_into(
    vf: &VectorFieldSet,
    y: &[f64],
    delta: &[f64],
    area: &[f64],
    s: &mut VfScratch,
) {
    let (e, d) = (vf.state_dim, vf.driver_dim);
    vf.eval_sigma(y, &mut s.sig);
    for r in 0..e {
        let mut acc = 0.0;
        for i in 0..d {
            acc += s.sig[i * e + r] * delta[i];
        }
        s.noise[r] = acc;
    }
    // second order: Σ_j Dσ_j w_j with w_j = Σ_i σ_i A^{ij}
    let need_level2 = area.iter().any(|&a| a != 0.0);
    if need_level2 {
        vf.eval_d_sigma(y, &mut s.dsig, &mut s.fd);
        for j in 0..d {
            for r in 0..e {
                let mut acc = 0.0;
                for i in 0..d {
                    acc += s.sig[i * e + r] * area[i * d + j];
                }
                s.w[r] = acc;
            }
            for r in 0..e {
                let mut acc = 0.0;
                for c in 0..e {
                    acc += s.dsig[j * e * e + r * e + c] * s.w[c];
                }
                s.noise[r] += acc;
            }
        }
    }
}

/// One Davie step written into `out`; returns whether the result is finite.
pub(crate) fn davie_step_into(
    vf: &VectorFieldSet,
    y: &[f64],
    u: &[f64],
    delta: &[f64],
    area: &[f64],
    dt: f64,
    s: &mut VfScratch,
    out: &mut [f64],
) -> bool {
    davie_noise_into(vf, y, delta, area, s);
    vf.eval_b(y, u, &mut s.b);
    let mut finite = true;
    for r in 0..vf.state_dim {
        let v = y[r] + s.b[r] * dt + s.noise[r];
        out[r] = v;
        finite &= v.is_finite();
    }
    finite
}

/// Second-order step `y + b·Δt + σ_i δ^i + (Dσ_j σ_i) A^{ij}`.
pub fn davie_step(
    vf: &VectorFieldSet,
    y: &[f64],
    u: &[f64],
    delta: &[f64],
    area: &[f64],
    dt: f64,
) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("davie_step needs dt > 0"));
    }
    let mut s = vf.scratch();
    let mut out = vec![0.0; vf.state_dim];
    if !davie_step_into(vf, y, u, delta, area, dt, &mut s, &mut out) {
        return Err(Error::NumericalOverflow {
            step: 0,
            context: "davie step produced a non-finite state".into(),
        });
    }
    Ok(out)
}

/// One explicit step of the linear equation
/// `dY = (F Y + src) dt + Σ_i G_i Y dη^i` with time-varying coefficients
/// frozen at the left endpoint:
///
/// ```text
/// out = y + (F y + src)·Δt + Σ_i (G_i y) δ^i + Σ_{ij} G_j (G_i y) A^{ij} + E y,
/// ```
///
/// where the optional `extra_l2` matrix `E` carries the
/// derivative-of-coefficient contraction `Σ_{ij} (∂_{σ_i} G_j) A^{ij}` when
/// the `G_i` vary along the driving trajectory (see
/// [`VectorFieldSet::variation_l2_extra`]). `fmat` is `e×e` row-major,
/// `gmats` holds `d` such matrices.
#[allow(clippy::too_many_arguments)]
pub fn linear_davie_step(
    e: usize,
    d: usize,
    fmat: &[f64],
    gmats: &[f64],
    extra_l2: Option<&[f64]>,
    src: &[f64],
    y: &[f64],
    delta: &[f64],
    area: &[f64],
    dt: f64,
    z: &mut [f64],
    out: &mut [f64],
) {
    debug_assert_eq!(z.len(), d.max(1) * e);
    for r in 0..e {
        let mut acc = src[r];
        for c in 0..e {
            acc += fmat[r * e + c] * y[c];
        }
        out[r] = y[r] + acc * dt;
    }
    for i in 0..d {
        for r in 0..e {
            let mut acc = 0.0;
            for c in 0..e {
                acc += gmats[i * e * e + r * e + c] * y[c];
            }
            z[i * e + r] = acc;
            out[r] += delta[i] * acc;
        }
    }
    for j in 0..d {
        for r in 0..e {
            let mut acc = 0.0;
            for c in 0..e {
                let mut zi = 0.0;
                for i in 0..d {
                    zi += area[i * d + j] * z[i * e + c];
                }
                acc += gmats[j * e * e + r * e + c] * zi;
            }
            out[r] += acc;
        }
    }
    if let Some(extra) = extra_l2 {
        for r in 0..e {
            let mut acc = 0.0;
            for c in 0..e {
                acc += extra[r * e + c] * y[c];
            }
            out[r] += acc;
        }
    }
}

/// Piecewise-constant control on a grid, one value per elementary interval.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPath {
    grid: TimeGrid,
    dim: usize,
    values: Vec<f64>,
}

impl ControlPath {
    pub fn from_values(grid: TimeGrid, dim: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.n_intervals() * dim {
            return Err(Error::invalid(format!(
                "expected {} control values, got {}",
                grid.n_intervals() * dim,
                values.len()
            )));
        }
        Ok(ControlPath { grid, dim, values })
    }

    pub fn constant(grid: TimeGrid, u: &[f64]) -> Self {
        let n = grid.n_intervals();
        let mut values = Vec::with_capacity(n * u.len());
        for _ in 0..n {
            values.extend_from_slice(u);
        }
        ControlPath {
            grid,
            dim: u.len(),
            values,
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn u(&self, k: usize) -> &[f64] {
        &self.values[k * self.dim..(k + 1) * self.dim]
    }

    pub fn set_u(&mut self, k: usize, u: &[f64]) {
        self.values[k * self.dim..(k + 1) * self.dim].copy_from_slice(u);
    }

    pub fn same_grid_as(&self, eta: &GridRoughPath) -> bool {
        self.grid == *eta.grid()
    }
}

/// Metadata describing how a trajectory was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct SchemeMeta {
    pub scheme: &'static str,
    /// Drift–noise cross terms of order Δt·δ are not part of the step.
    pub drift_noise_cross_terms: bool,
}

impl Default for SchemeMeta {
    fn default() -> Self {
        SchemeMeta {
            scheme: "davie-2",
            drift_noise_cross_terms: false,
        }
    }
}

/// Trajectory on the suffix `[t_{k0}, T]` of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct RdeSolution {
    grid: TimeGrid,
    start: usize,
    states: Vec<Vec<f64>>,
    pub meta: SchemeMeta,
}

impl RdeSolution {
    pub fn new(grid: TimeGrid, start: usize, states: Vec<Vec<f64>>) -> Self {
        debug_assert_eq!(states.len(), grid.n_intervals() - start + 1);
        RdeSolution {
            grid,
            start,
            states,
            meta: SchemeMeta::default(),
        }
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// First grid index the solution covers.
    pub fn start(&self) -> usize {
        self.start
    }

    /// State at global grid index `k ∈ [start, n]`.
    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k - self.start]
    }

    pub fn terminal(&self) -> &[f64] {
        self.states.last().unwrap()
    }

    pub fn states(&self) -> &[Vec<f64>] {
        &self.states
    }

    pub fn sup_distance(&self, other: &RdeSolution) -> f64 {
        let mut worst = 0.0f64;
        let lo = self.start.max(other.start);
        for k in lo..=self.grid.n_intervals() {
            let a = self.state(k);
            let b = other.state(k);
            for i in 0..a.len() {
                worst = worst.max((a[i] - b[i]).abs());
            }
        }
        worst
    }
}

/// Forward solve of `dX = b(X,μ)dt + σ(X)dη` from `(t0, x0)`.
pub fn solve_controlled_rde(
    x0: &[f64],
    t0: f64,
    vf: &VectorFieldSet,
    mu: &ControlPath,
    eta: &GridRoughPath,
) -> Result<RdeSolution> {
    if !mu.same_grid_as(eta) {
        return Err(Error::GridMismatch(
            "control and driver must share a grid".into(),
        ));
    }
    if x0.len() != vf.state_dim() {
        return Err(Error::invalid("initial state has wrong dimension"));
    }
    let k0 = eta.grid().index_of(t0)?;
    let n = eta.n_intervals();
    let mut s = vf.scratch();
    let mut states = Vec::with_capacity(n - k0 + 1);
    states.push(x0.to_vec());
    let mut y = x0.to_vec();
    let mut next = vec![0.0; vf.state_dim()];
    for k in k0..n {
        let ok = davie_step_into(
            vf,
            &y,
            mu.u(k),
            eta.inc(k),
            eta.area(k),
            eta.grid().dt(k),
            &mut s,
            &mut next,
        );
        if !ok {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "forward solve produced a non-finite state".into(),
            });
        }
        y.copy_from_slice(&next);
        states.push(y.clone());
    }
    Ok(RdeSolution::new(eta.grid().clone(), k0, states))
}

/// Closed-loop solve with `u_k = policy(t_k, X_k)`; each step consumes only
/// increments up to `t_k`, so the control is adapted by construction.
pub fn closed_loop_solve(
    x0: &[f64],
    t0: f64,
    vf: &VectorFieldSet,
    policy: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    eta: &GridRoughPath,
) -> Result<(RdeSolution, ControlPath)> {
    let k0 = eta.grid().index_of(t0)?;
    let n = eta.n_intervals();
    let m = vf.control_dim();
    let mut s = vf.scratch();
    let mut states = Vec::with_capacity(n - k0 + 1);
    states.push(x0.to_vec());
    let mut controls = vec![0.0; n * m];
    let mut y = x0.to_vec();
    let mut next = vec![0.0; vf.state_dim()];
    for k in k0..n {
        let u = policy(eta.grid().t(k), &y);
        controls[k * m..(k + 1) * m].copy_from_slice(&u);
        let ok = davie_step_into(
            vf,
            &y,
            &u,
            eta.inc(k),
            eta.area(k),
            eta.grid().dt(k),
            &mut s,
            &mut next,
        );
        if !ok {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "closed-loop solve produced a non-finite state".into(),
            });
        }
        y.copy_from_slice(&next);
        states.push(y.clone());
    }
    let sol = RdeSolution::new(eta.grid().clone(), k0, states);
    let mu = ControlPath::from_values(eta.grid().clone(), m, controls)?;
    Ok((sol, mu))
}

/// Backward adjoint solve along a frozen trajectory:
///
/// ```text
/// −dp = Db(X̄,μ̄)ᵀ p dt + Dσ(X̄)ᵀ p dη + Df(X̄,μ̄) dt,    p(T) = p_terminal,
/// ```
///
/// stepped explicitly with coefficients frozen at the left endpoint and the
/// transposed level-2 correction `Σ_{ij} Dσ_iᵀ Dσ_jᵀ p A^{ij}`.
///
/// `df_x(t, x, u, out)` supplies `∂_x f` along the trajectory. Returns the
/// adjoint at every covered grid time, aligned with `traj`.
pub fn solve_adjoint_backward(
    p_terminal: &[f64],
    traj: &RdeSolution,
    mu: &ControlPath,
    vf: &VectorFieldSet,
    df_x: &(dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Sync),
    eta: &GridRoughPath,
) -> Result<Vec<Vec<f64>>> {
    if !mu.same_grid_as(eta) || traj.grid() != eta.grid() {
        return Err(Error::GridMismatch(
            "trajectory, control and driver must share a grid".into(),
        ));
    }
    let (e, d) = (vf.state_dim(), vf.driver_dim());
    let n = eta.n_intervals();
    let k0 = traj.start();
    let mut s = vf.scratch();
    let mut fmat = vec![0.0; e * e];
    let mut fmat_t = vec![0.0; e * e];
    let mut gmats = vec![0.0; d * e * e];
    let mut gmats_t = vec![0.0; d * e * e];
    let mut area_t = vec![0.0; d * d];
    let mut src = vec![0.0; e];
    let mut z = vec![0.0; d.max(1) * e];
    let mut out = vec![0.0; e];
    let mut extra = vec![0.0; e * e];
    let mut extra_t = vec![0.0; e * e];

    let mut ps = vec![vec![0.0; e]; n - k0 + 1];
    ps[n - k0].copy_from_slice(p_terminal);
    let mut p = p_terminal.to_vec();
    for k in (k0..n).rev() {
        let x = traj.state(k);
        let u = mu.u(k);
        let t = eta.grid().t(k);
        vf.eval_d_b(x, u, &mut fmat, &mut s.fd);
        vf.eval_d_sigma(x, &mut gmats, &mut s.fd);
        df_x(t, x, u, &mut src);
        // transpose drift and diffusion Jacobians
        for r in 0..e {
            for c in 0..e {
                fmat_t[r * e + c] = fmat[c * e + r];
            }
        }
        for j in 0..d {
            for r in 0..e {
                for c in 0..e {
                    gmats_t[j * e * e + r * e + c] = gmats[j * e * e + c * e + r];
                }
            }
        }
        // transposing the area swaps the operator order in the level-2 term
        let a = eta.area(k);
        for i in 0..d {
            for j in 0..d {
                area_t[i * d + j] = a[j * d + i];
            }
        }
        // derivative-of-coefficient correction, transposed for the costate
        vf.variation_l2_extra(x, a, &mut extra, &mut s);
        for r in 0..e {
            for c in 0..e {
                extra_t[r * e + c] = extra[c * e + r];
            }
        }
        linear_davie_step(
            e,
            d,
            &fmat_t,
            &gmats_t,
            Some(&extra_t),
            &src,
            &p,
            eta.inc(k),
            &area_t,
            eta.grid().dt(k),
            &mut z,
            &mut out,
        );
        if out.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "adjoint solve produced a non-finite costate".into(),
            });
        }
        p.copy_from_slice(&out);
        ps[k - k0].copy_from_slice(&p);
    }
    Ok(ps)
}

fn interp1(nodes: &[f64], vals: &[f64], x: f64) -> Option<f64> {
    let n = nodes.len();
    if x < nodes[0] || x > nodes[n - 1] {
        return None;
    }
    let hi = nodes.partition_point(|&v| v < x).min(n - 1).max(1);
    let lo = hi - 1;
    let w = (x - nodes[lo]) / (nodes[hi] - nodes[lo]);
    Some(vals[lo] * (1.0 - w) + vals[hi] * w)
}

/// Scalar flow-decomposition solve (validation tool).
///
/// Solves the driftless flow `dφ = σ(φ) dη` from every node of `state_mesh`,
/// together with `∂_x φ`, then integrates the transformed drift ODE
/// `dỸ = b(φ(t,Ỹ), μ) / ∂_xφ(t,Ỹ) dt` with a Heun step and maps back through
/// `Y_t = φ(t, Ỹ_t)`. Requires `state_dim == 1`.
pub fn flow_decomposition_solve(
    x0: f64,
    t0: f64,
    vf: &VectorFieldSet,
    mu: &ControlPath,
    eta: &GridRoughPath,
    state_mesh: &[f64],
) -> Result<RdeSolution> {
    if vf.state_dim() != 1 {
        return Err(Error::invalid(
            "flow decomposition is implemented for scalar states only",
        ));
    }
    if state_mesh.len() < 2 || state_mesh.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::invalid("state mesh must be increasing with ≥ 2 nodes"));
    }
    if !mu.same_grid_as(eta) {
        return Err(Error::GridMismatch(
            "control and driver must share a grid".into(),
        ));
    }
    let k0 = eta.grid().index_of(t0)?;
    let n = eta.n_intervals();
    let steps = n - k0;
    let nm = state_mesh.len();
    let mut s = vf.scratch();

    // φ and ∂_xφ tables over [t0, T] × mesh
    let mut phi = vec![vec![0.0; nm]; steps + 1];
    let mut dphi = vec![vec![1.0; nm]; steps + 1];
    phi[0].copy_from_slice(state_mesh);
    let h2 = f64::EPSILON.powf(0.25);
    for k in 0..steps {
        let kk = k0 + k;
        let (delta, a, _dt) = (eta.inc(kk), eta.area(kk), eta.grid().dt(kk));
        for mth in 0..nm {
            let y = phi[k][mth];
            davie_noise_into(vf, &[y], delta, a, &mut s);
            let ynext = y + s.noise[0];
            // variational step: dJ = σ'(φ) J dη with level-2 coefficient
            // (σ'' σ + σ'²) from the joint system
            let mut sig = [0.0];
            vf.eval_sigma(&[y], &mut sig);
            let mut dsig = [0.0];
            vf.eval_d_sigma(&[y], &mut dsig, &mut s.fd);
            let h = h2 * (1.0 + y.abs());
            let (mut sp, mut sm) = ([0.0], [0.0]);
            vf.eval_sigma(&[y + h], &mut sp);
            vf.eval_sigma(&[y - h], &mut sm);
            let d2sig = (sp[0] - 2.0 * sig[0] + sm[0]) / (h * h);
            let j = dphi[k][mth];
            let jnext = j * (1.0 + dsig[0] * delta[0] + (d2sig * sig[0] + dsig[0] * dsig[0]) * a[0]);
            if !ynext.is_finite() || !jnext.is_finite() {
                return Err(Error::NumericalOverflow {
                    step: kk,
                    context: "flow table produced a non-finite value".into(),
                });
            }
            phi[k + 1][mth] = ynext;
            dphi[k + 1][mth] = jnext;
        }
    }

    let b_tilde = |k: usize, x: f64, u: &[f64], s: &mut VfScratch| -> Result<f64> {
        let phix = interp1(state_mesh, &phi[k], x)
            .ok_or_else(|| Error::OutOfDomain(format!("transformed state {x} left the mesh")))?;
        let jx = interp1(state_mesh, &dphi[k], x).unwrap();
        if jx.abs() < 1e-12 {
            return Err(Error::NumericalOverflow {
                step: k0 + k,
                context: "flow derivative vanished".into(),
            });
        }
        vf.eval_b(&[phix], u, &mut s.b);
        Ok(s.b[0] / jx)
    };

    let mut states = Vec::with_capacity(steps + 1);
    let mut ytil = x0; // φ(t0,·) = id, so Ỹ_{t0} = x0
    states.push(vec![x0]);
    for k in 0..steps {
        let dt = eta.grid().dt(k0 + k);
        let u = mu.u(k0 + k);
        let s1 = b_tilde(k, ytil, u, &mut s)?;
        let pred = ytil + s1 * dt;
        let s2 = b_tilde(k + 1, pred, u, &mut s)?;
        ytil += 0.5 * dt * (s1 + s2);
        let y = interp1(state_mesh, &phi[k + 1], ytil)
            .ok_or_else(|| Error::OutOfDomain(format!("transformed state {ytil} left the mesh")))?;
        states.push(vec![y]);
    }
    let mut sol = RdeSolution::new(eta.grid().clone(), k0, states);
    sol.meta.scheme = "flow-decomposition";
    Ok(sol)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rough_path::{lift_piecewise_linear, make_uniform_grid, sample_brownian_lift};

    fn scalar_vf(
        b: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
        sigma: impl Fn(f64) -> f64 + Send + Sync + 'static,
    ) -> VectorFieldSet {
        VectorFieldSet::new(
            1,
            1,
            1,
            move |x, u, out| out[0] = b(x[0], u[0]),
            move |x, out| out[0] = sigma(x[0]),
        )
    }

    #[test]
    fn davie_step_drift_only() {
        let vf = scalar_vf(|_, u| u, |_| 0.0);
        let y = davie_step(&vf, &[2.0], &[3.0], &[0.4], &[0.08], 0.5).unwrap();
        assert!((y[0] - 3.5).abs() < 1e-15);
    }

    #[test]
    fn davie_step_geometric_scalar() {
        // σ(y) = y, b ≡ 0: step = y (1 + δ + ½δ²)
        let vf = scalar_vf(|_, _| 0.0, |y| y).with_d_sigma(|_, out| out[0] = 1.0);
        let delta = 0.3;
        let y = davie_step(&vf, &[2.0], &[0.0], &[delta], &[0.5 * delta * delta], 0.1).unwrap();
        assert!((y[0] - 2.0 * (1.0 + delta + 0.5 * delta * delta)).abs() < 1e-14);
    }

    /// One Davie step against a 1000-substep solve of dy = sin(y) dη along the
    /// chord; the one-step error is O(|δ|³).
    #[test]
    fn davie_step_third_order_local_error() {
        let vf = scalar_vf(|_, _| 0.0, |y| y.sin());
        let y0 = 0.8;
        let mut errs = Vec::new();
        for &delta in &[0.2, 0.1, 0.05] {
            let one =
                davie_step(&vf, &[y0], &[0.0], &[delta], &[0.5 * delta * delta], 1.0).unwrap()[0];
            let mut y = y0;
            let h = delta / 1000.0;
            for i in 0..1000 {
                // RK2 on the chord ODE y' = sin(y) * (δ per unit time)
                let k1 = (y).sin() * h;
                let k2 = (y + k1).sin() * h;
                y += 0.5 * (k1 + k2);
                let _ = i;
            }
            errs.push((one - y).abs());
        }
        assert!(errs[0] / errs[1] > 6.0, "ratios {errs:?}");
        assert!(errs[1] / errs[2] > 6.0, "ratios {errs:?}");
    }

    #[test]
    fn additive_noise_integrates_the_driver() {
        let g = make_uniform_grid(1.0, 64).unwrap();
        let eta = sample_brownian_lift(21, &g, 2, 2).unwrap();
        let vf = VectorFieldSet::new(
            2,
            2,
            1,
            |_, _, out| {
                out[0] = 0.0;
                out[1] = 0.0;
            },
            |_, out| {
                // σ = identity, column-major
                out[0] = 1.0;
                out[1] = 0.0;
                out[2] = 0.0;
                out[3] = 1.0;
            },
        );
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let sol = solve_controlled_rde(&[0.5, -0.2], 0.0, &vf, &mu, &eta).unwrap();
        let total = eta.total_increment_from(0);
        assert!((sol.terminal()[0] - (0.5 + total[0])).abs() < 1e-12);
        assert!((sol.terminal()[1] - (-0.2 + total[1])).abs() < 1e-12);
    }

    /// dY = M Y dt + C Y dη has the closed form Y_T = x0 exp(M(T−t0) + C δη).
    #[test]
    fn linear_scalar_matches_exponential_under_refinement() {
        let big = make_uniform_grid(1.0, 1 << 12).unwrap();
        let w = sample_brownian_lift(5, &big, 1, 1).unwrap();
        let (m, c) = (0.4, 0.9);
        let vf = scalar_vf(move |x, _| m * x, move |x| c * x)
            .with_d_sigma(move |_, out| out[0] = c);
        let total = w.total_increment_from(0)[0];
        let exact = 1.3 * (m * 1.0 + c * total).exp();
        let mut errs = Vec::new();
        for &n in &[64usize, 256, 1024] {
            let coarse = make_uniform_grid(1.0, n).unwrap();
            let eta = w.coarsen_to(&coarse).unwrap();
            let mu = ControlPath::constant(coarse.clone(), &[0.0]);
            let sol = solve_controlled_rde(&[1.3], 0.0, &vf, &mu, &eta).unwrap();
            errs.push((sol.terminal()[0] - exact).abs() / exact.abs());
        }
        assert!(errs[2] < errs[0], "errors not decreasing: {errs:?}");
        assert!(errs[2] < 2e-3, "final error too large: {errs:?}");
    }

    /// Lift of the smooth path t ↦ (t, t²): the RDE is an ODE, compare with a
    /// fine RK4 reference.
    #[test]
    fn smooth_driver_matches_ode_reference() {
        let n = 1 << 12;
        let g = make_uniform_grid(1.0, n).unwrap();
        let mut vals = Vec::with_capacity((n + 1) * 2);
        for &t in g.times() {
            vals.push(t);
            vals.push(t * t);
        }
        let eta = lift_piecewise_linear(&g, 2, &vals).unwrap();
        let vf = VectorFieldSet::new(
            1,
            2,
            1,
            |_, _, out| out[0] = 0.0,
            |x, out| {
                out[0] = (x[0]).sin() + 1.5;
                out[1] = 0.5 * (x[0]).cos();
            },
        );
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let sol = solve_controlled_rde(&[0.2], 0.0, &vf, &mu, &eta).unwrap();

        // reference: y' = σ1(y) + 2t σ2(y), RK4 at 2^15 steps
        let f = |t: f64, y: f64| (y.sin() + 1.5) + 2.0 * t * (0.5 * y.cos());
        let steps = 1 << 15;
        let h = 1.0 / steps as f64;
        let mut y = 0.2;
        let mut t = 0.0;
        for _ in 0..steps {
            let k1 = f(t, y);
            let k2 = f(t + 0.5 * h, y + 0.5 * h * k1);
            let k3 = f(t + 0.5 * h, y + 0.5 * h * k2);
            let k4 = f(t + h, y + h * k3);
            y += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            t += h;
        }
        assert!(
            (sol.terminal()[0] - y).abs() < 1e-6,
            "got {} want {}",
            sol.terminal()[0],
            y
        );
    }

    #[test]
    fn zero_noise_reduces_to_ode() {
        let g = make_uniform_grid(2.0, 4096).unwrap();
        let eta = GridRoughPath::zero(g.clone(), 1);
        let vf = scalar_vf(|x, _| -0.7 * x + 0.3, |_| 0.0);
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let sol = solve_controlled_rde(&[1.0], 0.0, &vf, &mu, &eta).unwrap();
        // y' = −0.7y + 0.3, y(2) = (1 − 3/7) e^{−1.4} + 3/7
        let exact = (1.0 - 3.0 / 7.0) * (-1.4f64).exp() + 3.0 / 7.0;
        assert!((sol.terminal()[0] - exact).abs() < 1e-3);
    }

    #[test]
    fn adjoint_pure_integration() {
        let g = make_uniform_grid(1.0, 32).unwrap();
        let eta = sample_brownian_lift(3, &g, 1, 1).unwrap();
        let vf = scalar_vf(|_, _| 0.0, |_| 0.0);
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let traj = solve_controlled_rde(&[0.0], 0.0, &vf, &mu, &eta).unwrap();
        let c = 0.8;
        let ps = solve_adjoint_backward(
            &[2.0],
            &traj,
            &mu,
            &vf,
            &move |_, _, _, out: &mut [f64]| out[0] = c,
            &eta,
        )
        .unwrap();
        for (k, p) in ps.iter().enumerate() {
            let t = g.t(k);
            assert!((p[0] - (2.0 + c * (1.0 - t))).abs() < 1e-12);
        }
    }

    /// The adjoint at time 0 equals the sensitivity of the pathwise payoff to
    /// the initial state (frozen control), here checked by finite differences
    /// for scalar multiplicative linear dynamics with quadratic gains.
    #[test]
    fn adjoint_matches_payoff_gradient() {
        let n = 1 << 10;
        let g = make_uniform_grid(1.0, n).unwrap();
        let eta = sample_brownian_lift(17, &g, 1, 1).unwrap();
        let (m, nn, c, q, r) = (0.1, 1.0, 0.3, -1.0, -1.0);
        let gg = -1.0;
        let vf = scalar_vf(move |x, u| m * x + nn * u, move |x| c * x)
            .with_d_sigma(move |_, out| out[0] = c)
            .with_d_b(move |_, _, out| out[0] = m);
        let mu = ControlPath::constant(g.clone(), &[0.35]);
        let payoff = |x0: f64| -> f64 {
            let sol = solve_controlled_rde(&[x0], 0.0, &vf, &mu, &eta).unwrap();
            let mut acc = 0.0;
            for k in 0..n {
                let x = sol.state(k)[0];
                let u = mu.u(k)[0];
                acc += 0.5 * (q * x * x + r * u * u) * g.dt(k);
            }
            acc + 0.5 * gg * sol.terminal()[0] * sol.terminal()[0]
        };
        let x0 = 1.2;
        let traj = solve_controlled_rde(&[x0], 0.0, &vf, &mu, &eta).unwrap();
        let xt = traj.terminal()[0];
        let ps = solve_adjoint_backward(
            &[gg * xt],
            &traj,
            &mu,
            &vf,
            &move |_, x: &[f64], _: &[f64], out: &mut [f64]| out[0] = q * x[0],
            &eta,
        )
        .unwrap();
        let h = 1e-5;
        let fd = (payoff(x0 + h) - payoff(x0 - h)) / (2.0 * h);
        let rel = (ps[0][0] - fd).abs() / fd.abs().max(1e-12);
        assert!(rel < 5e-3, "adjoint {} vs fd {}", ps[0][0], fd);
    }

    /// Solving the reversed linear equation forward reproduces the adjoint:
    /// reversed driver has δ̃_k = −δ_{n−1−k} and Ã_k = −A_{n−1−k}ᵀ.
    #[test]
    fn adjoint_time_reversal_consistency() {
        let n = 256;
        let g = make_uniform_grid(1.0, n).unwrap();
        let eta = sample_brownian_lift(29, &g, 1, 2).unwrap();
        let e = 1;
        let d = 2;
        let (m, c1, c2, q) = (0.2, 0.4, -0.3, -1.0);
        let vf = VectorFieldSet::new(
            e,
            d,
            1,
            move |x, _, out| out[0] = m * x[0],
            move |x, out| {
                out[0] = c1 * x[0];
                out[1] = c2 * x[0];
            },
        )
        .with_d_sigma(move |_, out| {
            out[0] = c1;
            out[1] = c2;
        });
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let traj = solve_controlled_rde(&[1.0], 0.0, &vf, &mu, &eta).unwrap();
        let ps = solve_adjoint_backward(
            &[1.5],
            &traj,
            &mu,
            &vf,
            &move |_, x: &[f64], _: &[f64], out: &mut [f64]| out[0] = q * x[0],
            &eta,
        )
        .unwrap();

        // forward solve of q(s) = p(T−s): dq = (F q + c)ds − Σ G_i q dη̃
        let mut qv = vec![ps[n][0]];
        let mut z = vec![0.0; d * e];
        let mut out = vec![0.0; e];
        let mut qpath = vec![qv[0]];
        for s in 0..n {
            let k = n - 1 - s; // source interval
            let x = traj.state(k)[0];
            let fmat = [m];
            let gm = [-c1, -c2]; // scalar e=1: G_i = −Dσ_i
            let src = [q * x];
            let a = eta.area(k);
            let delta = eta.inc(k);
            let dtil = [-delta[0], -delta[1]];
            let atil = [a[0], a[2], a[1], a[3]]; // Aᵀ: δ̃⊗δ̃ − A, by geometricity
            linear_davie_step(
                e,
                d,
                &fmat,
                &gm,
                None,
                &src,
                &qv,
                &dtil,
                &atil,
                g.dt(k),
                &mut z,
                &mut out,
            );
            qv[0] = out[0];
            qpath.push(qv[0]);
        }
        // q(s_j) should match p at the mirrored time
        let mut worst = 0.0f64;
        for (j, qj) in qpath.iter().enumerate() {
            worst = worst.max((qj - ps[n - j][0]).abs());
        }
        assert!(worst < 5e-3, "time reversal mismatch {worst}");
    }

    #[test]
    fn control_continuity_and_driver_lipschitz() {
        let g = make_uniform_grid(1.0, 256).unwrap();
        let eta = sample_brownian_lift(31, &g, 1, 1).unwrap();
        let vf = scalar_vf(|x, u| -x + u, |x| 0.4 * (x).cos());
        let mu = ControlPath::constant(g.clone(), &[0.5]);
        let base = solve_controlled_rde(&[0.0], 0.0, &vf, &mu, &eta).unwrap();

        // perturb a fraction eps of intervals: sup difference O(eps)
        let mut prev_ratio = f64::INFINITY;
        for &frac in &[0.2, 0.1, 0.05] {
            let mut mu2 = mu.clone();
            let count = (256.0 * frac) as usize;
            for k in 0..count {
                mu2.set_u(k * (256 / count.max(1)), &[1.5]);
            }
            let sol = solve_controlled_rde(&[0.0], 0.0, &vf, &mu2, &eta).unwrap();
            let diff = sol.sup_distance(&base);
            let ratio = diff / frac;
            assert!(ratio < 5.0, "control continuity ratio {ratio}");
            assert!(ratio < prev_ratio * 3.0);
            prev_ratio = ratio;
        }

        // Lipschitz dependence on the driver under a small level-1 shift
        let mut worst_over_controls = 0.0f64;
        for shift_seed in 0..3u64 {
            let amp = 1e-3 * (1.0 + shift_seed as f64);
            let mut vals = vec![0.0; 257];
            for (i, v) in vals.iter_mut().enumerate() {
                *v = amp * (i as f64 / 256.0 * std::f64::consts::PI).sin();
            }
            let bump = lift_piecewise_linear(&g, 1, &vals).unwrap();
            let mut inc2 = Vec::new();
            let mut area2 = Vec::new();
            for k in 0..256 {
                let merged = crate::rough_path::chen_combine(
                    &crate::rough_path::RoughIncrement {
                        delta: eta.inc(k).to_vec(),
                        area: eta.area(k).to_vec(),
                    },
                    &crate::rough_path::RoughIncrement {
                        delta: bump.inc(k).to_vec(),
                        area: bump.area(k).to_vec(),
                    },
                );
                inc2.extend_from_slice(&merged.delta);
                area2.extend_from_slice(&merged.area);
            }
            let eta2 = GridRoughPath::from_raw(g.clone(), 1, inc2, area2).unwrap();
            let dist = crate::rough_path::hoelder_distance(&eta, &eta2, 0.4)
                .unwrap()
                .distance;
            for &uc in &[0.0, 0.5, -1.0] {
                let muc = ControlPath::constant(g.clone(), &[uc]);
                let a = solve_controlled_rde(&[0.0], 0.0, &vf, &muc, &eta).unwrap();
                let b = solve_controlled_rde(&[0.0], 0.0, &vf, &muc, &eta2).unwrap();
                worst_over_controls = worst_over_controls.max(a.sup_distance(&b) / dist);
            }
        }
        assert!(
            worst_over_controls < 10.0,
            "driver Lipschitz constant blew up: {worst_over_controls}"
        );
    }

    /// Wong–Zakai: dyadic piecewise-linear levels of one Brownian path give a
    /// decreasing difference ladder with empirical order in [0.3, 1.1].
    #[test]
    fn wong_zakai_ladder() {
        let fine_n = 1 << 12;
        let fine = make_uniform_grid(1.0, fine_n).unwrap();
        let w = sample_brownian_lift(45, &fine, 1, 1).unwrap();
        let vf = scalar_vf(|x, _| x.cos(), |x| x.sin());
        let mut sols = Vec::new();
        let levels: Vec<usize> = (4..=12).collect();
        for &l in &levels {
            let grid = make_uniform_grid(1.0, 1 << l).unwrap();
            let eta = w.coarsen_to(&grid).unwrap();
            let mu = ControlPath::constant(grid.clone(), &[0.0]);
            sols.push(solve_controlled_rde(&[0.7], 0.0, &vf, &mu, &eta).unwrap());
        }
        let mut diffs = Vec::new();
        for i in 0..sols.len() - 1 {
            // compare on the coarser grid's times
            let coarse = &sols[i];
            let finer = &sols[i + 1];
            let mut worst = 0.0f64;
            for (k, &t) in coarse.grid().times().iter().enumerate() {
                let kf = finer.grid().index_of(t).unwrap();
                worst = worst.max((coarse.state(k)[0] - finer.state(kf)[0]).abs());
            }
            diffs.push(worst);
        }
        for wpair in diffs.windows(2) {
            assert!(wpair[1] < wpair[0], "not decreasing: {diffs:?}");
        }
        let mut orders = Vec::new();
        for wpair in diffs.windows(2) {
            orders.push((wpair[0] / wpair[1]).log2());
        }
        let mean_order = orders.iter().sum::<f64>() / orders.len() as f64;
        assert!(
            (0.3..=1.1).contains(&mean_order),
            "order {mean_order} outside [0.3, 1.1]; ladder {diffs:?}"
        );
    }

    /// Means under Brownian lifts match the Stratonovich moment
    /// E[exp(C B_T)] = exp(C²T/2) for dY = C Y dη.
    #[test]
    fn stratonovich_consistency_in_mean() {
        let g = make_uniform_grid(1.0, 64).unwrap();
        let c = 0.5;
        let vf = scalar_vf(|_, _| 0.0, move |x| c * x).with_d_sigma(move |_, out| out[0] = c);
        let mu = ControlPath::constant(g.clone(), &[0.0]);
        let n_paths = 4000;
        let mut vals = Vec::with_capacity(n_paths);
        for i in 0..n_paths {
            let eta =
                crate::rough_path::sample_brownian_lift_stream(777, i as u64, &g, 4, 1).unwrap();
            let sol = solve_controlled_rde(&[1.0], 0.0, &vf, &mu, &eta).unwrap();
            vals.push(sol.terminal()[0]);
        }
        let mean = vals.iter().sum::<f64>() / n_paths as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n_paths - 1) as f64;
        let se = (var / n_paths as f64).sqrt();
        let target = (c * c * 0.5f64).exp();
        assert!(
            (mean - target).abs() < 3.0 * se + 5e-3,
            "mean {mean} vs Stratonovich target {target} (se {se})"
        );
    }

    #[test]
    fn flow_decomposition_cases() {
        let g = make_uniform_grid(1.0, 1 << 10).unwrap();
        let mesh: Vec<f64> = (0..401).map(|i| -4.0 + i as f64 * 8.0 / 400.0).collect();

        // σ ≡ 0: φ = id and both routes converge to the plain ODE
        // y' = −y + 0.3, y(1) = (0.5 − 0.3) e^{−1} + 0.3
        let eta0 = GridRoughPath::zero(g.clone(), 1);
        let vf0 = scalar_vf(|x, u| -x + u, |_| 0.0);
        let mu = ControlPath::constant(g.clone(), &[0.3]);
        let a = flow_decomposition_solve(0.5, 0.0, &vf0, &mu, &eta0, &mesh).unwrap();
        let b = solve_controlled_rde(&[0.5], 0.0, &vf0, &mu, &eta0).unwrap();
        let exact = 0.2 * (-1.0f64).exp() + 0.3;
        assert!((a.terminal()[0] - exact).abs() < 1e-5);
        assert!((b.terminal()[0] - exact).abs() < 2e-3);
        assert!(a.sup_distance(&b) < 2e-3);

        // additive σ ≡ 1: φ(t,x) = x + η_t, b̃(t,x,u) = b(x + η_t, u)
        let eta = sample_brownian_lift(8, &g, 1, 1).unwrap();
        let vf1 = scalar_vf(|x, u| -x + u, |_| 1.0);
        let a = flow_decomposition_solve(0.0, 0.0, &vf1, &mu, &eta, &mesh).unwrap();
        let b = solve_controlled_rde(&[0.0], 0.0, &vf1, &mu, &eta).unwrap();
        assert!(a.sup_distance(&b) < 2e-3, "{}", a.sup_distance(&b));

        // scalar linear σ(x) = Cx, b = Mx + Nu
        let vf2 = scalar_vf(|x, u| 0.2 * x + u, |x| 0.25 * x);
        let mesh2: Vec<f64> = (0..401).map(|i| 0.05 + i as f64 * (6.0 - 0.05) / 400.0).collect();
        let a = flow_decomposition_solve(1.0, 0.0, &vf2, &mu, &eta, &mesh2).unwrap();
        let b = solve_controlled_rde(&[1.0], 0.0, &vf2, &mu, &eta).unwrap();
        let rel = a.sup_distance(&b)
            / b.states().iter().map(|s| s[0].abs()).fold(0.0, f64::max);
        assert!(rel < 1e-3, "relative flow mismatch {rel}");

        // exiting the mesh is an error
        let tiny: Vec<f64> = vec![0.9, 1.0, 1.1];
        assert!(matches!(
            flow_decomposition_solve(1.0, 0.0, &vf2, &mu, &eta, &tiny),
            Err(Error::OutOfDomain(_))
        ));
    }

    #[test]
    fn derivative_probe_flags_wrong_jacobian() {
        let vf = scalar_vf(|x, u| x * u, |x| x * x).with_d_sigma(|x, out| out[0] = 2.0 * x[0]);
        assert!(vf.derivative_probe(&[0.7], &[0.3]) < 1e-7);
        let bad = scalar_vf(|x, u| x * u, |x| x * x).with_d_sigma(|x, out| out[0] = 3.0 * x[0]);
        assert!(bad.derivative_probe(&[0.7], &[0.3]) > 0.5);
    }
}
