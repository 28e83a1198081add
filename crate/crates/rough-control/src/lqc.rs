//! Closed-form linear-quadratic oracles.
//!
//! Additive noise: `dX = (M X + N ν) dt + dB` with gain
//! `½∫(⟨QX,X⟩ + ⟨Rν,ν⟩) ds + ½⟨G X_T, X_T⟩`; the value function is
//! `V(t,x) = ½⟨P(t)x,x⟩ + ½∫_t^T Tr P(s) ds` where `P` solves the matrix
//! Riccati equation `P' = −PM − MᵀP + P N R⁻¹ Nᵀ P − Q`, `P(T) = G`, and the
//! optimal feedback is `ν*(t,x) = −R⁻¹ Nᵀ P(t) x`.
//!
//! Multiplicative noise (scalar): `dX = (M X + N ν) dt + C X dη` with the
//! same quadratic gains; `V(t,x) = ½ P_t x²` where
//! `Ṗ + 2PM + 2PC² + Q − N²R⁻¹P² = 0`, `P(T) = G`.
//!
//! The fixtures take `Q, R, G` negative definite so the maximization problem
//! is concave and these formulas are the verifiable optimum.
//!
//! On top of the value functions, this module evaluates the two explicit
//! optimal penalties for the pathwise duality bounds and the objects they are
//! built from (`λ¹`, `γ^R` in the additive case; the propagator `Γ`, the
//! compensated integral `Θ` and the penalties `z¹`, `z²` in the multiplicative
//! case). Penalties are oriented so that the inner pathwise problem maximizes
//! `payoff − z`; cross-checks against the numerically computed martingale and
//! control-linear penalties pin the signs and normalizations.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::rough_path::GridRoughPath;

/// Additive-noise linear-quadratic problem data.
#[derive(Debug, Clone)]
pub struct AdditiveLqcSpec {
    pub m: DMatrix<f64>,
    pub n: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub g: DMatrix<f64>,
    pub horizon: f64,
}

impl AdditiveLqcSpec {
    /// The scalar desk fixture `(M,N,Q,R,G,T) = (0.1, 1, −1, −1, −1, 1)`.
    pub fn scalar_fixture() -> Self {
        AdditiveLqcSpec {
            m: DMatrix::from_element(1, 1, 0.1),
            n: DMatrix::from_element(1, 1, 1.0),
            q: DMatrix::from_element(1, 1, -1.0),
            r: DMatrix::from_element(1, 1, -1.0),
            g: DMatrix::from_element(1, 1, -1.0),
            horizon: 1.0,
        }
    }

    pub fn state_dim(&self) -> usize {
        self.m.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.n.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        let e = self.state_dim();
        let mc = self.control_dim();
        if self.m.ncols() != e
            || self.n.nrows() != e
            || self.q.shape() != (e, e)
            || self.r.shape() != (mc, mc)
            || self.g.shape() != (e, e)
        {
            return Err(Error::invalid("LQC matrices have non-conforming shapes"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid("LQC horizon must be positive"));
        }
        let r_inv = self
            .r
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::invalid("R is not invertible"))?;
        let residual = (&self.r * &r_inv - DMatrix::identity(mc, mc)).norm();
        if residual > 1e-8 {
            return Err(Error::invalid(format!(
                "R is too ill-conditioned (inverse residual {residual:e})"
            )));
        }
        Ok(())
    }

    pub fn r_inv(&self) -> DMatrix<f64> {
        self.r.clone().try_inverse().expect("validated R")
    }
}

/// Scalar multiplicative-noise linear-quadratic problem data.
#[derive(Debug, Clone, Copy)]
pub struct MultiplicativeLqcSpec {
    pub m: f64,
    pub n: f64,
    pub c: f64,
    pub q: f64,
    pub r: f64,
    pub g: f64,
    pub horizon: f64,
}

impl MultiplicativeLqcSpec {
    /// The scalar desk fixture `(M,N,C,Q,R,G,T) = (0.1, 1, 0.3, −1, −1, −1, 1)`.
    pub fn scalar_fixture() -> Self {
        MultiplicativeLqcSpec {
            m: 0.1,
            n: 1.0,
            c: 0.3,
            q: -1.0,
            r: -1.0,
            g: -1.0,
            horizon: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0.0 {
            return Err(Error::invalid("R must be nonzero"));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::invalid("LQC horizon must be positive"));
        }
        Ok(())
    }
}

/// Backward Riccati solution on a uniform time grid.
///
/// `P` is stored at each grid time together with the equation right-hand side
/// (used by callers needing `∂_t V`) and the running integral
/// `∫_t^T Tr P(s) ds`. Interpolation between grid times is piecewise linear.
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    times: Vec<f64>,
    p: Vec<DMatrix<f64>>,
    p_dot: Vec<DMatrix<f64>>,
    trace_integral: Vec<f64>,
}

impl RiccatiSolution {
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn p_grid(&self, k: usize) -> &DMatrix<f64> {
        &self.p[k]
    }

    fn locate(&self, t: f64) -> Result<(usize, usize, f64)> {
        let horizon = self.horizon();
        if t < self.times[0] - 1e-12 || t > horizon + 1e-12 * horizon.abs().max(1.0) {
            return Err(Error::invalid(format!(
                "time {t} outside the horizon [{}, {horizon}]",
                self.times[0]
            )));
        }
        let t = t.clamp(self.times[0], horizon);
        let n = self.times.len();
        let hi = self.times.partition_point(|&v| v < t).clamp(1, n - 1);
        let lo = hi - 1;
        let w = (t - self.times[lo]) / (self.times[hi] - self.times[lo]);
        Ok((lo, hi, w))
    }

    pub fn p_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (lo, hi, w) = self.locate(t)?;
        Ok(&self.p[lo] * (1.0 - w) + &self.p[hi] * w)
    }

    pub fn p_dot_at(&self, t: f64) -> Result<DMatrix<f64>> {
        let (lo, hi, w) = self.locate(t)?;
        Ok(&self.p_dot[lo] * (1.0 - w) + &self.p_dot[hi] * w)
    }

    pub fn trace_integral_at(&self, t: f64) -> Result<f64> {
        let (lo, hi, w) = self.locate(t)?;
        Ok(self.trace_integral[lo] * (1.0 - w) + self.trace_integral[hi] * w)
    }

    /// Scalar tables `(times, P, P', ∫TrP)` for hot loops (state dimension 1).
    pub fn scalar_tables(&self) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
        let p: Vec<f64> = self.p.iter().map(|m| m[(0, 0)]).collect();
        let pdot: Vec<f64> = self.p_dot.iter().map(|m| m[(0, 0)]).collect();
        (self.times.clone(), p, pdot, self.trace_integral.clone())
    }
}

fn riccati_solve(
    rhs: &dyn Fn(&DMatrix<f64>) -> DMatrix<f64>,
    g_terminal: DMatrix<f64>,
    horizon: f64,
    n_steps: usize,
) -> Result<RiccatiSolution> {
    if n_steps == 0 {
        return Err(Error::invalid("Riccati solve needs at least one step"));
    }
    let cap = 1e8;
    let h = horizon / n_steps as f64;
    let mut times = vec![0.0; n_steps + 1];
    for (k, t) in times.iter_mut().enumerate() {
        *t = k as f64 * horizon / n_steps as f64;
    }
    let mut p = vec![DMatrix::zeros(0, 0); n_steps + 1];
    let mut p_dot = vec![DMatrix::zeros(0, 0); n_steps + 1];
    let mut trace_integral = vec![0.0; n_steps + 1];

    let symmetrize = |m: &DMatrix<f64>| (m + m.transpose()) * 0.5;
    p[n_steps] = g_terminal.clone();
    p_dot[n_steps] = rhs(&g_terminal);
    let mut cur = g_terminal;
    let mut integral = 0.0;
    for k in (0..n_steps).rev() {
        // classical RK4 backward in time (step −h); the trace integral rides
        // along with the same stage weights since d/dt ∫_t^T Tr P = −Tr P(t)
        let k1 = rhs(&cur);
        let p2 = &cur - &k1 * (0.5 * h);
        let k2 = rhs(&p2);
        let p3 = &cur - &k2 * (0.5 * h);
        let k3 = rhs(&p3);
        let p4 = &cur - &k3 * h;
        let k4 = rhs(&p4);
        let next = &cur - (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        let next = symmetrize(&next);
        integral += h / 6.0 * (cur.trace() + 2.0 * p2.trace() + 2.0 * p3.trace() + p4.trace());
        let norm = next.norm();
        if !norm.is_finite() || norm > cap {
            return Err(Error::FiniteEscape { t: times[k], norm });
        }
        cur = next;
        p_dot[k] = rhs(&cur);
        p[k] = cur.clone();
        trace_integral[k] = integral;
    }
    Ok(RiccatiSolution {
        times,
        p,
        p_dot,
        trace_integral,
    })
}

/// Backward RK4 solve of `P' = −PM − MᵀP + P N R⁻¹ Nᵀ P − Q`, `P(T) = G`,
/// with symmetrization at every step.
pub fn riccati_solve_additive(spec: &AdditiveLqcSpec, n_steps: usize) -> Result<RiccatiSolution> {
    spec.validate()?;
    let m = spec.m.clone();
    let mt = spec.m.transpose();
    let gain = &spec.n * spec.r_inv() * spec.n.transpose();
    let q = spec.q.clone();
    let rhs = move |p: &DMatrix<f64>| -> DMatrix<f64> { -p * &m - &mt * p + p * &gain * p - &q };
    riccati_solve(&rhs, spec.g.clone(), spec.horizon, n_steps)
}

/// Backward RK4 solve of `Ṗ = −2PM − 2PC² − Q + N²R⁻¹P²`, `P(T) = G`.
pub fn riccati_solve_multiplicative(
    spec: &MultiplicativeLqcSpec,
    n_steps: usize,
) -> Result<RiccatiSolution> {
    spec.validate()?;
    let s = *spec;
    let rhs = move |p: &DMatrix<f64>| -> DMatrix<f64> {
        let pv = p[(0, 0)];
        DMatrix::from_element(
            1,
            1,
            -2.0 * pv * s.m - 2.0 * pv * s.c * s.c - s.q + s.n * s.n / s.r * pv * pv,
        )
    };
    riccati_solve(
        &rhs,
        DMatrix::from_element(1, 1, spec.g),
        spec.horizon,
        n_steps,
    )
}

/// `V(t,x) = ½⟨P(t)x,x⟩ + ½∫_t^T Tr P(s) ds`.
pub fn lqc_additive_value(sol: &RiccatiSolution, t: f64, x: &[f64]) -> Result<f64> {
    let p = sol.p_at(t)?;
    let xv = nalgebra::DVector::from_column_slice(x);
    Ok(0.5 * (&p * &xv).dot(&xv) + 0.5 * sol.trace_integral_at(t)?)
}

/// `ν*(t,x) = −R⁻¹ Nᵀ P(t) x`.
pub fn lqc_additive_feedback(
    spec: &AdditiveLqcSpec,
    sol: &RiccatiSolution,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    let p = sol.p_at(t)?;
    let xv = nalgebra::DVector::from_column_slice(x);
    let u = -(spec.r_inv() * spec.n.transpose() * p * xv);
    Ok(u.as_slice().to_vec())
}

/// `V(t,x) = ½ P_t x²` for the scalar multiplicative problem.
pub fn lqc_multiplicative_value(sol: &RiccatiSolution, t: f64, x: f64) -> Result<f64> {
    Ok(0.5 * sol.p_at(t)?[(0, 0)] * x * x)
}

/// `u*(t,x) = −R⁻¹ N P_t x` for the scalar multiplicative problem.
pub fn lqc_multiplicative_feedback(
    spec: &MultiplicativeLqcSpec,
    sol: &RiccatiSolution,
    t: f64,
    x: f64,
) -> Result<f64> {
    Ok(-spec.n / spec.r * sol.p_at(t)?[(0, 0)] * x)
}

/// `λ¹(t_k; η) = −Nᵀ Σ_{j≥k} e^{Mᵀ(t_j−t_k)} P(t_j) δη_j`, one control-space
/// vector per grid time (zero at the terminal time).
///
/// Evaluated by the backward recursion `S_k = P_k δη_k + e^{MᵀΔt_k} S_{k+1}`,
/// so only per-interval matrix exponentials are formed.
pub fn lambda1_additive(
    spec: &AdditiveLqcSpec,
    sol: &RiccatiSolution,
    eta: &GridRoughPath,
) -> Result<Vec<Vec<f64>>> {
    let e = spec.state_dim();
    if eta.dim() != e {
        return Err(Error::GridMismatch(
            "driver dimension must match the state dimension".into(),
        ));
    }
    let n = eta.n_intervals();
    let grid = eta.grid();
    let nt = spec.n.transpose();
    let mut out = vec![vec![0.0; spec.control_dim()]; n + 1];
    let mut suffix = nalgebra::DVector::<f64>::zeros(e);
    // cache the per-interval exponential; uniform grids need only one
    let mut cached: Option<(f64, DMatrix<f64>)> = None;
    for k in (0..n).rev() {
        let dt = grid.dt(k);
        let needs_new = match &cached {
            Some((h, _)) => (h - dt).abs() > 1e-14 * dt.abs(),
            None => true,
        };
        if needs_new {
            cached = Some(((dt), (spec.m.transpose() * dt).exp()));
        }
        let exp_mt = &cached.as_ref().unwrap().1;
        let p_k = sol.p_at(grid.t(k))?;
        let delta = nalgebra::DVector::from_column_slice(eta.inc(k));
        suffix = p_k * delta + exp_mt * suffix;
        let lam = -(&nt * &suffix);
        out[k].copy_from_slice(lam.as_slice());
    }
    Ok(out)
}

/// `γ^R(η) = ∫⟨P(s) X⁰_s, dη_s⟩ − ½ ∫ Tr P(s) ds` with `X⁰` solving
/// `dX = MX dt + dη` from `(t_{k0}, x)`.
///
/// The η-integral has an η-dependent integrand, so its discrete form is the
/// compensated rough sum `Σ [⟨P_k X⁰_k, δη_k⟩ + ⟨P_k, A_k⟩_F]`: the level-2
/// correction carries the Gubinelli derivative `P(s)` of `P X⁰` against the
/// area. A plain left-endpoint sum would converge to the Itô value and break
/// the penalty identities (and the zero-mean property).
pub fn gamma_r_additive(
    spec: &AdditiveLqcSpec,
    sol: &RiccatiSolution,
    eta: &GridRoughPath,
    k0: usize,
    x: &[f64],
) -> Result<f64> {
    let grid = eta.grid();
    let n = eta.n_intervals();
    let e = spec.state_dim();
    let mut state = nalgebra::DVector::from_column_slice(x);
    let mut acc = 0.0;
    for k in k0..n {
        let dt = grid.dt(k);
        let p_k = sol.p_at(grid.t(k))?;
        let delta = nalgebra::DVector::from_column_slice(eta.inc(k));
        let area = eta.area(k);
        let mut lvl2 = 0.0;
        for i in 0..e {
            for j in 0..e {
                lvl2 += p_k[(i, j)] * area[i * e + j];
            }
        }
        acc += (&p_k * &state).dot(&delta) + lvl2 - 0.5 * p_k.trace() * dt;
        state = &state + &spec.m * &state * dt + delta;
    }
    Ok(acc)
}

/// Additive optimal control-linear penalty in subtracted orientation:
/// `z¹(η,μ) = −Σ⟨λ¹(t_k;η), μ_k⟩ Δt_k` (the inner problem maximizes
/// `payoff − z¹`).
pub fn z1_additive(lambda1: &[Vec<f64>], mu: &crate::rde::ControlPath, k0: usize) -> f64 {
    let grid = mu.grid();
    let mut acc = 0.0;
    for k in k0..grid.n_intervals() {
        let lam = &lambda1[k];
        let u = mu.u(k);
        let dot: f64 = lam.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        acc -= dot * grid.dt(k);
    }
    acc
}

/// Propagator values `Γ_{t_{k0}, t_k}` of `d_sΓ = MΓ ds + CΓ dη`, `Γ_{t,t}=1`,
/// stepped with the scalar second-order update. Ratios give the cocycle
/// `Γ_{r,s} = Γ_{t,s} / Γ_{t,r}`.
#[derive(Debug, Clone)]
pub struct GammaPropagator {
    k0: usize,
    values: Vec<f64>,
}

impl GammaPropagator {
    /// `Γ_{t_{k0}, t_k}` for `k ≥ k0`.
    pub fn level(&self, k: usize) -> f64 {
        self.values[k - self.k0]
    }

    /// Cocycle ratio `Γ_{t_r, t_s}` for `k0 ≤ r ≤ s`.
    pub fn between(&self, r: usize, s: usize) -> f64 {
        self.values[s - self.k0] / self.values[r - self.k0]
    }
}

pub fn gamma_propagator(
    spec: &MultiplicativeLqcSpec,
    eta: &GridRoughPath,
    k0: usize,
) -> Result<GammaPropagator> {
    if eta.dim() != 1 {
        return Err(Error::invalid("multiplicative oracle is one-dimensional"));
    }
    let n = eta.n_intervals();
    let grid = eta.grid();
    let mut values = Vec::with_capacity(n - k0 + 1);
    values.push(1.0);
    let mut g = 1.0;
    for k in k0..n {
        let delta = eta.inc(k)[0];
        let a = eta.area(k)[0];
        g *= 1.0 + spec.m * grid.dt(k) + spec.c * delta + spec.c * spec.c * a;
        if !g.is_finite() || g.abs() < 1e-300 {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "propagator under/overflow".into(),
            });
        }
        values.push(g);
    }
    Ok(GammaPropagator { k0, values })
}

/// `Θ_{t_k} = ∫_{t_k}^T P_s Γ²_{t_k,s} (dη_s − C ds)` for every grid time
/// `k ≥ k0`.
///
/// The η-part is a rough integral of the η-dependent integrand `P Γ²`, so
/// each interval contributes the compensated sum
/// `P_j Γ_j² (δη_j + 2C A_j − C Δt_j)`: the Gubinelli derivative of `Γ²` is
/// `2CΓ²`, contracted with the interval area. Suffix sums over
/// `Γ_j = Γ_{t_{k0},t_j}` give all starting times in one backward pass.
pub fn theta(
    spec: &MultiplicativeLqcSpec,
    sol: &RiccatiSolution,
    eta: &GridRoughPath,
    gamma: &GammaPropagator,
    k0: usize,
) -> Result<Vec<f64>> {
    let n = eta.n_intervals();
    let grid = eta.grid();
    let mut out = vec![0.0; n - k0 + 1];
    let mut suffix = 0.0;
    for k in (k0..n).rev() {
        let p = sol.p_at(grid.t(k))?[(0, 0)];
        let gk = gamma.level(k);
        let w = eta.inc(k)[0] + 2.0 * spec.c * eta.area(k)[0] - spec.c * grid.dt(k);
        suffix += p * gk * gk * w;
        out[k - k0] = suffix / (gk * gk);
    }
    Ok(out)
}

/// Optimal control-linear penalty weight for the multiplicative fixture:
/// `λ*(t_k, x) = 2 N C x Θ_{t_k}`.
///
/// The factor 2 comes from the variational-flow computation of
/// `b_uᵀ D_x[g(Z_T) + Z_T^{aug}] + f_u`; the duality tests cross-check it
/// numerically.
pub fn lambda_star_multiplicative(spec: &MultiplicativeLqcSpec, theta_k: f64, x: f64) -> f64 {
    2.0 * spec.n * spec.c * x * theta_k
}

/// Multiplicative control-linear penalty in subtracted orientation:
///
/// ```text
/// z¹(η,μ) = Σ_k λ*(t_k, X_k) μ_k Δt_k
///         = 2CN [ x Σ_k Γ_{t,t_k} Θ_k μ_k Δt_k
///                 + N Σ_k Θ_k μ_k Γ_{t,t_k} (Σ_{v<k} μ_v Δt_v / Γ_{t,t_v}) Δt_k ],
/// ```
///
/// the state expanded through the propagator representation
/// `X_s = Γ_{t,s} x + N ∫_t^s Γ_{v,s} μ_v dv`.
pub fn z1_multiplicative(
    spec: &MultiplicativeLqcSpec,
    theta_vals: &[f64],
    gamma: &GammaPropagator,
    eta: &GridRoughPath,
    x: f64,
    mu: &crate::rde::ControlPath,
    k0: usize,
) -> f64 {
    let n = eta.n_intervals();
    let grid = eta.grid();
    let mut first = 0.0;
    let mut second = 0.0;
    let mut prefix = 0.0; // Σ_{v<k} μ_v Δt_v / Γ_v
    for k in k0..n {
        let dt = grid.dt(k);
        let gk = gamma.level(k);
        let th = theta_vals[k - k0];
        let u = mu.u(k)[0];
        first += gk * th * u * dt;
        second += th * u * gk * prefix * dt;
        prefix += u * dt / gk;
    }
    2.0 * spec.c * spec.n * (x * first + spec.n * second)
}

/// Multiplicative martingale penalty in subtracted orientation:
///
/// ```text
/// z²(η,μ) = C Θ_t x² + 2CNx Σ_s Γ_{t,s} Θ_s μ_s Δt
///           + CN² ΣΣ_{r≠s} Γ_{r∧s, r∨s} Θ_{r∨s} μ_r μ_s Δt²,
/// ```
///
/// the bilinear term a triangle-symmetrized double sum. Equals the martingale
/// penalty built from `h = V` up to quadrature error, and differs from `z¹`
/// by the control-independent `C Θ_t x²`.
pub fn z2_multiplicative(
    spec: &MultiplicativeLqcSpec,
    theta_vals: &[f64],
    gamma: &GammaPropagator,
    eta: &GridRoughPath,
    x: f64,
    mu: &crate::rde::ControlPath,
    k0: usize,
) -> f64 {
    let n = eta.n_intervals();
    let grid = eta.grid();
    let mut linear = 0.0;
    for s in k0..n {
        linear += gamma.level(s) * theta_vals[s - k0] * mu.u(s)[0] * grid.dt(s);
    }
    let mut bilinear = 0.0;
    for s in k0..n {
        let dts = grid.dt(s);
        let ths = theta_vals[s - k0];
        let us = mu.u(s)[0];
        for r in k0..s {
            bilinear += 2.0 * gamma.between(r, s) * ths * mu.u(r)[0] * us * grid.dt(r) * dts;
        }
    }
    spec.c * theta_vals[0] * x * x
        + 2.0 * spec.c * spec.n * x * linear
        + spec.c * spec.n * spec.n * bilinear
}
