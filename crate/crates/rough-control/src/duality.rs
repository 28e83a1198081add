//! Monte Carlo duality bounds for the classical stochastic control problem
//!
//! ```text
//! V(t,x) = sup_ν E[ ∫ f(s, X_s, ν_s) ds + g(X_T) ]        (ν adapted)
//! ```
//!
//! Lower bounds come from simulating an adapted feedback policy; upper bounds
//! from relaxing adaptedness: per sampled driver the inner *pathwise* problem
//! is solved by dynamic programming after absorbing a penalty into the gains.
//!
//! Penalty orientation: the inner problem maximizes `payoff − z`, where
//!
//! * martingale (Rogers-type) penalty:
//!   `z = M^h = h(T,X_T) − h(t,x) − ∫(∂_s+L^u)h`, absorbed exactly by
//!   `f̃ = f + (∂_s + L^u)h`, `g̃ = g − h(T,·) + h(t,x)`;
//! * control-linear (Davis–Burstein) penalty:
//!   `z = ∫⟨λ*(s, X_s), μ_s⟩ ds` with `λ* = b_uᵀ D_xW + f_u` built from the
//!   modified dynamics `Z`, absorbed by `f̃ = f − ⟨λ*(s,x), u⟩`.
//!
//! Under adapted controls both penalties have zero mean, so every choice gives
//! a statistically valid upper bound; with `h = V` (respectively the optimal
//! feedback) the bounds are tight.

use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::control::{
    inner_sup_dp, payoff_along, ControlProblem, DpSettings, Mesh, PathwiseResult, RunningGain,
};
use crate::error::{Error, Result};
use crate::rde::{
    closed_loop_solve, davie_noise_into, linear_davie_step, ControlPath, RdeSolution,
    VectorFieldSet,
};
use crate::rough_path::{sample_brownian_lift_stream, GridRoughPath, TimeGrid};

/// Deterministic Brownian-driver sampler: path `i` uses stream `i` of the
/// master seed, so parallel and serial runs agree bit-for-bit.
#[derive(Debug, Clone)]
pub struct SamplerSettings {
    pub grid: TimeGrid,
    pub substeps: usize,
    pub driver_dim: usize,
    pub master_seed: u64,
}

impl SamplerSettings {
    pub fn driver(&self, path_index: u64) -> Result<GridRoughPath> {
        sample_brownian_lift_stream(
            self.master_seed,
            path_index,
            &self.grid,
            self.substeps,
            self.driver_dim,
        )
    }
}

/// Compensated (Kahan) mean and standard error.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut sum = 0.0;
    let mut comp = 0.0;
    for &v in values {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    let mean = sum / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let mut ss = 0.0;
    let mut comp2 = 0.0;
    for &v in values {
        let d = (v - mean) * (v - mean);
        let y = d - comp2;
        let t = ss + y;
        comp2 = (t - ss) - y;
        ss = t;
    }
    let var = ss / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// One side of a duality bound.
#[derive(Debug, Clone, Serialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
    pub n_paths: usize,
}

/// Bound estimates plus everything needed to reproduce them bit-exactly.
#[derive(Debug, Clone, Serialize)]
pub struct DualityReport {
    pub lower: Option<Estimate>,
    pub upper: Option<Estimate>,
    pub gap: Option<f64>,
    pub master_seed: u64,
    pub grid_n: usize,
    pub substeps: usize,
    pub driver_dim: usize,
    pub mesh: Option<Mesh>,
    pub control_points: usize,
    pub penalty: String,
    pub t0: f64,
    pub x0: Vec<f64>,
    pub failures: usize,
}

impl DualityReport {
    fn shell(settings: &SamplerSettings, penalty: &str, t0: f64, x0: &[f64]) -> Self {
        DualityReport {
            lower: None,
            upper: None,
            gap: None,
            master_seed: settings.master_seed,
            grid_n: settings.grid.n_intervals(),
            substeps: settings.substeps,
            driver_dim: settings.driver_dim,
            mesh: None,
            control_points: 0,
            penalty: penalty.to_string(),
            t0,
            x0: x0.to_vec(),
            failures: 0,
        }
    }

    /// Merge a lower-side and an upper-side report into one.
    pub fn merged(lower: &DualityReport, upper: &DualityReport) -> DualityReport {
        let mut out = upper.clone();
        out.lower = lower.lower.clone();
        out.failures += lower.failures;
        out.gap = match (&out.lower, &out.upper) {
            (Some(l), Some(u)) => Some(u.mean - l.mean),
            _ => None,
        };
        out
    }
}

/// Uniform-grid scalar quadratic test function
/// `h(t,x) = ½ p(t) x² + ½ c(t)` (the linear-quadratic value-function shape).
/// Carries `p'` and `c'` so `∂_t h` needs no differencing, and supports O(1)
/// time lookup in hot loops.
#[derive(Debug, Clone)]
pub struct ScalarQuadraticH {
    times: Vec<f64>,
    p: Vec<f64>,
    p_dot: Vec<f64>,
    trace_int: Vec<f64>,
    trace_int_dot: Vec<f64>,
}

impl ScalarQuadraticH {
    pub fn new(
        times: Vec<f64>,
        p: Vec<f64>,
        p_dot: Vec<f64>,
        trace_int: Vec<f64>,
        trace_int_dot: Vec<f64>,
    ) -> Result<Self> {
        if times.len() < 2
            || times.len() != p.len()
            || p.len() != p_dot.len()
            || p.len() != trace_int.len()
            || p.len() != trace_int_dot.len()
        {
            return Err(Error::invalid("quadratic h tables must share a length ≥ 2"));
        }
        Ok(ScalarQuadraticH {
            times,
            p,
            p_dot,
            trace_int,
            trace_int_dot,
        })
    }

    /// Tables for the additive value function `½⟨Px,x⟩ + ½∫TrP`, whose
    /// constant part differentiates to `−P`.
    pub fn additive_value(
        times: Vec<f64>,
        p: Vec<f64>,
        p_dot: Vec<f64>,
        trace_int: Vec<f64>,
    ) -> Result<Self> {
        let tid: Vec<f64> = p.iter().map(|v| -v).collect();
        ScalarQuadraticH::new(times, p, p_dot, trace_int, tid)
    }

    /// Tables for the multiplicative value function `½P_t x²` (no constant
    /// part).
    pub fn multiplicative_value(times: Vec<f64>, p: Vec<f64>, p_dot: Vec<f64>) -> Result<Self> {
        let zeros = vec![0.0; p.len()];
        ScalarQuadraticH::new(times, p, p_dot, zeros.clone(), zeros)
    }

    #[inline]
    fn weights(&self, t: f64) -> (usize, f64) {
        let t0 = self.times[0];
        let h = self.times[1] - self.times[0];
        let n = self.times.len();
        let pos = ((t - t0) / h).clamp(0.0, (n - 1) as f64);
        let i = (pos as usize).min(n - 2);
        (i, pos - i as f64)
    }

    #[inline]
    pub fn p_at(&self, t: f64) -> f64 {
        let (i, w) = self.weights(t);
        self.p[i] * (1.0 - w) + self.p[i + 1] * w
    }

    /// `(p, p', c')` at `t` with a single table lookup, for hot loops.
    #[inline]
    pub fn coeffs_at(&self, t: f64) -> (f64, f64, f64) {
        let (i, w) = self.weights(t);
        let v = 1.0 - w;
        (
            self.p[i] * v + self.p[i + 1] * w,
            self.p_dot[i] * v + self.p_dot[i + 1] * w,
            self.trace_int_dot[i] * v + self.trace_int_dot[i + 1] * w,
        )
    }

    #[inline]
    pub fn p_dot_at(&self, t: f64) -> f64 {
        let (i, w) = self.weights(t);
        self.p_dot[i] * (1.0 - w) + self.p_dot[i + 1] * w
    }

    #[inline]
    pub fn trace_int_at(&self, t: f64) -> f64 {
        let (i, w) = self.weights(t);
        self.trace_int[i] * (1.0 - w) + self.trace_int[i + 1] * w
    }

    pub fn h(&self, t: f64, x: f64) -> f64 {
        0.5 * self.p_at(t) * x * x + 0.5 * self.trace_int_at(t)
    }

    /// `∂_t h = ½ p' x² + ½ c'`.
    pub fn dt_h(&self, t: f64, x: f64) -> f64 {
        let (i, w) = self.weights(t);
        let cdot = self.trace_int_dot[i] * (1.0 - w) + self.trace_int_dot[i + 1] * w;
        0.5 * self.p_dot_at(t) * x * x + 0.5 * cdot
    }

    pub fn dx_h(&self, t: f64, x: f64) -> f64 {
        self.p_at(t) * x
    }

    pub fn dxx_h(&self, t: f64) -> f64 {
        self.p_at(t)
    }
}

pub type HFn = dyn Fn(f64, &[f64]) -> f64 + Send + Sync;
pub type HGradFn = dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync;

/// Test function data for the martingale penalty: `h`, its derivatives
/// (finite-difference fallbacks when absent), and an optional scalar
/// quadratic fast path.
#[derive(Clone)]
pub struct RogersData {
    pub h: Arc<HFn>,
    pub dt_h: Option<Arc<HFn>>,
    pub dx_h: Option<Arc<HGradFn>>,
    /// Row-major `e×e` Hessian.
    pub dxx_h: Option<Arc<HGradFn>>,
    pub fd_step: f64,
    pub scalar_quadratic: Option<Arc<ScalarQuadraticH>>,
}

impl RogersData {
    pub fn new(h: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        RogersData {
            h: Arc::new(h),
            dt_h: None,
            dx_h: None,
            dxx_h: None,
            fd_step: f64::EPSILON.powf(0.25),
            scalar_quadratic: None,
        }
    }

    pub fn with_dt_h(mut self, f: impl Fn(f64, &[f64]) -> f64 + Send + Sync + 'static) -> Self {
        self.dt_h = Some(Arc::new(f));
        self
    }

    pub fn with_dx_h(
        mut self,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dx_h = Some(Arc::new(f));
        self
    }

    pub fn with_dxx_h(
        mut self,
        f: impl Fn(f64, &[f64], &mut [f64]) + Send + Sync + 'static,
    ) -> Self {
        self.dxx_h = Some(Arc::new(f));
        self
    }

    /// Build the full data set from scalar quadratic tables (analytic
    /// derivatives plus the hot-loop fast path).
    pub fn from_scalar_quadratic(tables: ScalarQuadraticH) -> Self {
        let tables = Arc::new(tables);
        let t1 = Arc::clone(&tables);
        let t2 = Arc::clone(&tables);
        let t3 = Arc::clone(&tables);
        let t4 = Arc::clone(&tables);
        RogersData {
            h: Arc::new(move |t, x: &[f64]| t1.h(t, x[0])),
            dt_h: Some(Arc::new(move |t, x: &[f64]| t2.dt_h(t, x[0]))),
            dx_h: Some(Arc::new(move |t, x: &[f64], out: &mut [f64]| {
                out[0] = t3.dx_h(t, x[0])
            })),
            dxx_h: Some(Arc::new(move |t, _x: &[f64], out: &mut [f64]| {
                out[0] = t4.dxx_h(t)
            })),
            fd_step: f64::EPSILON.powf(0.25),
            scalar_quadratic: Some(tables),
        }
    }

    pub fn eval_h(&self, t: f64, x: &[f64]) -> f64 {
        (self.h)(t, x)
    }

    pub fn eval_dt_h(&self, t: f64, x: &[f64]) -> f64 {
        if let Some(f) = &self.dt_h {
            return f(t, x);
        }
        let h = self.fd_step * (1.0 + t.abs());
        ((self.h)(t + h, x) - (self.h)(t - h, x)) / (2.0 * h)
    }

    pub fn eval_dx_h(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.dx_h {
            f(t, x, out);
            return;
        }
        let amp = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = self.fd_step * (1.0 + amp);
        let mut xe = x.to_vec();
        for c in 0..x.len() {
            xe[c] = x[c] + h;
            let fp = (self.h)(t, &xe);
            xe[c] = x[c] - h;
            let fm = (self.h)(t, &xe);
            xe[c] = x[c];
            out[c] = (fp - fm) / (2.0 * h);
        }
    }

    pub fn eval_dxx_h(&self, t: f64, x: &[f64], out: &mut [f64]) {
        if let Some(f) = &self.dxx_h {
            f(t, x, out);
            return;
        }
        let e = x.len();
        let amp = x.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = self.fd_step.sqrt().max(1e-5) * (1.0 + amp);
        let mut xe = x.to_vec();
        let f0 = (self.h)(t, x);
        for a in 0..e {
            for b in a..e {
                let v = if a == b {
                    xe[a] = x[a] + h;
                    let fp = (self.h)(t, &xe);
                    xe[a] = x[a] - h;
                    let fm = (self.h)(t, &xe);
                    xe[a] = x[a];
                    (fp - 2.0 * f0 + fm) / (h * h)
                } else {
                    xe[a] = x[a] + h;
                    xe[b] = x[b] + h;
                    let fpp = (self.h)(t, &xe);
                    xe[b] = x[b] - h;
                    let fpm = (self.h)(t, &xe);
                    xe[a] = x[a] - h;
                    let fmm = (self.h)(t, &xe);
                    xe[b] = x[b] + h;
                    let fmp = (self.h)(t, &xe);
                    xe[a] = x[a];
                    xe[b] = x[b];
                    (fpp - fpm - fmp + fmm) / (4.0 * h * h)
                };
                out[a * e + b] = v;
                out[b * e + a] = v;
            }
        }
    }

    /// Largest discrepancy between supplied derivatives and fresh central
    /// differences at `(t, x)`.
    pub fn derivative_probe(&self, t: f64, x: &[f64]) -> f64 {
        let e = x.len();
        let mut worst = 0.0f64;
        let bare = RogersData {
            h: Arc::clone(&self.h),
            dt_h: None,
            dx_h: None,
            dxx_h: None,
            fd_step: self.fd_step,
            scalar_quadratic: None,
        };
        if self.dt_h.is_some() {
            worst = worst.max((self.eval_dt_h(t, x) - bare.eval_dt_h(t, x)).abs());
        }
        if self.dx_h.is_some() {
            let mut a = vec![0.0; e];
            let mut b = vec![0.0; e];
            self.eval_dx_h(t, x, &mut a);
            bare.eval_dx_h(t, x, &mut b);
            for (u, v) in a.iter().zip(b.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
        if self.dxx_h.is_some() {
            let mut a = vec![0.0; e * e];
            let mut b = vec![0.0; e * e];
            self.eval_dxx_h(t, x, &mut a);
            bare.eval_dxx_h(t, x, &mut b);
            for (u, v) in a.iter().zip(b.iter()) {
                worst = worst.max((u - v).abs());
            }
        }
        worst
    }
}

/// λ evaluator produced per driver, `(t, x) ↦ λ(t,x;η) ∈ R^m`.
pub type PenaltyLambda = Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>;

/// How the control-linear penalty weight is obtained per path.
#[derive(Clone)]
pub enum LambdaSource {
    /// Solve the modified dynamics and variational flow at every `(t, x)`
    /// the inner optimizer touches. Exact but expensive; intended for small
    /// meshes and validation runs.
    Variational,
    /// Closed-form or precomputed per-path evaluator.
    PerPath(Arc<dyn Fn(&GridRoughPath) -> Result<PenaltyLambda> + Send + Sync>),
}

/// Control-linear penalty built from an interior feedback `u*`.
#[derive(Clone)]
pub struct DbPenalty {
    pub feedback: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    pub lambda: LambdaSource,
    /// `∂_u f` of the base problem, for the running-cost extension. `None`
    /// for pure terminal-gain problems.
    pub running_f_u: Option<Arc<dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Send + Sync>>,
}

/// Custom penalty: an arbitrary functional `z(η, μ, t0, x0)` ADDED to the
/// inner objective after optimizing the unpenalized problem. Exact for
/// control-independent `z`; with control-dependent `z` the reported value
/// evaluates `z` at the unpenalized argmax.
#[derive(Clone)]
pub struct CustomPenalty {
    pub z: Arc<dyn Fn(&GridRoughPath, &ControlPath, f64, &[f64]) -> f64 + Send + Sync>,
    pub label: String,
}

/// Penalty alternatives for the upper bound.
#[derive(Clone)]
pub enum Penalty {
    Rogers(RogersData),
    DavisBurstein(DbPenalty),
    Custom(CustomPenalty),
    /// A penalty already folded into a transformed problem (e.g. a fused
    /// fast-path version of the martingale transform). The inner optimizer
    /// runs on `problem` directly.
    Absorbed {
        problem: ControlProblem,
        label: String,
    },
}

impl Penalty {
    pub fn zero() -> Penalty {
        Penalty::Custom(CustomPenalty {
            z: Arc::new(|_, _, _, _| 0.0),
            label: "zero".into(),
        })
    }

    pub fn descriptor(&self) -> String {
        match self {
            Penalty::Rogers(_) => "rogers".into(),
            Penalty::DavisBurstein(_) => "davis-burstein".into(),
            Penalty::Custom(c) => format!("custom:{}", c.label),
            Penalty::Absorbed { label, .. } => format!("absorbed:{label}"),
        }
    }
}

/// Stratonovich-corrected drift `b̃ = b + ½ Σ_i (Dσ_i σ_i)`, stack buffers
/// (state dimension ≤ 4).
fn corrected_drift(vf: &VectorFieldSet, x: &[f64], u: &[f64], out: &mut [f64]) {
    let (e, d) = (vf.state_dim(), vf.driver_dim());
    let mut sig = [0.0f64; 16];
    let mut dsig = [0.0f64; 64];
    vf.eval_b(x, u, out);
    vf.eval_sigma(x, &mut sig[..e * d]);
    let mut scratch = vf.scratch();
    vf.eval_d_sigma(x, &mut dsig[..d * e * e], &mut scratch.fd);
    for i in 0..d {
        for r in 0..e {
            let mut acc = 0.0;
            for c in 0..e {
                acc += dsig[i * e * e + r * e + c] * sig[i * e + c];
            }
            out[r] += 0.5 * acc;
        }
    }
}

/// Whether `Σ (Dσ_i σ_i)` vanishes at a few probe states (e.g. constant σ).
fn ito_correction_vanishes(vf: &VectorFieldSet, probes: &[&[f64]]) -> bool {
    let (e, d) = (vf.state_dim(), vf.driver_dim());
    let mut sig = vec![0.0; e * d];
    let mut dsig = vec![0.0; d * e * e];
    let mut fd = vf.scratch();
    for &x in probes {
        vf.eval_sigma(x, &mut sig);
        vf.eval_d_sigma(x, &mut dsig, &mut fd.fd);
        for i in 0..d {
            for r in 0..e {
                let mut acc = 0.0;
                for c in 0..e {
                    acc += dsig[i * e * e + r * e + c] * sig[i * e + c];
                }
                if acc.abs() > 1e-12 {
                    return false;
                }
            }
        }
    }
    true
}

/// Absorb the subtracted martingale penalty into the gains:
///
/// ```text
/// f̃(s,x,u) = f(s,x,u) + ∂_s h + ⟨b̃(x,u), Dh⟩ + ½ Tr[σσᵀ D²h],
/// g̃(x)     = g(x) − h(T,x) + h(t0,x0),
/// ```
///
/// so that `payoff̃ = payoff − M^h` pathwise and the penalized inner problem
/// is again of the plain pathwise form.
pub fn rogers_transform(
    hdata: &RogersData,
    problem: &ControlProblem,
    t0: f64,
    x0: &[f64],
) -> ControlProblem {
    let horizon = problem.horizon;
    let h_t0_x0 = hdata.eval_h(t0, x0);
    let g_base = Arc::clone(&problem.g);
    let h_for_g = hdata.h.clone();
    let g_tilde = move |x: &[f64]| g_base(x) + h_t0_x0 - h_for_g(horizon, x);

    let f_base = Arc::clone(&problem.f);
    let vf = Arc::clone(&problem.vf);
    let e = vf.state_dim();
    let d = vf.driver_dim();
    let skip_ito = {
        let probes: Vec<Vec<f64>> = vec![vec![0.0; e], vec![0.7; e], vec![-1.3; e]];
        let refs: Vec<&[f64]> = probes.iter().map(|p| p.as_slice()).collect();
        ito_correction_vanishes(&vf, &refs)
    };

    let f_tilde: Arc<RunningGain> = match (&hdata.scalar_quadratic, e) {
        (Some(tables), 1) => {
            let tables = Arc::clone(tables);
            let vf2 = Arc::clone(&vf);
            Arc::new(move |t: f64, x: &[f64], u: &[f64]| {
                let p = tables.p_at(t);
                let xv = x[0];
                let mut bb = [0.0f64];
                if skip_ito {
                    vf2.eval_b(x, u, &mut bb);
                } else {
                    corrected_drift(&vf2, x, u, &mut bb);
                }
                let mut sig = [0.0f64; 4];
                vf2.eval_sigma(x, &mut sig[..vf2.driver_dim()]);
                let sig_sq: f64 = sig[..vf2.driver_dim()].iter().map(|s| s * s).sum();
                f_base(t, x, u) + tables.dt_h(t, xv) + bb[0] * p * xv + 0.5 * sig_sq * p
            })
        }
        _ => {
            let hdata = hdata.clone();
            let vf2 = Arc::clone(&vf);
            Arc::new(move |t: f64, x: &[f64], u: &[f64]| {
                let mut dh = [0.0f64; 4];
                let mut d2h = [0.0f64; 16];
                let mut bb = [0.0f64; 4];
                let mut sig = [0.0f64; 16];
                hdata.eval_dx_h(t, x, &mut dh[..e]);
                hdata.eval_dxx_h(t, x, &mut d2h[..e * e]);
                if skip_ito {
                    vf2.eval_b(x, u, &mut bb[..e]);
                } else {
                    corrected_drift(&vf2, x, u, &mut bb[..e]);
                }
                vf2.eval_sigma(x, &mut sig[..e * d]);
                let mut drift_term = 0.0;
                for r in 0..e {
                    drift_term += bb[r] * dh[r];
                }
                // ½ Tr[σσᵀ D²h] = ½ Σ_i ⟨σ_i, D²h σ_i⟩
                let mut trace_term = 0.0;
                for i in 0..d {
                    for r in 0..e {
                        let mut acc = 0.0;
                        for c in 0..e {
                            acc += d2h[r * e + c] * sig[i * e + c];
                        }
                        trace_term += sig[i * e + r] * acc;
                    }
                }
                f_base(t, x, u) + hdata.eval_dt_h(t, x) + drift_term + 0.5 * trace_term
            })
        }
    };

    ControlProblem {
        vf: Arc::clone(&problem.vf),
        f: f_tilde,
        g: Arc::new(g_tilde),
        dg: None,
        df_x: None,
        step_gain: None,
        step_gain_at: None,
        control_set: problem.control_set.clone(),
        horizon: problem.horizon,
    }
}

/// Both evaluations of the martingale penalty along a trajectory.
#[derive(Debug, Clone, Serialize)]
pub struct RogersPenaltyValue {
    /// `h(T,X_T) − h(t,x) − Σ (∂_s + L^{μ_s}) h Δt` (the reported value).
    pub increment_form: f64,
    /// Compensated rough-sum form
    /// `Σ⟨Dh, σδη⟩ + level-2 corrections + Σ[⟨(b−b̃),Dh⟩ − ½Tr(σσᵀD²h)]Δt`.
    pub rough_integral_form: f64,
    pub diagnostic_gap: f64,
    pub consistency_warning: bool,
}

/// Evaluate `M^h` two ways; the increment form is authoritative and the
/// rough-integral form is a per-path consistency diagnostic.
pub fn rogers_penalty_value(
    hdata: &RogersData,
    traj: &RdeSolution,
    mu: &ControlPath,
    eta: &GridRoughPath,
    problem: &ControlProblem,
    warn_tol: f64,
) -> Result<RogersPenaltyValue> {
    if traj.grid() != eta.grid() {
        return Err(Error::GridMismatch(
            "trajectory and driver must share a grid".into(),
        ));
    }
    let vf = &problem.vf;
    let (e, d) = (vf.state_dim(), vf.driver_dim());
    let grid = eta.grid();
    let k0 = traj.start();
    let n = grid.n_intervals();
    let t0 = grid.t(k0);

    let mut dh = vec![0.0; e];
    let mut d2h = vec![0.0; e * e];
    let mut b = vec![0.0; e];
    let mut b_tilde = vec![0.0; e];
    let mut sig = vec![0.0; e * d];
    let mut dsig = vec![0.0; d * e * e];
    let mut fd = vf.scratch();

    let mut increment =
        hdata.eval_h(grid.horizon(), traj.terminal()) - hdata.eval_h(t0, traj.state(k0));
    let mut rough = 0.0;
    for k in k0..n {
        let x = traj.state(k);
        let u = mu.u(k);
        let t = grid.t(k);
        let dt = grid.dt(k);
        let delta = eta.inc(k);
        let area = eta.area(k);
        hdata.eval_dx_h(t, x, &mut dh);
        hdata.eval_dxx_h(t, x, &mut d2h);
        vf.eval_b(x, u, &mut b);
        vf.eval_sigma(x, &mut sig);
        vf.eval_d_sigma(x, &mut dsig, &mut fd.fd);
        b_tilde.copy_from_slice(&b);
        for i in 0..d {
            for r in 0..e {
                let mut acc = 0.0;
                for c in 0..e {
                    acc += dsig[i * e * e + r * e + c] * sig[i * e + c];
                }
                b_tilde[r] += 0.5 * acc;
            }
        }
        let mut trace = 0.0;
        for i in 0..d {
            for r in 0..e {
                let mut acc = 0.0;
                for c in 0..e {
                    acc += d2h[r * e + c] * sig[i * e + c];
                }
                trace += sig[i * e + r] * acc;
            }
        }
        let mut bt_dh = 0.0;
        let mut bmbt_dh = 0.0;
        for r in 0..e {
            bt_dh += b_tilde[r] * dh[r];
            bmbt_dh += (b[r] - b_tilde[r]) * dh[r];
        }
        increment -= (hdata.eval_dt_h(t, x) + bt_dh + 0.5 * trace) * dt;

        // rough sum: ⟨Dh, σ δ⟩ + Σ_{ij} ⟨Dσ_jᵀDh + D²h σ_j, σ_i⟩ A^{ij}
        let mut lvl1 = 0.0;
        for i in 0..d {
            let mut col = 0.0;
            for r in 0..e {
                col += dh[r] * sig[i * e + r];
            }
            lvl1 += col * delta[i];
        }
        let mut lvl2 = 0.0;
        for i in 0..d {
            for j in 0..d {
                let a = area[i * d + j];
                if a == 0.0 {
                    continue;
                }
                let mut coef = 0.0;
                for c in 0..e {
                    let mut dsig_dh = 0.0;
                    for r in 0..e {
                        dsig_dh += dsig[j * e * e + r * e + c] * dh[r];
                    }
                    let mut d2h_sig = 0.0;
                    for r in 0..e {
                        d2h_sig += d2h[c * e + r] * sig[j * e + r];
                    }
                    coef += (dsig_dh + d2h_sig) * sig[i * e + c];
                }
                lvl2 += coef * a;
            }
        }
        rough += lvl1 + lvl2 + (bmbt_dh - 0.5 * trace) * dt;
    }
    let gap = (increment - rough).abs();
    Ok(RogersPenaltyValue {
        increment_form: increment,
        rough_integral_form: rough,
        diagnostic_gap: gap,
        consistency_warning: gap > warn_tol,
    })
}

/// Modified dynamics for the control-linear penalty:
/// `dZ = b(Z, u*(t,Z)) dt + σ(Z) dη − b_u(Z, u*(t,Z)) u*(t,Z) dt`.
pub fn db_solve_z(
    t: f64,
    x: &[f64],
    feedback: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    vf: &VectorFieldSet,
    eta: &GridRoughPath,
) -> Result<RdeSolution> {
    let (e, m) = (vf.state_dim(), vf.control_dim());
    let grid = eta.grid();
    let k0 = grid.index_of(t)?;
    let n = grid.n_intervals();
    let mut s = vf.scratch();
    let mut b = vec![0.0; e];
    let mut bu = vec![0.0; e * m];
    let mut z = x.to_vec();
    let mut states = Vec::with_capacity(n - k0 + 1);
    states.push(z.clone());
    for k in k0..n {
        let tk = grid.t(k);
        let u = feedback(tk, &z);
        vf.eval_b(&z, &u, &mut b);
        vf.eval_d_b_u(&z, &u, &mut bu, &mut s.fd);
        davie_noise_into(vf, &z, eta.inc(k), eta.area(k), &mut s);
        let dt = grid.dt(k);
        for r in 0..e {
            let mut bu_u = 0.0;
            for a in 0..m {
                bu_u += bu[r * m + a] * u[a];
            }
            z[r] += (b[r] - bu_u) * dt + s.noise[r];
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "modified dynamics left the finite range".into(),
            });
        }
        states.push(z.clone());
    }
    let mut sol = RdeSolution::new(grid.clone(), k0, states);
    sol.meta.scheme = "davie-2-modified-drift";
    Ok(sol)
}

/// How `D_x W` is computed inside [`db_lambda_star`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DwMode {
    /// Variational (linearized-flow) equation along `Z` (default).
    Variational,
    /// Re-solve with bumped initial states (cross-check mode).
    FiniteDifference,
}

/// Optimal control-linear penalty weight at `(t, x)`:
///
/// ```text
/// λ*(t,x;η) = b_u(x, u*(t,x))ᵀ D_x[g(Z_T) + Z^aug_T] + f_u(t, x, u*(t,x)),
/// ```
///
/// where `Z` solves the modified dynamics from `(t,x)`, the augmented scalar
/// component integrates `f(s,Z,u*) − f_u(s,Z,u*)·u*` (running-cost extension;
/// absent when `f_u` is `None`), and the gradient comes from the variational
/// flow `dJ = D_xβ J dt + Dσ(Z) J dη`, `J_t = I`.
#[allow(clippy::too_many_arguments)]
pub fn db_lambda_star(
    t: f64,
    x: &[f64],
    feedback: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    vf: &VectorFieldSet,
    problem: &ControlProblem,
    f_u: Option<&(dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync)>,
    eta: &GridRoughPath,
    mode: DwMode,
) -> Result<Vec<f64>> {
    let (e, m) = (vf.state_dim(), vf.control_dim());
    let grid = eta.grid();
    let k0 = grid.index_of(t)?;

    let dw = match mode {
        DwMode::Variational => db_dw_variational(t, x, feedback, vf, problem, f_u, eta)?,
        DwMode::FiniteDifference => {
            let h = 1e-5 * (1.0 + x.iter().fold(0.0f64, |a, &v| a.max(v.abs())));
            let mut dw = vec![0.0; e];
            for c in 0..e {
                let mut xp = x.to_vec();
                xp[c] += h;
                let wp = db_w_value(t, &xp, feedback, vf, problem, f_u, eta)?;
                let mut xm = x.to_vec();
                xm[c] -= h;
                let wm = db_w_value(t, &xm, feedback, vf, problem, f_u, eta)?;
                dw[c] = (wp - wm) / (2.0 * h);
            }
            dw
        }
    };

    let u0 = feedback(grid.t(k0), x);
    let mut bu = vec![0.0; e * m];
    let mut s = vf.scratch();
    vf.eval_d_b_u(x, &u0, &mut bu, &mut s.fd);
    let mut lam = vec![0.0; m];
    for a in 0..m {
        let mut acc = 0.0;
        for r in 0..e {
            acc += bu[r * m + a] * dw[r];
        }
        lam[a] = acc;
    }
    if let Some(fu) = f_u {
        let fu_val = fu(grid.t(k0), x, &u0);
        for a in 0..m {
            lam[a] += fu_val[a];
        }
    }
    Ok(lam)
}

/// `W(t,x;η) = g(Z_T) + Z^aug_T` for the finite-difference cross-check.
fn db_w_value(
    t: f64,
    x: &[f64],
    feedback: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    vf: &VectorFieldSet,
    problem: &ControlProblem,
    f_u: Option<&(dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync)>,
    eta: &GridRoughPath,
) -> Result<f64> {
    let sol = db_solve_z(t, x, feedback, vf, eta)?;
    let grid = eta.grid();
    let mut aug = 0.0;
    if let Some(fu) = f_u {
        for k in sol.start()..grid.n_intervals() {
            let tk = grid.t(k);
            let z = sol.state(k);
            let u = feedback(tk, z);
            let fu_val = fu(tk, z, &u);
            let fu_dot_u: f64 = fu_val.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
            aug += ((problem.f)(tk, z, &u) - fu_dot_u) * grid.dt(k);
        }
    }
    Ok((problem.g)(sol.terminal()) + aug)
}

/// Variational computation of `D_x[g(Z_T) + Z^aug_T]`.
fn db_dw_variational(
    t: f64,
    x: &[f64],
    feedback: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    vf: &VectorFieldSet,
    problem: &ControlProblem,
    f_u: Option<&(dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync)>,
    eta: &GridRoughPath,
) -> Result<Vec<f64>> {
    let (e, m) = (vf.state_dim(), vf.control_dim());
    let grid = eta.grid();
    let k0 = grid.index_of(t)?;
    let n = grid.n_intervals();
    let mut s = vf.scratch();

    // modified drift β(t_k, x) = b(x, u*(t_k,x)) − b_u(x, u*(t_k,x)) u*(t_k,x)
    let beta = |tk: f64, xx: &[f64], out: &mut [f64], s: &mut crate::rde::VfScratch| {
        let u = feedback(tk, xx);
        vf.eval_b(xx, &u, out);
        let mut bu = [0.0f64; 16];
        vf.eval_d_b_u(xx, &u, &mut bu[..e * m], &mut s.fd);
        for r in 0..e {
            let mut acc = 0.0;
            for a in 0..m {
                acc += bu[r * m + a] * u[a];
            }
            out[r] -= acc;
        }
    };
    // φ(t_k, x) = f(t_k, x, u*) − f_u·u* for the augmented component
    let phi = |tk: f64, xx: &[f64]| -> f64 {
        match f_u {
            None => 0.0,
            Some(fu) => {
                let u = feedback(tk, xx);
                let fu_val = fu(tk, xx, &u);
                let fu_dot_u: f64 = fu_val.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                (problem.f)(tk, xx, &u) - fu_dot_u
            }
        }
    };

    let mut z = x.to_vec();
    let mut jmat = vec![0.0; e * e];
    for r in 0..e {
        jmat[r * e + r] = 1.0;
    }
    let mut kappa = vec![0.0; e];
    let mut beta_jac = vec![0.0; e * e];
    let mut gmats = vec![0.0; e * e * vf.driver_dim()];
    let mut extra = vec![0.0; e * e];
    let mut zv = vec![0.0; vf.driver_dim().max(1) * e];
    let mut col_in = vec![0.0; e];
    let mut col_out = vec![0.0; e];
    let mut b_buf = vec![0.0; e];
    let mut grad_phi = vec![0.0; e];
    let h0 = f64::EPSILON.powf(1.0 / 3.0);
    for k in k0..n {
        let tk = grid.t(k);
        let dt = grid.dt(k);
        let delta = eta.inc(k);
        let area = eta.area(k);

        // Jacobian of the modified drift by central differences
        let amp = z.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
        let h = h0 * (1.0 + amp);
        for c in 0..e {
            let mut zp = z.clone();
            zp[c] += h;
            beta(tk, &zp, &mut b_buf, &mut s);
            for r in 0..e {
                beta_jac[r * e + c] = b_buf[r];
            }
            let mut zm = z.clone();
            zm[c] -= h;
            beta(tk, &zm, &mut b_buf, &mut s);
            for r in 0..e {
                beta_jac[r * e + c] = (beta_jac[r * e + c] - b_buf[r]) / (2.0 * h);
            }
        }
        vf.eval_d_sigma(&z, &mut gmats, &mut s.fd);
        vf.variation_l2_extra(&z, area, &mut extra, &mut s);

        // gradient of the augmented integrand
        if f_u.is_some() {
            for c in 0..e {
                let mut zp = z.clone();
                zp[c] += h;
                let fp = phi(tk, &zp);
                let mut zm = z.clone();
                zm[c] -= h;
                let fm = phi(tk, &zm);
                grad_phi[c] = (fp - fm) / (2.0 * h);
            }
            // κ += Jᵀ ∇φ dt
            for c in 0..e {
                let mut acc = 0.0;
                for r in 0..e {
                    acc += jmat[r * e + c] * grad_phi[r];
                }
                kappa[c] += acc * dt;
            }
        }

        // advance J column by column
        let src = vec![0.0; e];
        let mut jnext = vec![0.0; e * e];
        for col in 0..e {
            for r in 0..e {
                col_in[r] = jmat[r * e + col];
            }
            linear_davie_step(
                e,
                vf.driver_dim(),
                &beta_jac,
                &gmats,
                Some(&extra),
                &src,
                &col_in,
                delta,
                area,
                dt,
                &mut zv,
                &mut col_out,
            );
            for r in 0..e {
                jnext[r * e + col] = col_out[r];
            }
        }
        jmat.copy_from_slice(&jnext);

        // advance Z with the Davie step under the modified drift
        beta(tk, &z, &mut b_buf, &mut s);
        davie_noise_into(vf, &z, delta, area, &mut s);
        for r in 0..e {
            z[r] += b_buf[r] * dt + s.noise[r];
        }
        if z.iter().any(|v| !v.is_finite()) || jmat.iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalOverflow {
                step: k,
                context: "variational flow left the finite range".into(),
            });
        }
    }

    let mut dg = vec![0.0; e];
    problem.eval_dg(&z, &mut dg);
    let mut dw = vec![0.0; e];
    for c in 0..e {
        let mut acc = kappa[c];
        for r in 0..e {
            acc += jmat[r * e + c] * dg[r];
        }
        dw[c] = acc;
    }
    Ok(dw)
}

/// Left-endpoint quadrature of `Σ ⟨λ(t_k, X_k, η), μ_k⟩ Δt_k`.
pub fn db_penalty_value(
    lambda: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    traj: &RdeSolution,
    mu: &ControlPath,
) -> f64 {
    let grid = traj.grid();
    let mut acc = 0.0;
    for k in traj.start()..grid.n_intervals() {
        let lam = lambda(grid.t(k), traj.state(k));
        let u = mu.u(k);
        let dot: f64 = lam.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
        acc += dot * grid.dt(k);
    }
    acc
}

/// Discrete concavity audit of `u ↦ ⟨b(x,u), DW(t,x;η)⟩` on a control grid.
#[derive(Debug, Clone, Serialize)]
pub struct ConcavityReport {
    pub probes_checked: usize,
    pub affine: usize,
    pub strictly_concave: usize,
    pub violations: usize,
    pub violation_fraction: f64,
}

/// For each driver sample and probe `(t,x)`, evaluates `u ↦ ⟨b(x,u), DW⟩`
/// on a one-dimensional control grid and tests discrete midpoint concavity
/// through second differences. Affine-in-`u` drifts are counted separately
/// (concave but never strictly).
#[allow(clippy::too_many_arguments)]
pub fn concavity_check(
    vf: &VectorFieldSet,
    problem: &ControlProblem,
    feedback: &(dyn Fn(f64, &[f64]) -> Vec<f64> + Sync),
    f_u: Option<&(dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync)>,
    settings: &SamplerSettings,
    n_drivers: usize,
    probes: &[(f64, Vec<f64>)],
    u_grid: usize,
) -> Result<ConcavityReport> {
    if vf.control_dim() != 1 {
        return Err(Error::invalid("concavity audit is one-dimensional in u"));
    }
    let (lo, hi) = problem.control_set.bounds();
    let e = vf.state_dim();
    let mut report = ConcavityReport {
        probes_checked: 0,
        affine: 0,
        strictly_concave: 0,
        violations: 0,
        violation_fraction: 0.0,
    };
    let mut b_buf = vec![0.0; e];
    for i in 0..n_drivers {
        let eta = settings.driver(i as u64)?;
        for (t, x) in probes {
            let dw = db_dw_variational(*t, x, feedback, vf, problem, f_u, &eta)?;
            let mut vals = Vec::with_capacity(u_grid);
            for j in 0..u_grid {
                let u = lo[0] + (hi[0] - lo[0]) * j as f64 / (u_grid - 1) as f64;
                vf.eval_b(x, &[u], &mut b_buf);
                vals.push(b_buf.iter().zip(dw.iter()).map(|(a, b)| a * b).sum::<f64>());
            }
            let scale = vals.iter().fold(0.0f64, |a, &v| a.max(v.abs())).max(1e-12);
            let tol = 1e-9 * scale;
            let mut all_zero = true;
            let mut all_negative = true;
            let mut any_positive = false;
            for w in vals.windows(3) {
                let second = w[2] - 2.0 * w[1] + w[0];
                if second.abs() > tol {
                    all_zero = false;
                }
                if second >= -tol {
                    all_negative = false;
                }
                if second > tol {
                    any_positive = true;
                }
            }
            report.probes_checked += 1;
            if all_zero {
                report.affine += 1;
            } else if all_negative {
                report.strictly_concave += 1;
            }
            if any_positive {
                report.violations += 1;
            }
        }
    }
    report.violation_fraction = report.violations as f64 / report.probes_checked.max(1) as f64;
    Ok(report)
}

fn reduce_paths(results: Vec<Result<f64>>, n_paths: usize) -> Result<(Vec<f64>, usize)> {
    let mut vals = Vec::with_capacity(n_paths);
    let mut failures = 0usize;
    let mut first_err = None;
    for r in results {
        match r {
            Ok(v) => vals.push(v),
            Err(e) => {
                failures += 1;
                if first_err.is_none() {
                    first_err = Some(e);
                }
            }
        }
    }
    let threshold = (n_paths / 10).max(1);
    if failures > threshold {
        return Err(Error::AbortedRun {
            failed: failures,
            total: n_paths,
        });
    }
    if vals.is_empty() {
        return Err(first_err.unwrap_or_else(|| Error::invalid("no paths succeeded")));
    }
    Ok((vals, failures))
}

/// Lower duality bound: simulate the closed loop under an adapted feedback
/// policy and average the payoff.
pub fn mc_lower_bound(
    problem: &ControlProblem,
    policy: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    settings: &SamplerSettings,
    n_paths: usize,
    t0: f64,
    x0: &[f64],
) -> Result<DualityReport> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    let results: Vec<Result<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let eta = settings.driver(i)?;
            let (traj, mu) = closed_loop_solve(x0, t0, &problem.vf, policy.as_ref(), &eta)?;
            payoff_along(problem, &traj, &mu)
        })
        .collect();
    let (vals, failures) = reduce_paths(results, n_paths)?;
    let (mean, se) = mean_se(&vals);
    let mut report = DualityReport::shell(settings, "feedback-policy", t0, x0);
    report.lower = Some(Estimate {
        mean,
        std_err: se,
        n_paths: vals.len(),
    });
    report.failures = failures;
    report.control_points = problem.control_set.len();
    Ok(report)
}

/// Per-path penalized problem for the upper bound.
fn penalized_problem(
    problem: &ControlProblem,
    penalty: &Penalty,
    eta: &GridRoughPath,
    t0: f64,
    x0: &[f64],
) -> Result<ControlProblem> {
    match penalty {
        Penalty::Rogers(h) => Ok(rogers_transform(h, problem, t0, x0)),
        Penalty::DavisBurstein(db) => {
            let lam: PenaltyLambda = match &db.lambda {
                LambdaSource::PerPath(make) => make(eta)?,
                LambdaSource::Variational => {
                    let feedback = Arc::clone(&db.feedback);
                    let vf = Arc::clone(&problem.vf);
                    let prob = problem.clone();
                    let f_u = db.running_f_u.clone();
                    let eta = eta.clone();
                    Arc::new(move |t: f64, x: &[f64]| {
                        let fu_ref = f_u.as_ref().map(|f| {
                            f.as_ref() as &(dyn Fn(f64, &[f64], &[f64]) -> Vec<f64> + Sync)
                        });
                        db_lambda_star(
                            t,
                            x,
                            feedback.as_ref(),
                            &vf,
                            &prob,
                            fu_ref,
                            &eta,
                            DwMode::Variational,
                        )
                        .unwrap_or_else(|_| vec![f64::NAN; vf.control_dim()])
                    })
                }
            };
            // f̃(s,x,u) = f(s,x,u) − ⟨λ*(s,x), u⟩ (subtracted orientation)
            let f_base = Arc::clone(&problem.f);
            let f_tilde = move |t: f64, x: &[f64], u: &[f64]| {
                let lamv = lam(t, x);
                let dot: f64 = lamv.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                f_base(t, x, u) - dot
            };
            Ok(ControlProblem {
                vf: Arc::clone(&problem.vf),
                f: Arc::new(f_tilde),
                g: Arc::clone(&problem.g),
                dg: problem.dg.clone(),
                df_x: None,
                step_gain: None,
                step_gain_at: None,
                control_set: problem.control_set.clone(),
                horizon: problem.horizon,
            })
        }
        Penalty::Custom(_) => Ok(problem.clone()),
        Penalty::Absorbed { problem: p, .. } => Ok(p.clone()),
    }
}

/// Upper duality bound: per sampled driver, solve the penalized pathwise
/// inner problem by dynamic programming and average the optimal values.
#[allow(clippy::too_many_arguments)]
pub fn mc_upper_bound(
    problem: &ControlProblem,
    penalty: &Penalty,
    settings: &SamplerSettings,
    n_paths: usize,
    mesh: &Mesh,
    t0: f64,
    x0: &[f64],
    dp: &DpSettings,
) -> Result<DualityReport> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be positive"));
    }
    // martingale data does not depend on the path; transform once
    let shared: Option<ControlProblem> = match penalty {
        Penalty::Rogers(h) => Some(rogers_transform(h, problem, t0, x0)),
        Penalty::Absorbed { problem: p, .. } => Some(p.clone()),
        _ => None,
    };
    let results: Vec<Result<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let eta = settings.driver(i)?;
            let inner: PathwiseResult = match (&shared, penalty) {
                (Some(p), _) => inner_sup_dp(p, &eta, mesh, t0, x0, dp)?,
                (None, Penalty::Custom(c)) => {
                    let mut res = inner_sup_dp(problem, &eta, mesh, t0, x0, dp)?;
                    res.value += (c.z)(&eta, &res.control, t0, x0);
                    res
                }
                (None, pen) => {
                    let per_path = penalized_problem(problem, pen, &eta, t0, x0)?;
                    inner_sup_dp(&per_path, &eta, mesh, t0, x0, dp)?
                }
            };
            Ok(inner.value)
        })
        .collect();
    let (vals, failures) = reduce_paths(results, n_paths)?;
    let (mean, se) = mean_se(&vals);
    let mut report = DualityReport::shell(settings, &penalty.descriptor(), t0, x0);
    report.upper = Some(Estimate {
        mean,
        std_err: se,
        n_paths: vals.len(),
    });
    report.failures = failures;
    report.mesh = Some(mesh.clone());
    report.control_points = problem.control_set.len();
    Ok(report)
}

/// Monte Carlo zero-mean audit result.
#[derive(Debug, Clone, Serialize)]
pub struct ZeroMeanReport {
    pub mean: f64,
    pub std_err: f64,
    /// `|mean| / std_err`.
    pub sigmas: f64,
    pub n_paths: usize,
}

fn zero_mean_from(vals: &[f64]) -> ZeroMeanReport {
    let (mean, se) = mean_se(vals);
    ZeroMeanReport {
        mean,
        std_err: se,
        sigmas: if se > 0.0 { mean.abs() / se } else { 0.0 },
        n_paths: vals.len(),
    }
}

/// `E[M^h(B, ν)] = 0` for adapted `ν`: simulate the closed loop under the
/// policy and average the increment-form penalty.
#[allow(clippy::too_many_arguments)]
pub fn rogers_zero_mean_check(
    hdata: &RogersData,
    problem: &ControlProblem,
    policy: Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync>,
    settings: &SamplerSettings,
    n_paths: usize,
    t0: f64,
    x0: &[f64],
) -> Result<ZeroMeanReport> {
    let results: Vec<Result<f64>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| {
            let eta = settings.driver(i)?;
            let (traj, mu) = closed_loop_solve(x0, t0, &problem.vf, policy.as_ref(), &eta)?;
            Ok(
                rogers_penalty_value(hdata, &traj, &mu, &eta, problem, f64::INFINITY)?
                    .increment_form,
            )
        })
        .collect();
    let (vals, _) = reduce_paths(results, n_paths)?;
    Ok(zero_mean_from(&vals))
}

/// `E[λ(t,x,B)] = 0` componentwise at fixed probes, for a per-path λ
/// evaluator (e.g. the one used by the upper bound).
pub fn db_lambda_zero_mean_check(
    make_lambda: &(dyn Fn(&GridRoughPath) -> Result<PenaltyLambda> + Sync),
    probes: &[(f64, Vec<f64>)],
    settings: &SamplerSettings,
    n_paths: usize,
) -> Result<Vec<ZeroMeanReport>> {
    let per_path: Vec<Vec<Vec<f64>>> = (0..n_paths as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<Vec<f64>>> {
            let eta = settings.driver(i)?;
            let lam = make_lambda(&eta)?;
            Ok(probes.iter().map(|(t, x)| lam(*t, x)).collect())
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    let m = per_path[0][0].len();
    let mut out = Vec::new();
    for (pi, _) in probes.iter().enumerate() {
        for c in 0..m {
            let vals: Vec<f64> = per_path.iter().map(|path| path[pi][c]).collect();
            out.push(zero_mean_from(&vals));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::control::ControlSet;
    use crate::lqc;
    use crate::rde::solve_controlled_rde;
    use crate::rough_path::make_uniform_grid;

    fn sampler(n: usize, seed: u64) -> SamplerSettings {
        SamplerSettings {
            grid: make_uniform_grid(1.0, n).unwrap(),
            substeps: 1,
            driver_dim: 1,
            master_seed: seed,
        }
    }

    /// Scalar additive LQC problem with analytic derivatives.
    fn additive_problem(per_axis: usize, u_max: f64) -> ControlProblem {
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |x, u, out| out[0] = 0.1 * x[0] + u[0],
            |_, out| out[0] = 1.0,
        )
        .with_d_sigma(|_, out| out[0] = 0.0)
        .with_d_b(|_, _, out| out[0] = 0.1)
        .with_d_b_u(|_, _, out| out[0] = 1.0);
        ControlProblem::new(
            vf,
            |_t, x, u| 0.5 * (-x[0] * x[0] - u[0] * u[0]),
            |x| -0.5 * x[0] * x[0],
            ControlSet::equispaced(1, per_axis, &[-u_max], &[u_max]).unwrap(),
            1.0,
        )
        .with_dg(|x, out| out[0] = -x[0])
        .with_df_x(|_, x, _, out| out[0] = -x[0])
    }

    fn additive_h(n_riccati: usize) -> (RogersData, lqc::RiccatiSolution) {
        let spec = lqc::AdditiveLqcSpec::scalar_fixture();
        let sol = lqc::riccati_solve_additive(&spec, n_riccati).unwrap();
        let (times, p, pdot, tri) = sol.scalar_tables();
        let h = RogersData::from_scalar_quadratic(
            ScalarQuadraticH::additive_value(times, p, pdot, tri).unwrap(),
        );
        (h, sol)
    }

    #[test]
    fn rogers_transform_trivial_cases() {
        let problem = additive_problem(5, 2.0);
        // h ≡ 0
        let h0 = RogersData::new(|_, _| 0.0)
            .with_dt_h(|_, _| 0.0)
            .with_dx_h(|_, _, out| out[0] = 0.0)
            .with_dxx_h(|_, _, out| out[0] = 0.0);
        let tp = rogers_transform(&h0, &problem, 0.0, &[1.0]);
        for &(t, x, u) in &[(0.2, 0.5, 0.3), (0.7, -1.1, -0.4)] {
            assert_eq!((tp.f)(t, &[x], &[u]), (problem.f)(t, &[x], &[u]));
            assert_eq!((tp.g)(&[x]), (problem.g)(&[x]));
        }

        // constant h: the +c and −c cancel
        let hc = RogersData::new(|_, _| 3.7);
        let tp = rogers_transform(&hc, &problem, 0.0, &[1.0]);
        for &(t, x, u) in &[(0.2, 0.5, 0.3), (0.9, -0.4, 1.0)] {
            assert!(((tp.f)(t, &[x], &[u]) - (problem.f)(t, &[x], &[u])).abs() < 1e-6);
            assert!(((tp.g)(&[x]) - (problem.g)(&[x])).abs() < 1e-9);
        }

        // h(x) = x², additive noise, b(x,u) = u: f̃ = f + 2xu + 1
        let vf = VectorFieldSet::new(1, 1, 1, |_, u, out| out[0] = u[0], |_, out| out[0] = 1.0)
            .with_d_sigma(|_, out| out[0] = 0.0);
        let base = ControlProblem::new(
            vf,
            |_, _, _| 0.0,
            |x| x[0],
            ControlSet::equispaced(1, 3, &[-1.0], &[1.0]).unwrap(),
            1.0,
        );
        let hx2 = RogersData::new(|_, x: &[f64]| x[0] * x[0])
            .with_dt_h(|_, _| 0.0)
            .with_dx_h(|_, x, out| out[0] = 2.0 * x[0])
            .with_dxx_h(|_, _, out| out[0] = 2.0);
        let tp = rogers_transform(&hx2, &base, 0.0, &[0.0]);
        for &(t, x, u) in &[(0.1, 0.8, 0.5), (0.6, -0.3, -1.0)] {
            let want = 2.0 * x * u + 1.0;
            let got = (tp.f)(t, &[x], &[u]);
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rogers_penalty_two_forms_agree() {
        let problem = additive_problem(5, 2.0);
        let (h, _) = additive_h(512);
        let settings = sampler(256, 99);
        let eta = settings.driver(0).unwrap();
        let mu = ControlPath::constant(settings.grid.clone(), &[0.4]);
        let traj = solve_controlled_rde(&[1.0], 0.0, &problem.vf, &mu, &eta).unwrap();
        let v = rogers_penalty_value(&h, &traj, &mu, &eta, &problem, 0.05).unwrap();
        assert!(
            v.diagnostic_gap < 0.02 * (1.0 + v.increment_form.abs()),
            "forms diverge: {v:?}"
        );
        assert!(!v.consistency_warning);

        // h ≡ 0 → both forms vanish
        let h0 = RogersData::new(|_, _| 0.0);
        let v = rogers_penalty_value(&h0, &traj, &mu, &eta, &problem, 1e-9).unwrap();
        assert!(v.increment_form.abs() < 1e-10 && v.rough_integral_form.abs() < 1e-10);

        // linear h, additive noise, b ≡ 0: penalty = ⟨Dh, η_T − η_t⟩ exactly
        let vf = VectorFieldSet::new(1, 1, 1, |_, _, out| out[0] = 0.0, |_, out| out[0] = 1.0)
            .with_d_sigma(|_, out| out[0] = 0.0);
        let p0 = ControlProblem::new(vf, |_, _, _| 0.0, |x| x[0], ControlSet::single(&[0.0]), 1.0);
        let hl = RogersData::new(|_, x: &[f64]| 2.5 * x[0])
            .with_dt_h(|_, _| 0.0)
            .with_dx_h(|_, _, out| out[0] = 2.5)
            .with_dxx_h(|_, _, out| out[0] = 0.0);
        let mu0 = ControlPath::constant(settings.grid.clone(), &[0.0]);
        let traj0 = solve_controlled_rde(&[0.3], 0.0, &p0.vf, &mu0, &eta).unwrap();
        let v = rogers_penalty_value(&hl, &traj0, &mu0, &eta, &p0, 1e-8).unwrap();
        let want = 2.5 * eta.total_increment_from(0)[0];
        assert!((v.increment_form - want).abs() < 1e-10);
        assert!((v.rough_integral_form - want).abs() < 1e-10);
    }

    /// Martingale penalty with h = V on the additive fixture: matches
    /// z¹ + γ^R from the closed-form oracles within scheme tolerance.
    #[test]
    fn rogers_penalty_matches_z1_plus_gamma_r() {
        let spec = lqc::AdditiveLqcSpec::scalar_fixture();
        let sol = lqc::riccati_solve_additive(&spec, 1024).unwrap();
        let (h, _) = additive_h(1024);
        let problem = additive_problem(5, 2.0);
        let settings = sampler(512, 7);
        let x0 = [1.0];
        for path in 0..3u64 {
            let eta = settings.driver(path).unwrap();
            let lam1 = lqc::lambda1_additive(&spec, &sol, &eta).unwrap();
            let gamma_r = lqc::gamma_r_additive(&spec, &sol, &eta, 0, &x0).unwrap();
            for useed in 0..2u64 {
                let mu_vals: Vec<f64> = (0..512)
                    .map(|k| 1.5 * ((k as f64 * 0.13 + useed as f64).sin()))
                    .collect();
                let mu = ControlPath::from_values(settings.grid.clone(), 1, mu_vals).unwrap();
                let traj = solve_controlled_rde(&x0, 0.0, &problem.vf, &mu, &eta).unwrap();
                let m_h = rogers_penalty_value(&h, &traj, &mu, &eta, &problem, 0.05)
                    .unwrap()
                    .increment_form;
                let z1 = lqc::z1_additive(&lam1, &mu, 0);
                let rel = ((m_h - (z1 + gamma_r)) / m_h.abs().max(1.0)).abs();
                assert!(rel < 1e-2, "M^V = {m_h} vs z1+γ = {}", z1 + gamma_r);
            }
        }
    }

    /// db_lambda_star on the additive fixture equals −λ¹ per path (the sign
    /// pinned by gap closure), in both variational and FD modes.
    #[test]
    fn db_lambda_star_matches_lambda1() {
        let spec = lqc::AdditiveLqcSpec::scalar_fixture();
        let sol = lqc::riccati_solve_additive(&spec, 1024).unwrap();
        let problem = additive_problem(5, 3.0);
        let settings = sampler(256, 21);
        let eta = settings.driver(0).unwrap();
        let lam1 = lqc::lambda1_additive(&spec, &sol, &eta).unwrap();
        let sol_fb = lqc::riccati_solve_additive(&spec, 1024).unwrap();
        let spec_fb = spec.clone();
        let feedback =
            move |t: f64, x: &[f64]| lqc::lqc_additive_feedback(&spec_fb, &sol_fb, t, x).unwrap();
        let f_u = |_t: f64, _x: &[f64], u: &[f64]| vec![-u[0]]; // f_u = R u, R = −1
        for &k in &[0usize, 64, 180] {
            let t = settings.grid.t(k);
            let x = [0.8 - 0.1 * k as f64 / 256.0];
            let lam = db_lambda_star(
                t,
                &x,
                &feedback,
                &problem.vf,
                &problem,
                Some(&f_u),
                &eta,
                DwMode::Variational,
            )
            .unwrap();
            let want = -lam1[k][0];
            assert!(
                (lam[0] - want).abs() < 2e-2 * (1.0 + want.abs()),
                "k={k}: λ* = {} vs −λ¹ = {want}",
                lam[0]
            );
            let lam_fd = db_lambda_star(
                t,
                &x,
                &feedback,
                &problem.vf,
                &problem,
                Some(&f_u),
                &eta,
                DwMode::FiniteDifference,
            )
            .unwrap();
            assert!(
                (lam[0] - lam_fd[0]).abs() < 1e-4 * (1.0 + lam[0].abs()),
                "variational {} vs fd {}",
                lam[0],
                lam_fd[0]
            );
        }
    }

    /// g constant ⇒ λ* = 0 (terminal-only problem).
    #[test]
    fn db_lambda_star_constant_g() {
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |x, u, out| out[0] = -0.3 * x[0] + u[0],
            |_, out| out[0] = 1.0,
        )
        .with_d_sigma(|_, out| out[0] = 0.0);
        let problem = ControlProblem::new(
            vf,
            |_, _, _| 0.0,
            |_| 4.2,
            ControlSet::equispaced(1, 3, &[-1.0], &[1.0]).unwrap(),
            1.0,
        );
        let settings = sampler(64, 5);
        let eta = settings.driver(0).unwrap();
        let feedback = |_: f64, _: &[f64]| vec![0.2];
        let lam = db_lambda_star(
            0.0,
            &[0.5],
            &feedback,
            &problem.vf,
            &problem,
            None,
            &eta,
            DwMode::Variational,
        )
        .unwrap();
        assert!(lam[0].abs() < 1e-10);
    }

    /// Multiplicative fixture: λ* computed variationally matches 2NCxΘ_r, and
    /// the additive fixture's modified dynamics cancel to dZ = MZ dt + dη.
    #[test]
    fn db_multiplicative_lambda_and_z_dynamics() {
        let mspec = lqc::MultiplicativeLqcSpec::scalar_fixture();
        let msol = lqc::riccati_solve_multiplicative(&mspec, 1024).unwrap();
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |x, u, out| out[0] = 0.1 * x[0] + u[0],
            |x, out| out[0] = 0.3 * x[0],
        )
        .with_d_sigma(|_, out| out[0] = 0.3)
        .with_d_b_u(|_, _, out| out[0] = 1.0);
        let problem = ControlProblem::new(
            vf,
            |_t, x, u| 0.5 * (-x[0] * x[0] - u[0] * u[0]),
            |x| -0.5 * x[0] * x[0],
            ControlSet::equispaced(1, 5, &[-3.0], &[3.0]).unwrap(),
            1.0,
        );
        let settings = sampler(512, 11);
        let eta = settings.driver(0).unwrap();
        let gamma = lqc::gamma_propagator(&mspec, &eta, 0).unwrap();
        let th = lqc::theta(&mspec, &msol, &eta, &gamma, 0).unwrap();
        let msol2 = lqc::riccati_solve_multiplicative(&mspec, 1024).unwrap();
        let feedback = move |t: f64, x: &[f64]| {
            vec![lqc::lqc_multiplicative_feedback(&mspec, &msol2, t, x[0]).unwrap()]
        };
        let f_u = |_t: f64, _x: &[f64], u: &[f64]| vec![-u[0]];
        for &(k, x) in &[(0usize, 1.0), (128usize, 0.6), (384usize, 1.4)] {
            let t = settings.grid.t(k);
            let lam = db_lambda_star(
                t,
                &[x],
                &feedback,
                &problem.vf,
                &problem,
                Some(&f_u),
                &eta,
                DwMode::Variational,
            )
            .unwrap();
            let want = lqc::lambda_star_multiplicative(&mspec, th[k], x);
            assert!(
                (lam[0] - want).abs() < 2e-2 * (1.0 + want.abs()),
                "k={k}: λ* = {} vs 2NCxΘ = {want}",
                lam[0]
            );
        }

        // additive fixture: dZ = MZ dt + dη exactly (Nu* and b_u u* cancel)
        let aspec = lqc::AdditiveLqcSpec::scalar_fixture();
        let asol = lqc::riccati_solve_additive(&aspec, 512).unwrap();
        let aproblem = additive_problem(5, 3.0);
        let afb = move |t: f64, x: &[f64]| lqc::lqc_additive_feedback(&aspec, &asol, t, x).unwrap();
        let settings2 = sampler(256, 12);
        let eta2 = settings2.driver(0).unwrap();
        let z = db_solve_z(0.0, &[1.0], &afb, &aproblem.vf, &eta2).unwrap();
        let mut xref = 1.0;
        for k in 0..settings2.grid.n_intervals() {
            xref += 0.1 * xref * settings2.grid.dt(k) + eta2.inc(k)[0];
            let zk = z.state(k + 1)[0];
            assert!((zk - xref).abs() < 1e-12, "Z deviates at step {k}");
        }
    }

    /// db_penalty_value with λ* along a random control equals the z¹ oracle.
    #[test]
    fn db_penalty_matches_z1_oracle() {
        let mspec = lqc::MultiplicativeLqcSpec::scalar_fixture();
        let msol = lqc::riccati_solve_multiplicative(&mspec, 1024).unwrap();
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |x, u, out| out[0] = 0.1 * x[0] + u[0],
            |x, out| out[0] = 0.3 * x[0],
        )
        .with_d_sigma(|_, out| out[0] = 0.3);
        let settings = sampler(256, 31);
        let eta = settings.driver(0).unwrap();
        let gamma = lqc::gamma_propagator(&mspec, &eta, 0).unwrap();
        let th = lqc::theta(&mspec, &msol, &eta, &gamma, 0).unwrap();
        let x0 = 0.9;
        let mu_vals: Vec<f64> = (0..256).map(|k| (k as f64 * 0.07).cos()).collect();
        let mu = ControlPath::from_values(settings.grid.clone(), 1, mu_vals).unwrap();
        let traj = solve_controlled_rde(&[x0], 0.0, &vf, &mu, &eta).unwrap();
        let grid2 = settings.grid.clone();
        let th2 = th.clone();
        let lam = move |t: f64, x: &[f64]| -> Vec<f64> {
            let k = grid2.index_of(t).unwrap();
            vec![lqc::lambda_star_multiplicative(&mspec, th2[k], x[0])]
        };
        let quad = db_penalty_value(&lam, &traj, &mu);
        let z1 = lqc::z1_multiplicative(&mspec, &th, &gamma, &eta, x0, &mu, 0);
        assert!(
            (quad - z1).abs() < 1e-2 * (1.0 + z1.abs()),
            "quadrature {quad} vs oracle {z1}"
        );

        // λ ≡ 0 and μ ≡ 0 give zero
        let zero_lam = |_t: f64, _x: &[f64]| vec![0.0];
        assert_eq!(db_penalty_value(&zero_lam, &traj, &mu), 0.0);
        let mu0 = ControlPath::constant(settings.grid.clone(), &[0.0]);
        let traj0 = solve_controlled_rde(&[x0], 0.0, &vf, &mu0, &eta).unwrap();
        assert_eq!(db_penalty_value(&lam, &traj0, &mu0), 0.0);
    }

    #[test]
    fn zero_penalty_constant_terminal_gain() {
        let vf = VectorFieldSet::new(1, 1, 1, |_, u, out| out[0] = u[0], |_, out| out[0] = 1.0)
            .with_d_sigma(|_, out| out[0] = 0.0);
        let problem = ControlProblem::new(
            vf,
            |_, _, _| 0.0,
            |_| 1.25,
            ControlSet::equispaced(1, 3, &[-1.0], &[1.0]).unwrap(),
            1.0,
        );
        let settings = sampler(32, 3);
        let mesh = Mesh::uniform_1d(-5.0, 5.0, 101).unwrap();
        let up = mc_upper_bound(
            &problem,
            &Penalty::zero(),
            &settings,
            16,
            &mesh,
            0.0,
            &[0.0],
            &DpSettings::default(),
        )
        .unwrap();
        let est = up.upper.unwrap();
        assert_eq!(est.mean, 1.25);
        assert_eq!(est.std_err, 0.0);

        let lo = mc_lower_bound(
            &problem,
            Arc::new(|_, _| vec![0.5]),
            &settings,
            16,
            0.0,
            &[0.0],
        )
        .unwrap();
        assert_eq!(lo.lower.unwrap().mean, 1.25);
    }

    /// Small-scale end-to-end duality sanity on the additive fixture: lower
    /// (optimal feedback) and upper (martingale penalty with h = V) both land
    /// near the closed-form value, the zero-penalty bound dominates, and
    /// suboptimal policies stay below.
    #[test]
    fn additive_duality_small_scale() {
        let spec = lqc::AdditiveLqcSpec::scalar_fixture();
        let sol = lqc::riccati_solve_additive(&spec, 512).unwrap();
        let (h, _) = additive_h(512);
        let problem = additive_problem(21, 4.0);
        let settings = sampler(64, 2024);
        let x0 = [1.0];
        let v_star = lqc::lqc_additive_value(&sol, 0.0, &x0).unwrap();

        let spec2 = spec.clone();
        let sol2 = sol.clone();
        let policy = Arc::new(move |t: f64, x: &[f64]| {
            lqc::lqc_additive_feedback(&spec2, &sol2, t, x).unwrap()
        });
        let n_paths = 200;
        let lower = mc_lower_bound(&problem, policy, &settings, n_paths, 0.0, &x0).unwrap();
        let le = lower.lower.clone().unwrap();
        assert!(
            (le.mean - v_star).abs() < 3.0 * le.std_err + 0.05 * v_star.abs(),
            "lower {} vs V {}",
            le.mean,
            v_star
        );

        let mesh = Mesh::centered(&x0, 6.0, 241).unwrap();
        let upper = mc_upper_bound(
            &problem,
            &Penalty::Rogers(h),
            &settings,
            n_paths,
            &mesh,
            0.0,
            &x0,
            &DpSettings::default(),
        )
        .unwrap();
        let ue = upper.upper.clone().unwrap();
        assert!(
            (ue.mean - v_star).abs() < 3.0 * ue.std_err + 0.05 * v_star.abs(),
            "upper {} vs V {}",
            ue.mean,
            v_star
        );

        // weak duality with statistical slack
        assert!(ue.mean + 3.0 * ue.std_err >= le.mean - 3.0 * le.std_err);

        // zero penalty dominates the optimal penalty
        let upper0 = mc_upper_bound(
            &problem,
            &Penalty::zero(),
            &settings,
            n_paths,
            &mesh,
            0.0,
            &x0,
            &DpSettings::default(),
        )
        .unwrap();
        let u0 = upper0.upper.unwrap();
        assert!(
            u0.mean + 3.0 * (u0.std_err + ue.std_err) >= ue.mean,
            "information monotonicity violated: {} vs {}",
            u0.mean,
            ue.mean
        );

        // a deliberately suboptimal policy cannot beat the optimal one
        let lower0 = mc_lower_bound(
            &problem,
            Arc::new(|_, _| vec![0.0]),
            &settings,
            n_paths,
            0.0,
            &x0,
        )
        .unwrap();
        let l0 = lower0.lower.unwrap();
        assert!(l0.mean <= le.mean + 3.0 * (l0.std_err + le.std_err));

        let merged = DualityReport::merged(&lower, &upper);
        assert!(merged.gap.unwrap().abs() < 0.1 * v_star.abs() + 3.0 * (le.std_err + ue.std_err));
    }

    /// Subharmonic-h bound: σ ≡ Id, b(u) = u, h(x) = x² (Δh = 2 ≥ 0), and
    /// f = f⁰ − ⟨∇h, b(u)⟩ − ½Δh with f⁰ ≡ 0, so the penalized running gain
    /// collapses to f⁰ and the inner optimum equals
    /// h(x) + V^{0,h}(t, x+η_T−η_t) with V^{0,h} the static (g−h) optimum.
    /// The test asserts the ≤ direction path by path (with near-equality).
    #[test]
    fn subharmonic_h_pathwise_bound() {
        use crate::control::{additive_closed_form_value, AdditiveProblem};
        let set = ControlSet::equispaced(1, 21, &[-1.0], &[1.0]).unwrap();
        let vf = VectorFieldSet::new(1, 1, 1, |_, u, out| out[0] = u[0], |_, out| out[0] = 1.0)
            .with_d_sigma(|_, out| out[0] = 0.0);
        let problem = ControlProblem::new(
            vf,
            |_t, x, u| -2.0 * x[0] * u[0] - 1.0,
            |x| -0.5 * (x[0] - 1.0) * (x[0] - 1.0),
            set.clone(),
            1.0,
        );
        let h = RogersData::new(|_, x: &[f64]| x[0] * x[0])
            .with_dt_h(|_, _| 0.0)
            .with_dx_h(|_, x, out| out[0] = 2.0 * x[0])
            .with_dxx_h(|_, _, out| out[0] = 2.0);
        let gh = AdditiveProblem {
            state_dim: 1,
            b: Arc::new(|_, u| vec![u[0]]),
            f: Arc::new(|_, _| 0.0),
            g: Arc::new(|x: &[f64]| -0.5 * (x[0] - 1.0) * (x[0] - 1.0) - x[0] * x[0]),
            control_set: set,
            horizon: 1.0,
        };
        let settings = sampler(64, 77);
        let mesh = Mesh::uniform_1d(-7.0, 7.0, 281).unwrap();
        let x0 = [0.4];
        for i in 0..20u64 {
            let eta = settings.driver(i).unwrap();
            let tp = rogers_transform(&h, &problem, 0.0, &x0);
            let inner = inner_sup_dp(&tp, &eta, &mesh, 0.0, &x0, &DpSettings::default())
                .unwrap()
                .value;
            let v0h = additive_closed_form_value(&gh, &eta, 0.0, &x0).unwrap();
            let bound = x0[0] * x0[0] + v0h;
            assert!(
                inner <= bound + 0.02 * (1.0 + bound.abs()),
                "path {i}: inner {inner} exceeds bound {bound}"
            );
            // the fixture is tight: the inner optimum attains the bound
            assert!(
                inner >= bound - 0.05 * (1.0 + bound.abs()),
                "path {i}: inner {inner} far below the attainable bound {bound}"
            );
        }
    }

    #[test]
    fn zero_mean_checks() {
        let spec = lqc::AdditiveLqcSpec::scalar_fixture();
        let sol = lqc::riccati_solve_additive(&spec, 512).unwrap();
        let (h, _) = additive_h(512);
        let problem = additive_problem(5, 4.0);
        let settings = sampler(64, 4711);
        let spec2 = spec.clone();
        let sol2 = sol.clone();
        let policy = Arc::new(move |t: f64, x: &[f64]| {
            lqc::lqc_additive_feedback(&spec2, &sol2, t, x).unwrap()
        });
        let rep = rogers_zero_mean_check(&h, &problem, policy, &settings, 400, 0.0, &[1.0]).unwrap();
        assert!(rep.sigmas < 3.0, "martingale penalty not centered: {rep:?}");

        // h ≡ 0 → identically zero
        let h0 = RogersData::new(|_, _| 0.0);
        let p2 = additive_problem(5, 4.0);
        let rep = rogers_zero_mean_check(
            &h0,
            &p2,
            Arc::new(|_, _| vec![0.1]),
            &settings,
            50,
            0.0,
            &[1.0],
        )
        .unwrap();
        assert_eq!(rep.mean, 0.0);

        // λ¹-based penalty weight at fixed probes
        let spec3 = spec.clone();
        let sol3 = sol.clone();
        let make_lambda = move |eta: &GridRoughPath| -> Result<PenaltyLambda> {
            let lam1 = lqc::lambda1_additive(&spec3, &sol3, eta)?;
            let grid = eta.grid().clone();
            Ok(Arc::new(move |t: f64, _x: &[f64]| {
                let k = grid.index_of(t).unwrap_or(0);
                vec![-lam1[k][0]]
            }))
        };
        let reports = db_lambda_zero_mean_check(
            &make_lambda,
            &[(0.0, vec![1.0]), (0.25, vec![0.5]), (0.5, vec![-0.3])],
            &settings,
            400,
        )
        .unwrap();
        for r in &reports {
            assert!(r.sigmas < 3.0, "λ* not centered: {r:?}");
        }
    }

    #[test]
    fn concavity_check_cases() {
        // affine-in-u drift: flagged affine, zero violations
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |x, u, out| out[0] = 0.1 * x[0] + u[0],
            |_, out| out[0] = 1.0,
        )
        .with_d_sigma(|_, out| out[0] = 0.0);
        let problem = ControlProblem::new(
            vf,
            |_, _, _| 0.0,
            |x| -x[0] * x[0],
            ControlSet::equispaced(1, 5, &[-1.0], &[1.0]).unwrap(),
            1.0,
        );
        let settings = sampler(32, 9);
        let feedback = |_: f64, _: &[f64]| vec![0.1];
        let rep = concavity_check(
            &problem.vf.clone(),
            &problem,
            &feedback,
            None,
            &settings,
            3,
            &[(0.0, vec![0.5]), (0.25, vec![-0.4])],
            11,
        )
        .unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.affine, rep.probes_checked);

        // b(x,u) = −u² with DW > 0: strictly concave at the probes
        let vf = VectorFieldSet::new(
            1,
            1,
            1,
            |_, u, out| out[0] = -u[0] * u[0],
            |_, out| out[0] = 1.0,
        )
        .with_d_sigma(|_, out| out[0] = 0.0);
        let problem = ControlProblem::new(
            vf,
            |_, _, _| 0.0,
            |x| x[0],
            ControlSet::equispaced(1, 5, &[0.1], &[1.0]).unwrap(),
            1.0,
        );
        let feedback = |_: f64, _: &[f64]| vec![0.5];
        let rep = concavity_check(
            &problem.vf.clone(),
            &problem,
            &feedback,
            None,
            &settings,
            2,
            &[(0.0, vec![0.0])],
            11,
        )
        .unwrap();
        assert_eq!(rep.violations, 0);
        assert_eq!(rep.strictly_concave, rep.probes_checked);
    }

    #[test]
    fn reports_are_deterministic() {
        let problem = additive_problem(9, 3.0);
        let settings = sampler(32, 50);
        let mesh = Mesh::uniform_1d(-5.0, 5.0, 101).unwrap();
        let run = || {
            mc_upper_bound(
                &problem,
                &Penalty::zero(),
                &settings,
                32,
                &mesh,
                0.0,
                &[1.0],
                &DpSettings::default(),
            )
            .unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }
}
