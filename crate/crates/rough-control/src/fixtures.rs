//! Ready-made problem assemblies for the linear-quadratic fixtures: pathwise
//! control problems, value-function test data, optimal feedback policies and
//! per-path penalty weights, all with the scalar fast paths wired in.

use std::sync::Arc;

use crate::control::{ControlProblem, ControlSet, PreparedStepGain};
use crate::duality::{
    DbPenalty, LambdaSource, Penalty, PenaltyLambda, RogersData, ScalarQuadraticH,
};
use crate::error::Result;
use crate::lqc::{
    gamma_propagator, lambda1_additive, lambda_star_multiplicative, theta, AdditiveLqcSpec,
    MultiplicativeLqcSpec, RiccatiSolution,
};
use crate::rde::VectorFieldSet;
use crate::rough_path::GridRoughPath;

/// Scalar additive problem `dX = (MX + Nu)dt + dη`,
/// gain `½∫(Qx² + Ru²) + ½Gx²`.
pub fn additive_problem(spec: &AdditiveLqcSpec, control_set: ControlSet) -> ControlProblem {
    assert_eq!(spec.state_dim(), 1, "scalar fixture");
    let (m, n) = (spec.m[(0, 0)], spec.n[(0, 0)]);
    let (q, r, g) = (spec.q[(0, 0)], spec.r[(0, 0)], spec.g[(0, 0)]);
    let vf = VectorFieldSet::new(
        1,
        1,
        1,
        move |x, u, out| out[0] = m * x[0] + n * u[0],
        |_, out| out[0] = 1.0,
    )
    .with_d_sigma(|_, out| out[0] = 0.0)
    .with_d_b(move |_, _, out| out[0] = m)
    .with_d_b_u(move |_, _, out| out[0] = n);
    ControlProblem::new(
        vf,
        move |_t, x, u| 0.5 * (q * x[0] * x[0] + r * u[0] * u[0]),
        move |x| 0.5 * g * x[0] * x[0],
        control_set,
        spec.horizon,
    )
    .with_dg(move |x, out| out[0] = g * x[0])
    .with_df_x(move |_, x, _, out| out[0] = q * x[0])
    .with_step_gain(move |_t, x, u, bout| {
        bout[0] = m * x[0] + n * u[0];
        0.5 * (q * x[0] * x[0] + r * u[0] * u[0])
    })
}

/// Scalar multiplicative problem `dX = (MX + Nu)dt + CX dη`, same gains.
pub fn multiplicative_problem(
    spec: &MultiplicativeLqcSpec,
    control_set: ControlSet,
) -> ControlProblem {
    let s = *spec;
    let vf = VectorFieldSet::new(
        1,
        1,
        1,
        move |x, u, out| out[0] = s.m * x[0] + s.n * u[0],
        move |x, out| out[0] = s.c * x[0],
    )
    .with_d_sigma(move |_, out| out[0] = s.c)
    .with_d_b(move |_, _, out| out[0] = s.m)
    .with_d_b_u(move |_, _, out| out[0] = s.n);
    ControlProblem::new(
        vf,
        move |_t, x, u| 0.5 * (s.q * x[0] * x[0] + s.r * u[0] * u[0]),
        move |x| 0.5 * s.g * x[0] * x[0],
        control_set,
        spec.horizon,
    )
    .with_dg(move |x, out| out[0] = s.g * x[0])
    .with_df_x(move |_, x, _, out| out[0] = s.q * x[0])
    .with_step_gain(move |_t, x, u, bout| {
        bout[0] = s.m * x[0] + s.n * u[0];
        0.5 * (s.q * x[0] * x[0] + s.r * u[0] * u[0])
    })
}

/// Martingale-penalty data with `h = V` for the additive fixture.
pub fn additive_value_h(sol: &RiccatiSolution) -> Result<RogersData> {
    let (times, p, pdot, tri) = sol.scalar_tables();
    Ok(RogersData::from_scalar_quadratic(
        ScalarQuadraticH::additive_value(times, p, pdot, tri)?,
    ))
}

/// Martingale-penalty data with `h = V` for the multiplicative fixture.
pub fn multiplicative_value_h(sol: &RiccatiSolution) -> Result<RogersData> {
    let (times, p, pdot, _) = sol.scalar_tables();
    Ok(RogersData::from_scalar_quadratic(
        ScalarQuadraticH::multiplicative_value(times, p, pdot)?,
    ))
}

/// Optimal feedback `ν*(t,x) = −(N/R) P(t) x` as a fast shared closure.
pub fn additive_policy(
    spec: &AdditiveLqcSpec,
    sol: &RiccatiSolution,
) -> Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync> {
    let (times, p, pdot, tri) = sol.scalar_tables();
    let tables = ScalarQuadraticH::additive_value(times, p, pdot, tri).expect("tables");
    let coef = -spec.n[(0, 0)] / spec.r[(0, 0)];
    Arc::new(move |t: f64, x: &[f64]| vec![coef * tables.p_at(t) * x[0]])
}

/// Optimal feedback `u*(t,x) = −(N/R) P_t x` for the multiplicative fixture.
pub fn multiplicative_policy(
    spec: &MultiplicativeLqcSpec,
    sol: &RiccatiSolution,
) -> Arc<dyn Fn(f64, &[f64]) -> Vec<f64> + Send + Sync> {
    let (times, p, pdot, _) = sol.scalar_tables();
    let tables = ScalarQuadraticH::multiplicative_value(times, p, pdot).expect("tables");
    let coef = -spec.n / spec.r;
    Arc::new(move |t: f64, x: &[f64]| vec![coef * tables.p_at(t) * x[0]])
}

fn quadratic_tables(sol: &RiccatiSolution, additive: bool) -> Result<ScalarQuadraticH> {
    let (times, p, pdot, tri) = sol.scalar_tables();
    if additive {
        ScalarQuadraticH::additive_value(times, p, pdot, tri)
    } else {
        ScalarQuadraticH::multiplicative_value(times, p, pdot)
    }
}

/// Hand-fused version of the martingale transform with `h = V` for the
/// additive fixture: same `f̃`, `g̃` as the generic transform (checked in
/// tests to 1e-10), one indirect call per inner-loop evaluation.
pub fn additive_rogers_problem(
    spec: &AdditiveLqcSpec,
    sol: &RiccatiSolution,
    control_set: ControlSet,
    t0: f64,
    x0: f64,
) -> Result<ControlProblem> {
    let (m, n) = (spec.m[(0, 0)], spec.n[(0, 0)]);
    let (q, r, g) = (spec.q[(0, 0)], spec.r[(0, 0)], spec.g[(0, 0)]);
    let tables = std::sync::Arc::new(quadratic_tables(sol, true)?);
    let horizon = spec.horizon;
    let h_t0_x0 = tables.h(t0, x0);
    // f̃ = f + ∂_t h + b·p·x + ½σ²p with σ ≡ 1
    // single expression shared by every evaluation route, so the inner-loop
    // kernels and the plain closures agree bit-for-bit
    #[inline(always)]
    fn expr_additive(
        consts: (f64, f64, f64, f64),
        coeff: (f64, f64, f64),
        x: f64,
        u: f64,
    ) -> f64 {
        let (m, n, q, r) = consts;
        let (p, p_dot, c_dot) = coeff;
        0.5 * (q * x * x + r * u * u)
            + 0.5 * p_dot * x * x
            + 0.5 * c_dot
            + (m * x + n * u) * p * x
            + 0.5 * p
    }
    let consts = (m, n, q, r);
    let t1 = std::sync::Arc::clone(&tables);
    let f_tilde = move |t: f64, x: &[f64], u: &[f64]| -> f64 {
        expr_additive(consts, t1.coeffs_at(t), x[0], u[0])
    };
    let t2 = std::sync::Arc::clone(&tables);
    let t3 = std::sync::Arc::clone(&tables);
    let base = additive_problem(spec, control_set);
    Ok(ControlProblem {
        vf: base.vf,
        f: std::sync::Arc::new(f_tilde),
        g: std::sync::Arc::new(move |x: &[f64]| {
            0.5 * g * x[0] * x[0] + h_t0_x0 - t2.h(horizon, x[0])
        }),
        dg: None,
        df_x: None,
        step_gain: None,
        step_gain_at: Some(std::sync::Arc::new(move |t: f64| -> PreparedStepGain {
            let coeff = t3.coeffs_at(t);
            Box::new(move |x: &[f64], u: &[f64], bout: &mut [f64]| {
                bout[0] = m * x[0] + n * u[0];
                expr_additive(consts, coeff, x[0], u[0])
            })
        })),
        control_set: base.control_set,
        horizon,
    })
}

/// Hand-fused martingale transform with `h = V` for the multiplicative
/// fixture (σ(x) = Cx, so `b̃ = b + ½C²x` and `½Tr[σσᵀD²h] = ½C²x²p`).
pub fn multiplicative_rogers_problem(
    spec: &MultiplicativeLqcSpec,
    sol: &RiccatiSolution,
    control_set: ControlSet,
    t0: f64,
    x0: f64,
) -> Result<ControlProblem> {
    let s = *spec;
    let tables = std::sync::Arc::new(quadratic_tables(sol, false)?);
    let horizon = s.horizon;
    let h_t0_x0 = tables.h(t0, x0);
    #[inline(always)]
    fn expr_multiplicative(s: &MultiplicativeLqcSpec, coeff: (f64, f64, f64), x: f64, u: f64) -> f64 {
        let (p, p_dot, c_dot) = coeff;
        let b_tilde = s.m * x + s.n * u + 0.5 * s.c * s.c * x;
        0.5 * (s.q * x * x + s.r * u * u)
            + 0.5 * p_dot * x * x
            + 0.5 * c_dot
            + b_tilde * p * x
            + 0.5 * s.c * s.c * x * x * p
    }
    let t1 = std::sync::Arc::clone(&tables);
    let f_tilde = move |t: f64, x: &[f64], u: &[f64]| -> f64 {
        expr_multiplicative(&s, t1.coeffs_at(t), x[0], u[0])
    };
    let t2 = std::sync::Arc::clone(&tables);
    let t3 = std::sync::Arc::clone(&tables);
    let base = multiplicative_problem(spec, control_set);
    Ok(ControlProblem {
        vf: base.vf,
        f: std::sync::Arc::new(f_tilde),
        g: std::sync::Arc::new(move |x: &[f64]| {
            0.5 * s.g * x[0] * x[0] + h_t0_x0 - t2.h(horizon, x[0])
        }),
        dg: None,
        df_x: None,
        step_gain: None,
        step_gain_at: Some(std::sync::Arc::new(move |t: f64| -> PreparedStepGain {
            let coeff = t3.coeffs_at(t);
            Box::new(move |x: &[f64], u: &[f64], bout: &mut [f64]| {
                bout[0] = s.m * x[0] + s.n * u[0];
                expr_multiplicative(&s, coeff, x[0], u[0])
            })
        })),
        control_set: base.control_set,
        horizon,
    })
}

/// Control-linear penalty for the additive fixture: per path the weight is
/// `λ*(t) = −λ¹(t;η)`, state-independent.
pub fn additive_db_penalty(spec: &AdditiveLqcSpec, sol: &RiccatiSolution) -> Penalty {
    let spec = spec.clone();
    let sol = sol.clone();
    let policy = additive_policy(&spec, &sol);
    let spec2 = spec.clone();
    let sol2 = sol.clone();
    let make = move |eta: &GridRoughPath| -> Result<PenaltyLambda> {
        let lam1 = lambda1_additive(&spec2, &sol2, eta)?;
        let t0 = eta.grid().t0();
        let dt = eta.grid().dt(0);
        let n = eta.n_intervals();
        Ok(Arc::new(move |t: f64, _x: &[f64]| {
            let k = (((t - t0) / dt).round() as usize).min(n);
            vec![-lam1[k][0]]
        }))
    };
    let r = spec.r[(0, 0)];
    Penalty::DavisBurstein(DbPenalty {
        feedback: policy,
        lambda: LambdaSource::PerPath(Arc::new(make)),
        running_f_u: Some(Arc::new(move |_t, _x, u: &[f64]| vec![r * u[0]])),
    })
}

/// Control-linear penalty for the multiplicative fixture:
/// `λ*(t,x) = 2NCx Θ_t` per path.
pub fn multiplicative_db_penalty(
    spec: &MultiplicativeLqcSpec,
    sol: &RiccatiSolution,
) -> Penalty {
    let spec = *spec;
    let sol = sol.clone();
    let policy = multiplicative_policy(&spec, &sol);
    let sol2 = sol.clone();
    let make = move |eta: &GridRoughPath| -> Result<PenaltyLambda> {
        let gamma = gamma_propagator(&spec, eta, 0)?;
        let th = theta(&spec, &sol2, eta, &gamma, 0)?;
        let t0 = eta.grid().t0();
        let dt = eta.grid().dt(0);
        let n = eta.n_intervals();
        Ok(Arc::new(move |t: f64, x: &[f64]| {
            let k = (((t - t0) / dt).round() as usize).min(n);
            vec![lambda_star_multiplicative(&spec, th[k], x[0])]
        }))
    };
    let r = spec.r;
    Penalty::DavisBurstein(DbPenalty {
        feedback: policy,
        lambda: LambdaSource::PerPath(Arc::new(make)),
        running_f_u: Some(Arc::new(move |_t, _x, u: &[f64]| vec![r * u[0]])),
    })
}
