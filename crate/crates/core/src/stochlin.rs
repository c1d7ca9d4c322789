//! Gaussian stochastic linearization of the Coulomb friction channel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lti::{self, StateSpace};
use crate::plant::DesignModel;

const MIN_VARIANCE: f64 = 1e-18;
const RELAXATION: f64 = 0.5;
const MAX_ITERATIONS: usize = 200;
const TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearizationResult {
    /// Stationary covariance of `[x; x_controller]`.
    pub sigma: Mat,
    pub a_eq: Mat,
    pub iterations: usize,
    /// Frobenius norm of the closed-loop Lyapunov residual at `sigma`.
    pub residual: f64,
    /// Mean-square performance `trace(C_z Sigma C_z')`.
    pub j: f64,
}

/// Equivalent linear state matrix `A + sqrt(2/pi) F G / sqrt(G Sigma G')`.
/// `sigma` may be larger than `A` (closed-loop covariance); only its leading
/// block is used.
pub fn a_eq(sigma: &Mat, a: &Mat, f: &Mat, g_v: &Mat) -> Result<Mat> {
    let n = a.nrows();
    let s = sigma.view((0, 0), (n, n));
    let var = (g_v * s * g_v.transpose())[(0, 0)];
    if !(var > MIN_VARIANCE) {
        return Err(Error::DegenerateVariance(var));
    }
    Ok(a + f * g_v * ((2.0 / std::f64::consts::PI).sqrt() / var.sqrt()))
}

/// Closed loop of the design model (state matrix `a`) with `ctrl: v -> -u`.
/// Outputs are `(v, z)`; the input is the white noise.
pub fn closed_loop(model: &DesignModel, a: &Mat, ctrl: &StateSpace) -> Result<StateSpace> {
    lti::feedback(&model.state_space_with(a), ctrl, 1, 1)
}

fn perf_output(cl: &StateSpace) -> Mat {
    cl.c().rows(1, cl.n_outputs() - 1).into_owned()
}

/// Mean-square performance of a closed loop with covariance `sigma`.
pub fn performance(cl: &StateSpace, sigma: &Mat) -> f64 {
    let cz = perf_output(cl);
    (&cz * sigma * cz.transpose()).trace()
}

/// Frozen-linearization covariance and performance.
pub fn covariance(model: &DesignModel, a: &Mat, ctrl: &StateSpace) -> Result<(Mat, f64)> {
    let cl = closed_loop(model, a, ctrl)?;
    let bb = cl.b() * cl.b().transpose();
    let s = linalg::lyapunov(cl.a(), &bb)?;
    let j = performance(&cl, &s);
    Ok((s, j))
}

/// Solves the covariance fixed point of the stochastically linearized closed
/// loop by under-relaxed iteration from the frictionless solution.
pub fn solve_fixed_point(model: &DesignModel, ctrl: &StateSpace) -> Result<LinearizationResult> {
    let g_v = &model.g_v;
    let nx = model.n_states();
    let var_of = |s: &Mat| (g_v * s.view((0, 0), (nx, nx)) * g_v.transpose())[(0, 0)];
    let stage = |s: &Mat, it: usize| -> Result<(StateSpace, Mat)> {
        let aeq = a_eq(s, &model.a, &model.f, g_v)?;
        let cl = closed_loop(model, &aeq, ctrl)?;
        let bb = cl.b() * cl.b().transpose();
        let next = linalg::lyapunov(cl.a(), &bb).map_err(|e| match e {
            Error::NonHurwitz { re, .. } => Error::UnstableIterate { iteration: it, re },
            e => e,
        })?;
        Ok((cl, next))
    };

    let cl0 = closed_loop(model, &model.a, ctrl)?;
    let bb0 = cl0.b() * cl0.b().transpose();
    let mut sigma = linalg::lyapunov(cl0.a(), &bb0).map_err(|e| match e {
        Error::NonHurwitz { re, .. } => Error::UnstableIterate { iteration: 0, re },
        e => e,
    })?;
    let bb_norm = bb0.norm();
    let mut last_res = f64::NAN;
    for it in 1..=MAX_ITERATIONS {
        let (_, next) = stage(&sigma, it)?;
        let v0 = var_of(&sigma);
        let v1 = var_of(&next);
        let change = (v1 - v0).abs() / v0.abs().max(MIN_VARIANCE);
        // residual of the coupled equation at the candidate
        let aeq = a_eq(&next, &model.a, &model.f, g_v)?;
        let cl = closed_loop(model, &aeq, ctrl)?;
        let res = (cl.a() * &next + &next * cl.a().transpose() + cl.b() * cl.b().transpose()).norm();
        last_res = res;
        if change < TOLERANCE && res <= 1e-8 * bb_norm.max(f64::MIN_POSITIVE) {
            linalg::check_hurwitz(cl.a())
                .map_err(|_| Error::UnstableIterate { iteration: it, re: linalg::rightmost_eigenvalue(cl.a()).re })?;
            let j = performance(&cl, &next);
            return Ok(LinearizationResult {
                sigma: next,
                a_eq: aeq,
                iterations: it,
                residual: res,
                j,
            });
        }
        sigma = &sigma * (1.0 - RELAXATION) + next * RELAXATION;
    }
    Err(Error::NoConvergence {
        what: "stochastic linearization",
        iterations: MAX_ITERATIONS,
        residual: last_res,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::*;
    use crate::plant::{build_design_model, DEFAULT_CURRENT_WEIGHT};
    use approx::assert_relative_eq;

    fn model(f_c: f64) -> DesignModel {
        let tp = TransducerParams {
            f_c,
            ..Default::default()
        };
        build_design_model(&tp, &StructureParams::default(), &DisturbanceParams::default(), DEFAULT_CURRENT_WEIGHT)
            .unwrap()
    }

    fn gain(c: f64) -> StateSpace {
        StateSpace::gain(Mat::from_element(1, 1, c))
    }

    #[test]
    fn frictionless_is_plain_lyapunov() {
        let m = model(0.0);
        let r = solve_fixed_point(&m, &gain(0.05)).unwrap();
        assert_eq!(r.iterations, 1);
        let (s, j) = covariance(&m, &m.a, &gain(0.05)).unwrap();
        assert!((&r.sigma - &s).norm() <= 1e-12 * s.norm());
        assert_relative_eq!(r.j, j, max_relative = 1e-12);
    }

    #[test]
    fn zero_friction_column_leaves_a_unchanged() {
        let m = model(0.0);
        let s = Mat::identity(8, 8);
        assert_eq!(a_eq(&s, &m.a, &m.f, &m.g_v).unwrap(), m.a);
    }

    #[test]
    fn correction_scales_inverse_sqrt() {
        let m = model(35.0);
        let s = Mat::identity(8, 8) * 1e-4;
        let c1 = a_eq(&s, &m.a, &m.f, &m.g_v).unwrap() - &m.a;
        let c2 = a_eq(&(&s * 2.0), &m.a, &m.f, &m.g_v).unwrap() - &m.a;
        assert!((c2 * 2f64.sqrt() - c1).norm() < 1e-12 * 1.0f64.max(m.a.norm()));
    }

    #[test]
    fn degenerate_variance() {
        let m = model(35.0);
        assert!(matches!(
            a_eq(&Mat::zeros(8, 8), &m.a, &m.f, &m.g_v),
            Err(Error::DegenerateVariance(_))
        ));
    }

    #[test]
    fn scalar_describing_function() {
        // 1-DOF mass with friction: x'' = -fc/m sgn(x') ; equivalent damping
        // per unit mass sqrt(2/pi) fc/(m sigma_v).
        let (fc, m, sv) = (3.0, 2.0, 0.4);
        let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -1.0, -0.1]);
        let f = Mat::from_row_slice(2, 1, &[0.0, -fc / m]);
        let g = Mat::from_row_slice(1, 2, &[0.0, 1.0]);
        let s = Mat::from_row_slice(2, 2, &[1.0, 0.0, 0.0, sv * sv]);
        let ae = a_eq(&s, &a, &f, &g).unwrap();
        let c_eq = -(ae[(1, 1)] - a[(1, 1)]) * m;
        assert_relative_eq!(c_eq, (2.0 / std::f64::consts::PI).sqrt() * fc / sv, max_relative = 1e-14);
    }

    #[test]
    fn monotone_in_friction() {
        let s = Mat::identity(8, 8) * 1e-4;
        let mag = |fc: f64| {
            let m = model(fc);
            (a_eq(&s, &m.a, &m.f, &m.g_v).unwrap() - &m.a).norm()
        };
        assert!(mag(10.0) < mag(20.0));
        assert!(mag(20.0) < mag(35.0));
    }

    #[test]
    fn fixed_point_idempotent() {
        let m = model(35.0);
        let r = solve_fixed_point(&m, &gain(0.0669)).unwrap();
        let cl = closed_loop(&m, &r.a_eq, &gain(0.0669)).unwrap();
        let s = linalg::lyapunov(cl.a(), &(cl.b() * cl.b().transpose())).unwrap();
        assert!((&s - &r.sigma).norm() <= 1e-10 * r.sigma.norm(), "{}", (&s - &r.sigma).norm() / r.sigma.norm());
        let bb = cl.b() * cl.b().transpose();
        assert!(r.residual <= 1e-8 * bb.norm());
    }

    #[test]
    fn symmetric_psd_covariance() {
        let m = model(35.0);
        let r = solve_fixed_point(&m, &gain(0.03)).unwrap();
        assert!((&r.sigma - r.sigma.transpose()).norm() == 0.0);
        assert!(linalg::min_eigenvalue(&r.sigma) > -1e-14 * r.sigma.norm());
        assert!((&m.g_v * &r.sigma * m.g_v.transpose())[(0, 0)] > 0.0);
    }
}
