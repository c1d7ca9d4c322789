//! Controller synthesis: optimal static damping, an unconstrained target
//! compensator, and convex projection onto certified self-powered
//! admittances.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::{self, Certificate, SpsaRealization};
use crate::linalg::{self, Mat};
use crate::lti::StateSpace;
use crate::params::LossParams;
use crate::plant::DesignModel;
use crate::sdp::{self, Sdp};
use crate::stochlin::{self, LinearizationResult};

const OUTER_TOL: f64 = 1e-6;

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> (f64, f64) {
    let r = (5f64.sqrt() - 1.0) / 2.0;
    let mut x1 = hi - r * (hi - lo);
    let mut x2 = lo + r * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - r * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + r * (hi - lo);
            f2 = f(x2);
        }
    }
    let ends = [(lo, f(lo)), (hi, f(hi)), (x1, f1), (x2, f2)];
    ends.into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap()
}

fn gain(c: f64) -> StateSpace {
    StateSpace::gain(Mat::from_element(1, 1, c))
}

/// Performance with the linearization frozen at `a_eq`; infinite when the
/// closed loop is unstable.
pub fn frozen_j(model: &DesignModel, a_eq: &Mat, ctrl: &StateSpace) -> f64 {
    match stochlin::covariance(model, a_eq, ctrl) {
        Ok((_, j)) => j,
        Err(_) => f64::INFINITY,
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StaticDesign {
    pub c_d: f64,
    pub j: f64,
    pub outer_iterations: usize,
    pub linearization: LinearizationResult,
}

/// Alternates scalar re-optimization of the damping gain on `[0, 1/R]` with
/// stochastic linearization until the performance settles.
pub fn optimize_static_damping(model: &DesignModel, loss: &LossParams) -> Result<StaticDesign> {
    loss.validate()?;
    let frictionless = model.f.amax() == 0.0;
    let mut a_eq = model.a.clone();
    let mut j_prev: Option<f64> = None;
    for it in 1..=50 {
        let (c_d, _) = golden_section(|c| frozen_j(model, &a_eq, &gain(c)), 0.0, 1.0 / loss.r, 1e-6);
        let lin = stochlin::solve_fixed_point(model, &gain(c_d))?;
        let j = lin.j;
        a_eq = lin.a_eq.clone();
        let done = frictionless || j_prev.is_some_and(|jp| (j - jp).abs() / j < OUTER_TOL);
        if done {
            return Ok(StaticDesign {
                c_d,
                j,
                outer_iterations: it,
                linearization: lin,
            });
        }
        j_prev = Some(j);
    }
    Err(Error::NoConvergence {
        what: "static damping outer loop",
        iterations: 50,
        residual: f64::NAN,
    })
}

/// H2-optimal output-feedback compensator `v -> -u` for the model with state
/// matrix `a_eq`, using fictitious measurement-noise intensity `theta`.
pub fn lqg_controller(model: &DesignModel, a_eq: &Mat, theta: f64) -> Result<StateSpace> {
    let (k, _) = lqr_gain(model, a_eq)?;
    let l = kalman_gain(model, a_eq, theta)?;
    let a_c = a_eq - &model.b_u * &k - &l * &model.c_v;
    StateSpace::new(a_c, l, k, Mat::zeros(1, 1))
}

/// State-feedback gain `u = -K x` minimizing `E[z'z]`, with the Riccati
/// solution.
pub fn lqr_gain(model: &DesignModel, a_eq: &Mat) -> Result<(Mat, Mat)> {
    let minv = linalg::inverse(&model.m, "current weight")?;
    let k_cross = &minv * model.n.transpose();
    let a_bar = a_eq - &model.b_u * &k_cross;
    let q_bar = linalg::sym(&(&model.q - &model.n * &minv * model.n.transpose()));
    // start from K = -M^-1 N' so that the first closed loop is A_eq itself
    let (x, k_bar) = linalg::care_from(&a_bar, &model.b_u, &q_bar, &model.m, -k_cross.clone())?;
    Ok((k_bar + k_cross, x))
}

pub fn kalman_gain(model: &DesignModel, a_eq: &Mat, theta: f64) -> Result<Mat> {
    if !(theta > 0.0) {
        return Err(Error::InvalidParameter(format!("measurement noise intensity {theta}")));
    }
    let w = &model.b_n * model.b_n.transpose();
    let (l, _) = linalg::kalman(a_eq, &model.c_v, &w, &Mat::from_element(1, 1, theta))?;
    Ok(l)
}

/// Fixed controller dynamics `(A_Y, B_Y)`: a steady-state Kalman observer of
/// the linearized model driven by the colocated velocity, in coordinates
/// where its controllability Gramian is the identity.
pub fn observer_basis(model: &DesignModel, a_eq: &Mat, theta: f64) -> Result<(Mat, Mat)> {
    let l = kalman_gain(model, a_eq, theta)?;
    let a = a_eq - &l * &model.c_v;
    let wc = linalg::lyapunov(&a, &(&l * l.transpose()))?;
    if linalg::min_eigenvalue(&wc) <= 1e-14 * linalg::max_eigenvalue(&wc) {
        return Err(Error::RankDeficient);
    }
    let t = linalg::sym_fn(&wc, |x| 1.0 / x.sqrt());
    let tinv = linalg::sym_sqrt(&wc);
    Ok((&t * a * tinv, t * l))
}

fn realization(a_y: &Mat, b_y: &Mat, theta: &[f64]) -> SpsaRealization {
    let k = a_y.nrows();
    SpsaRealization {
        a: a_y.clone(),
        b: b_y.clone(),
        c: Mat::from_row_slice(1, k, &theta[..k]),
        d: Mat::from_element(1, 1, theta[k]),
        certificate: None,
    }
}

fn output_params(y: &SpsaRealization) -> Vec<f64> {
    let mut t: Vec<f64> = y.c.iter().copied().collect();
    t.push(y.d[(0, 0)]);
    t
}

/// Frozen-linearization performance and its gradient with respect to the
/// controller output map `[C_Y, D_Y]`, via the adjoint Lyapunov equation.
pub fn frozen_j_grad(
    model: &DesignModel,
    a_eq: &Mat,
    a_y: &Mat,
    b_y: &Mat,
    theta: &[f64],
) -> Result<(f64, Vec<f64>)> {
    let n = model.n_states();
    let k = a_y.nrows();
    let c = Mat::from_row_slice(1, k, &theta[..k]);
    let d = theta[k];
    let a_cl = linalg::block(&[
        &[&(a_eq - &model.b_u * &model.c_v * d), &(-(&model.b_u * &c))],
        &[&(b_y * &model.c_v), a_y],
    ]);
    let b_cl = linalg::block(&[&[&model.b_n], &[&Mat::zeros(k, 1)]]);
    let cz_cl = linalg::block(&[&[&(&model.c_z - &model.d_zu * &model.c_v * d), &(-(&model.d_zu * &c))]]);
    let s = linalg::lyapunov(&a_cl, &(&b_cl * b_cl.transpose()))?;
    let lam = linalg::lyapunov(&a_cl.transpose(), &(cz_cl.transpose() * &cz_cl))?;
    let j = (&cz_cl * &s * cz_cl.transpose()).trace();
    let bu_hat = linalg::block(&[&[&model.b_u], &[&Mat::zeros(k, 1)]]);
    let t = (bu_hat.transpose() * &lam + model.d_zu.transpose() * &cz_cl) * &s;
    let mut g = vec![0.0; k + 1];
    for jj in 0..k {
        g[jj] = -2.0 * t[(0, n + jj)];
    }
    g[k] = -2.0 * (0..n).map(|i| t[(0, i)] * model.c_v[(0, i)]).sum::<f64>();
    Ok((j, g))
}

/// Gram matrix `H` of the projection metric: for controllers sharing
/// `(A_Y, B_Y)` the squared H2 norm of `(Y1 - Y2) P_uv` is `d' H d` with `d`
/// the difference of `[C_Y, D_Y]`.
pub fn error_metric_gram(model: &DesignModel, a_eq: &Mat, a_y: &Mat, b_y: &Mat) -> Result<Mat> {
    let n = model.n_states();
    let k = a_y.nrows();
    let a = linalg::block(&[&[a_eq, &Mat::zeros(n, k)], &[&(b_y * &model.c_v), a_y]]);
    let b = linalg::block(&[&[&model.b_u], &[&Mat::zeros(k, 1)]]);
    let wc = linalg::lyapunov(&a, &(&b * b.transpose()))?;
    let mut e = Mat::zeros(k + 1, n + k);
    for j in 0..k {
        e[(j, n + j)] = 1.0;
    }
    for i in 0..n {
        e[(k, i)] = model.c_v[(0, i)];
    }
    Ok(linalg::sym(&(&e * wc * e.transpose())))
}

/// Squared H2 norm of `(Y - C) P_uv` built by explicit interconnection.
pub fn error_metric(model: &DesignModel, a_eq: &Mat, y: &StateSpace, c: &StateSpace) -> Result<f64> {
    model.p_uv(a_eq).series(&y.difference(c)?)?.h2_norm_sq()
}

/// Unconstrained minimization of the frozen performance over `[C_Y, D_Y]`
/// for fixed controller dynamics, by BFGS preconditioned with the
/// projection metric.
pub fn design_passive_target(
    model: &DesignModel,
    a_eq: &Mat,
    a_y: &Mat,
    b_y: &Mat,
    start: &[f64],
) -> Result<SpsaRealization> {
    let h = error_metric_gram(model, a_eq, a_y, b_y)?;
    let eval = |t: &[f64]| frozen_j_grad(model, a_eq, a_y, b_y, t).ok();
    let x = bfgs(eval, start, &h, 300)?;
    let y = realization(a_y, b_y, &x);
    if !frozen_j(model, a_eq, &y.state_space()).is_finite() {
        return Err(Error::SynthesisFailed("target does not stabilize the model".into()));
    }
    Ok(y)
}

fn bfgs(
    f: impl Fn(&[f64]) -> Option<(f64, Vec<f64>)>,
    x0: &[f64],
    metric: &Mat,
    max_iter: usize,
) -> Result<Vec<f64>> {
    let n = x0.len();
    let (mut fx, g0) = f(x0).ok_or_else(|| Error::SynthesisFailed("unstable starting point".into()))?;
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::from_vec(g0);
    // metric-preconditioned initial inverse Hessian, scaled so the first
    // step predicts a 5% decrease
    let hinv0 = linalg::inverse(&(metric + Mat::identity(n, n) * (1e-12 * metric.trace())), "metric")?;
    let pred = (g.transpose() * &hinv0 * &g)[(0, 0)];
    let mut hinv = hinv0 * (0.05 * fx / pred.max(1e-300));
    for _ in 0..max_iter {
        let d = -(&hinv * &g);
        let slope = g.dot(&d);
        if slope >= 0.0 {
            hinv = Mat::identity(n, n) * (0.05 * fx / g.norm_squared().max(1e-300));
            continue;
        }
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let xn = &x + &d * step;
            if let Some((fn_, gn)) = f(xn.as_slice()) {
                if fn_ <= fx + 1e-4 * step * slope {
                    accepted = Some((xn, fn_, DVector::from_vec(gn)));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else { break };
        let s = &xn - &x;
        let yv = &gn - &g;
        let sy = s.dot(&yv);
        if sy > 1e-300 {
            let rho = 1.0 / sy;
            let i = Mat::identity(n, n);
            let left = &i - &s * yv.transpose() * rho;
            let right = &i - &yv * s.transpose() * rho;
            hinv = &left * &hinv * &right + &s * s.transpose() * rho;
        }
        let rel = (fx - fn_) / fx;
        x = xn;
        fx = fn_;
        g = gn;
        if rel < 1e-12 {
            break;
        }
    }
    Ok(x.iter().copied().collect())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Projection {
    pub controller: SpsaRealization,
    /// Squared H2 error of `(Y - C) P_uv`.
    pub error: f64,
}

/// Variable layout of the controller-design SDPs:
/// `[P (upper), X (row-major), C_Y, D_Y]`.
struct Layout {
    k: usize,
    np: usize,
}

impl Layout {
    fn new(k: usize) -> Self {
        Self {
            k,
            np: sdp::upper_len(k),
        }
    }
    fn nv(&self) -> usize {
        self.np + self.k * self.k + self.k + 1
    }
    fn theta_offset(&self) -> usize {
        self.np + self.k * self.k
    }
    fn unpack(&self, v: &[f64]) -> (Mat, Mat, Vec<f64>) {
        let k = self.k;
        let p = sdp::sym_from_upper(k, &v[..self.np]);
        let x = Mat::from_row_slice(k, k, &v[self.np..self.np + k * k]);
        (p, x, v[self.theta_offset()..].to_vec())
    }
}

/// Minimizes `0.5 t' Hq t + c' t` over output maps `t = [C_Y, D_Y]` for
/// which a certificate exists with margin `margin`.
fn constrained_output_qp(
    a_y: &Mat,
    b_y: &Mat,
    hq: &Mat,
    c: &[f64],
    loss: &LossParams,
    margin: f64,
) -> Result<(Vec<f64>, Certificate)> {
    let k = a_y.nrows();
    let lay = Layout::new(k);
    let nv = lay.nv();
    let off = lay.theta_offset();
    let mut prob = Sdp::new(nv);
    let mut h = Mat::zeros(nv, nv);
    h.view_mut((off, off), (k + 1, k + 1)).copy_from(hq);
    let mut lin = vec![0.0; nv];
    lin[off..].copy_from_slice(c);
    prob.set_objective(Some(h), lin);
    let lay = std::sync::Arc::new(lay);
    {
        let (a, lay) = (a_y.clone(), lay.clone());
        let tau_s = loss.tau_s;
        prob.add_lmi(move |v| {
            let (p, x, _) = lay.unpack(v);
            feasibility::lmi_state(&a, &p, &x, tau_s) + Mat::identity(k, k) * margin
        });
    }
    {
        let (a, b, lay, l) = (a_y.clone(), b_y.clone(), lay.clone(), loss.clone());
        prob.add_lmi(move |v| {
            let (p, x, t) = lay.unpack(v);
            let y = realization(&a, &b, &t);
            feasibility::lmi_port(&y, &p, &x, &l) + Mat::identity(2 * k + 2, 2 * k + 2) * margin
        });
    }
    {
        let lay = lay.clone();
        prob.add_lmi(move |v| {
            let (p, _, _) = lay.unpack(v);
            Mat::identity(k, k) * margin - p
        });
    }
    let sol = prob.solve().map_err(|e| Error::ProjectionInfeasible(e.to_string()))?;
    let (p, x, t) = lay.unpack(&sol.x);
    let cert = Certificate { p, x };
    let mg = feasibility::lmi_margins(&realization(a_y, b_y, &t), &cert, loss);
    if !mg.ok() {
        return Err(Error::ProjectionInfeasible(format!(
            "solver point fails verification (worst eigenvalue {:.3e})",
            mg.worst()
        )));
    }
    Ok((t, cert))
}

/// Attaches a certificate from an independent search, falling back to
/// `fallback` when it verifies on its own.
fn certify(y: SpsaRealization, loss: &LossParams, fallback: Option<Certificate>) -> Result<SpsaRealization> {
    match feasibility::certify_spsa(&y, loss) {
        Ok(rep) => Ok(y.with_certificate(rep.certificate)),
        Err(e) => match fallback {
            Some(c) if feasibility::lmi_margins(&y, &c, loss).ok() => Ok(y.with_certificate(c)),
            _ => Err(e),
        },
    }
}

/// Closest certified admittance to `target` in the projection metric, with
/// the target's dynamics `(A_Y, B_Y)` held fixed.
pub fn project_to_spsa(
    target: &SpsaRealization,
    model: &DesignModel,
    a_eq: &Mat,
    loss: &LossParams,
) -> Result<Projection> {
    let h = error_metric_gram(model, a_eq, &target.a, &target.b)?;
    let tt = DVector::from_vec(output_params(target));
    let lin: Vec<f64> = (-(&h * &tt) * 2.0).iter().copied().collect();
    let (theta, cert) = constrained_output_qp(&target.a, &target.b, &(&h * 2.0), &lin, loss, PROJECTION_MARGIN)?;
    let y = certify(realization(&target.a, &target.b, &theta), loss, Some(cert))?;
    let d = DVector::from_vec(theta) - tt;
    let error = (d.transpose() * &h * &d)[(0, 0)].max(0.0);
    Ok(Projection { controller: y, error })
}

/// Strict margin imposed on the inequalities during synthesis so that the
/// independent re-certification always succeeds.
const PROJECTION_MARGIN: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpsaOptions {
    /// Fictitious measurement-noise intensity of the observer basis.
    pub observer_noise: f64,
    pub max_steps: usize,
    pub max_outer: usize,
}

impl Default for SpsaOptions {
    fn default() -> Self {
        Self {
            observer_noise: 1.0,
            max_steps: 60,
            max_outer: 4,
        }
    }
}

/// Projected-gradient descent of the frozen performance over certified
/// output maps. Each step minimizes the linearized performance plus a
/// proximal term in the projection metric.
pub fn refine_spsa(
    start: &SpsaRealization,
    model: &DesignModel,
    a_eq: &Mat,
    loss: &LossParams,
    max_steps: usize,
) -> Result<(SpsaRealization, usize)> {
    let (a_y, b_y) = (&start.a, &start.b);
    let h = error_metric_gram(model, a_eq, a_y, b_y)?;
    let n = h.nrows();
    let hinv = linalg::inverse(&(&h + Mat::identity(n, n) * (1e-12 * h.trace())), "metric")?;
    let mut theta = output_params(start);
    let mut cert = start.certificate.clone();
    let (mut j, mut g) = frozen_j_grad(model, a_eq, a_y, b_y, &theta)?;
    let gv = DVector::from_column_slice(&g);
    let mut alpha = 0.05 * j / (gv.transpose() * &hinv * &gv)[(0, 0)].max(1e-300);
    let alpha0 = alpha;
    let mut accepted = 0;
    let mut stalls = 0;
    for _ in 0..max_steps {
        let tv = DVector::from_column_slice(&theta);
        let gv = DVector::from_column_slice(&g);
        let lin: Vec<f64> = (gv - &h * &tv / alpha).iter().copied().collect();
        let (cand, cand_cert) = match constrained_output_qp(a_y, b_y, &(&h / alpha), &lin, loss, PROJECTION_MARGIN) {
            Ok(r) => r,
            Err(_) => {
                alpha /= 4.0;
                continue;
            }
        };
        match frozen_j_grad(model, a_eq, a_y, b_y, &cand) {
            Ok((jn, gn)) if jn < j => {
                let rel = (j - jn) / j;
                theta = cand;
                cert = Some(cand_cert);
                j = jn;
                g = gn;
                alpha *= 1.5;
                accepted += 1;
                stalls = if rel < 1e-7 { stalls + 1 } else { 0 };
                if stalls >= 3 {
                    break;
                }
            }
            _ => alpha /= 4.0,
        }
        if alpha < 1e-9 * alpha0 {
            break;
        }
    }
    let y = certify(realization(a_y, b_y, &theta), loss, cert)?;
    Ok((y, accepted))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpsaDesign {
    pub controller: SpsaRealization,
    /// Performance at the stochastic-linearization fixed point.
    pub j: f64,
    /// Unconstrained target's performance (frozen at the static-damping
    /// linearization).
    pub target_j: f64,
    pub projection_error: f64,
    pub outer_iterations: usize,
    pub gradient_steps: usize,
    pub linearization: LinearizationResult,
}

/// Full admittance design: observer-basis target, projection onto the
/// certified set, projected-gradient refinement, all wrapped in the
/// stochastic-linearization loop.
pub fn design_spsa(
    model: &DesignModel,
    loss: &LossParams,
    static_design: &StaticDesign,
    opts: &SpsaOptions,
) -> Result<SpsaDesign> {
    let a_eq0 = static_design.linearization.a_eq.clone();
    let (a_y, b_y) = observer_basis(model, &a_eq0, opts.observer_noise)?;
    let k = a_y.nrows();
    let mut static_start = vec![0.0; k + 1];
    static_start[k] = static_design.c_d;

    let target = design_passive_target(model, &a_eq0, &a_y, &b_y, &static_start)?;
    let target_j = frozen_j(model, &a_eq0, &target.state_space());
    let proj = project_to_spsa(&target, model, &a_eq0, loss)?;
    let from_static = certify(realization(&a_y, &b_y, &static_start), loss, None)?;
    let j_proj = frozen_j(model, &a_eq0, &proj.controller.state_space());
    let j_static = frozen_j(model, &a_eq0, &from_static.state_space());
    let mut y = if j_proj < j_static { proj.controller.clone() } else { from_static };

    let mut a_eq = a_eq0;
    let mut j_prev: Option<f64> = None;
    let mut steps = 0;
    // without friction the linearization never changes
    let max_outer = if model.f.iter().all(|&x| x == 0.0) { 1 } else { opts.max_outer.max(1) };
    for outer in 1..=max_outer {
        let (yn, s) = refine_spsa(&y, model, &a_eq, loss, opts.max_steps)?;
        steps += s;
        y = yn;
        let lin = stochlin::solve_fixed_point(model, &y.state_space())?;
        let j = lin.j;
        a_eq = lin.a_eq.clone();
        let converged = j_prev.is_some_and(|jp| (j - jp).abs() / j < OUTER_TOL);
        if converged || outer == max_outer {
            return Ok(SpsaDesign {
                controller: y,
                j,
                target_j,
                projection_error: proj.error,
                outer_iterations: outer,
                gradient_steps: steps,
                linearization: lin,
            });
        }
        j_prev = Some(j);
    }
    unreachable!("outer loop always returns")
}

/// Certificate-carrying admittance for a memoryless gain.
pub fn static_realization(c_d: f64, loss: &LossParams) -> Result<SpsaRealization> {
    let y = SpsaRealization::static_gain(c_d);
    let rep = feasibility::certify_spsa(&y, loss)?;
    Ok(y.with_certificate(Certificate {
        p: rep.certificate.p,
        x: rep.certificate.x,
    }))
}
