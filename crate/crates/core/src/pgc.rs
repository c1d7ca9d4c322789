//! Performance-guaranteed nonlinear controller: per-step solution of the
//! dissipation-constrained quadratic program through its scalar dual root,
//! plus the state observers feeding it.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feasibility::{self, LftDecomposition, SpsaRealization};
use crate::linalg::{self, Mat};
use crate::params::{DisturbanceParams, LossParams, StructureParams, TransducerParams};
use crate::plant::{self, DesignModel};

const BISECTIONS: usize = 60;
const MU_CAP: f64 = 1e15;

/// Augmented quadratic program data built from a certified admittance and
/// its LFT factorization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgcPlan {
    pub a_bar: Mat,
    pub b_u: Mat,
    pub b_n: Mat,
    pub c_v: Mat,
    pub c_z: Mat,
    pub d_zu: Mat,
    pub q: Mat,
    pub m: Mat,
    pub n: Mat,
    pub w: Mat,
    pub z0: Mat,
    pub p_y: Mat,
    pub lft: LftDecomposition,
    /// `trace(B_n' P_Y B_n)`.
    pub j: f64,
    /// Relative residual of the Lyapunov equation for `P_Y`.
    pub residual: f64,
    // W^{-1/2} V with V the eigenvectors of W^{-1/2} M W^{-1/2}
    transform: Mat,
    lambda: Vec<f64>,
    // transform' (B_u' P_Y + N') and transform' C_v
    lin_a: Mat,
    lin_b: Mat,
}

fn pad(m: &Mat, rows: usize, cols: usize) -> Mat {
    let mut out = Mat::zeros(rows, cols);
    out.view_mut((0, 0), m.shape()).copy_from(m);
    out
}

/// Assembles the augmented matrices and solves for `P_Y`.
pub fn build_pgc_plan(
    lft: &LftDecomposition,
    model: &DesignModel,
    a_eq: &Mat,
    loss: &LossParams,
) -> Result<PgcPlan> {
    let nx = model.n_states();
    let k = lft.n_states();
    let m = lft.n_ports;
    if m != 1 {
        return Err(Error::Dimension(format!("{m} ports, the design model has one")));
    }
    let n = nx + k;
    let nu = m + k;
    let a_bar = linalg::block_diag(&[a_eq, &lft.a_g]);
    let b_u = linalg::block_diag(&[&model.b_u, &lft.b_g]);
    let b_n = pad(&model.b_n, n, model.b_n.ncols());
    let c_v = linalg::block_diag(&[&model.c_v, &lft.c_g]);
    let c_z = pad(&model.c_z, model.c_z.nrows(), n);
    let d_zu = pad(&model.d_zu, model.d_zu.nrows(), nu);
    let q = pad(&model.q, n, n);
    let mm = pad(&model.m, nu, nu);
    let nn = pad(&model.n, n, nu);
    let w = feasibility::lft_weight(m, k, loss);
    let z0 = lft.z.clone();

    let zc = &z0 * &c_v;
    let a_cl = &a_bar - &b_u * &zc;
    let q_cl = linalg::sym(&(&q + zc.transpose() * &mm * &zc - zc.transpose() * nn.transpose() - &nn * &zc));
    let p_y = linalg::lyapunov(&a_cl.transpose(), &q_cl)?;
    let res = (a_cl.transpose() * &p_y + &p_y * &a_cl + &q_cl).norm();
    let residual = res / q_cl.norm().max(f64::MIN_POSITIVE);
    let j = (b_n.transpose() * &p_y * &b_n).trace();

    let w_ih = linalg::sym_fn(&w, |x| 1.0 / x.sqrt());
    let e = linalg::sym_eigen(&linalg::sym(&(&w_ih * &mm * &w_ih)));
    let transform = &w_ih * &e.eigenvectors;
    let lambda = e.eigenvalues.iter().map(|&l| l.max(0.0)).collect();
    let lin_a = transform.transpose() * (b_u.transpose() * &p_y + nn.transpose());
    let lin_b = transform.transpose() * &c_v;
    Ok(PgcPlan {
        a_bar,
        b_u,
        b_n,
        c_v,
        c_z,
        d_zu,
        q,
        m: mm,
        n: nn,
        w,
        z0,
        p_y,
        lft: lft.clone(),
        j,
        residual,
        transform,
        lambda,
        lin_a,
        lin_b,
    })
}

/// Closed-loop performance of a certified admittance through its LFT
/// factorization.
pub fn evaluate_j_spsa(y: &SpsaRealization, model: &DesignModel, a_eq: &Mat, loss: &LossParams) -> Result<f64> {
    let lft = feasibility::lft_decompose(y, None, loss)?;
    Ok(build_pgc_plan(&lft, model, a_eq, loss)?.j)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PgcOutput {
    /// `[u, q']`.
    pub u_bar: Vec<f64>,
    pub mu: f64,
    /// `u'Wu + x'C_v'u`.
    pub constraint: f64,
    pub objective: f64,
    /// Objective of the generating admittance's own input.
    pub objective_spsa: f64,
    /// Root not bracketed; the admittance's input was returned instead.
    pub fallback: bool,
}

impl PgcOutput {
    pub fn current(&self) -> f64 {
        self.u_bar[0]
    }
}

impl PgcPlan {
    pub fn n_states(&self) -> usize {
        self.a_bar.nrows()
    }

    pub fn n_inputs(&self) -> usize {
        self.w.nrows()
    }

    /// `0.5 u'Mu + x'(P_Y B_u + N) u`.
    pub fn objective(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        let lin = (&self.p_y * &self.b_u + &self.n).transpose() * x;
        0.5 * (u.transpose() * &self.m * u)[(0, 0)] + lin.dot(u)
    }

    pub fn constraint(&self, x: &DVector<f64>, u: &DVector<f64>) -> f64 {
        (u.transpose() * &self.w * u)[(0, 0)] + (&self.c_v * x).dot(u)
    }

    /// Input of the generating admittance, `-Z0 C_v x`.
    pub fn spsa_input(&self, x: &DVector<f64>) -> DVector<f64> {
        -(&self.z0 * (&self.c_v * x))
    }

    /// `K_PGC(mu)` as an explicit matrix.
    pub fn gain(&self, mu: f64) -> Result<Mat> {
        let lhs = &self.m + &self.w * (2.0 * mu);
        let rhs = self.b_u.transpose() * &self.p_y + self.n.transpose() + &self.c_v * mu;
        linalg::solve(&lhs, &rhs, "M + 2 mu W")
    }

    /// Left side of the root condition `x'K'WKx - x'C_v'Kx`, evaluated
    /// directly from the gain.
    pub fn root_polynomial(&self, x: &DVector<f64>, mu: f64) -> Result<f64> {
        let kx = self.gain(mu)? * x;
        Ok((kx.transpose() * &self.w * &kx)[(0, 0)] - (&self.c_v * x).dot(&kx))
    }

    fn transformed(&self, x: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        (&self.lin_a * x, &self.lin_b * x)
    }

    /// Root condition and the stationary input in the coordinates that
    /// diagonalize `M + 2 mu W`.
    fn phi(&self, alpha: &DVector<f64>, beta: &DVector<f64>, mu: f64) -> (f64, DVector<f64>) {
        let mut y = DVector::zeros(alpha.len());
        let mut phi = 0.0;
        for i in 0..alpha.len() {
            let den = self.lambda[i] + 2.0 * mu;
            let num = alpha[i] + mu * beta[i];
            let yi = if den > 0.0 {
                -num / den
            } else if num == 0.0 {
                0.0
            } else {
                return (f64::INFINITY, y);
            };
            y[i] = yi;
            phi += yi * yi + beta[i] * yi;
        }
        (phi, y)
    }

    /// Solves the per-step program for the augmented state `x`.
    pub fn control(&self, x: &DVector<f64>) -> PgcOutput {
        let nu = self.n_inputs();
        let u_y = self.spsa_input(x);
        let objective_spsa = self.objective(x, &u_y);
        if (&self.c_v * x).iter().all(|&v| v == 0.0) {
            return PgcOutput {
                u_bar: vec![0.0; nu],
                mu: 0.0,
                constraint: 0.0,
                objective: 0.0,
                objective_spsa,
                fallback: false,
            };
        }
        let (alpha, beta) = self.transformed(x);
        let finish = |mu: f64, y: DVector<f64>| {
            let u = &self.transform * y;
            PgcOutput {
                constraint: self.constraint(x, &u),
                objective: self.objective(x, &u),
                u_bar: u.iter().copied().collect(),
                mu,
                objective_spsa,
                fallback: false,
            }
        };
        let (phi0, y0) = self.phi(&alpha, &beta, 0.0);
        if phi0 <= 0.0 {
            return finish(0.0, y0);
        }
        let mut hi = 1.0;
        let mut lo = 0.0;
        loop {
            let (p, _) = self.phi(&alpha, &beta, hi);
            if p <= 0.0 {
                break;
            }
            lo = hi;
            hi *= 2.0;
            if hi > MU_CAP {
                return PgcOutput {
                    constraint: self.constraint(x, &u_y),
                    objective: objective_spsa,
                    u_bar: u_y.iter().copied().collect(),
                    mu: f64::NAN,
                    objective_spsa,
                    fallback: true,
                };
            }
        }
        for _ in 0..BISECTIONS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.phi(&alpha, &beta, mid).0 > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        // the upper end always satisfies the constraint
        let (_, y) = self.phi(&alpha, &beta, hi);
        finish(hi, y)
    }
}

/// Reduced-order observer of the disturbance filter: the first transformed
/// state is the measured acceleration, the second is integrated open loop.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DisturbanceObserver {
    /// Observability matrix of `(A_w, C_w)`.
    pub t: Mat,
    pub t_inv: Mat,
    decay: f64,
    omega_sq: f64,
    /// Estimate of the second transformed state.
    pub x2: f64,
}

impl DisturbanceObserver {
    pub fn new(dp: &DisturbanceParams) -> Result<Self> {
        dp.validate()?;
        let (a, _, c) = plant::disturbance_matrices(dp);
        let t = linalg::block(&[&[&c], &[&(&c * &a)]]);
        let t_inv = linalg::inverse(&t, "disturbance observability matrix")?;
        Ok(Self {
            t,
            t_inv,
            decay: 2.0 * dp.zeta * dp.omega,
            omega_sq: dp.omega * dp.omega,
            x2: 0.0,
        })
    }

    pub fn derivative(&self, x2: f64, w: f64) -> f64 {
        -self.decay * x2 - self.omega_sq * w
    }

    /// Advances the estimate over `dt` with `w` held constant (exact).
    pub fn step(&mut self, w: f64, dt: f64) {
        let e = (-self.decay * dt).exp();
        let ss = -self.omega_sq * w / self.decay;
        self.x2 = ss + (self.x2 - ss) * e;
    }

    /// Filter state estimate in the original coordinates.
    pub fn estimate(&self, w: f64) -> [f64; 2] {
        self.estimate_with(w, self.x2)
    }

    /// Same, for an externally integrated second state.
    pub fn estimate_with(&self, w: f64, x2: f64) -> [f64; 2] {
        let t = &self.t_inv;
        [t[(0, 0)] * w + t[(0, 1)] * x2, t[(1, 0)] * w + t[(1, 1)] * x2]
    }
}

/// Luenberger observer of the bare structure driven by the measured
/// transducer force and base acceleration, corrected by the back-EMF.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantObserver {
    pub a_b: Mat,
    pub b_pf: Mat,
    pub b_pw: Mat,
    pub c_pv: Mat,
    pub l_p: Mat,
    /// Placed error eigenvalue (rad/s).
    pub pole: f64,
    pub x: [f64; 6],
}

impl PlantObserver {
    /// Gain places all error eigenvalues at `-pole_factor` times the slowest
    /// structural natural frequency (rad/s).
    pub fn new(tp: &TransducerParams, sp: &StructureParams, pole_factor: f64) -> Result<Self> {
        sp.validate()?;
        tp.validate()?;
        let mb = sp.m_b();
        let mi = mb.try_inverse().ok_or(Error::SingularMass)?;
        let mut a_b = Mat::zeros(6, 6);
        a_b.view_mut((0, 3), (3, 3)).fill_with_identity();
        let mk = -(mi * sp.k_b());
        let mc = -(mi * sp.c_b());
        let g = sp.gamma();
        let f = mi * g;
        let mut b_pf = Mat::zeros(6, 1);
        let mut b_pw = Mat::zeros(6, 1);
        let mut c_pv = Mat::zeros(1, 6);
        for i in 0..3 {
            for j in 0..3 {
                a_b[(3 + i, j)] = mk[(i, j)];
                a_b[(3 + i, 3 + j)] = mc[(i, j)];
            }
            b_pf[(3 + i, 0)] = f[i];
            b_pw[(3 + i, 0)] = -1.0;
            c_pv[(0, 3 + i)] = tp.k_u() * g[i];
        }
        let freqs = plant::natural_frequencies(&Mat::from_iterator(3, 3, mb.iter().copied()), &Mat::from_iterator(3, 3, sp.k_b().iter().copied()))?;
        let slowest = freqs.iter().copied().fold(f64::INFINITY, f64::min) * 2.0 * std::f64::consts::PI;
        let pole = -pole_factor * slowest;
        let l_p = linalg::ackermann_observer(&a_b, &c_pv, &linalg::repeated_root_poly(pole, 6))?;
        Ok(Self {
            a_b,
            b_pf,
            b_pw,
            c_pv,
            l_p,
            pole,
            x: [0.0; 6],
        })
    }

    pub fn error_dynamics(&self) -> Mat {
        &self.a_b - &self.l_p * &self.c_pv
    }

    pub fn derivative(&self, x: &[f64; 6], v: f64, f: f64, w: f64) -> [f64; 6] {
        let xv = Mat::from_column_slice(6, 1, x);
        let innov = v - (&self.c_pv * &xv)[(0, 0)];
        let d = &self.a_b * xv + &self.b_pf * f + &self.b_pw * w + &self.l_p * innov;
        let mut out = [0.0; 6];
        out.copy_from_slice(d.as_slice());
        out
    }

    /// Classical RK4 step with the measurements held over `dt`.
    pub fn step(&mut self, v: f64, f: f64, w: f64, dt: f64) {
        let x0 = self.x;
        let add = |a: &[f64; 6], b: &[f64; 6], h: f64| {
            let mut o = *a;
            for i in 0..6 {
                o[i] += h * b[i];
            }
            o
        };
        let k1 = self.derivative(&x0, v, f, w);
        let k2 = self.derivative(&add(&x0, &k1, dt / 2.0), v, f, w);
        let k3 = self.derivative(&add(&x0, &k2, dt / 2.0), v, f, w);
        let k4 = self.derivative(&add(&x0, &k3, dt), v, f, w);
        for i in 0..6 {
            self.x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
    }
}

/// Observer pair producing the design-model state estimate `[x_p; x_w]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Observers {
    pub plant: PlantObserver,
    pub disturbance: DisturbanceObserver,
}

impl Observers {
    pub fn new(tp: &TransducerParams, sp: &StructureParams, dp: &DisturbanceParams, pole_factor: f64) -> Result<Self> {
        Ok(Self {
            plant: PlantObserver::new(tp, sp, pole_factor)?,
            disturbance: DisturbanceObserver::new(dp)?,
        })
    }

    pub fn estimate(&self, w: f64) -> [f64; 8] {
        let mut x = [0.0; 8];
        x[..6].copy_from_slice(&self.plant.x);
        x[6..].copy_from_slice(&self.disturbance.estimate(w));
        x
    }

    pub fn step(&mut self, v: f64, f: f64, w: f64, dt: f64) {
        self.plant.step(v, f, w, dt);
        self.disturbance.step(w, dt);
    }
}

/// Default observer pole multiple of the slowest structural mode.
pub const DEFAULT_POLE_FACTOR: f64 = 5.0;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::*;
    use crate::plant::{build_design_model, DEFAULT_CURRENT_WEIGHT};
    use crate::synthesis::{self, SpsaOptions};
    use approx::assert_relative_eq;
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SupportedConeT};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::OnceLock;

    struct Fixture {
        model: DesignModel,
        a_eq: Mat,
        y: SpsaRealization,
        loss: LossParams,
        static_cd: f64,
        static_j: f64,
        static_a_eq: Mat,
    }

    fn fixture() -> &'static Fixture {
        static F: OnceLock<Fixture> = OnceLock::new();
        F.get_or_init(|| {
            let model = build_design_model(
                &TransducerParams::default(),
                &StructureParams::default(),
                &DisturbanceParams::default(),
                DEFAULT_CURRENT_WEIGHT,
            )
            .unwrap();
            let loss = LossParams::design();
            let s = synthesis::optimize_static_damping(&model, &loss).unwrap();
            let d = synthesis::design_spsa(&model, &loss, &s, &SpsaOptions::default()).unwrap();
            Fixture {
                a_eq: d.linearization.a_eq.clone(),
                y: d.controller,
                model,
                loss,
                static_cd: s.c_d,
                static_j: s.j,
                static_a_eq: s.linearization.a_eq,
            }
        })
    }

    fn plan() -> PgcPlan {
        let f = fixture();
        let lft = feasibility::lft_decompose(&f.y, None, &f.loss).unwrap();
        build_pgc_plan(&lft, &f.model, &f.a_eq, &f.loss).unwrap()
    }

    fn random_state(rng: &mut ChaCha8Rng, plan: &PgcPlan) -> DVector<f64> {
        // scale states roughly like their stationary standard deviations
        let n = plan.n_states();
        let a_cl = &plan.a_bar - &plan.b_u * &plan.z0 * &plan.c_v;
        let s = linalg::lyapunov(&a_cl, &(&plan.b_n * plan.b_n.transpose())).unwrap();
        DVector::from_fn(n, |i, _| s[(i, i)].sqrt() * (2.0 * rng.gen::<f64>() - 1.0) * 3.0)
    }

    #[test]
    fn two_performance_formulas_agree() {
        let f = fixture();
        let p = plan();
        let (_, j_cov) = crate::stochlin::covariance(&f.model, &f.a_eq, &f.y.state_space()).unwrap();
        assert_relative_eq!(p.j, j_cov, max_relative = 1e-8);
        assert!(p.residual <= 1e-9);
    }

    #[test]
    fn static_damping_plan_is_scalar() {
        let f = fixture();
        let y = synthesis::static_realization(f.static_cd, &f.loss).unwrap();
        let j = evaluate_j_spsa(&y, &f.model, &f.static_a_eq, &f.loss).unwrap();
        assert_relative_eq!(j, f.static_j, max_relative = 1e-8);
        let lft = feasibility::lft_decompose(&y, None, &f.loss).unwrap();
        let p = build_pgc_plan(&lft, &f.model, &f.static_a_eq, &f.loss).unwrap();
        assert_eq!(p.n_inputs(), 1);
        assert_eq!(p.w, Mat::from_element(1, 1, f.loss.r));
    }

    #[test]
    fn zero_controller_gives_open_loop() {
        let f = fixture();
        let y = synthesis::static_realization(0.0, &f.loss).unwrap();
        let j = evaluate_j_spsa(&y, &f.model, &f.static_a_eq, &f.loss).unwrap();
        let (_, open) = crate::stochlin::covariance(
            &f.model,
            &f.static_a_eq,
            &crate::lti::StateSpace::gain(Mat::zeros(1, 1)),
        )
        .unwrap();
        assert_relative_eq!(j, open, max_relative = 1e-10);
    }

    #[test]
    fn block_structure() {
        let p = plan();
        let nx = 8;
        let n = p.n_states();
        assert!(p.q.view((nx, 0), (n - nx, n)).iter().all(|&v| v == 0.0));
        assert!(p.q.view((0, nx), (n, n - nx)).iter().all(|&v| v == 0.0));
        assert!(p.m.view((1, 0), (p.n_inputs() - 1, p.n_inputs())).iter().all(|&v| v == 0.0));
        assert!(p.n.view((nx, 0), (n - nx, p.n_inputs())).iter().all(|&v| v == 0.0));
        assert!(p.n.view((0, 1), (n, p.n_inputs() - 1)).iter().all(|&v| v == 0.0));
        assert!(linalg::min_eigenvalue(&p.w) > 0.0);
        assert!(linalg::min_eigenvalue(&p.p_y) > -1e-12 * p.p_y.norm());
    }

    #[test]
    fn origin_gives_zero() {
        let p = plan();
        let out = p.control(&DVector::zeros(p.n_states()));
        assert!(out.u_bar.iter().all(|&u| u == 0.0));
    }

    #[test]
    fn constraint_active_and_dominates_spsa() {
        let p = plan();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let x = random_state(&mut rng, &p);
            let out = p.control(&x);
            assert!(!out.fallback);
            let scale = x.norm_squared();
            assert!(out.constraint <= 1e-9 * scale, "{}", out.constraint);
            assert!(out.constraint.abs() <= 1e-9 * scale, "{}", out.constraint);
            assert!(out.objective <= out.objective_spsa + 1e-12 * out.objective_spsa.abs());
            let r = p.root_polynomial(&x, out.mu).unwrap();
            assert!(r.abs() <= 1e-8 * scale.powi(2).max(scale), "{r}");
        }
    }

    #[test]
    fn explicit_gain_matches_transformed_solution() {
        let p = plan();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_state(&mut rng, &p);
        let out = p.control(&x);
        let u = -(p.gain(out.mu).unwrap() * &x);
        for (a, b) in u.iter().zip(&out.u_bar) {
            assert!((a - b).abs() <= 1e-9 * u.amax());
        }
    }

    /// Off-the-shelf conic solve of the per-step program.
    fn qcqp_reference(p: &PgcPlan, x: &DVector<f64>) -> f64 {
        let nu = p.n_inputs();
        let a = (&p.p_y * &p.b_u + &p.n).transpose() * x;
        let b = &p.c_v * x;
        let w_h = linalg::sym_sqrt(&p.w);
        let w_ih = linalg::sym_fn(&p.w, |v| 1.0 / v.sqrt());
        // ||W^1/2 u + W^-1/2 b / 2|| <= sqrt(b'W^-1 b) / 2
        let c = &w_ih * &b * 0.5;
        let r = c.norm();
        let mut rows = vec![Vec::new(); nu];
        for j in 0..nu {
            for i in 0..nu {
                if w_h[(i, j)] != 0.0 {
                    rows[j].push((1 + i, -w_h[(i, j)]));
                }
            }
        }
        let mut colptr = vec![0];
        let mut rowval = Vec::new();
        let mut nzval = Vec::new();
        for col in &rows {
            for &(i, v) in col {
                rowval.push(i);
                nzval.push(v);
            }
            colptr.push(rowval.len());
        }
        let amat = CscMatrix::new(nu + 1, nu, colptr, rowval, nzval);
        let mut bvec = vec![r];
        bvec.extend(c.iter());
        let mut pc = vec![0usize];
        let mut prow = Vec::new();
        let mut pval = Vec::new();
        for j in 0..nu {
            for i in 0..=j {
                if p.m[(i, j)] != 0.0 {
                    prow.push(i);
                    pval.push(p.m[(i, j)]);
                }
            }
            pc.push(prow.len());
        }
        let pm = CscMatrix::new(nu, nu, pc, prow, pval);
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .tol_gap_abs(1e-14)
            .tol_gap_rel(1e-12)
            .tol_feas(1e-12)
            .build()
            .unwrap();
        let cones = [SupportedConeT::SecondOrderConeT(nu + 1)];
        let q: Vec<f64> = a.iter().copied().collect();
        let mut s = DefaultSolver::new(&pm, &q, &amat, &bvec, &cones, settings).unwrap();
        s.solve();
        let u = DVector::from_column_slice(&s.solution.x);
        p.objective(x, &u)
    }

    #[test]
    fn matches_conic_solver() {
        let p = plan();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = random_state(&mut rng, &p);
            let out = p.control(&x);
            let reference = qcqp_reference(&p, &x);
            assert!(
                (out.objective - reference).abs() <= 1e-6 * reference.abs().max(1e-300),
                "{} vs {reference}",
                out.objective
            );
        }
    }

    #[test]
    fn positive_definite_weight_gives_unconstrained_minimizer() {
        let mut p = plan();
        let n = p.n_inputs();
        let mm = Mat::identity(n, n) * 1e3;
        p.m = mm.clone();
        let rebuilt = {
            let w_ih = linalg::sym_fn(&p.w, |x| 1.0 / x.sqrt());
            let e = linalg::sym_eigen(&(&w_ih * &mm * &w_ih));
            p.transform = &w_ih * &e.eigenvectors;
            p.lambda = e.eigenvalues.iter().copied().collect();
            p.lin_a = p.transform.transpose() * (p.b_u.transpose() * &p.p_y + p.n.transpose());
            p.lin_b = p.transform.transpose() * &p.c_v;
            p
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        for _ in 0..200 {
            let x = random_state(&mut rng, &rebuilt);
            let a = (&rebuilt.p_y * &rebuilt.b_u + &rebuilt.n).transpose() * &x;
            let u0 = -(linalg::inverse(&mm, "M").unwrap() * a);
            if rebuilt.constraint(&x, &u0) <= 0.0 {
                let out = rebuilt.control(&x);
                assert_eq!(out.mu, 0.0);
                for (a, b) in u0.iter().zip(&out.u_bar) {
                    assert!((a - b).abs() <= 1e-12 * u0.amax());
                }
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn disturbance_transform_is_companion() {
        let dp = DisturbanceParams::default();
        let o = DisturbanceObserver::new(&dp).unwrap();
        let (a, b, c) = plant::disturbance_matrices(&dp);
        let at = &o.t * a * &o.t_inv;
        let w = dp.omega;
        assert!((at - Mat::from_row_slice(2, 2, &[0.0, 1.0, -w * w, -2.0 * dp.zeta * w])).norm() < 1e-10);
        let bt = &o.t * b;
        assert_relative_eq!(bt[(0, 0)], 2.0 * dp.zeta * w * dp.sigma, max_relative = 1e-12);
        assert!(bt[(1, 0)].abs() < 1e-12);
        let ct = c * &o.t_inv;
        assert!((ct - Mat::from_row_slice(1, 2, &[1.0, 0.0])).norm() < 1e-12);
    }

    #[test]
    fn disturbance_observer_zero_input() {
        let mut o = DisturbanceObserver::new(&DisturbanceParams::default()).unwrap();
        for _ in 0..100 {
            o.step(0.0, 1e-3);
        }
        assert_eq!(o.estimate(0.0), [0.0, 0.0]);
    }

    #[test]
    fn disturbance_error_decays_exponentially() {
        let dp = DisturbanceParams::default();
        let mut o = DisturbanceObserver::new(&dp).unwrap();
        o.x2 = 1.0;
        let t = 0.7;
        for _ in 0..700 {
            o.step(0.0, 1e-3);
        }
        assert_relative_eq!(o.x2, (-2.0 * std::f64::consts::PI * t).exp(), max_relative = 1e-10);
    }

    #[test]
    fn disturbance_observer_tracks_sinusoid() {
        let dp = DisturbanceParams::default();
        let (a, _, c) = plant::disturbance_matrices(&dp);
        let mut o = DisturbanceObserver::new(&dp).unwrap();
        // a filter state trajectory driven by an input that makes w a 1 Hz
        // sinusoid is the homogeneous solution of a marginally damped copy;
        // instead integrate the true filter with a sinusoidal input
        let dt = 1e-4;
        let mut x = Mat::from_column_slice(2, 1, &[0.3, -0.2]);
        let b = Mat::from_column_slice(2, 1, &[0.0, 1.0]);
        let mut t = 0.0;
        while t < 2.0 {
            let n = (2.0 * std::f64::consts::PI * t).sin();
            let f = |x: &Mat| &a * x + &b * n;
            let k1 = f(&x);
            let k2 = f(&(&x + &k1 * (dt / 2.0)));
            let k3 = f(&(&x + &k2 * (dt / 2.0)));
            let k4 = f(&(&x + &k3 * dt));
            let w = (&c * &x)[(0, 0)];
            o.step(w, dt);
            x += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (dt / 6.0);
            t += dt;
        }
        let w = (&c * &x)[(0, 0)];
        let est = o.estimate(w);
        for i in 0..2 {
            assert!((est[i] - x[(i, 0)]).abs() <= 0.01 * x.amax(), "{i}: {} vs {}", est[i], x[(i, 0)]);
        }
    }

    #[test]
    fn plant_observer_poles_placed() {
        let tp = TransducerParams::default();
        let sp = StructureParams::default();
        let o = PlantObserver::new(&tp, &sp, DEFAULT_POLE_FACTOR).unwrap();
        let f_min = plant::natural_frequencies(
            &Mat::from_iterator(3, 3, sp.m_b().iter().copied()),
            &Mat::from_iterator(3, 3, sp.k_b().iter().copied()),
        )
        .unwrap()[0];
        let expected = -DEFAULT_POLE_FACTOR * f_min * 2.0 * std::f64::consts::PI;
        assert_relative_eq!(o.pole, expected, max_relative = 1e-14);
        // the characteristic polynomial is (s - p)^6; compare coefficients
        // because a 6-fold root is ill-conditioned as an eigenvalue
        let cp = linalg::char_poly(&o.error_dynamics());
        let target = linalg::repeated_root_poly(expected, 6);
        for (a, b) in cp.iter().zip(&target) {
            assert!((a - b).abs() <= 1e-6 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!(o.error_dynamics().complex_eigenvalues().iter().all(|e| e.re < 0.0));
    }

    /// Joint RK4 step of a bare-structure truth model and the observer, with
    /// the back-EMF evaluated from the truth at every stage.
    fn joint_step(o: &mut PlantObserver, truth: &mut [f64; 6], f: f64, w: f64, dt: f64) {
        let rhs = |x: &[f64; 12]| {
            let mut xt = [0.0; 6];
            let mut xo = [0.0; 6];
            xt.copy_from_slice(&x[..6]);
            xo.copy_from_slice(&x[6..]);
            let v = (&o.c_pv * Mat::from_column_slice(6, 1, &xt))[(0, 0)];
            let xtv = Mat::from_column_slice(6, 1, &xt);
            let dt_ = &o.a_b * xtv + &o.b_pf * f + &o.b_pw * w;
            let dob = o.derivative(&xo, v, f, w);
            let mut d = [0.0; 12];
            d[..6].copy_from_slice(dt_.as_slice());
            d[6..].copy_from_slice(&dob);
            d
        };
        let mut x = [0.0; 12];
        x[..6].copy_from_slice(truth);
        x[6..].copy_from_slice(&o.x);
        let add = |a: &[f64; 12], b: &[f64; 12], h: f64| {
            let mut r = *a;
            for i in 0..12 {
                r[i] += h * b[i];
            }
            r
        };
        let k1 = rhs(&x);
        let k2 = rhs(&add(&x, &k1, dt / 2.0));
        let k3 = rhs(&add(&x, &k2, dt / 2.0));
        let k4 = rhs(&add(&x, &k3, dt));
        for i in 0..12 {
            x[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        truth.copy_from_slice(&x[..6]);
        o.x.copy_from_slice(&x[6..]);
    }

    #[test]
    fn plant_observer_matched_start_stays_exact() {
        let mut o = PlantObserver::new(&TransducerParams::default(), &StructureParams::default(), DEFAULT_POLE_FACTOR).unwrap();
        let mut truth = [1e-3, -2e-3, 5e-3, 0.0, 1e-2, -1e-2];
        o.x = truth;
        let dt = 5e-4;
        for i in 0..4000 {
            let t = i as f64 * dt;
            joint_step(&mut o, &mut truth, 100.0 * (3.0 * t).sin(), 0.1 * (7.0 * t).cos(), dt);
        }
        let scale = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..6 {
            assert!((o.x[i] - truth[i]).abs() <= 1e-10 * scale, "{i}");
        }
    }

    #[test]
    fn plant_observer_tracks_step_force() {
        let mut o = PlantObserver::new(&TransducerParams::default(), &StructureParams::default(), DEFAULT_POLE_FACTOR).unwrap();
        let mut truth = [0.0; 6];
        o.x = [2e-4, -1e-4, 3e-4, 1e-3, 0.0, -1e-3];
        let dt = 5e-4;
        // 2% settling of a 6-fold real pole: p t ~ 13.2
        let steps = (13.5 / -o.pole / dt) as usize;
        for _ in 0..steps {
            joint_step(&mut o, &mut truth, 500.0, 0.0, dt);
        }
        let scale = truth.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..6 {
            assert!((o.x[i] - truth[i]).abs() <= 0.02 * scale, "{i}: {} vs {}", o.x[i], truth[i]);
        }
    }
}
