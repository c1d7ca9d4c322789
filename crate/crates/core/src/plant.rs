//! Structure + absorber + transducer models: linearized plant, disturbance
//! filter, augmented design model and the nonlinear equations of motion.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lti::StateSpace;
use crate::params::{DisturbanceParams, StructureParams, TransducerParams};

/// Weight on the transducer current in the performance output.
pub const DEFAULT_CURRENT_WEIGHT: f64 = 0.0286;

/// Linearized plant with the backdriven efficiency branch.
#[derive(Debug, Clone)]
pub struct LinearPlant {
    pub m_tilde: Matrix3<f64>,
    pub c_tilde: Matrix3<f64>,
    /// 6x6 state matrix for `x_p = [q; q']`.
    pub a_p: Mat,
    /// Current input column.
    pub b_pu: Mat,
    /// Base acceleration input column.
    pub b_pw: Mat,
    /// Coulomb friction input column (multiplies the sign of the stroke
    /// velocity).
    pub f_p: Mat,
    /// Stroke velocity row.
    pub g_pv: Mat,
    /// Back-EMF row, `k_u * g_pv`.
    pub c_pv: Mat,
    pub k_u: f64,
}

pub fn build_linear_plant(tp: &TransducerParams, sp: &StructureParams) -> Result<LinearPlant> {
    tp.validate()?;
    sp.validate()?;
    let g = sp.gamma();
    let ggt = g * g.transpose();
    let scale = 1.0 / (tp.eta * tp.lead * tp.lead);
    let m_tilde = sp.m_b() + ggt * (tp.j_t * scale);
    let c_tilde = sp.c_b() + ggt * (tp.b_t * scale);
    let mi = m_tilde.try_inverse().ok_or(Error::SingularMass)?;
    let k_u = tp.k_u();

    let mut a_p = Mat::zeros(6, 6);
    a_p.view_mut((0, 3), (3, 3)).fill_with_identity();
    let mk = -(mi * sp.k_b());
    let mc = -(mi * c_tilde);
    for i in 0..3 {
        for j in 0..3 {
            a_p[(3 + i, j)] = mk[(i, j)];
            a_p[(3 + i, 3 + j)] = mc[(i, j)];
        }
    }
    // The electromagnetic force passes through the backdriven efficiency
    // factor 1/eta, like the rotor inertia and damping.
    let bu = mi * g * (k_u / tp.eta);
    let bw = -(mi * sp.m_b() * Vector3::repeat(1.0));
    let fp = -(mi * g * tp.f_c);
    let col = |v: Vector3<f64>| {
        let mut m = Mat::zeros(6, 1);
        for i in 0..3 {
            m[(3 + i, 0)] = v[i];
        }
        m
    };
    let mut g_pv = Mat::zeros(1, 6);
    for i in 0..3 {
        g_pv[(0, 3 + i)] = g[i];
    }
    Ok(LinearPlant {
        m_tilde,
        c_tilde,
        a_p,
        b_pu: col(bu),
        b_pw: col(bw),
        f_p: col(fp),
        c_pv: &g_pv * k_u,
        g_pv,
        k_u,
    })
}

impl LinearPlant {
    /// Inputs `(u, sgn, w)`, outputs `(v, abs. accel. of DOF 1, DOF 2)`.
    pub fn state_space(&self) -> StateSpace {
        let b = linalg::block(&[&[&self.b_pu, &self.f_p, &self.b_pw]]);
        let mut c = Mat::zeros(3, 6);
        let mut d = Mat::zeros(3, 3);
        c.row_mut(0).copy_from(&self.c_pv.row(0));
        for i in 0..2 {
            c.row_mut(1 + i).copy_from(&self.a_p.row(3 + i));
            for j in 0..3 {
                d[(1 + i, j)] = b[(3 + i, j)];
            }
            d[(1 + i, 2)] += 1.0;
        }
        StateSpace::new(self.a_p.clone(), b, c, d).expect("consistent plant dimensions")
    }
}

/// Filter matrices `(A_w, B_w, C_w)` shaping white noise into base
/// acceleration.
pub fn disturbance_matrices(dp: &DisturbanceParams) -> (Mat, Mat, Mat) {
    let (w, z, s) = (dp.omega, dp.zeta, dp.sigma);
    let a = Mat::from_row_slice(2, 2, &[0.0, 1.0, -w * w, -2.0 * z * w]);
    let b = Mat::from_row_slice(2, 1, &[0.0, s]);
    let c = Mat::from_row_slice(1, 2, &[w * w, 2.0 * z * w]);
    (a, b, c)
}

pub fn build_disturbance_filter(dp: &DisturbanceParams) -> Result<StateSpace> {
    dp.validate()?;
    let (a, b, c) = disturbance_matrices(dp);
    StateSpace::new(a, b, c, Mat::zeros(1, 1))
}

/// Augmented 8-state model `x = [x_p; x_w]` driven by the current `u` and
/// unit-intensity white noise `n`, with colocated output `v` and
/// performance output `z`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DesignModel {
    pub a: Mat,
    pub b_u: Mat,
    pub b_n: Mat,
    /// Friction input column.
    pub f: Mat,
    /// Stroke velocity row.
    pub g_v: Mat,
    pub c_v: Mat,
    pub c_z: Mat,
    pub d_zu: Mat,
    pub q: Mat,
    pub m: Mat,
    pub n: Mat,
}

pub fn build_design_model(
    tp: &TransducerParams,
    sp: &StructureParams,
    dp: &DisturbanceParams,
    current_weight: f64,
) -> Result<DesignModel> {
    dp.validate()?;
    let lp = build_linear_plant(tp, sp)?;
    let (aw, bw, cw) = disturbance_matrices(dp);
    let a = linalg::block(&[&[&lp.a_p, &(&lp.b_pw * &cw)], &[&Mat::zeros(2, 6), &aw]]);
    let b_u = linalg::block(&[&[&lp.b_pu], &[&Mat::zeros(2, 1)]]);
    let b_n = linalg::block(&[&[&Mat::zeros(6, 1)], &[&bw]]);
    let f = linalg::block(&[&[&lp.f_p], &[&Mat::zeros(2, 1)]]);
    let g_v = linalg::block(&[&[&lp.g_pv, &Mat::zeros(1, 2)]]);
    let c_v = &g_v * lp.k_u;

    // Absolute acceleration = relative acceleration row + base acceleration.
    let mut c_z = Mat::zeros(3, 8);
    let mut d_zu = Mat::zeros(3, 1);
    for i in 0..2 {
        c_z.row_mut(i).copy_from(&a.row(3 + i));
        c_z[(i, 6)] += cw[(0, 0)];
        c_z[(i, 7)] += cw[(0, 1)];
        d_zu[(i, 0)] = b_u[(3 + i, 0)];
    }
    d_zu[(2, 0)] = current_weight;

    let q = c_z.transpose() * &c_z;
    let m = d_zu.transpose() * &d_zu;
    let n = c_z.transpose() * &d_zu;
    Ok(DesignModel {
        a,
        b_u,
        b_n,
        f,
        g_v,
        c_v,
        c_z,
        d_zu,
        q,
        m,
        n,
    })
}

impl DesignModel {
    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    /// Realization with inputs `(u, n)` and outputs `(v, z)`; friction is
    /// omitted.
    pub fn state_space(&self) -> StateSpace {
        self.state_space_with(&self.a)
    }

    /// Same realization with the state matrix replaced (e.g. by a
    /// stochastically linearized one).
    pub fn state_space_with(&self, a: &Mat) -> StateSpace {
        let b = linalg::block(&[&[&self.b_u, &self.b_n]]);
        let c = linalg::block(&[&[&self.c_v], &[&self.c_z]]);
        let mut d = Mat::zeros(4, 2);
        for i in 0..3 {
            d[(1 + i, 0)] = self.d_zu[(i, 0)];
        }
        StateSpace::new(a.clone(), b, c, d).expect("consistent design model")
    }

    /// Open-loop map from current to back-EMF using state matrix `a`.
    pub fn p_uv(&self, a: &Mat) -> StateSpace {
        StateSpace::new(a.clone(), self.b_u.clone(), self.c_v.clone(), Mat::zeros(1, 1))
            .expect("consistent design model")
    }
}

/// How the efficiency factor is evaluated in the nonlinear plant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum EfficiencyMode {
    /// Logistic blend between `eta` (motoring) and `1/eta` (backdriven) with
    /// power scale `p_eps` in W.
    Smooth { p_eps: f64 },
    /// Constant factor.
    Fixed(f64),
}

/// One evaluation of the nonlinear equations of motion.
#[derive(Debug, Clone, Copy)]
pub struct RhsEval {
    pub dx: [f64; 6],
    /// Efficiency factor used for the returned derivative.
    pub h: f64,
    /// Mechanical power delivered to the nut, W.
    pub p: f64,
    /// Total transducer force on the structure, N.
    pub force: f64,
}

/// Nonlinear structure + transducer dynamics with smoothed friction sign and
/// efficiency switching.
#[derive(Debug, Clone)]
pub struct NonlinearPlant {
    m_diag: Vector3<f64>,
    c_b: Matrix3<f64>,
    k_b: Matrix3<f64>,
    gamma: Vector3<f64>,
    /// Base acceleration load per unit w, `M_b * 1`.
    base_load: Vector3<f64>,
    inertia: f64,
    viscous: f64,
    k_u: f64,
    f_c: f64,
    eta: f64,
    eps: f64,
    mode: EfficiencyMode,
}

impl NonlinearPlant {
    pub fn new(
        tp: &TransducerParams,
        sp: &StructureParams,
        eps: f64,
        mode: EfficiencyMode,
    ) -> Result<Self> {
        tp.validate()?;
        sp.validate()?;
        if !(eps > 0.0) {
            return Err(Error::InvalidParameter(format!("friction smoothing {eps}")));
        }
        match mode {
            EfficiencyMode::Smooth { p_eps } if !(p_eps > 0.0) => {
                return Err(Error::InvalidParameter(format!("efficiency smoothing {p_eps}")))
            }
            EfficiencyMode::Fixed(h) if !(h > 0.0) => {
                return Err(Error::InvalidParameter(format!("efficiency factor {h}")))
            }
            _ => {}
        }
        let m = sp.m_b();
        let m_diag = m.diagonal();
        if m_diag.iter().any(|&x| !(x > 0.0)) {
            return Err(Error::SingularMass);
        }
        let l2 = tp.lead * tp.lead;
        Ok(Self {
            m_diag,
            c_b: sp.c_b(),
            k_b: sp.k_b(),
            gamma: sp.gamma(),
            base_load: m * Vector3::repeat(1.0),
            inertia: tp.j_t / l2,
            viscous: tp.b_t / l2,
            k_u: tp.k_u(),
            f_c: tp.f_c,
            eta: tp.eta,
            eps,
            mode,
        })
    }

    pub fn k_u(&self) -> f64 {
        self.k_u
    }

    pub fn gamma(&self) -> Vector3<f64> {
        self.gamma
    }

    /// Smoothed sign of the stroke velocity.
    pub fn sgn(&self, s: f64) -> f64 {
        (s / self.eps).tanh()
    }

    /// Efficiency factor as a function of nut power.
    pub fn efficiency(&self, p: f64) -> f64 {
        match self.mode {
            EfficiencyMode::Fixed(h) => h,
            EfficiencyMode::Smooth { p_eps } => {
                let sig = 1.0 / (1.0 + (-p / p_eps).exp());
                1.0 / self.eta + (self.eta - 1.0 / self.eta) * sig
            }
        }
    }

    /// Initial efficiency guess before any power has been evaluated.
    pub fn initial_efficiency(&self) -> f64 {
        match self.mode {
            EfficiencyMode::Fixed(h) => h,
            EfficiencyMode::Smooth { .. } => 1.0 / self.eta,
        }
    }

    /// `(M_b + c G G') a = r` by Sherman-Morrison on the diagonal mass.
    fn solve_mass(&self, c: f64, r: &Vector3<f64>) -> Vector3<f64> {
        let dinv_r = r.component_div(&self.m_diag);
        let dinv_g = self.gamma.component_div(&self.m_diag);
        let denom = 1.0 + c * self.gamma.dot(&dinv_g);
        dinv_r - dinv_g * (c * self.gamma.dot(&dinv_r) / denom)
    }

    fn accel(&self, q: &Vector3<f64>, qd: &Vector3<f64>, u: f64, w: f64, h: f64) -> Vector3<f64> {
        let xt = self.gamma.dot(qd);
        let fe = self.k_u * u - self.viscous * xt;
        let r = self.gamma * (h * fe - self.f_c * self.sgn(xt))
            - self.base_load * w
            - self.c_b * qd
            - self.k_b * q;
        self.solve_mass(h * self.inertia, &r)
    }

    /// State derivative for `x = [q; q']`, current `u` (A) and base
    /// acceleration `w` (m/s^2). `h_prev` seeds the efficiency factor; one
    /// correction from the resulting nut power follows.
    pub fn rhs(&self, x: &[f64; 6], u: f64, w: f64, h_prev: f64) -> RhsEval {
        let q = Vector3::new(x[0], x[1], x[2]);
        let qd = Vector3::new(x[3], x[4], x[5]);
        let xt = self.gamma.dot(&qd);
        let nut_force = |qdd: &Vector3<f64>| {
            self.k_u * u - self.inertia * self.gamma.dot(qdd) - self.viscous * xt
        };
        let h = match self.mode {
            EfficiencyMode::Fixed(h) => h,
            EfficiencyMode::Smooth { .. } => {
                let a0 = self.accel(&q, &qd, u, w, h_prev);
                self.efficiency(nut_force(&a0) * xt)
            }
        };
        let qdd = self.accel(&q, &qd, u, w, h);
        let fn_ = nut_force(&qdd);
        RhsEval {
            dx: [qd[0], qd[1], qd[2], qdd[0], qdd[1], qdd[2]],
            h,
            p: fn_ * xt,
            force: h * fn_ - self.f_c * self.sgn(xt),
        }
    }
}

/// Natural frequencies (Hz) of an undamped structure `(M, K)`.
pub fn natural_frequencies(m: &Mat, k: &Mat) -> Result<Vec<f64>> {
    let mi_sqrt = linalg::sym_fn(m, |x| 1.0 / x.sqrt());
    let kk = &mi_sqrt * k * &mi_sqrt;
    let mut f: Vec<f64> = linalg::sym_eigen(&kk)
        .eigenvalues
        .iter()
        .map(|&l| l.max(0.0).sqrt() / (2.0 * std::f64::consts::PI))
        .collect();
    f.sort_by(f64::total_cmp);
    Ok(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn defaults() -> (TransducerParams, StructureParams, DisturbanceParams) {
        Default::default()
    }

    #[test]
    fn massless_transducer_limit() {
        let (mut tp, sp, _) = defaults();
        tp.j_t = 1e-300;
        tp.b_t = 1e-300;
        tp.eta = 1.0;
        let lp = build_linear_plant(&tp, &sp).unwrap();
        assert!((lp.m_tilde - sp.m_b()).amax() < 1e-200);
        assert!((lp.c_tilde - sp.c_b()).amax() < 1e-200);
    }

    #[test]
    fn structure_without_absorber_frequencies() {
        let m = Mat::from_row_slice(2, 2, &[75000.0, 0.0, 0.0, 75000.0]);
        let k = Mat::from_row_slice(2, 2, &[6e6, -3e6, -3e6, 3e6]);
        let f = natural_frequencies(&m, &k).unwrap();
        assert!((f[0] - 0.62).abs() < 0.005, "{f:?}");
        assert!((f[1] - 1.63).abs() < 0.005, "{f:?}");
    }

    #[test]
    fn absorber_tuning() {
        let f = (120000.0f64 / 3000.0).sqrt() / (2.0 * std::f64::consts::PI);
        assert_relative_eq!(f, 1.0066, max_relative = 1e-4);
    }

    #[test]
    fn linear_plant_stable_with_three_pairs() {
        let (tp, sp, _) = defaults();
        let lp = build_linear_plant(&tp, &sp).unwrap();
        let ev = linalg::eigenvalues(&lp.a_p);
        assert!(ev.iter().all(|e| e.re < 0.0));
        assert_eq!(ev.iter().filter(|e| e.im > 0.0).count(), 3);
    }

    #[test]
    fn disturbance_filter_entries_and_dc_gain() {
        let dp = DisturbanceParams::default();
        let w = build_disturbance_filter(&dp).unwrap();
        assert_relative_eq!(w.a()[(1, 0)], -39.478, max_relative = 1e-4);
        assert_relative_eq!(w.a()[(1, 1)], -std::f64::consts::TAU, max_relative = 1e-12);
        assert_relative_eq!(w.dc_gain().unwrap()[(0, 0)], dp.sigma, max_relative = 1e-12);
    }

    #[test]
    fn disturbance_spectrum_peaks_near_one_hz() {
        let w = build_disturbance_filter(&DisturbanceParams::default()).unwrap();
        let mut best = (0.0, 0.0);
        for i in 1..400 {
            let f = i as f64 * 0.01;
            let g = w.freq_response(2.0 * std::f64::consts::PI * f).unwrap()[(0, 0)].norm();
            if g > best.1 {
                best = (f, g);
            }
        }
        assert!((best.0 - 1.0).abs() < 0.35, "peak at {} Hz", best.0);
    }

    #[test]
    fn design_model_weights_and_equilibrium() {
        let (tp, sp, dp) = defaults();
        let dm = build_design_model(&tp, &sp, &dp, DEFAULT_CURRENT_WEIGHT).unwrap();
        assert_eq!(dm.d_zu[(2, 0)], 0.0286);
        assert_eq!(dm.n_states(), 8);
        let ss = dm.state_space();
        // zero state and input gives zero output
        let y = ss.c() * Mat::zeros(8, 1) + ss.d() * Mat::zeros(2, 1);
        assert_eq!(y.amax(), 0.0);
        assert_relative_eq!(dm.q, dm.c_z.transpose() * &dm.c_z);
    }

    #[test]
    fn static_force_displacement() {
        let sp = StructureParams::default();
        let tp = TransducerParams::default();
        let q = sp.k_b().try_inverse().unwrap() * sp.gamma();
        // unit force on the transducer channel is -F_p / f_c
        let lp = build_linear_plant(&tp, &sp).unwrap();
        let x = linalg::solve(&lp.a_p, &(&lp.f_p / tp.f_c), "test").unwrap();
        for i in 0..3 {
            assert_relative_eq!(x[(i, 0)], q[i], max_relative = 1e-9);
            assert!(x[(3 + i, 0)].abs() < 1e-15);
        }
    }

    #[test]
    fn rest_equilibrium() {
        let (tp, sp, _) = defaults();
        let np = NonlinearPlant::new(&tp, &sp, 1e-4, EfficiencyMode::Smooth { p_eps: 1e-3 }).unwrap();
        let r = np.rhs(&[0.0; 6], 0.0, 0.0, np.initial_efficiency());
        assert!(r.dx.iter().all(|&d| d == 0.0));
    }

    #[test]
    fn nonlinear_reduces_to_linear() {
        let (mut tp, sp, _) = defaults();
        tp.f_c = 0.0;
        let lp = build_linear_plant(&tp, &sp).unwrap();
        let np = NonlinearPlant::new(&tp, &sp, 1e-4, EfficiencyMode::Fixed(1.0 / tp.eta)).unwrap();
        let x = [1e-3, -2e-3, 5e-3, 0.01, -0.03, 0.2];
        let (u, w) = (0.7, -0.05);
        let r = np.rhs(&x, u, w, 1.0 / tp.eta);
        let xv = Mat::from_column_slice(6, 1, &x);
        let lin = &lp.a_p * xv + &lp.b_pu * u + &lp.b_pw * w;
        for i in 0..6 {
            assert_relative_eq!(r.dx[i], lin[(i, 0)], epsilon = 1e-12, max_relative = 1e-12);
        }
    }

    #[test]
    fn backdriven_branch_active() {
        let (tp, sp, _) = defaults();
        let np = NonlinearPlant::new(&tp, &sp, 1e-4, EfficiencyMode::Smooth { p_eps: 1e-3 }).unwrap();
        let x = [0.0, 0.0, 0.0, 0.0, 0.0, 0.2];
        let r = np.rhs(&x, 0.0, 0.0, np.initial_efficiency());
        assert!(r.p < 0.0);
        assert_relative_eq!(r.h, 1.0 / tp.eta, max_relative = 1e-9);
    }

    #[test]
    fn mechanical_power_identity() {
        let (tp, sp, _) = defaults();
        let eps = 1e-4;
        let np = NonlinearPlant::new(&tp, &sp, eps, EfficiencyMode::Smooth { p_eps: 1e-3 }).unwrap();
        let x = [1e-3, 2e-3, -1e-3, 0.02, -0.01, 0.05];
        let r = np.rhs(&x, 0.4, 0.1, np.initial_efficiency());
        let xt = sp.gamma().dot(&Vector3::new(x[3], x[4], x[5]));
        let pm = r.force * xt;
        assert_relative_eq!(pm, r.h * r.p - tp.f_c * np.sgn(xt) * xt, max_relative = 1e-12);
        assert!((pm - (r.h * r.p - tp.f_c * xt.abs())).abs() < tp.f_c * eps);
    }

    #[test]
    fn energy_audit_over_cycles() {
        let (tp, sp, _) = defaults();
        let np = NonlinearPlant::new(&tp, &sp, 1e-4, EfficiencyMode::Smooth { p_eps: 1e-3 }).unwrap();
        let (m, c, k, g) = (sp.m_b(), sp.c_b(), sp.k_b(), sp.gamma());
        let energy = |x: &[f64; 6]| {
            let q = Vector3::new(x[0], x[1], x[2]);
            let qd = Vector3::new(x[3], x[4], x[5]);
            0.5 * qd.dot(&(m * qd)) + 0.5 * q.dot(&(k * q))
        };
        let dt = 1e-4;
        let mut x = [0.0; 6];
        let mut h = np.initial_efficiency();
        let two_pi = 2.0 * std::f64::consts::PI;
        let inputs = |t: f64| (0.3 * (two_pi * 0.7 * t).sin(), 0.5 * (two_pi * t).sin());
        let powers = |x: &[f64; 6], r: &RhsEval, w: f64| {
            let qd = Vector3::new(x[3], x[4], x[5]);
            let base = -qd.dot(&(m * Vector3::repeat(1.0))) * w;
            (base, r.force * g.dot(&qd), qd.dot(&(c * qd)))
        };
        let e0 = energy(&x);
        let (mut w_in, mut w_tr, mut w_d) = (0.0, 0.0, 0.0);
        let n = 20000; // two seconds
        let mut prev = {
            let (u, w) = inputs(0.0);
            let r = np.rhs(&x, u, w, h);
            powers(&x, &r, w)
        };
        for i in 0..n {
            let t = i as f64 * dt;
            let (u, w) = inputs(t);
            let (u2, w2) = inputs(t + dt / 2.0);
            let (u3, w3) = inputs(t + dt);
            let k1 = np.rhs(&x, u, w, h);
            let add = |x: &[f64; 6], d: &[f64; 6], s: f64| {
                let mut y = *x;
                for j in 0..6 {
                    y[j] += s * d[j];
                }
                y
            };
            let k2 = np.rhs(&add(&x, &k1.dx, dt / 2.0), u2, w2, k1.h);
            let k3 = np.rhs(&add(&x, &k2.dx, dt / 2.0), u2, w2, k2.h);
            let k4 = np.rhs(&add(&x, &k3.dx, dt), u3, w3, k3.h);
            for j in 0..6 {
                x[j] += dt / 6.0 * (k1.dx[j] + 2.0 * k2.dx[j] + 2.0 * k3.dx[j] + k4.dx[j]);
            }
            h = k4.h;
            let r = np.rhs(&x, u3, w3, h);
            let now = powers(&x, &r, w3);
            w_in += 0.5 * dt * (prev.0 + now.0);
            w_tr += 0.5 * dt * (prev.1 + now.1);
            w_d += 0.5 * dt * (prev.2 + now.2);
            prev = now;
        }
        let de = energy(&x) - e0;
        let scale = w_in.abs() + w_tr.abs() + w_d.abs();
        assert!(
            (w_in + w_tr - w_d - de).abs() < 5e-3 * scale,
            "in {w_in} transducer {w_tr} damping {w_d} dE {de}"
        );
    }
}
