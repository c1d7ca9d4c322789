//! Self-powered feasibility: LMI certificates for linear admittances, the
//! equivalent LFT factorization and its pointwise conditions, and the
//! storage-side admissibility margin.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::lti::StateSpace;
use crate::params::LossParams;
use crate::sdp::{self, Sdp};

/// Relative tolerance for semidefinite inequalities.
pub const LMI_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Certificate {
    pub p: Mat,
    pub x: Mat,
}

/// Linear controller `x' = A x + B v, -u = C x + D v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpsaRealization {
    pub a: Mat,
    pub b: Mat,
    pub c: Mat,
    pub d: Mat,
    #[serde(default)]
    pub certificate: Option<Certificate>,
}

impl SpsaRealization {
    pub fn new(a: Mat, b: Mat, c: Mat, d: Mat) -> Result<Self> {
        // reuse the state-space dimension checks
        StateSpace::new(a.clone(), b.clone(), c.clone(), d.clone())?;
        if d.nrows() != d.ncols() {
            return Err(Error::Dimension("admittance must be square".into()));
        }
        Ok(Self {
            a,
            b,
            c,
            d,
            certificate: None,
        })
    }

    /// Memoryless damping `u = -c_d v`.
    pub fn static_gain(c_d: f64) -> Self {
        Self {
            a: Mat::zeros(0, 0),
            b: Mat::zeros(0, 1),
            c: Mat::zeros(1, 0),
            d: Mat::from_element(1, 1, c_d),
            certificate: None,
        }
    }

    pub fn n_states(&self) -> usize {
        self.a.nrows()
    }

    pub fn n_ports(&self) -> usize {
        self.d.nrows()
    }

    pub fn state_space(&self) -> StateSpace {
        StateSpace::new(self.a.clone(), self.b.clone(), self.c.clone(), self.d.clone())
            .expect("validated on construction")
    }

    pub fn with_certificate(mut self, cert: Certificate) -> Self {
        self.certificate = Some(cert);
        self
    }
}

/// `A'P + PA + (2/tau_s) P + X + X'`.
pub fn lmi_state(a: &Mat, p: &Mat, x: &Mat, tau_s: f64) -> Mat {
    linalg::sym(&(a.transpose() * p + p * a + p * (2.0 / tau_s) + x + x.transpose()))
}

/// The 4x4 block port inequality.
pub fn lmi_port(y: &SpsaRealization, p: &Mat, x: &Mat, loss: &LossParams) -> Mat {
    let k = y.n_states();
    let m = y.n_ports();
    let half_rinv = Mat::identity(m, m) * (0.5 / loss.r);
    let pb = p * &y.b;
    let xt = x.transpose();
    let m11 = -(x + &xt);
    let m14 = -&xt;
    let m22 = -&half_rinv;
    let m23 = y.d.transpose() - &half_rinv;
    let m44 = -(p * (0.5 / loss.tau_r));
    let out = linalg::block(&[
        &[&m11, &pb, &y.c.transpose(), &m14],
        &[&pb.transpose(), &m22, &m23, &pb.transpose()],
        &[&y.c, &m23.transpose(), &m22, &Mat::zeros(m, k)],
        &[&m14.transpose(), &pb, &Mat::zeros(k, m), &m44],
    ]);
    linalg::sym(&out)
}

/// Largest eigenvalues of both inequalities and smallest eigenvalue of `P`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LmiMargins {
    pub state_max_eig: f64,
    pub port_max_eig: f64,
    pub p_min_eig: f64,
    /// Acceptance threshold on the largest eigenvalues.
    pub tolerance: f64,
}

impl LmiMargins {
    pub fn ok(&self) -> bool {
        self.state_max_eig <= self.tolerance
            && self.port_max_eig <= self.tolerance
            && (self.p_min_eig > 0.0 || self.p_min_eig == f64::INFINITY)
    }

    /// Worst (largest) eigenvalue over both inequalities; negative means
    /// strictly feasible.
    pub fn worst(&self) -> f64 {
        self.state_max_eig.max(self.port_max_eig)
    }
}

pub fn lmi_margins(y: &SpsaRealization, cert: &Certificate, loss: &LossParams) -> LmiMargins {
    let pn = if cert.p.nrows() == 0 {
        0.0
    } else {
        linalg::max_eigenvalue(&cert.p).abs()
    };
    let state = if y.n_states() == 0 {
        f64::NEG_INFINITY
    } else {
        linalg::max_eigenvalue(&lmi_state(&y.a, &cert.p, &cert.x, loss.tau_s))
    };
    LmiMargins {
        state_max_eig: state,
        port_max_eig: linalg::max_eigenvalue(&lmi_port(y, &cert.p, &cert.x, loss)),
        p_min_eig: linalg::min_eigenvalue(&cert.p),
        tolerance: LMI_EPS * pn.max(1.0),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertifyReport {
    pub certificate: Certificate,
    pub margins: LmiMargins,
    /// Optimal uniform margin found by the search.
    pub search_margin: f64,
}

/// Searches for `(P, X)` maximizing a uniform margin on both inequalities
/// and re-verifies the result by eigenvalues.
pub fn certify_spsa(y: &SpsaRealization, loss: &LossParams) -> Result<CertifyReport> {
    loss.validate()?;
    let k = y.n_states();
    if k == 0 {
        let cert = Certificate {
            p: Mat::zeros(0, 0),
            x: Mat::zeros(0, 0),
        };
        let margins = lmi_margins(y, &cert, loss);
        if !margins.ok() {
            return Err(Error::SolverInfeasible(format!(
                "memoryless gain violates the port inequality (max eigenvalue {:.3e})",
                margins.port_max_eig
            )));
        }
        return Ok(CertifyReport {
            certificate: cert,
            search_margin: -margins.port_max_eig,
            margins,
        });
    }
    let np = sdp::upper_len(k);
    let nx = k * k;
    let nv = np + nx + 1;
    let unpack = |v: &[f64]| {
        let p = sdp::sym_from_upper(k, &v[..np]);
        let x = Mat::from_row_slice(k, k, &v[np..np + nx]);
        (p, x, v[np + nx])
    };
    let mut prob = Sdp::new(nv);
    let mut c = vec![0.0; nv];
    c[nv - 1] = -1.0;
    prob.set_objective(None, c);
    {
        let a = y.a.clone();
        let tau_s = loss.tau_s;
        prob.add_lmi(move |v| {
            let (p, x, t) = unpack(v);
            lmi_state(&a, &p, &x, tau_s) + Mat::identity(k, k) * t
        });
    }
    {
        let yy = y.clone();
        let ll = loss.clone();
        let dim = 2 * k + 2 * y.n_ports();
        prob.add_lmi(move |v| {
            let (p, x, t) = unpack(v);
            lmi_port(&yy, &p, &x, &ll) + Mat::identity(dim, dim) * t
        });
    }
    prob.add_lmi(move |v| {
        let (p, _, t) = unpack(v);
        Mat::identity(k, k) * t - p
    });
    let mut bound = vec![0.0; nv];
    bound[nv - 1] = 1.0;
    prob.add_le(bound, 1.0);
    let sol = prob.solve()?;
    let (p, x, t) = unpack(&sol.x);
    let cert = Certificate { p, x };
    let margins = lmi_margins(y, &cert, loss);
    if t < -margins.tolerance {
        return Err(Error::SolverInfeasible(format!(
            "no certificate: best uniform margin {t:.3e}"
        )));
    }
    if !margins.ok() {
        return Err(Error::CertificateRejected(format!(
            "eigenvalues {:.3e} / {:.3e}, min eig(P) {:.3e}",
            margins.state_max_eig, margins.port_max_eig, margins.p_min_eig
        )));
    }
    Ok(CertifyReport {
        certificate: cert,
        margins,
        search_margin: t,
    })
}

/// LFT factorization `(G, Z)` of a certified admittance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LftDecomposition {
    pub a_g: Mat,
    pub b_g: Mat,
    pub c_g: Mat,
    /// `[[Z11, Z12], [Z21, Z22]]` with `Z11` the port block.
    pub z: Mat,
    pub n_ports: usize,
}

impl LftDecomposition {
    pub fn n_states(&self) -> usize {
        self.a_g.nrows()
    }
    pub fn z11(&self) -> Mat {
        self.z.view((0, 0), (self.n_ports, self.n_ports)).into_owned()
    }
    pub fn z12(&self) -> Mat {
        self.z.view((0, self.n_ports), (self.n_ports, self.n_states())).into_owned()
    }
    pub fn z21(&self) -> Mat {
        self.z.view((self.n_ports, 0), (self.n_states(), self.n_ports)).into_owned()
    }
    pub fn z22(&self) -> Mat {
        let k = self.n_states();
        self.z.view((self.n_ports, self.n_ports), (k, k)).into_owned()
    }

    /// `(A_Y, B_Y, C_Y, D_Y)` recovered from the factorization.
    pub fn reconstruct(&self) -> (Mat, Mat, Mat, Mat) {
        let a = &self.a_g - &self.b_g * self.z22() * &self.c_g;
        let b = -(&self.b_g * self.z21());
        let c = self.z12() * &self.c_g;
        (a, b, c, self.z11())
    }
}

pub fn lft_decompose(
    y: &SpsaRealization,
    v: Option<&Mat>,
    loss: &LossParams,
) -> Result<LftDecomposition> {
    let cert = y.certificate.as_ref().ok_or(Error::MissingCertificate)?;
    let k = y.n_states();
    let m = y.n_ports();
    let v = v.cloned().unwrap_or_else(|| Mat::identity(k, k));
    if v.shape() != (k, k) {
        return Err(Error::Dimension(format!("V is {:?}, expected {k}x{k}", v.shape())));
    }
    let vr = (&v * v.transpose() - Mat::identity(k, k)).norm();
    if vr > 1e-10 {
        return Err(Error::NonUnitaryV(vr));
    }
    let mut z = Mat::zeros(m + k, m + k);
    z.view_mut((0, 0), (m, m)).copy_from(&y.d);
    if k == 0 {
        return Ok(LftDecomposition {
            a_g: Mat::zeros(0, 0),
            b_g: Mat::zeros(0, 0),
            c_g: Mat::zeros(0, 0),
            z,
            n_ports: m,
        });
    }
    let p = &cert.p;
    let x = &cert.x;
    let eig = linalg::sym_eigen(p);
    if eig.eigenvalues.min() <= 0.0 {
        return Err(Error::CertificateRejected("P is not positive definite".into()));
    }
    let u = eig.eigenvectors.clone();
    let psi_h = Mat::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    let psi_mh = Mat::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l.sqrt()));
    let pinv = linalg::inverse(p, "certificate P")?;
    let tr = loss.tau_r;
    let s = tr.sqrt();

    let a_g = &y.a + &pinv * x;
    let b_g = &pinv * &u * &psi_h * &v / s;
    let c_g = v.transpose() * &psi_h * u.transpose() / s;
    let w = &u * &psi_mh * &v; // U Psi^-1/2 V
    let z12 = &y.c * &w * s;
    let z21 = -(w.transpose() * p * &y.b) * s;
    let z22 = w.transpose() * x * &w * tr;
    z.view_mut((0, m), (m, k)).copy_from(&z12);
    z.view_mut((m, 0), (k, m)).copy_from(&z21);
    z.view_mut((m, m), (k, k)).copy_from(&z22);
    Ok(LftDecomposition {
        a_g,
        b_g,
        c_g,
        z,
        n_ports: m,
    })
}

/// Margins of the four pointwise LFT conditions. Each is nonnegative when
/// the condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointwiseMargins {
    /// min eig of `Z + Z' - 2 Z' W Z`.
    pub gain: f64,
    /// -max eig of `(A_G + I/tau_s)' P + P (A_G + I/tau_s)`.
    pub dynamics: f64,
    /// -|C_G - B_G' P|_F.
    pub output: f64,
    /// min eig of `P - tau_r C_G' C_G`.
    pub transmission: f64,
}

impl PointwiseMargins {
    pub fn passes(&self, tol: f64) -> bool {
        self.gain >= -tol && self.dynamics >= -tol && self.output >= -tol && self.transmission >= -tol
    }

    pub fn min(&self) -> f64 {
        self.gain.min(self.dynamics).min(self.output).min(self.transmission)
    }
}

pub fn lft_weight(n_ports: usize, n_states: usize, loss: &LossParams) -> Mat {
    let mut w = Mat::identity(n_ports + n_states, n_ports + n_states);
    for i in 0..n_ports {
        w[(i, i)] = loss.r;
    }
    w
}

pub fn check_pointwise(
    a_g: &Mat,
    b_g: &Mat,
    c_g: &Mat,
    z: &Mat,
    n_ports: usize,
    loss: &LossParams,
    p: &Mat,
) -> PointwiseMargins {
    let k = a_g.nrows();
    let w = lft_weight(n_ports, k, loss);
    let zc = z + z.transpose() - z.transpose() * &w * z * 2.0;
    let gain = linalg::min_eigenvalue(&zc);
    if k == 0 {
        return PointwiseMargins {
            gain,
            dynamics: 0.0,
            output: 0.0,
            transmission: 0.0,
        };
    }
    let at = a_g + Mat::identity(k, k) / loss.tau_s;
    let dynamics = -linalg::max_eigenvalue(&(at.transpose() * p + p * &at));
    let output = -(c_g - b_g.transpose() * p).norm();
    let transmission = linalg::min_eigenvalue(&(p - c_g.transpose() * c_g * loss.tau_r));
    PointwiseMargins {
        gain,
        dynamics,
        output,
        transmission,
    }
}

/// `E_s / (2 tau_r) - P_e`; negative when the storage equation has no real
/// solution.
pub fn storage_feasibility_margin(e_s: f64, p_e: f64, loss: &LossParams) -> f64 {
    e_s / (2.0 * loss.tau_r) - p_e
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn loss() -> LossParams {
        LossParams::design()
    }

    fn first_order_spsa() -> SpsaRealization {
        // low-pass admittance with small gain, comfortably feasible
        SpsaRealization::new(
            Mat::from_element(1, 1, -5.0),
            Mat::from_element(1, 1, 1.0),
            Mat::from_element(1, 1, 0.05),
            Mat::from_element(1, 1, 0.03),
        )
        .unwrap()
    }

    fn two_state_spsa() -> SpsaRealization {
        SpsaRealization::new(
            Mat::from_row_slice(2, 2, &[-1.0, 3.0, -3.0, -2.0]),
            Mat::from_row_slice(2, 1, &[1.0, 0.5]),
            Mat::from_row_slice(1, 2, &[0.01, -0.02]),
            Mat::from_element(1, 1, 0.04),
        )
        .unwrap()
    }

    #[test]
    fn memoryless_interval() {
        let l = loss();
        for cd in [0.0, 0.02, 0.06, 0.09, 1.0 / l.r] {
            assert!(certify_spsa(&SpsaRealization::static_gain(cd), &l).is_ok(), "{cd}");
        }
        for cd in [-0.01, 1.5 / l.r, 0.1] {
            assert!(certify_spsa(&SpsaRealization::static_gain(cd), &l).is_err(), "{cd}");
        }
    }

    #[test]
    fn memoryless_scalar_reduction() {
        // 2 c - 2 c^2 R >= 0 <=> port inequality holds
        let l = loss();
        for cd in [0.01, 0.05, 0.08] {
            let y = SpsaRealization::static_gain(cd);
            let m = lmi_port(&y, &Mat::zeros(0, 0), &Mat::zeros(0, 0), &l);
            assert!(linalg::max_eigenvalue(&m) <= 0.0);
            assert!(2.0 * cd - 2.0 * cd * cd * l.r >= 0.0);
        }
    }

    #[test]
    fn dynamic_controllers_certify() {
        for y in [first_order_spsa(), two_state_spsa()] {
            let rep = certify_spsa(&y, &loss()).unwrap();
            assert!(rep.margins.ok());
            assert!(rep.search_margin > 0.0);
            assert!(rep.margins.p_min_eig > 0.0);
        }
    }

    #[test]
    fn overly_aggressive_dynamic_gain_rejected() {
        let mut y = first_order_spsa();
        y.d[(0, 0)] = 0.2;
        assert!(certify_spsa(&y, &loss()).is_err());
    }

    #[test]
    fn state_inequality_is_homogeneous() {
        let y = two_state_spsa();
        let l = loss();
        let cert = certify_spsa(&y, &l).unwrap().certificate;
        let m1 = linalg::max_eigenvalue(&lmi_state(&y.a, &cert.p, &cert.x, l.tau_s));
        let m3 = linalg::max_eigenvalue(&lmi_state(&y.a, &(&cert.p * 3.0), &(&cert.x * 3.0), l.tau_s));
        assert_relative_eq!(m3, 3.0 * m1, max_relative = 1e-9);
    }

    #[test]
    fn lft_round_trip_and_pointwise() {
        let l = loss();
        for y in [first_order_spsa(), two_state_spsa()] {
            let cert = certify_spsa(&y, &l).unwrap().certificate;
            let y = y.with_certificate(cert.clone());
            let lft = lft_decompose(&y, None, &l).unwrap();
            let (a, b, c, d) = lft.reconstruct();
            let rel = |m: &Mat, r: &Mat| (m - r).norm() / r.norm().max(1e-300);
            assert!(rel(&a, &y.a) < 1e-10);
            assert!(rel(&b, &y.b) < 1e-10);
            assert!(rel(&c, &y.c) < 1e-10);
            assert!(rel(&d, &y.d) < 1e-10);
            let k = y.n_states();
            let cpc = &lft.c_g * linalg::inverse(&cert.p, "t").unwrap() * lft.c_g.transpose();
            assert!((cpc - Mat::identity(k, k) / l.tau_r).norm() < 1e-8 / l.tau_r);
            let pm = check_pointwise(&lft.a_g, &lft.b_g, &lft.c_g, &lft.z, 1, &l, &cert.p);
            assert!(pm.passes(1e-8), "{pm:?}");
        }
    }

    #[test]
    fn lft_independent_of_unitary_choice() {
        let l = loss();
        let y = two_state_spsa();
        let cert = certify_spsa(&y, &l).unwrap().certificate;
        let y = y.with_certificate(cert);
        let th: f64 = 0.7;
        let v = Mat::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        let a = lft_decompose(&y, None, &l).unwrap().reconstruct();
        let b = lft_decompose(&y, Some(&v), &l).unwrap().reconstruct();
        assert!((a.0 - b.0).norm() < 1e-10);
        assert!((a.1 - b.1).norm() < 1e-10);
        assert!((a.2 - b.2).norm() < 1e-12);
    }

    #[test]
    fn lft_errors() {
        let l = loss();
        let y = two_state_spsa();
        assert!(matches!(lft_decompose(&y, None, &l), Err(Error::MissingCertificate)));
        let cert = certify_spsa(&y, &l).unwrap().certificate;
        let y = y.with_certificate(cert);
        let v = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(lft_decompose(&y, Some(&v), &l), Err(Error::NonUnitaryV(_))));
    }

    #[test]
    fn gain_condition_special_cases() {
        let l = loss();
        let e = Mat::zeros(0, 0);
        let z0 = Mat::zeros(1, 1);
        let m = check_pointwise(&e, &e, &e, &z0, 1, &l, &e);
        assert_eq!(m.gain, 0.0);
        let winv = Mat::from_element(1, 1, 1.0 / l.r);
        let m = check_pointwise(&e, &e, &e, &winv, 1, &l, &e);
        assert!(m.gain.abs() < 1e-15);
    }

    #[test]
    fn storage_margin_arithmetic() {
        let mut l = loss();
        assert_eq!(storage_feasibility_margin(0.0, 0.0, &l), 0.0);
        l.tau_r = 0.01;
        assert_relative_eq!(storage_feasibility_margin(2.0, 50.0, &l), 50.0);
        let id = LossParams::identified();
        let e = 0.5 * 0.0991 * 50.0 * 50.0;
        assert_relative_eq!(e / (2.0 * id.tau_r), 7288.0, max_relative = 1e-3);
    }
}
