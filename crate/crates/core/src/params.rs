//! Physical parameter records with the prototype's default values.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ballscrew / PMSM transducer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransducerParams {
    /// Winding resistance, ohm.
    pub r_t: f64,
    /// Winding inductance, H.
    pub inductance: f64,
    /// Permanent-magnet flux linkage, V*s.
    pub flux_linkage: f64,
    /// Number of rotor poles.
    pub n_poles: f64,
    /// Rotor inertia, kg*m^2.
    pub j_t: f64,
    /// Rotor viscous damping, N*m*s.
    pub b_t: f64,
    /// Coulomb friction force, N.
    pub f_c: f64,
    /// Effective screw lead, m/rad.
    pub lead: f64,
    /// Linear-to-rotary conversion efficiency.
    pub eta: f64,
}

impl Default for TransducerParams {
    fn default() -> Self {
        Self {
            r_t: 10.6,
            inductance: 0.0219,
            flux_linkage: 0.1603,
            n_poles: 6.0,
            j_t: 3.54e-5,
            b_t: 3.25e-4,
            f_c: 35.0,
            lead: 1.27e-3,
            eta: 0.91,
        }
    }
}

impl TransducerParams {
    /// Force constant relating quadrature current to nut force, N/A.
    pub fn k_u(&self) -> f64 {
        1.5f64.sqrt() * self.n_poles * self.flux_linkage / (2.0 * self.lead)
    }

    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("r_t", self.r_t),
            ("inductance", self.inductance),
            ("flux_linkage", self.flux_linkage),
            ("n_poles", self.n_poles),
            ("j_t", self.j_t),
            ("b_t", self.b_t),
            ("lead", self.lead),
        ];
        for (name, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("transducer {name} = {v}")));
            }
        }
        if !(self.f_c >= 0.0) {
            return Err(Error::InvalidParameter(format!("transducer f_c = {}", self.f_c)));
        }
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::InvalidParameter(format!("transducer eta = {}", self.eta)));
        }
        Ok(())
    }
}

/// Three-storey structure with the absorber on the top DOF.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StructureParams {
    /// Mass matrix rows, kg.
    pub mass: [[f64; 3]; 3],
    /// Damping matrix rows, N*s/m.
    pub damping: [[f64; 3]; 3],
    /// Stiffness matrix rows, N/m.
    pub stiffness: [[f64; 3]; 3],
    /// Transducer placement vector.
    pub placement: [f64; 3],
}

impl Default for StructureParams {
    fn default() -> Self {
        Self {
            mass: [[75000.0, 0.0, 0.0], [0.0, 75000.0, 0.0], [0.0, 0.0, 3000.0]],
            damping: [
                [12728.0, -4243.0, 0.0],
                [-4243.0, 8523.0, -37.95],
                [0.0, -37.95, 37.95],
            ],
            stiffness: [
                [6.0e6, -3.0e6, 0.0],
                [-3.0e6, 3.12e6, -1.2e5],
                [0.0, -1.2e5, 1.2e5],
            ],
            placement: [0.0, -1.0, 1.0],
        }
    }
}

fn mat3(rows: &[[f64; 3]; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| rows[i][j])
}

impl StructureParams {
    pub fn m_b(&self) -> Matrix3<f64> {
        mat3(&self.mass)
    }
    pub fn c_b(&self) -> Matrix3<f64> {
        mat3(&self.damping)
    }
    pub fn k_b(&self) -> Matrix3<f64> {
        mat3(&self.stiffness)
    }
    pub fn gamma(&self) -> Vector3<f64> {
        Vector3::from(self.placement)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.m_b();
        for i in 0..3 {
            for j in 0..3 {
                if i != j && m[(i, j)] != 0.0 {
                    return Err(Error::InvalidParameter("mass matrix must be diagonal".into()));
                }
            }
            if !(m[(i, i)] > 0.0) {
                return Err(Error::InvalidParameter("mass entries must be positive".into()));
            }
        }
        for (name, x) in [("damping", self.c_b()), ("stiffness", self.k_b())] {
            if (x - x.transpose()).amax() > 0.0 {
                return Err(Error::InvalidParameter(format!("{name} matrix must be symmetric")));
            }
        }
        if self.k_b().symmetric_eigenvalues().min() < 0.0 {
            return Err(Error::InvalidParameter("stiffness matrix must be PSD".into()));
        }
        Ok(())
    }
}

/// Second-order coloring filter for the base acceleration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DisturbanceParams {
    /// Center frequency, rad/s.
    pub omega: f64,
    pub zeta: f64,
    /// Intensity scale, m/s^2.
    pub sigma: f64,
}

impl Default for DisturbanceParams {
    fn default() -> Self {
        Self {
            omega: 2.0 * std::f64::consts::PI,
            zeta: 0.5,
            sigma: 0.01,
        }
    }
}

impl DisturbanceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega > 0.0 && self.zeta > 0.0 && self.zeta <= 1.0 && self.sigma >= 0.0) {
            return Err(Error::InvalidParameter(format!("disturbance {self:?}")));
        }
        Ok(())
    }
}

/// Parasitic loss model of the drive and storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossParams {
    /// Port resistance, ohm.
    pub r: f64,
    /// Leakage time constant, s.
    pub tau_s: f64,
    /// Transmission time constant, s.
    pub tau_r: f64,
    /// Storage capacitance, F.
    pub c_s: f64,
    /// Leakage resistance, ohm.
    pub r_s: f64,
    /// Storage series resistance, ohm.
    pub r_r: f64,
    /// Static power loss, W.
    pub p0: f64,
}

impl LossParams {
    /// Values identified on the prototype hardware.
    pub fn identified() -> Self {
        Self {
            r: 10.96,
            tau_s: 344.9,
            tau_r: 0.0085,
            c_s: 0.0991,
            r_s: 3480.0,
            r_r: 0.086,
            p0: 0.155,
        }
    }

    /// Conservative values used for controller synthesis. The storage
    /// resistances are derived from the time constants at the identified
    /// capacitance.
    pub fn design() -> Self {
        let c_s = 0.0991;
        Self {
            r: 11.0,
            tau_s: 275.0,
            tau_r: 0.01,
            c_s,
            r_s: 275.0 / c_s,
            r_r: 0.01 / c_s,
            p0: 0.155,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("r", self.r),
            ("tau_s", self.tau_s),
            ("tau_r", self.tau_r),
            ("c_s", self.c_s),
            ("r_s", self.r_s),
            ("r_r", self.r_r),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!("loss {name} = {v}")));
            }
        }
        if !(self.p0 >= 0.0) {
            return Err(Error::InvalidParameter(format!("loss p0 = {}", self.p0)));
        }
        let rel = |a: f64, b: f64| (a - b).abs() / b;
        if rel(self.r_s * self.c_s, self.tau_s) > 0.01 {
            return Err(Error::InvalidParameter(format!(
                "tau_s = {} inconsistent with r_s*c_s = {}",
                self.tau_s,
                self.r_s * self.c_s
            )));
        }
        if rel(self.r_r * self.c_s, self.tau_r) > 0.01 {
            return Err(Error::InvalidParameter(format!(
                "tau_r = {} inconsistent with r_r*c_s = {}",
                self.tau_r,
                self.r_r * self.c_s
            )));
        }
        Ok(())
    }
}

/// Coefficients of the drive loss regression
/// `P_loss = v_out^2/r_p + u^2 r_t + u_s^2 r_l + p0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveLossFit {
    pub r_p: f64,
    pub r_t: f64,
    pub r_l: f64,
    pub p0: f64,
}

impl DriveLossFit {
    pub fn reference() -> Self {
        Self {
            r_p: 5346.0,
            r_t: 10.96,
            r_l: 0.065,
            p0: 0.155,
        }
    }

    pub fn predict(&self, v_out: f64, u: f64, u_s: f64) -> f64 {
        v_out * v_out / self.r_p + u * u * self.r_t + u_s * u_s * self.r_l + self.p0
    }
}
