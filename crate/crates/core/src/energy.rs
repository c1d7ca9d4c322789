//! Storage energy dynamics, dissipation accounting, DC-link voltage
//! monitoring and drive loss identification.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{DriveLossFit, LossParams, TransducerParams};

/// Converter headroom above the required terminal voltage, V.
pub const DCLINK_MARGIN: f64 = 5.0;
/// Lowest DC-link reference, V.
pub const DCLINK_FLOOR: f64 = 20.0;
const STORAGE_SUBSTEPS: usize = 4;
const MIN_STORAGE_VOLTAGE: f64 = 0.1;

/// Power into the plant port; negative when harvesting.
pub fn electrical_power(u: f64, v: f64, r: f64) -> f64 {
    r * u * u + u * v
}

/// Argument of the square root in the storage equation, factored as
/// `(2 E_s / tau_r) (E_s / (2 tau_r) - P_e)` so its sign is the sign of the
/// feasibility margin.
pub fn storage_discriminant(e_s: f64, p_e: f64, tau_r: f64) -> f64 {
    2.0 * e_s / tau_r * (e_s / (2.0 * tau_r) - p_e)
}

/// `dE_s/dt` with the discriminant clamped at zero; the flag reports
/// clamping.
pub fn storage_rate(e_s: f64, p_e: f64, loss: &LossParams) -> (f64, bool) {
    let disc = storage_discriminant(e_s, p_e, loss.tau_r);
    let clamped = disc < 0.0;
    let rate = -(2.0 / loss.tau_s + 1.0 / loss.tau_r) * e_s + disc.max(0.0).sqrt();
    (rate, clamped)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageState {
    pub e_s: f64,
    pub v_s: f64,
    /// False once the storage equation has lost its real solution.
    pub feasible: bool,
    pub cumulative_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StorageEvent {
    /// Stored energy when clamping engaged.
    pub e_s: f64,
    pub p_e: f64,
}

/// Quantities of one storage update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StorageStep {
    /// Current drawn from storage (positive when discharging).
    pub u_s: f64,
    /// Total dissipation including static loss.
    pub p_d: f64,
    pub event: Option<StorageEvent>,
}

impl StorageState {
    pub fn new(e_s: f64, loss: &LossParams) -> Result<Self> {
        if !(e_s >= 0.0) || !e_s.is_finite() {
            return Err(Error::InvalidParameter(format!("stored energy {e_s}")));
        }
        Ok(Self {
            e_s,
            v_s: storage_voltage(e_s, loss.c_s),
            feasible: e_s > 0.0,
            cumulative_loss: 0.0,
        })
    }

    /// Advances the stored energy over `dt` with port power `p_e` and port
    /// current `u` held constant, accumulating dissipation.
    pub fn step(&mut self, p_e: f64, u: f64, loss: &LossParams, dt: f64) -> StorageStep {
        let (rate0, _) = storage_rate(self.e_s, p_e, loss);
        let u_s = storage_current(rate0, self.v_s, loss);
        let p_d = total_dissipation(u, u_s, self.v_s, loss);

        let h = dt / STORAGE_SUBSTEPS as f64;
        let mut e = self.e_s;
        let mut clamped = false;
        for _ in 0..STORAGE_SUBSTEPS {
            let mut f = |x: f64| {
                let (r, c) = storage_rate(x.max(0.0), p_e, loss);
                clamped |= c;
                r
            };
            let k1 = f(e);
            let k2 = f(e + 0.5 * h * k1);
            let k3 = f(e + 0.5 * h * k2);
            let k4 = f(e + h * k3);
            e = (e + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)).max(0.0);
        }
        let event = if clamped && self.feasible {
            self.feasible = false;
            Some(StorageEvent { e_s: self.e_s, p_e })
        } else {
            None
        };
        if e <= 0.0 {
            self.feasible = false;
        }
        self.e_s = e;
        self.v_s = storage_voltage(e, loss.c_s);
        self.cumulative_loss += p_d * dt;
        StorageStep { u_s, p_d, event }
    }
}

pub fn storage_voltage(e_s: f64, c_s: f64) -> f64 {
    (2.0 * e_s.max(0.0) / c_s).sqrt()
}

/// Storage current from the power balance `dE/dt = -v_s u_s - v_s^2/R_s`.
pub fn storage_current(rate: f64, v_s: f64, loss: &LossParams) -> f64 {
    if v_s.abs() < MIN_STORAGE_VOLTAGE {
        return 0.0;
    }
    -(rate + v_s * v_s / loss.r_s) / v_s
}

/// `u^2 R + u_s^2 R_r + v_s^2/R_s + P_0`.
pub fn total_dissipation(u: f64, u_s: f64, v_s: f64, loss: &LossParams) -> f64 {
    u * u * loss.r + u_s * u_s * loss.r_r + v_s * v_s / loss.r_s + loss.p0
}

/// DC-link voltage needed to realize quadrature current `i_q` at stroke
/// velocity `xdot_t`, or to serve the converter output `v_out`.
pub fn required_dclink_voltage(i_q: f64, xdot_t: f64, v_out: f64, tp: &TransducerParams) -> f64 {
    let vd = tp.n_poles * tp.inductance / (2.0 * tp.lead) * i_q * xdot_t;
    let vq = tp.r_t * i_q + tp.k_u() * xdot_t;
    let terminal = (2.0 * (vd * vd + vq * vq)).sqrt() + DCLINK_MARGIN;
    DCLINK_FLOOR.max(v_out + DCLINK_MARGIN).max(terminal)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub v_out: f64,
    pub u: f64,
    pub u_s: f64,
    #[serde(rename = "P_loss")]
    pub p_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossFit {
    pub params: DriveLossFit,
    pub residual_rms: f64,
    pub n_records: usize,
}

/// Ordinary least squares on `P = v_out^2/R_p + u^2 R_t + u_s^2 R_L + P_0`.
pub fn fit_loss_model(records: &[LossRecord]) -> Result<LossFit> {
    if records.len() < 4 {
        return Err(Error::RankDeficient);
    }
    let n = records.len();
    let a = DMatrix::from_fn(n, 4, |i, j| {
        let r = &records[i];
        match j {
            0 => r.v_out * r.v_out,
            1 => r.u * r.u,
            2 => r.u_s * r.u_s,
            _ => 1.0,
        }
    });
    let b = DVector::from_iterator(n, records.iter().map(|r| r.p_loss));
    // column scaling keeps the conditioning check meaningful across units
    let scale = DVector::from_fn(4, |j, _| a.column(j).norm().max(f64::MIN_POSITIVE));
    let mut an = a.clone();
    for j in 0..4 {
        an.column_mut(j).unscale_mut(scale[j]);
    }
    let svd = an.svd(true, true);
    let smax = svd.singular_values.max();
    let smin = svd.singular_values.min();
    if !(smin > 1e-12 * smax) {
        return Err(Error::RankDeficient);
    }
    let xs = svd.solve(&b, 0.0).map_err(|_| Error::RankDeficient)?;
    let x = xs.component_div(&scale);
    let resid = &a * &x - &b;
    let inv_rp = x[0];
    if inv_rp == 0.0 {
        return Err(Error::RankDeficient);
    }
    Ok(LossFit {
        params: DriveLossFit {
            r_p: 1.0 / inv_rp,
            r_t: x[1],
            r_l: x[2],
            p0: x[3],
        },
        residual_rms: (resid.norm_squared() / n as f64).sqrt(),
        n_records: n,
    })
}

pub fn read_loss_records(path: &Path) -> Result<Vec<LossRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

pub fn write_loss_records(path: &Path, records: &[LossRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
