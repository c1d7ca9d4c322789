//! End-to-end design of the three controllers and verification of a stored
//! controller against a loss model.

use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::feasibility::{self, Certificate, LmiMargins, PointwiseMargins, SpsaRealization};
use crate::linalg::Mat;
use crate::params::LossParams;
use crate::pgc::{self, PgcPlan};
use crate::plant::{self, DesignModel};
use crate::sim::ControllerSpec;
use crate::synthesis::{self, SpsaDesign, StaticDesign};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignReport {
    pub c_d: f64,
    pub j_static: f64,
    pub static_iterations: usize,
    pub j_spsa: f64,
    /// Frozen-linearization performance of the unconstrained target.
    pub j_target: f64,
    pub projection_error: f64,
    pub spsa_iterations: usize,
    pub gradient_steps: usize,
    pub spsa_states: usize,
    pub spsa_margins: LmiMargins,
    /// Upper bound on the receding-horizon controller's performance.
    pub j_pgc_bound: f64,
    pub pgc_residual: f64,
    /// `100 (J_static - J_spsa) / J_static`.
    pub spsa_improvement_pct: f64,
}

#[derive(Debug, Clone)]
pub struct DesignOutcome {
    pub model: DesignModel,
    pub static_design: StaticDesign,
    pub static_controller: SpsaRealization,
    pub spsa: SpsaDesign,
    pub plan: PgcPlan,
    pub report: DesignReport,
}

pub fn design_model(cfg: &Config) -> Result<DesignModel> {
    plant::build_design_model(&cfg.transducer, &cfg.structure, &cfg.disturbance, cfg.design.current_weight)
}

/// Static damping, certified admittance and the receding-horizon plan built
/// on it.
pub fn run_design(cfg: &Config) -> Result<DesignOutcome> {
    cfg.validate()?;
    let model = design_model(cfg)?;
    let loss = &cfg.design_loss;
    let static_design = synthesis::optimize_static_damping(&model, loss)?;
    log::info!(
        "static damping c_d = {:.6}, J = {:.6} after {} iterations",
        static_design.c_d,
        static_design.j,
        static_design.outer_iterations
    );
    let static_controller = synthesis::static_realization(static_design.c_d, loss)?;
    let spsa = synthesis::design_spsa(&model, loss, &static_design, &cfg.design.spsa)?;
    let cert = spsa.controller.certificate.as_ref().ok_or(Error::MissingCertificate)?;
    let spsa_margins = feasibility::lmi_margins(&spsa.controller, cert, loss);
    let lft = feasibility::lft_decompose(&spsa.controller, None, loss)?;
    log::info!("admittance with {} states, J = {:.6}", spsa.controller.n_states(), spsa.j);
    let plan = pgc::build_pgc_plan(&lft, &model, &spsa.linearization.a_eq, loss)?;
    log::debug!("receding-horizon plan bound {:.6}, residual {:.2e}", plan.j, plan.residual);
    let report = DesignReport {
        c_d: static_design.c_d,
        j_static: static_design.j,
        static_iterations: static_design.outer_iterations,
        j_spsa: spsa.j,
        j_target: spsa.target_j,
        projection_error: spsa.projection_error,
        spsa_iterations: spsa.outer_iterations,
        gradient_steps: spsa.gradient_steps,
        spsa_states: spsa.controller.n_states(),
        spsa_margins,
        j_pgc_bound: plan.j,
        pgc_residual: plan.residual,
        spsa_improvement_pct: percent_improvement(static_design.j, spsa.j),
    };
    Ok(DesignOutcome {
        model,
        static_design,
        static_controller,
        spsa,
        plan,
        report,
    })
}

/// `100 (base - x) / base`; positive when `x` is smaller.
pub fn percent_improvement(base: f64, x: f64) -> f64 {
    100.0 * (base - x) / base
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub controller: String,
    pub feasible: bool,
    pub margins: Option<LmiMargins>,
    pub pointwise: Option<PointwiseMargins>,
    /// Largest relative mismatch between a stored factorization and its
    /// generating admittance.
    pub reconstruction_error: Option<f64>,
    pub detail: String,
}

fn is_infeasibility(e: &Error) -> bool {
    matches!(e, Error::SolverInfeasible(_) | Error::CertificateRejected(_))
}

/// Checks an admittance: a stored certificate is re-verified first, then a
/// fresh certificate search is tried.
fn verify_admittance(y: &SpsaRealization, loss: &LossParams) -> Result<(bool, LmiMargins, String)> {
    if let Some(cert) = &y.certificate {
        let m = feasibility::lmi_margins(y, cert, loss);
        if m.ok() {
            return Ok((true, m, "stored certificate verified".into()));
        }
    }
    match feasibility::certify_spsa(y, loss) {
        Ok(rep) => Ok((true, rep.margins, format!("certificate found, margin {:.3e}", rep.search_margin))),
        Err(e) if is_infeasibility(&e) => {
            // report the stored certificate's margins, or the zero one's
            let k = y.n_states();
            let cert = match &y.certificate {
                Some(c) if c.p.nrows() == k => c.clone(),
                _ => Certificate {
                    p: Mat::zeros(k, k),
                    x: Mat::zeros(k, k),
                },
            };
            Ok((false, feasibility::lmi_margins(y, &cert, loss), e.to_string()))
        }
        Err(e) => Err(e),
    }
}

fn rel_diff(a: &Mat, b: &Mat) -> f64 {
    (a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE)
}

/// Feasibility of a stored controller under `loss`. For the receding-horizon
/// controller, `generator` is the admittance its plan was built from.
pub fn verify_controller(
    spec: &ControllerSpec,
    generator: Option<&SpsaRealization>,
    loss: &LossParams,
) -> Result<VerifyReport> {
    loss.validate()?;
    let name = spec.name().to_string();
    match spec {
        ControllerSpec::Static { c_d } => {
            let (feasible, m, detail) = verify_admittance(&SpsaRealization::static_gain(*c_d), loss)?;
            Ok(VerifyReport {
                controller: name,
                feasible,
                margins: Some(m),
                pointwise: None,
                reconstruction_error: None,
                detail,
            })
        }
        ControllerSpec::Spsa(y) => {
            let (feasible, m, detail) = verify_admittance(y, loss)?;
            Ok(VerifyReport {
                controller: name,
                feasible,
                margins: Some(m),
                pointwise: None,
                reconstruction_error: None,
                detail,
            })
        }
        ControllerSpec::Pgc(plan) => {
            let y = generator.ok_or(Error::MissingCertificate)?;
            let cert = y.certificate.as_ref().ok_or(Error::MissingCertificate)?;
            let lft = &plan.lft;
            let (a, b, c, d) = lft.reconstruct();
            let err = [rel_diff(&a, &y.a), rel_diff(&b, &y.b), rel_diff(&c, &y.c), rel_diff(&d, &y.d)]
                .into_iter()
                .fold(0.0, f64::max);
            let pw = feasibility::check_pointwise(&lft.a_g, &lft.b_g, &lft.c_g, &lft.z, lft.n_ports, loss, &cert.p);
            let (adm_ok, m, detail) = verify_admittance(y, loss)?;
            let feasible = adm_ok && pw.passes(POINTWISE_TOL) && err < RECONSTRUCTION_TOL;
            Ok(VerifyReport {
                controller: name,
                feasible,
                margins: Some(m),
                pointwise: Some(pw),
                reconstruction_error: Some(err),
                detail,
            })
        }
    }
}

/// Tolerance on the pointwise factorization conditions.
pub const POINTWISE_TOL: f64 = 1e-8;
pub const RECONSTRUCTION_TOL: f64 = 1e-8;
