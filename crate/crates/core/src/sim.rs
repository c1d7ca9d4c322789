//! Fixed-step closed-loop simulation of the nonlinear plant under static
//! damping, a linear admittance or the receding-horizon controller, with
//! storage bookkeeping and mean-square metrics.

use nalgebra::{DVector, SMatrix, SVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::energy::{self, StorageState};
use crate::error::{Error, Result};
use crate::feasibility::SpsaRealization;
use crate::linalg::Mat;
use crate::params::{DisturbanceParams, LossParams, StructureParams, TransducerParams};
use crate::pgc::{DisturbanceObserver, PgcPlan, PlantObserver, DEFAULT_POLE_FACTOR};
use crate::plant::{EfficiencyMode, NonlinearPlant, DEFAULT_CURRENT_WEIGHT};

/// Environment variable capping the worker threads of seed sweeps.
pub const THREADS_ENV: &str = "SPSA_LAB_THREADS";

/// Series column order, shared by the CSV writer.
pub const SERIES_COLUMNS: [&str; 20] = [
    "t", "q1", "q2", "q3", "qd1", "qd2", "qd3", "u", "v", "f", "p_e", "p_mech", "e_s", "v_s",
    "v_link", "w", "z1", "z2", "mu", "override",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub seed: u64,
    /// Simulated horizon, s.
    pub duration: f64,
    pub dt_plant: f64,
    /// Sample time of the receding-horizon controller.
    pub dt_control: f64,
    /// Grid of the white-noise samples; `dt_plant` must be a multiple.
    /// Defaults to `dt_plant`.
    pub dt_noise: Option<f64>,
    /// Metrics ignore samples before this time, s.
    pub warmup: f64,
    /// Friction sign smoothing, m/s.
    pub friction_eps: f64,
    /// Efficiency switching smoothing, W.
    pub power_eps: f64,
    /// Initial stored energy, J.
    pub initial_energy: f64,
    pub record_decimation: usize,
    /// Keep the decimated time series.
    pub record: bool,
    pub observer_pole_factor: f64,
    /// Weight of the current in the performance output; follows the design
    /// setting when loaded from a config file.
    #[serde(skip)]
    pub current_weight: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            duration: 600.0,
            dt_plant: 5e-4,
            dt_control: 2e-3,
            dt_noise: None,
            warmup: 10.0,
            friction_eps: 1e-4,
            power_eps: 1e-3,
            initial_energy: 10.0,
            record_decimation: 20,
            record: true,
            observer_pole_factor: DEFAULT_POLE_FACTOR,
            current_weight: DEFAULT_CURRENT_WEIGHT,
        }
    }
}

/// Integer ratio `a / b`, or an error when `a` is not a multiple of `b`.
fn ratio(a: f64, b: f64, what: &str) -> Result<usize> {
    let r = (a / b).round();
    if !(r >= 1.0) || ((a - r * b).abs() > 1e-9 * a) {
        return Err(Error::InvalidParameter(format!("{what}: {a} is not a multiple of {b}")));
    }
    Ok(r as usize)
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::InvalidParameter(format!("duration {}", self.duration)));
        }
        if !(self.dt_plant > 0.0) || self.dt_plant > self.duration {
            return Err(Error::InvalidParameter(format!("plant step {}", self.dt_plant)));
        }
        ratio(self.dt_control, self.dt_plant, "control step")?;
        ratio(self.dt_plant, self.noise_step(), "noise step")?;
        if self.record_decimation == 0 {
            return Err(Error::InvalidParameter("record decimation must be at least 1".into()));
        }
        if !(self.warmup >= 0.0) {
            return Err(Error::InvalidParameter(format!("warm-up {}", self.warmup)));
        }
        if !(self.friction_eps > 0.0 && self.power_eps > 0.0) {
            return Err(Error::InvalidParameter("smoothing widths must be positive".into()));
        }
        if !(self.initial_energy >= 0.0) {
            return Err(Error::InvalidParameter(format!("initial energy {}", self.initial_energy)));
        }
        if !(self.observer_pole_factor > 0.0) {
            return Err(Error::InvalidParameter(format!("observer pole factor {}", self.observer_pole_factor)));
        }
        Ok(())
    }

    pub fn noise_step(&self) -> f64 {
        self.dt_noise.unwrap_or(self.dt_plant)
    }

    pub fn n_steps(&self) -> usize {
        (self.duration / self.dt_plant).round() as usize
    }
}

/// Physical parameters of the simulated system. `loss` drives the storage
/// ledger and should hold the identified (not the design) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimPlant {
    pub transducer: TransducerParams,
    pub structure: StructureParams,
    pub disturbance: DisturbanceParams,
    pub loss: LossParams,
}

impl Default for SimPlant {
    fn default() -> Self {
        Self {
            transducer: TransducerParams::default(),
            structure: StructureParams::default(),
            disturbance: DisturbanceParams::default(),
            loss: LossParams::identified(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ControllerSpec {
    /// `u = -c_d v`, applied continuously.
    Static { c_d: f64 },
    /// Linear admittance, Tustin-discretized at the plant step.
    Spsa(SpsaRealization),
    /// Receding-horizon controller sampled at the control step.
    Pgc(Box<PgcPlan>),
}

impl ControllerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ControllerSpec::Static { .. } => "static",
            ControllerSpec::Spsa(_) => "spsa",
            ControllerSpec::Pgc(_) => "pgc",
        }
    }
}

/// Deterministic white-noise stream with variance `1/dt`.
pub struct NoiseSource {
    rng: ChaCha8Rng,
    scale: f64,
}

impl NoiseSource {
    pub fn new(seed: u64, dt: f64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            scale: 1.0 / dt.sqrt(),
        }
    }

    pub fn sample(&mut self) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.rng);
        z * self.scale
    }
}

pub fn generate_noise(seed: u64, dt: f64, n_steps: usize) -> Result<Vec<f64>> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("noise step {dt}")));
    }
    let mut src = NoiseSource::new(seed, dt);
    Ok((0..n_steps).map(|_| src.sample()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub j: f64,
    pub z1: f64,
    pub z2: f64,
    pub u: f64,
    /// Mean square of the base acceleration.
    pub w: f64,
    pub samples: usize,
}

/// Running mean-square accumulator for `(z1, z2, u)`.
#[derive(Debug, Clone, Copy, Default)]
struct MeanSquare {
    s1: f64,
    s2: f64,
    su: f64,
    sw: f64,
    n: usize,
}

impl MeanSquare {
    fn push(&mut self, z1: f64, z2: f64, u: f64, w: f64) {
        self.sw += w * w;
        self.s1 += z1 * z1;
        self.s2 += z2 * z2;
        self.su += u * u;
        self.n += 1;
    }

    fn finish(&self, current_weight: f64) -> Metrics {
        let n = self.n.max(1) as f64;
        let (z1, z2, u) = (self.s1 / n, self.s2 / n, self.su / n);
        Metrics {
            j: z1 + z2 + current_weight * current_weight * u,
            z1,
            z2,
            u,
            w: self.sw / n,
            samples: self.n,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SimEventKind {
    /// The storage equation lost its real solution.
    StorageInfeasible { e_s: f64, p_e: f64 },
    /// The commanded current was replaced by a harvesting-feasible one.
    OverrideStart,
    OverrideEnd,
    /// Root bracketing failed; the admittance's input was used.
    RootFallback,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: SimEventKind,
}

/// Decimated time series, one vector per column of `SERIES_COLUMNS`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub columns: Vec<Vec<f64>>,
}

impl Default for Series {
    fn default() -> Self {
        Self::new()
    }
}

impl Series {
    pub fn new() -> Self {
        Self {
            columns: vec![Vec::new(); SERIES_COLUMNS.len()],
        }
    }

    pub fn push(&mut self, row: &[f64; SERIES_COLUMNS.len()]) {
        for (c, &v) in self.columns.iter_mut().zip(row) {
            c.push(v);
        }
    }

    pub fn len(&self) -> usize {
        self.columns.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn column(&self, name: &str) -> Option<&[f64]> {
        let i = SERIES_COLUMNS.iter().position(|&c| c == name)?;
        Some(&self.columns[i])
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SERIES_COLUMNS)?;
        for i in 0..self.len() {
            w.write_record(self.columns.iter().map(|c| format!("{:e}", c[i])))?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimResult {
    pub controller: String,
    pub seed: u64,
    pub metrics: Metrics,
    pub events: Vec<SimEvent>,
    /// Plant steps with an overridden current.
    pub override_steps: usize,
    pub root_fallbacks: usize,
    pub final_energy: f64,
    /// Storage dissipation integrated over the horizon, J.
    pub dissipated: f64,
    /// Largest per-step mismatch between the storage update and the
    /// first-order power balance, relative to the step energy scale.
    pub balance_error: f64,
    #[serde(skip)]
    pub series: Option<Series>,
}

impl SimResult {
    /// The storage equation lost its real solution at least once.
    pub fn storage_infeasible(&self) -> bool {
        self.events.iter().any(|e| matches!(e.kind, SimEventKind::StorageInfeasible { .. }))
    }

    /// The horizon ended before the warm-up; metrics are zero.
    pub fn below_warmup(&self) -> bool {
        self.metrics.samples == 0
    }
}

/// Mean-square metrics of recorded series after `warmup` seconds.
pub fn compute_metrics(series: &Series, warmup: f64, current_weight: f64) -> Result<Metrics> {
    let col = |n: &str| series.column(n).ok_or_else(|| Error::InvalidParameter(format!("missing column {n}")));
    let t = col("t")?;
    let (z1, z2, u, w) = (col("z1")?, col("z2")?, col("u")?, col("w")?);
    if t.last().is_none_or(|&end| end <= warmup) {
        return Err(Error::InvalidParameter(format!("horizon does not exceed warm-up {warmup}")));
    }
    let mut acc = MeanSquare::default();
    for i in 0..t.len() {
        if t[i] >= warmup {
            acc.push(z1[i], z2[i], u[i], w[i]);
        }
    }
    Ok(acc.finish(current_weight))
}

/// Metrics from explicit sample vectors; same averaging as the simulator.
pub fn metrics_from_samples(z1: &[f64], z2: &[f64], u: &[f64], current_weight: f64) -> Metrics {
    let mut acc = MeanSquare::default();
    for ((&a, &b), &c) in z1.iter().zip(z2).zip(u) {
        acc.push(a, b, c, 0.0);
    }
    acc.finish(current_weight)
}

type V6 = SVector<f64, 6>;

/// Observer matrices in fixed-size form for the inner loop.
struct ObserverBlock {
    a: SMatrix<f64, 6, 6>,
    b_f: V6,
    b_w: V6,
    l: V6,
    dist: DisturbanceObserver,
}

impl ObserverBlock {
    fn new(o: &PlantObserver, dist: DisturbanceObserver) -> Self {
        let ao = o.error_dynamics();
        let v6 = |m: &Mat| V6::from_iterator(m.iter().copied());
        Self {
            a: SMatrix::<f64, 6, 6>::from_iterator(ao.iter().copied()),
            b_f: v6(&o.b_pf),
            b_w: v6(&o.b_pw),
            l: v6(&o.l_p),
            dist,
        }
    }
}

enum Law {
    Static(f64),
    Linear {
        a: Mat,
        b: DVector<f64>,
        c: DVector<f64>,
        d: f64,
        x: DVector<f64>,
        next: DVector<f64>,
    },
    Pgc {
        plan: Box<PgcPlan>,
        every: usize,
        /// Exact zero-order-hold transition of the factor states.
        phi: Mat,
        gamma: Mat,
        x_g: DVector<f64>,
        q: DVector<f64>,
        mu: f64,
    },
}

/// `exp([[A, B], [0, 0]] dt)` split into `(Phi, Gamma)`.
fn zoh(a: &Mat, b: &Mat, dt: f64) -> (Mat, Mat) {
    let n = a.nrows();
    let m = b.ncols();
    let mut big = Mat::zeros(n + m, n + m);
    big.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    big.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = big.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

fn prepare(spec: &ControllerSpec, cfg: &SimConfig) -> Result<Law> {
    Ok(match spec {
        ControllerSpec::Static { c_d } => {
            if !c_d.is_finite() {
                return Err(Error::InvalidParameter(format!("static gain {c_d}")));
            }
            Law::Static(*c_d)
        }
        ControllerSpec::Spsa(y) => {
            if y.n_ports() != 1 {
                return Err(Error::Dimension(format!("{} ports, the plant has one", y.n_ports())));
            }
            let k = y.n_states();
            if k == 0 {
                Law::Static(y.d[(0, 0)])
            } else {
                let ss = y.state_space().tustin(cfg.dt_plant)?;
                Law::Linear {
                    a: ss.a().clone(),
                    b: ss.b().column(0).into_owned(),
                    c: ss.c().row(0).transpose(),
                    d: ss.d()[(0, 0)],
                    x: DVector::zeros(k),
                    next: DVector::zeros(k),
                }
            }
        }
        ControllerSpec::Pgc(plan) => {
            let nx = plan.c_z.ncols() - plan.lft.n_states();
            if nx != 8 || plan.lft.n_ports != 1 {
                return Err(Error::Dimension(format!("plan built for {nx} plant states")));
            }
            let k = plan.lft.n_states();
            let (phi, gamma) = zoh(&plan.lft.a_g, &plan.lft.b_g, cfg.dt_control);
            Law::Pgc {
                every: ratio(cfg.dt_control, cfg.dt_plant, "control step")?,
                phi,
                gamma,
                x_g: DVector::zeros(k),
                q: DVector::zeros(k),
                plan: plan.clone(),
                mu: 0.0,
            }
        }
    })
}

/// Integrated state: plant `[q; q']`, filter, plant observer, disturbance
/// observer.
const NS: usize = 15;
type State = [f64; NS];

struct Stage {
    d: State,
    eval: crate::plant::RhsEval,
    w: f64,
    u: f64,
}

struct Dynamics<'a> {
    plant: &'a NonlinearPlant,
    aw: [[f64; 2]; 2],
    bw: f64,
    cw: [f64; 2],
    k_u: f64,
    gamma: [f64; 3],
    obs: Option<&'a ObserverBlock>,
}

impl Dynamics<'_> {
    fn velocity(&self, s: &State) -> f64 {
        self.k_u * (self.gamma[0] * s[3] + self.gamma[1] * s[4] + self.gamma[2] * s[5])
    }

    /// `u_held` is ignored when `gain` is set; then `u = -gain * v`.
    fn eval(&self, s: &State, u_held: f64, gain: Option<f64>, n: f64, h: &mut f64) -> Stage {
        let mut x = [0.0; 6];
        x.copy_from_slice(&s[..6]);
        let v = self.velocity(s);
        let u = gain.map_or(u_held, |c| -c * v);
        let w = self.cw[0] * s[6] + self.cw[1] * s[7];
        let eval = self.plant.rhs(&x, u, w, *h);
        *h = eval.h;
        let mut d = [0.0; NS];
        d[..6].copy_from_slice(&eval.dx);
        d[6] = self.aw[0][0] * s[6] + self.aw[0][1] * s[7];
        d[7] = self.aw[1][0] * s[6] + self.aw[1][1] * s[7] + self.bw * n;
        if let Some(o) = self.obs {
            let xo = V6::from_column_slice(&s[8..14]);
            let dx = o.a * xo + o.b_f * eval.force + o.b_w * w + o.l * v;
            d[8..14].copy_from_slice(dx.as_slice());
            d[14] = o.dist.derivative(s[14], w);
        }
        Stage { d, eval, w, u }
    }
}

fn axpy(x: &State, k: &State, h: f64) -> State {
    let mut o = *x;
    for i in 0..NS {
        o[i] += h * k[i];
    }
    o
}

/// Nearest current to `u` with `R u^2 + u v <= bound`, `bound >= 0`.
pub fn harvesting_override(u: f64, v: f64, r: f64, bound: f64) -> f64 {
    let disc = (v * v + 4.0 * r * bound.max(0.0)).sqrt();
    let lo = (-v - disc) / (2.0 * r);
    let hi = (-v + disc) / (2.0 * r);
    u.clamp(lo, hi)
}

/// Runs one closed-loop simulation.
pub fn run_closed_loop(cfg: &SimConfig, plant: &SimPlant, spec: &ControllerSpec) -> Result<SimResult> {
    cfg.validate()?;
    plant.loss.validate()?;
    plant.disturbance.validate()?;
    let np = NonlinearPlant::new(
        &plant.transducer,
        &plant.structure,
        cfg.friction_eps,
        EfficiencyMode::Smooth { p_eps: cfg.power_eps },
    )?;
    let mut law = prepare(spec, cfg)?;
    let (aw, bw, cw) = crate::plant::disturbance_matrices(&plant.disturbance);
    let g = np.gamma();
    let obs_block = match spec {
        ControllerSpec::Pgc(_) => Some(ObserverBlock::new(
            &PlantObserver::new(&plant.transducer, &plant.structure, cfg.observer_pole_factor)?,
            DisturbanceObserver::new(&plant.disturbance)?,
        )),
        _ => None,
    };
    let dyn_ = Dynamics {
        plant: &np,
        aw: [[aw[(0, 0)], aw[(0, 1)]], [aw[(1, 0)], aw[(1, 1)]]],
        bw: bw[(1, 0)],
        cw: [cw[(0, 0)], cw[(0, 1)]],
        k_u: np.k_u(),
        gamma: [g[0], g[1], g[2]],
        obs: obs_block.as_ref(),
    };
    let loss = &plant.loss;
    let dt = cfg.dt_plant;
    let n_steps = cfg.n_steps();
    let noise_sub = ratio(dt, cfg.noise_step(), "noise step")?;
    let mut noise = NoiseSource::new(cfg.seed, cfg.noise_step());
    let warm_steps = (cfg.warmup / dt).round() as usize;
    let decay = 2.0 / loss.tau_s + 1.0 / loss.tau_r;

    let mut s: State = [0.0; NS];
    let mut h = np.initial_efficiency();
    let mut storage = StorageState::new(cfg.initial_energy, loss)?;
    let mut acc = MeanSquare::default();
    let mut events = Vec::new();
    let mut series = cfg.record.then(Series::new);
    let mut override_steps = 0;
    let mut overriding = false;
    let mut root_fallbacks = 0;
    let mut balance_error: f64 = 0.0;
    let mut u_cmd = 0.0;

    for k in 0..n_steps {
        let t = k as f64 * dt;
        let n = (0..noise_sub).map(|_| noise.sample()).sum::<f64>() / noise_sub as f64;
        let s0 = s;
        let v = dyn_.velocity(&s);
        let w = dyn_.cw[0] * s[6] + dyn_.cw[1] * s[7];

        // controller output for this step
        let mut gain = None;
        match &mut law {
            Law::Static(c) => gain = Some(*c),
            Law::Linear { c, d, x, .. } => u_cmd = -(c.dot(x) + *d * v),
            Law::Pgc { plan, every, x_g, q, mu, phi, gamma } => {
                if k % *every == 0 {
                    if k > 0 {
                        *x_g = &*phi * &*x_g + &*gamma * &*q;
                    }
                    let dist = &dyn_.obs.expect("observers run with this law").dist;
                    let xw = dist.estimate_with(w, s[14]);
                    let mut xbar = DVector::zeros(plan.n_states());
                    xbar.rows_mut(0, 6).copy_from_slice(&s[8..14]);
                    xbar[6] = xw[0];
                    xbar[7] = xw[1];
                    xbar.rows_mut(8, x_g.len()).copy_from(x_g);
                    let out = plan.control(&xbar);
                    if out.fallback {
                        root_fallbacks += 1;
                        events.push(SimEvent { t, kind: SimEventKind::RootFallback });
                    }
                    u_cmd = out.u_bar[0];
                    for i in 0..q.len() {
                        q[i] = out.u_bar[1 + i];
                    }
                    *mu = out.mu;
                }
            }
        }
        let mut u = gain.map_or(u_cmd, |c| -c * v);

        // keep the storage equation solvable over the step
        let bound = storage.e_s * (-decay * dt).exp() / (2.0 * loss.tau_r);
        let forced = energy::electrical_power(u, v, loss.r) > bound;
        if forced {
            u = harvesting_override(u, v, loss.r, bound);
            override_steps += 1;
            if !overriding {
                events.push(SimEvent { t, kind: SimEventKind::OverrideStart });
            }
        } else if overriding {
            events.push(SimEvent { t, kind: SimEventKind::OverrideEnd });
        }
        overriding = forced;
        // the static law switches to the held value when overridden
        let stage_gain = if forced { None } else { gain };

        let k1 = dyn_.eval(&s, u, stage_gain, n, &mut h);
        let k2 = dyn_.eval(&axpy(&s, &k1.d, dt / 2.0), u, stage_gain, n, &mut h);
        let k3 = dyn_.eval(&axpy(&s, &k2.d, dt / 2.0), u, stage_gain, n, &mut h);
        let k4 = dyn_.eval(&axpy(&s, &k3.d, dt), u, stage_gain, n, &mut h);
        for i in 0..NS {
            s[i] += dt / 6.0 * (k1.d[i] + 2.0 * k2.d[i] + 2.0 * k3.d[i] + k4.d[i]);
        }
        if let Law::Linear { a, b, x, next, .. } = &mut law {
            next.gemv(1.0, a, x, 0.0);
            next.axpy(v, b, 1.0);
            std::mem::swap(x, next);
        }

        let p_e = energy::electrical_power(u, v, loss.r);
        let e0 = storage.e_s;
        let step = storage.step(p_e, u, loss, dt);
        if let Some(ev) = step.event {
            log::warn!("storage equation lost its real solution at t = {t:.4} s (E_s = {:.4} J)", ev.e_s);
            events.push(SimEvent {
                t,
                kind: SimEventKind::StorageInfeasible { e_s: ev.e_s, p_e: ev.p_e },
            });
        }
        if storage.feasible {
            // first-order balance: dE = -(P_e + P_d - P0 - u^2 R) dt at the
            // step start, since R u^2 is already part of P_e
            let predicted = -(p_e + step.p_d - loss.p0 - u * u * loss.r) * dt;
            let scale = (p_e.abs() + step.p_d.abs() + e0 / loss.tau_s) * dt + f64::MIN_POSITIVE;
            balance_error = balance_error.max(((storage.e_s - e0) - predicted).abs() / scale);
        }

        let z1 = k1.eval.dx[3] + k1.w;
        let z2 = k1.eval.dx[4] + k1.w;
        if k >= warm_steps {
            acc.push(z1, z2, k1.u, k1.w);
        }
        if let Some(ser) = series.as_mut() {
            if k % cfg.record_decimation == 0 {
                let mu = match &law {
                    Law::Pgc { mu, .. } => *mu,
                    _ => f64::NAN,
                };
                let xt = v / dyn_.k_u;
                let v_s = energy::storage_voltage(e0, loss.c_s);
                ser.push(&[
                    t,
                    s0[0],
                    s0[1],
                    s0[2],
                    s0[3],
                    s0[4],
                    s0[5],
                    k1.u,
                    v,
                    k1.eval.force,
                    p_e,
                    k1.eval.p,
                    e0,
                    v_s,
                    energy::required_dclink_voltage(k1.u, xt, v_s, &plant.transducer),
                    w,
                    z1,
                    z2,
                    mu,
                    if forced { 1.0 } else { 0.0 },
                ]);
            }
        }
    }

    Ok(SimResult {
        controller: spec.name().into(),
        seed: cfg.seed,
        metrics: acc.finish(cfg.current_weight),
        events,
        override_steps,
        root_fallbacks,
        final_energy: storage.e_s,
        dissipated: storage.cumulative_loss,
        balance_error,
        series,
    })
}

/// Worker count from `SPSA_LAB_THREADS`, if set to a positive integer.
pub fn thread_limit() -> Option<usize> {
    std::env::var(THREADS_ENV).ok()?.trim().parse().ok().filter(|&n| n > 0)
}

/// Runs one simulation per seed concurrently; results keep the seed order.
pub fn run_seeds(cfg: &SimConfig, plant: &SimPlant, spec: &ControllerSpec, seeds: &[u64]) -> Result<Vec<SimResult>> {
    let run = || {
        seeds
            .par_iter()
            .map(|&seed| {
                let c = SimConfig { seed, ..cfg.clone() };
                let r = run_closed_loop(&c, plant, spec)?;
                log::debug!("{} seed {seed}: J = {:.6}, {} events", r.controller, r.metrics.j, r.events.len());
                Ok(r)
            })
            .collect::<Result<Vec<_>>>()
    };
    match thread_limit() {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::InvalidParameter(format!("thread pool: {e}")))?
            .install(run),
        None => run(),
    }
}

/// Mean and sample standard deviation of `J` over runs.
pub fn j_statistics(results: &[SimResult]) -> (f64, f64) {
    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.metrics.j).sum::<f64>() / n;
    let var = results.iter().map(|r| (r.metrics.j - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (mean, var.sqrt())
}

/// Sample state covariance of `dx = A x dt + B dW` with unit-intensity
/// noise, stepped with the exact discrete transition and process noise so the
/// estimate carries no discretization bias.
pub fn monte_carlo_covariance(a: &Mat, b: &Mat, seed: u64, dt: f64, duration: f64, warmup: f64) -> Result<Mat> {
    let n = a.nrows();
    if !(dt > 0.0) || !(duration > warmup) || warmup < 0.0 || b.nrows() != n {
        return Err(Error::InvalidParameter("monte carlo covariance setup".into()));
    }
    // Van Loan: exp([[-A, BB'], [0, A']] dt)
    let mut big = Mat::zeros(2 * n, 2 * n);
    big.view_mut((0, 0), (n, n)).copy_from(&(-a * dt));
    big.view_mut((0, n), (n, n)).copy_from(&(b * b.transpose() * dt));
    big.view_mut((n, n), (n, n)).copy_from(&(a.transpose() * dt));
    let e = big.exp();
    let phi = e.view((n, n), (n, n)).transpose();
    let q = crate::linalg::sym(&(&phi * e.view((0, n), (n, n))));
    let l = crate::linalg::sym_fn(&q, |v| v.max(0.0).sqrt());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = DVector::zeros(n);
    let mut xn = DVector::zeros(n);
    let mut g = DVector::zeros(n);
    let mut acc = Mat::zeros(n, n);
    let skip = (warmup / dt).round() as usize;
    let total = (duration / dt).round() as usize;
    for k in 0..total {
        for gi in g.iter_mut() {
            *gi = StandardNormal.sample(&mut rng);
        }
        xn.gemv(1.0, &phi, &x, 0.0);
        xn.gemv(1.0, &l, &g, 1.0);
        std::mem::swap(&mut x, &mut xn);
        if k >= skip {
            acc.ger(1.0, &x, &x, 1.0);
        }
    }
    Ok(acc / (total - skip).max(1) as f64)
}
