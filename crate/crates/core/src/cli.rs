//! Command-line front end: design, verify, simulate, fit-loss and report.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::artifacts::{
    self, ControllerFile, FileDigest, MetricsFile, Provenance, RunManifest, FORMAT_VERSION,
};
use crate::config::Config;
use crate::energy;
use crate::error::{Error, Result};
use crate::pipeline;
use crate::report;
use crate::sim::{self, ControllerSpec};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INPUT: u8 = 1;
pub const EXIT_INFEASIBLE: u8 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Parser)]
#[command(name = "spsa-lab", version, about = "Design, verify and simulate self-powered vibration controllers")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// TOML configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Overrides the simulation seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value = "json")]
    pub format: Format,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Designs static damping, the certified admittance and the
    /// receding-horizon plan.
    Design,
    /// Checks a controller file against the design losses.
    Verify(VerifyArgs),
    /// Simulates controller files on the nonlinear plant.
    Simulate(SimulateArgs),
    /// Fits the drive loss model to measured records.
    FitLoss(FitLossArgs),
    /// Tabulates metrics files against the static-damping baseline.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    pub controller: PathBuf,
    /// Port resistance override, ohm.
    #[arg(long)]
    pub r: Option<f64>,
    /// Leakage time constant override, s.
    #[arg(long)]
    pub tau_s: Option<f64>,
    /// Transmission time constant override, s.
    #[arg(long)]
    pub tau_r: Option<f64>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Controller files; defaults to the design outputs in the output
    /// directory.
    #[arg(long = "controller")]
    pub controllers: Vec<PathBuf>,
    /// Number of consecutive seeds starting at the configured one.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    /// Overrides the simulated horizon, s.
    #[arg(long)]
    pub duration: Option<f64>,
    /// Skip writing time series.
    #[arg(long)]
    pub no_series: bool,
}

#[derive(Debug, Args)]
pub struct FitLossArgs {
    /// CSV with columns v_out, u, u_s, P_loss.
    pub records: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub metrics: Vec<PathBuf>,
}

#[derive(Serialize)]
struct ErrorJson<'a> {
    error: &'a str,
    code: i32,
}

fn report_error(e: &Error) {
    let msg = e.to_string();
    let body = serde_json::to_string(&ErrorJson { error: &msg, code: e.code() }).unwrap_or(msg);
    eprintln!("{body}");
}

/// Parses `args` and runs the subcommand; returns the process exit code.
pub fn run<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            report_error(&e);
            EXIT_INPUT
        }
    }
}

fn dispatch(cli: &Cli) -> Result<u8> {
    let mut cfg = Config::load_or_default(cli.common.config.as_deref())?;
    if let Some(seed) = cli.common.seed {
        cfg.simulation.seed = seed;
    }
    match &cli.command {
        Command::Design => cmd_design(&cfg, &cli.common),
        Command::Verify(a) => cmd_verify(&cfg, a, &cli.common),
        Command::Simulate(a) => cmd_simulate(&cfg, a, &cli.common),
        Command::FitLoss(a) => cmd_fit_loss(&cfg, a, &cli.common),
        Command::Report(a) => cmd_report(&cfg, a, &cli.common),
    }
}

fn prepare_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn input_digests(cli: &Common) -> Result<Vec<FileDigest>> {
    cli.config.as_deref().map(artifacts::digest_file).into_iter().collect()
}

pub const STATIC_FILE: &str = "static.json";
pub const SPSA_FILE: &str = "spsa.json";
pub const PGC_FILE: &str = "pgc.json";
pub const DESIGN_REPORT_FILE: &str = "design_report.json";

#[derive(Serialize)]
struct DesignReportFile<'a> {
    format: u32,
    provenance: &'a Provenance,
    report: &'a pipeline::DesignReport,
}

fn cmd_design(cfg: &Config, common: &Common) -> Result<u8> {
    let hash = artifacts::config_hash(cfg)?;
    let mut manifest = RunManifest::start("design", &hash);
    manifest.inputs = input_digests(common)?;
    let d = pipeline::run_design(cfg)?;
    prepare_out(&common.out)?;
    let prov = Provenance::new(&hash, "design");
    let files = [
        (
            STATIC_FILE,
            ControllerFile {
                format: FORMAT_VERSION,
                provenance: prov.clone(),
                controller: ControllerSpec::Static { c_d: d.static_design.c_d },
                generator: None,
                j_predicted: d.static_design.j,
            },
        ),
        (
            SPSA_FILE,
            ControllerFile {
                format: FORMAT_VERSION,
                provenance: prov.clone(),
                controller: ControllerSpec::Spsa(d.spsa.controller.clone()),
                generator: None,
                j_predicted: d.spsa.j,
            },
        ),
        (
            PGC_FILE,
            ControllerFile {
                format: FORMAT_VERSION,
                provenance: prov.clone(),
                controller: ControllerSpec::Pgc(Box::new(d.plan.clone())),
                generator: Some(d.spsa.controller.clone()),
                j_predicted: d.plan.j,
            },
        ),
    ];
    for (name, f) in &files {
        manifest.outputs.push(artifacts::write_json(&common.out.join(name), f)?);
    }
    manifest.outputs.push(artifacts::write_json(
        &common.out.join(DESIGN_REPORT_FILE),
        &DesignReportFile {
            format: FORMAT_VERSION,
            provenance: &prov,
            report: &d.report,
        },
    )?);
    manifest.finish(&common.out)?;
    let r = &d.report;
    println!("static damping  c_d = {:.6} 1/ohm  J = {:.6}  ({} iterations)", r.c_d, r.j_static, r.static_iterations);
    println!(
        "admittance      J = {:.6}  ({:+.1}% vs static, {} states, {} iterations)",
        r.j_spsa, r.spsa_improvement_pct, r.spsa_states, r.spsa_iterations
    );
    println!("receding horizon J <= {:.6}", r.j_pgc_bound);
    Ok(EXIT_OK)
}

fn cmd_verify(cfg: &Config, a: &VerifyArgs, common: &Common) -> Result<u8> {
    let file = ControllerFile::read(&a.controller)?;
    let mut loss = cfg.design_loss.clone();
    if let Some(r) = a.r {
        loss.r = r;
    }
    if let Some(t) = a.tau_s {
        loss.tau_s = t;
    }
    if let Some(t) = a.tau_r {
        loss.tau_r = t;
    }
    let rep = pipeline::verify_controller(&file.controller, file.generator.as_ref(), &loss)?;
    match common.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&rep)?),
        Format::Csv => {
            println!("quantity,value");
            println!("feasible,{}", rep.feasible);
            if let Some(m) = &rep.margins {
                println!("state_max_eig,{:e}", m.state_max_eig);
                println!("port_max_eig,{:e}", m.port_max_eig);
                println!("p_min_eig,{:e}", m.p_min_eig);
            }
            if let Some(p) = &rep.pointwise {
                println!("pointwise_min,{:e}", p.min());
            }
            if let Some(e) = rep.reconstruction_error {
                println!("reconstruction_error,{e:e}");
            }
        }
    }
    Ok(if rep.feasible { EXIT_OK } else { EXIT_INFEASIBLE })
}

fn controller_paths(a: &SimulateArgs, out: &Path) -> Result<Vec<PathBuf>> {
    if !a.controllers.is_empty() {
        return Ok(a.controllers.clone());
    }
    let found: Vec<PathBuf> = [STATIC_FILE, SPSA_FILE, PGC_FILE]
        .iter()
        .map(|f| out.join(f))
        .filter(|p| p.exists())
        .collect();
    if found.is_empty() {
        return Err(Error::Config(format!(
            "no --controller given and no design outputs in {}",
            out.display()
        )));
    }
    Ok(found)
}

fn cmd_simulate(cfg: &Config, a: &SimulateArgs, common: &Common) -> Result<u8> {
    let mut sc = cfg.sim_config();
    if let Some(d) = a.duration {
        sc.duration = d;
    }
    sc.record = !a.no_series;
    sc.validate()?;
    if a.seeds == 0 {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let paths = controller_paths(a, &common.out)?;
    let hash = artifacts::config_hash(cfg)?;
    let mut manifest = RunManifest::start("simulate", &hash);
    manifest.inputs = input_digests(common)?;
    let mut controllers = Vec::new();
    for p in &paths {
        manifest.inputs.push(artifacts::digest_file(p)?);
        controllers.push(ControllerFile::read(p)?);
    }
    prepare_out(&common.out)?;
    let plant = cfg.sim_plant();
    let seeds: Vec<u64> = (0..a.seeds).map(|i| sc.seed + i).collect();
    let prov = Provenance::new(&hash, "simulate");
    println!("{:<8} {:>12} {:>12} {:>12} {:>12} {:>7}", "ctrl", "J", "E{z1^2}", "E{z2^2}", "E{u^2}", "events");
    for f in &controllers {
        let name = f.controller.name();
        let results = sim::run_seeds(&sc, &plant, &f.controller, &seeds)?;
        for r in &results {
            if let Some(series) = &r.series {
                let stem = format!("{name}_seed{}", r.seed);
                let path = match common.format {
                    Format::Csv => {
                        let p = common.out.join(format!("{stem}.csv"));
                        series.write_csv(std::fs::File::create(&p)?)?;
                        p
                    }
                    Format::Json => {
                        let p = common.out.join(format!("{stem}.json"));
                        artifacts::write_json(&p, &SeriesFile { provenance: &prov, columns: &sim::SERIES_COLUMNS, series })?;
                        p
                    }
                };
                manifest.outputs.push(artifacts::digest_file(&path)?);
            }
            println!(
                "{name:<8} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e} {:>7}  seed {}",
                r.metrics.j,
                r.metrics.z1,
                r.metrics.z2,
                r.metrics.u,
                r.events.len(),
                r.seed
            );
        }
        let mf = MetricsFile::from_results(name, &results, sc.duration, sc.warmup, prov.clone());
        if mf.below_warmup {
            println!("{name:<8} horizon {} s does not exceed the {} s warm-up; metrics are empty", sc.duration, sc.warmup);
        } else if results.len() > 1 {
            let p = &mf.pooled;
            println!("{name:<8} {:>12.5e} {:>12.5e} {:>12.5e} {:>12.5e}  pooled", p.j, p.z1, p.z2, p.u);
        }
        manifest
            .outputs
            .push(artifacts::write_json(&common.out.join(format!("{name}_metrics.json")), &mf)?);
    }
    manifest.finish(&common.out)?;
    Ok(EXIT_OK)
}

#[derive(Serialize)]
struct SeriesFile<'a> {
    provenance: &'a Provenance,
    columns: &'a [&'a str],
    series: &'a sim::Series,
}

#[derive(Serialize)]
struct LossFitFile<'a> {
    format: u32,
    provenance: &'a Provenance,
    fit: &'a energy::LossFit,
}

fn cmd_fit_loss(cfg: &Config, a: &FitLossArgs, common: &Common) -> Result<u8> {
    let records = energy::read_loss_records(&a.records)?;
    let fit = energy::fit_loss_model(&records)?;
    let hash = artifacts::config_hash(cfg)?;
    let mut manifest = RunManifest::start("fit-loss", &hash);
    manifest.inputs = input_digests(common)?;
    manifest.inputs.push(artifacts::digest_file(&a.records)?);
    prepare_out(&common.out)?;
    let prov = Provenance::new(&hash, "fit-loss");
    manifest.outputs.push(artifacts::write_json(
        &common.out.join("loss_fit.json"),
        &LossFitFile {
            format: FORMAT_VERSION,
            provenance: &prov,
            fit: &fit,
        },
    )?);
    manifest.finish(&common.out)?;
    let p = &fit.params;
    match common.format {
        Format::Json => println!("{}", serde_json::to_string_pretty(&fit)?),
        Format::Csv => {
            println!("r_p,r_t,r_l,p0,residual_rms,n_records");
            println!("{:e},{:e},{:e},{:e},{:e},{}", p.r_p, p.r_t, p.r_l, p.p0, fit.residual_rms, fit.n_records);
        }
    }
    Ok(EXIT_OK)
}

fn cmd_report(cfg: &Config, a: &ReportArgs, common: &Common) -> Result<u8> {
    let mut files = Vec::new();
    let hash = artifacts::config_hash(cfg)?;
    let mut manifest = RunManifest::start("report", &hash);
    for p in &a.metrics {
        manifest.inputs.push(artifacts::digest_file(p)?);
        files.push(artifacts::read_json::<MetricsFile>(p)?);
    }
    let table = report::build_report(&files)?;
    prepare_out(&common.out)?;
    let text = table.render_text();
    let csv = table.render_csv()?;
    for (name, body) in [("report.txt", &text), ("report.csv", &csv)] {
        let path = common.out.join(name);
        std::fs::write(&path, body)?;
        manifest.outputs.push(artifacts::digest_file(&path)?);
    }
    manifest.outputs.push(artifacts::write_json(&common.out.join("report.json"), &table)?);
    manifest.finish(&common.out)?;
    // the text table is the readable default; csv prints the machine form
    match common.format {
        Format::Json => print!("{text}"),
        Format::Csv => print!("{csv}"),
    }
    Ok(EXIT_OK)
}
