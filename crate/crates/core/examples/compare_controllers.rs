//! Designs the three controllers with the default configuration and
//! simulates each once.
//!
//! cargo run --release --example compare_controllers -- [duration] [seed]

use spsa_lab::config::Config;
use spsa_lab::pipeline;
use spsa_lab::sim::{self, ControllerSpec, SimConfig};

fn main() -> spsa_lab::Result<()> {
    let mut args = std::env::args().skip(1);
    let duration = args.next().map_or(Ok(600.0), |s| s.parse()).expect("duration in seconds");
    let seed = args.next().map_or(Ok(1), |s| s.parse()).expect("integer seed");

    let cfg = Config::default();
    let d = pipeline::run_design(&cfg)?;
    println!(
        "predicted J: static {:.5}, spsa {:.5}, pgc bound {:.5}",
        d.report.j_static, d.report.j_spsa, d.report.j_pgc_bound
    );
    let sc = SimConfig {
        duration,
        seed,
        record: false,
        ..cfg.sim_config()
    };
    let specs = [
        ControllerSpec::Static { c_d: d.static_design.c_d },
        ControllerSpec::Spsa(d.spsa.controller),
        ControllerSpec::Pgc(Box::new(d.plan)),
    ];
    for spec in &specs {
        let t = std::time::Instant::now();
        let r = sim::run_closed_loop(&sc, &cfg.sim_plant(), spec)?;
        let m = r.metrics;
        println!(
            "{:<7} J {:.5}  E{{z1^2}} {:.5}  E{{z2^2}} {:.5}  E{{u^2}} {:.4}  events {}  ({:.1?})",
            r.controller,
            m.j,
            m.z1,
            m.z2,
            m.u,
            r.events.len(),
            t.elapsed()
        );
    }
    Ok(())
}
