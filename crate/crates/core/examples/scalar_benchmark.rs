//! Runs the scalar benchmark and prints one line per method and batch size.
//!
//!     cargo run --release -p peiv-core --example scalar_benchmark [replications]

use std::time::Instant;

use peiv_core::{run_mc, McConfig, Method};

fn main() {
    let mut cfg = McConfig::scalar_benchmark();
    if let Some(m) = std::env::args().nth(1) {
        cfg.replications = m.parse().expect("replication count");
    }
    let start = Instant::now();
    let report = run_mc(&cfg).expect("benchmark run");
    println!(
        "{:>7} {:>5} {:>10} {:>10} {:>8} {:>8} {:>9} {:>10} {:>10} {:>5}",
        "method", "N", "rmse_th", "rmse_x0", "q05", "q95", "bias_th", "var_th", "rep_var", "fail"
    );
    for row in &report.rows {
        println!(
            "{:>7} {:>5} {:>10.5} {:>10.5} {:>8.4} {:>8.4} {:>9.5} {:>10.3e} {:>10.3e} {:>5}",
            row.method.as_str(),
            row.steps,
            row.rmse_theta,
            row.rmse_x0,
            row.q05,
            row.q95,
            row.bias_theta,
            row.var_theta,
            row.mean_reported_var,
            row.failures
        );
    }
    for method in Method::ALL {
        if let Some(e) = report.ellipse(method) {
            println!("{:>7} ellipse det {:.6e} center ({:.4}, {:.4})", method.as_str(), e.cov.determinant(), e.center.x, e.center.y);
        }
    }
    eprintln!("elapsed {:.1?}", start.elapsed());
}
