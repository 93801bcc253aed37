//! Closed-loop run of the coupled oscillators at two stopping constants.
//!
//! `cargo run --release -p dmpc --example van_der_pol`

use dmpc::bench::build_vdp;
use dmpc::closed_loop::{run_closed_loop, LoopConfig};
use dmpc::experiment::q_stats;
use dmpc::trajectory::TimeGrid;

fn main() -> dmpc::Result<()> {
    let bench = build_vdp()?;
    let grid = TimeGrid::new(bench.horizon, 61)?;
    for d in [0.005, 0.5] {
        let mut admm = bench.admm_config();
        admm.d = d;
        let config = LoopConfig::new(grid, bench.dt, 100, bench.x0.clone(), admm);
        let log = run_closed_loop(&bench.system, &config)?;
        let q = log.iterations();
        let (max, avg, min) = q_stats(&q);
        println!("d = {d}: q_k max {max}, avg {avg:.2}, min {min}");
        println!("  first steps {:?}", &q[..10]);
        println!(
            "  |x_K| / |x_0| = {:.2e}",
            log.state_norms().last().unwrap() / log.state_norms()[0]
        );
    }
    Ok(())
}
