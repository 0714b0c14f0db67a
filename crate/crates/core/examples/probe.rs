// Scratch driver for recovery-quality experiments at desk scale.

use isac_dbd_core::eval::{run_experiment, ExperimentConfig, SIGMA2_Z_FLOOR};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let k: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(2000);
    let l: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(4);
    let sigma2_z: f64 = args
        .get(3)
        .map(|s| s.parse().unwrap())
        .unwrap_or(SIGMA2_Z_FLOOR);
    let iters: usize = args.get(4).map(|s| s.parse().unwrap()).unwrap_or(100);
    let seeds: u64 = args.get(5).map(|s| s.parse().unwrap()).unwrap_or(5);

    println!("K={k} L=Q={l} sigma2_z={sigma2_z} iters={iters}");
    for seed in 1..=seeds {
        let started = Instant::now();
        let cfg = ExperimentConfig {
            n: 4,
            num_pulses: k,
            num_targets: l,
            num_paths: l,
            sigma2_z,
            max_iters: iters,
            seed,
        };
        match run_experiment(&cfg) {
            Ok(art) => {
                let m = &art.metrics;
                println!(
                    "seed {seed}: hit_r={:.2} hit_c={:.2} aligned_r={:.3} aligned_c={:.3} raw_r={:.3} assignment={} iters={} ll_last={:.3} [{:.1}s]",
                    m.support_hit_r,
                    m.support_hit_c,
                    m.aligned_l2_r,
                    m.aligned_l2_c,
                    m.raw_l2_r,
                    m.assignment,
                    art.report.iters,
                    art.report.loglik.last().unwrap(),
                    started.elapsed().as_secs_f64()
                );
            }
            Err(e) => println!("seed {seed}: FAILED {e} [{:.1}s]", started.elapsed().as_secs_f64()),
        }
    }
}
