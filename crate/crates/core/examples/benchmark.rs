//! Run the default benchmark over a few seeds and print per-seed HTERs.
//!
//! `cargo run --release --example benchmark -- [n_seeds] [sessions]`

use std::time::Instant;

use spoofbench::experiment::{median, run_seed, BenchmarkConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let n: u64 = args.next().map_or(5, |s| s.parse().expect("n_seeds"));
    let mut cfg = BenchmarkConfig::default();
    if let Some(s) = args.next() {
        cfg.sessions_per_domain = s.parse().expect("sessions");
    }
    let mut cols: [Vec<f64>; 6] = Default::default();
    for seed in 0..n {
        let t = Instant::now();
        let o = run_seed(&cfg, seed).expect("benchmark seed");
        let vals = [
            o.v1.intra.rates.hter,
            o.v2.intra.rates.hter,
            o.v1.cross.rates.hter,
            o.v2.cross.rates.hter,
            o.student.intra.rates.hter,
            o.student.cross.rates.hter,
        ];
        for (c, v) in cols.iter_mut().zip(vals) {
            c.push(v);
        }
        println!(
            "seed {seed}: v1 intra {:.4} v2 intra {:.4} | v1 cross {:.4} v2 cross {:.4} | student intra {:.4} cross {:.4} | epochs-to-thr v1 {:?} v2 {:?} ({:.1}s)",
            vals[0], vals[1], vals[2], vals[3], vals[4], vals[5],
            o.convergence.v1.epochs_to_threshold, o.convergence.v2.epochs_to_threshold,
            t.elapsed().as_secs_f64()
        );
    }
    let m: Vec<String> = cols.iter().map(|c| format!("{:.4}", median(c))).collect();
    println!("median: v1 intra {} v2 intra {} | v1 cross {} v2 cross {} | student intra {} cross {}", m[0], m[1], m[2], m[3], m[4], m[5]);
}
