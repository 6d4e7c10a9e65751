//! Prints Acc / BWF / routing hit-rate for each preset on the default stream.
//!
//! `cargo run --release -p stpr-core --example ablation -- [seed] [key=value ...]`

use std::time::Instant;

use stpr_core::harness::run_config;
use stpr_core::runconfig::{Preset, RunConfig};

fn main() -> stpr_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed = args.next().map_or(Ok(7), |s| s.parse()).expect("seed must be an integer");
    let overrides: Vec<String> = args.collect();
    println!("{:<6} {:>7} {:>7} {:>7} {:>7}", "preset", "acc", "bwf", "hit", "secs");
    for preset in Preset::ALL {
        let mut cfg = RunConfig {
            seed,
            preset,
            ..Default::default()
        };
        for o in &overrides {
            cfg.apply_override(o)?;
        }
        let t = Instant::now();
        let r = run_config(&cfg)?;
        println!(
            "{:<6} {:>7.3} {:>7.3} {:>7} {:>7.1}",
            preset.name(),
            r.acc,
            r.bwf,
            r.routing_hit_rate.map_or("-".into(), |h| format!("{h:.3}")),
            t.elapsed().as_secs_f64()
        );
        for row in &r.accuracy_matrix {
            println!("       {}", row.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" "));
        }
    }
    Ok(())
}
