//! Runs presets over seeds and override sets and prints one line per run.
//!
//! `cargo run --release -p stpr-core --example grid -- idx4,idx5 7,8 "a=1 b=2" "a=3"`

use stpr_core::harness::run_config;
use stpr_core::runconfig::{Preset, RunConfig};

fn main() -> stpr_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let presets: Vec<Preset> = args[0].split(',').map(str::parse).collect::<Result<_, _>>()?;
    let seeds: Vec<u64> = args[1].split(',').map(|s| s.parse().expect("seed")).collect();
    let sets: Vec<&str> = if args.len() > 2 { args[2..].iter().map(String::as_str).collect() } else { vec![""] };
    for set in &sets {
        println!("== {set}");
        for &seed in &seeds {
            for &preset in &presets {
                let mut cfg = RunConfig { seed, preset, ..Default::default() };
                for o in set.split_whitespace() {
                    cfg.apply_override(o)?;
                }
                let r = run_config(&cfg)?;
                let diag: Vec<String> = r.accuracy_matrix.iter().enumerate().map(|(i, row)| format!("{:.2}", row[i])).collect();
                let last = r.accuracy_matrix.last().map(|row| row.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" ")).unwrap_or_default();
                println!(
                    "{:<5} s{:<3} acc {:.3} bwf {:+.3} hit {} | diag {} | last {}",
                    preset.name(),
                    seed,
                    r.acc,
                    r.bwf,
                    r.routing_hit_rate.map_or("  - ".into(), |h| format!("{h:.2}")),
                    diag.join(" "),
                    last
                );
                if std::env::var("GRID_FULL").is_ok() {
                    for row in &r.accuracy_matrix {
                        println!("      {}", row.iter().map(|a| format!("{a:.2}")).collect::<Vec<_>>().join(" "));
                    }
                }
            }
        }
    }
    Ok(())
}
