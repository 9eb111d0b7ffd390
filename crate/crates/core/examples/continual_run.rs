//! Runs every algorithm over a few seeds on the default stream and prints
//! the A/F table.
//!
//! ```text
//! cargo run --release --example continual_run -- [config.toml] [seeds]
//! ```

use std::time::Instant;

use rapo::harness::format_summary_table;
use rapo::{run_experiment, Algorithm, ExperimentConfig};

fn main() -> rapo::Result<()> {
    let mut args = std::env::args().skip(1);
    let cfg = match args.next() {
        Some(p) if p != "-" => ExperimentConfig::load(p.as_ref())?,
        _ => ExperimentConfig::default(),
    };
    let n_seeds: u64 = args.next().and_then(|s| s.parse().ok()).unwrap_or(5);
    let seeds: Vec<u64> = (0..n_seeds).collect();

    let start = Instant::now();
    let exp = run_experiment(&cfg, &seeds, &Algorithm::ALL, None, false)?;
    print!("{}", format_summary_table(&exp.summary));
    for seed in &seeds {
        let line: Vec<String> = Algorithm::ALL
            .iter()
            .map(|&a| {
                let r = exp.records.iter().find(|r| r.algorithm == a && r.seed == *seed).unwrap();
                format!("{}: A={:.3} F={:.3}", a.name(), r.last_accuracy, r.forgetting)
            })
            .collect();
        println!("seed {seed}  {}", line.join("  "));
    }
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
