//! Runs the default simulated experiment in memory and prints the regression
//! table and AUPRC per detector. `--curves` also prints every PR point.
//!
//! ```text
//! cargo run --release -p nbm-core --example default_experiment -- [--curves] [seed ...]
//! ```

use nbm_core::experiment::{auprc_csv, metrics_csv, run_experiment, ExperimentConfig};

fn main() -> nbm_core::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let curves = args.iter().any(|a| a == "--curves");
    let seeds: Vec<u64> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let seeds = if seeds.is_empty() { vec![2012] } else { seeds };
    for seed in seeds {
        let mut cfg = ExperimentConfig::simulated_default("unused");
        cfg.seed = seed;
        let cfg = cfg.resolved();
        let started = std::time::Instant::now();
        let result = run_experiment(&cfg)?;
        println!("seed {seed} ({:.1} s)", started.elapsed().as_secs_f64());
        print!("{}", metrics_csv(&result));
        print!("{}", auprc_csv(&result));
        if curves {
            for d in result.models.iter().map(|m| &m.detection).chain([&result.baseline]) {
                println!("{}: threshold precision recall tp fp fn ignored", d.name);
                for p in &d.curve.points {
                    let c = p.counts;
                    println!(
                        "  {:>9.4} {:>6} {:>6} {:>2} {:>3} {:>2} {:>2}",
                        p.threshold,
                        c.precision.map(|v| format!("{v:.3}")).unwrap_or_default(),
                        c.recall.map(|v| format!("{v:.3}")).unwrap_or_default(),
                        c.tp,
                        c.fp,
                        c.fn_,
                        c.ignored
                    );
                }
            }
        }
        println!();
    }
    Ok(())
}
