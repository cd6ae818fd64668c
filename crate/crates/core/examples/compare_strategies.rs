//! Trains every strategy on a few seeds and prints the summary table.
//!
//!     cargo run --release --example compare_strategies -- [snr_db]
//!
//! Outputs go to `$GRADIENT_REMEDY_OUT/compare` (default `runs/compare`).

use gradient_remedy::experiment::{self, ExperimentSpec, StrategyVariant};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut spec = ExperimentSpec {
        name: "compare".into(),
        seeds: vec![1, 2, 3],
        write_layers: false,
        ..ExperimentSpec::default()
    };
    spec.data.snr_db = std::env::args().nth(1).map_or(Ok(-10.0), |s| s.parse())?;
    let variants: Vec<StrategyVariant> = ["naive", "pcgrad", "projection-only", "gradient-remedy"]
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_, _>>()?;

    let report = experiment::sweep(&spec, &variants)?;
    println!("snr {} dB, K = {}", spec.data.snr_db, spec.train.remedy.k);
    println!("{:<16} {:>9} {:>12} {:>14}", "strategy", "accuracy", "% conflict", "% dominant");
    for s in &report.strategies {
        let r = &s.summary;
        println!(
            "{:<16} {:>9.4} {:>12.2} {:>14.3}",
            r.strategy, r.acc_median, r.pct_conflicting_mean, r.pct_wrongly_dominant_median
        );
    }
    println!("\nper-step logs under {}", report.dir.display());
    Ok(())
}
