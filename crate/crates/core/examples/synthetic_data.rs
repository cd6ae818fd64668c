//! Draws a batch of the two-task synthetic data and writes it as CSV.
//!
//!     cargo run --example synthetic_data -- [snr_db] > batch.csv

use gradient_remedy::SyntheticTask;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let snr_db: f64 = std::env::args().nth(1).map_or(Ok(0.0), |s| s.parse())?;
    let task = SyntheticTask::new(42, 4, 8)?;
    let batch = task.sample(0, 16, snr_db)?;

    let correct = (0..batch.len())
        .filter(|&i| task.nearest_template(batch.noisy.row(i)) == batch.labels[i])
        .count();
    eprintln!(
        "requested {snr_db} dB, measured {:.2} dB; nearest-template accuracy on noisy inputs {correct}/{}",
        batch.empirical_snr_db(),
        batch.len()
    );
    batch.write_csv(std::io::stdout().lock())?;
    Ok(())
}
