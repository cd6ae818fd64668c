//! Judges every strategy on the same gradients: training follows the naive
//! sum while the other strategies only observe.
//!
//!     cargo run --release --example matched_gradients

use gradient_remedy::net::{Network, NetworkShape};
use gradient_remedy::trainer::{train_with, NullSink, ShadowCombiner, SyntheticSource};
use gradient_remedy::{RemedyConfig, Strategy, SyntheticTask, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = TrainConfig {
        remedy: RemedyConfig::with_strategy(Strategy::NaiveSum),
        epochs: 5,
        ..TrainConfig::default()
    };
    let observers = vec![
        RemedyConfig::with_strategy(Strategy::PCGrad),
        RemedyConfig {
            rescale_enabled: false,
            ..RemedyConfig::default()
        },
        RemedyConfig::default(),
    ];
    let combiner = ShadowCombiner::new(config.remedy.clone(), observers);
    let source = SyntheticSource {
        task: SyntheticTask::new(1, 4, 32)?,
        snr_db: 0.0,
        eval_samples: 500,
        batches_per_epoch: config.batches_per_epoch,
    };
    let net = Network::new(&NetworkShape::default(), 1)?;
    let out = train_with(&config, &combiner, &source, net, &mut NullSink)?;

    let driver_pct = out.epochs.iter().map(|e| e.pct_wrongly_dominant).sum::<f64>() / out.epochs.len() as f64;
    println!("{:<18} {:>12} {:>12}", "strategy", "% conflict", "% dominant");
    println!("{:<18} {:>12} {:>12.2}", "naive (driver)", "-", driver_pct);
    for t in combiner.tallies() {
        println!("{:<18} {:>12.2} {:>12.2}", t.label, t.pct_conflicting(), t.pct_wrongly_dominant());
    }
    Ok(())
}
