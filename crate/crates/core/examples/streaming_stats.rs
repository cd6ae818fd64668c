//! Watches training live through a custom statistics sink.
//!
//!     cargo run --release --example streaming_stats

use gradient_remedy::net::{Network, NetworkShape};
use gradient_remedy::trainer::{
    train_with, LayerRecord, StatsSink, SyntheticSource, TrainError,
};
use gradient_remedy::{EpochStats, StepStats, SyntheticTask, TrainConfig};

/// Prints one line per epoch and counts rescale events.
#[derive(Default)]
struct Console {
    rescaled: usize,
}

impl StatsSink for Console {
    fn step(&mut self, _step: &StepStats, layers: &[LayerRecord]) -> Result<(), TrainError> {
        self.rescaled += layers.iter().filter(|l| l.ratio.is_some()).count();
        Ok(())
    }

    fn epoch(&mut self, e: &EpochStats) -> Result<(), TrainError> {
        println!(
            "epoch {:>2}  acc {:.3}  aux loss {:.4}  dom loss {:.4}  conflict {:>5.1}% (before {:>5.1}%)  rescales so far {}",
            e.epoch, e.eval_accuracy, e.loss_aux, e.loss_dom, e.pct_conflicting, e.pct_conflicting_pre, self.rescaled
        );
        Ok(())
    }
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = TrainConfig {
        epochs: 8,
        ..TrainConfig::default()
    };
    let source = SyntheticSource {
        task: SyntheticTask::new(3, 4, 32)?,
        snr_db: -5.0,
        eval_samples: 1000,
        batches_per_epoch: config.batches_per_epoch,
    };
    let net = Network::new(&NetworkShape::default(), 3)?;
    train_with(&config, &config.remedy, &source, net, &mut Console::default())?;
    Ok(())
}
