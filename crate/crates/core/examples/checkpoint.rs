//! Trains briefly, saves the network, reloads it and evaluates both copies.
//!
//!     cargo run --release --example checkpoint

use std::fs::File;
use std::io::{BufReader, BufWriter};

use gradient_remedy::net::{Network, NetworkShape};
use gradient_remedy::trainer::{BatchSource, SyntheticSource};
use gradient_remedy::{evaluate, train, SyntheticTask, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config = TrainConfig {
        epochs: 3,
        ..TrainConfig::default()
    };
    let source = SyntheticSource {
        task: SyntheticTask::new(5, 4, 32)?,
        snr_db: 0.0,
        eval_samples: 1000,
        batches_per_epoch: config.batches_per_epoch,
    };
    let out = train(&config, &source, Network::new(&NetworkShape::default(), 5)?)?;

    let path = std::env::temp_dir().join("gradient-remedy-example.net");
    out.net.write_checkpoint(BufWriter::new(File::create(&path)?))?;
    let restored = Network::read_checkpoint(BufReader::new(File::open(&path)?))?;

    let eval = source.eval_batches()?;
    let a = evaluate(&out.net, &eval)?;
    let b = evaluate(&restored, &eval)?;
    println!("saved to {}", path.display());
    println!("trained:  accuracy {:.4}, aux mse {:.5}", a.accuracy, a.aux_mse);
    println!("restored: accuracy {:.4}, aux mse {:.5}", b.accuracy, b.aux_mse);
    Ok(())
}
