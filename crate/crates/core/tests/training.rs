use gradient_remedy::net::{Network, NetworkShape, Section};
use gradient_remedy::trainer::{BatchSource, LayerGrouping, Optimizer, SyntheticSource};
use gradient_remedy::{evaluate, train, RemedyConfig, Strategy, SyntheticTask, TrainConfig};

fn source(seed: u64, snr_db: f64, batches_per_epoch: usize) -> SyntheticSource {
    SyntheticSource {
        task: SyntheticTask::new(seed, 4, 32).unwrap(),
        snr_db,
        eval_samples: 1000,
        batches_per_epoch,
    }
}

fn short_config(strategy: Strategy, epochs: usize) -> TrainConfig {
    TrainConfig {
        remedy: RemedyConfig::with_strategy(strategy),
        epochs,
        batches_per_epoch: 20,
        ..TrainConfig::default()
    }
}

#[test]
fn task_gradients_are_linear_in_lambda() {
    let net = Network::new(&NetworkShape::default(), 3).unwrap();
    let batch = source(3, 0.0, 1).train_batch(0, 0, 32).unwrap();
    let pass = net.forward(batch.noisy.view()).unwrap();
    let g = |lambda| {
        net.backward_two_task(&pass, batch.clean.view(), &batch.labels, lambda)
            .unwrap()
    };
    let (a, b) = (g(0.7), g(0.4));
    for (ta, tb) in a.trunk.iter().zip(&b.trunk) {
        // aux scales with (1 − λ), dom with λ.
        let aux = &ta.aux.weights - &(&tb.aux.weights * (0.3 / 0.6));
        let dom = &ta.dom.weights - &(&tb.dom.weights * (0.7 / 0.4));
        assert!(aux.iter().all(|v| v.abs() < 1e-14));
        assert!(dom.iter().all(|v| v.abs() < 1e-14));
    }
    let edge = g(1.0);
    assert!(edge.trunk.iter().all(|t| t.aux.weights.iter().all(|&v| v == 0.0)));
}

#[test]
fn head_gradients_ignore_the_other_task() {
    let net = Network::new(&NetworkShape::default(), 5).unwrap();
    let batch = source(5, 0.0, 1).train_batch(0, 0, 16).unwrap();
    let pass = net.forward(batch.noisy.view()).unwrap();
    let g0 = net.backward_two_task(&pass, batch.clean.view(), &batch.labels, 0.0).unwrap();
    assert!(g0.dom_head.iter().all(|l| l.weights.iter().all(|&v| v == 0.0)));
    let g1 = net.backward_two_task(&pass, batch.clean.view(), &batch.labels, 1.0).unwrap();
    assert!(g1.aux_head.iter().all(|l| l.weights.iter().all(|&v| v == 0.0)));
}

#[test]
fn untrained_network_is_at_chance() {
    let src = source(8, 0.0, 1);
    let eval = src.eval_batches().unwrap();
    let net = Network::new(&NetworkShape::default(), 8).unwrap();
    let m = evaluate(&net, &eval).unwrap();
    assert_eq!(m.samples, 1000);
    assert!((m.accuracy - 0.25).abs() <= 0.1, "accuracy {}", m.accuracy);
}

#[test]
fn high_snr_training_separates_the_classes() {
    for strategy in [Strategy::NaiveSum, Strategy::GradientRemedy] {
        let config = TrainConfig {
            remedy: RemedyConfig::with_strategy(strategy),
            ..TrainConfig::default()
        };
        let src = source(2, 20.0, config.batches_per_epoch);
        let net = Network::new(&NetworkShape::default(), 2).unwrap();
        let out = train(&config, &src, net).unwrap();
        let acc = out.epochs.last().unwrap().eval_accuracy;
        assert!(acc >= 0.99, "{strategy:?}: {acc}");
    }
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let net = Network::new(&NetworkShape::default(), 4).unwrap();
        train(&short_config(Strategy::GradientRemedy, 2), &source(4, 0.0, 20), net).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.steps, b.steps);
    assert_eq!(a.epochs, b.epochs);
    assert_eq!(a.net.section(Section::Trunk), b.net.section(Section::Trunk));
}

#[test]
fn lambda_one_leaves_aux_head_untouched() {
    let net = Network::new(&NetworkShape::default(), 6).unwrap();
    let before = net.section(Section::AuxHead).to_vec();
    let config = TrainConfig {
        lambda: 1.0,
        optimizer: Optimizer::Sgd,
        learning_rate: 0.05,
        ..short_config(Strategy::NaiveSum, 1)
    };
    let out = train(&config, &source(6, 0.0, 20), net).unwrap();
    assert_eq!(out.net.section(Section::AuxHead), &before[..]);
}

#[test]
fn separate_grouping_doubles_the_units() {
    let net = Network::new(&NetworkShape::default(), 7).unwrap();
    let config = TrainConfig {
        grouping: LayerGrouping::Separate,
        ..short_config(Strategy::GradientRemedy, 1)
    };
    let out = train(&config, &source(7, 0.0, 20), net).unwrap();
    assert!(out.steps.iter().all(|s| s.layers_total == 6));
    assert!(out.steps.iter().all(|s| s.conflicting_post == 0));
}

#[test]
fn checkpoint_restores_predictions() {
    let net = Network::new(&NetworkShape::default(), 9).unwrap();
    let out = train(&short_config(Strategy::PCGrad, 1), &source(9, 0.0, 20), net).unwrap();
    let mut buf = Vec::new();
    out.net.write_checkpoint(&mut buf).unwrap();
    let restored = Network::read_checkpoint(&buf[..]).unwrap();
    let x = source(9, 0.0, 1).train_batch(3, 0, 8).unwrap().noisy;
    assert_eq!(
        restored.forward(x.view()).unwrap().dom_logits,
        out.net.forward(x.view()).unwrap().dom_logits
    );
}
