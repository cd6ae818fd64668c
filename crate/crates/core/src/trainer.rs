//! Training loop with per-layer gradient surgery on the trunk.
//!
//! Each step runs one forward pass and two backward passes, combines the two
//! task gradients of every trunk layer with a [`GradientCombiner`], and
//! applies the optimizer. Head layers are updated with their own task's
//! gradient only. Interference statistics are emitted for every step.

use std::io::Write;
use std::path::Path;
use std::sync::mpsc::Sender;
use std::sync::Mutex;

use ndarray::{concatenate, s, Array1, Array2, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gradvec::{flatten, reshape, GradError};
use crate::net::{Layer, LayerGrad, NetError, Network, Section};
use crate::surgery::{GradientCombiner, RemedyConfig, RemedyOutcome, SurgeryError, TaskGradients};
use crate::synthdata::{DataError, SampleBatch, SyntheticTask};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at epoch {epoch}, batch {batch} (aux {loss_aux}, dom {loss_dom})")]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        loss_aux: f64,
        loss_dom: f64,
    },
    #[error("non-finite gradient at epoch {epoch}, batch {batch} in layer `{layer}`")]
    NonFiniteGradient {
        epoch: usize,
        batch: usize,
        layer: String,
    },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Surgery(#[from] SurgeryError),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Optimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Optimizer {
    pub fn adam() -> Self {
        Optimizer::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// How a trunk layer's parameters are grouped into vectors for surgery.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LayerGrouping {
    /// Weights and bias form one vector per layer.
    #[default]
    Combined,
    /// Weights and bias are remedied as two separate vectors.
    Separate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub remedy: RemedyConfig,
    /// Weight of the dominant loss; the auxiliary loss gets `1 − lambda`.
    pub lambda: f64,
    pub epochs: usize,
    pub batches_per_epoch: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Linear learning-rate warm-up over this many steps; 0 disables it.
    pub warmup_steps: usize,
    pub grouping: LayerGrouping,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            remedy: RemedyConfig::default(),
            lambda: 0.7,
            epochs: 20,
            batches_per_epoch: 50,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: Optimizer::adam(),
            warmup_steps: 0,
            grouping: LayerGrouping::Combined,
            seed: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.remedy.validate()?;
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(TrainError::Config(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(TrainError::Config("learning rate must be positive".into()));
        }
        if self.epochs == 0 || self.batches_per_epoch == 0 || self.batch_size == 0 {
            return Err(TrainError::Config(
                "epochs, batches per epoch and batch size must be positive".into(),
            ));
        }
        if let Optimizer::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(TrainError::Config("Adam needs β1, β2 in [0, 1) and ε > 0".into()));
            }
        }
        Ok(())
    }
}

/// Where training and evaluation batches come from.
pub trait BatchSource {
    fn train_batch(&self, epoch: usize, batch: usize, batch_size: usize) -> Result<SampleBatch, TrainError>;

    fn eval_batches(&self) -> Result<Vec<SampleBatch>, TrainError>;
}

/// Batches drawn from a [`SyntheticTask`] at a fixed SNR.
#[derive(Debug, Clone)]
pub struct SyntheticSource {
    pub task: SyntheticTask,
    pub snr_db: f64,
    pub eval_samples: usize,
    /// Training stream index of batch `b` in epoch `e` is
    /// `e·batches_per_epoch + b`.
    pub batches_per_epoch: usize,
}

const EVAL_STREAM_BASE: u64 = 1 << 40;
const EVAL_CHUNK: usize = 256;

impl BatchSource for SyntheticSource {
    fn train_batch(&self, epoch: usize, batch: usize, batch_size: usize) -> Result<SampleBatch, TrainError> {
        let stream = (epoch * self.batches_per_epoch + batch) as u64;
        Ok(self.task.sample(stream, batch_size, self.snr_db)?)
    }

    fn eval_batches(&self) -> Result<Vec<SampleBatch>, TrainError> {
        let mut out = Vec::new();
        let mut left = self.eval_samples;
        let mut stream = EVAL_STREAM_BASE;
        while left > 0 {
            let n = left.min(EVAL_CHUNK);
            out.push(self.task.sample(stream, n, self.snr_db)?);
            left -= n;
            stream += 1;
        }
        Ok(out)
    }
}

/// Per-unit surgery record (one per remedied vector per step).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerRecord {
    pub epoch: usize,
    pub batch: usize,
    pub unit: String,
    pub phi: Option<f64>,
    pub theta_prime: Option<f64>,
    pub ratio: Option<f64>,
    pub norm_aux_in: f64,
    pub norm_dom_in: f64,
    pub norm_aux_out: f64,
    pub norm_dom_out: f64,
    pub conflicting_pre: bool,
    pub conflicting_post: bool,
    pub wrongly_dominant_pre: bool,
    pub wrongly_dominant_post: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub epoch: usize,
    pub batch: usize,
    pub layers_total: usize,
    /// Input pairs with a negative inner product.
    pub conflicting_pre: usize,
    /// Output pairs still conflicting after the strategy ran.
    pub conflicting_post: usize,
    /// Units whose projected auxiliary gradient exceeded `K` times the
    /// dominant norm, before any rescale.
    pub wrongly_dominant_pre: usize,
    /// Units whose output pair still satisfies the wrongly-dominant
    /// predicate.
    pub wrongly_dominant: usize,
    /// Mean input angle over non-degenerate units; NaN if there are none.
    pub mean_phi: f64,
    pub loss_aux: f64,
    pub loss_dom: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean over batches of the post-strategy conflicting share, in percent.
    pub pct_conflicting: f64,
    pub pct_conflicting_pre: f64,
    /// Mean over batches of the post-strategy wrongly-dominant share.
    pub pct_wrongly_dominant: f64,
    pub pct_wrongly_dominant_pre: f64,
    pub loss_aux: f64,
    pub loss_dom: f64,
    pub eval_accuracy: f64,
    pub eval_aux_mse: f64,
}

/// Consumer of training statistics as they are produced.
pub trait StatsSink {
    fn step(&mut self, _step: &StepStats, _layers: &[LayerRecord]) -> Result<(), TrainError> {
        Ok(())
    }

    fn epoch(&mut self, _epoch: &EpochStats) -> Result<(), TrainError> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl StatsSink for NullSink {}

#[derive(Debug, Clone)]
pub enum StatsEvent {
    Step(StepStats, Vec<LayerRecord>),
    Epoch(EpochStats),
}

/// Hands every record to another thread. A closed receiver is not an error;
/// records are simply dropped.
pub struct ChannelSink(pub Sender<StatsEvent>);

impl StatsSink for ChannelSink {
    fn step(&mut self, step: &StepStats, layers: &[LayerRecord]) -> Result<(), TrainError> {
        let _ = self.0.send(StatsEvent::Step(step.clone(), layers.to_vec()));
        Ok(())
    }

    fn epoch(&mut self, epoch: &EpochStats) -> Result<(), TrainError> {
        let _ = self.0.send(StatsEvent::Epoch(epoch.clone()));
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub net: Network,
    pub epochs: Vec<EpochStats>,
    pub steps: Vec<StepStats>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub accuracy: f64,
    /// Mean per-sample squared reconstruction error.
    pub aux_mse: f64,
    pub samples: usize,
}

/// Dominant-task accuracy and reconstruction error on held-out batches.
pub fn evaluate(net: &Network, batches: &[SampleBatch]) -> Result<EvalMetrics, TrainError> {
    let mut correct = 0usize;
    let mut total = 0usize;
    let mut sq = 0.0;
    for b in batches {
        let pass = net.forward(b.noisy.view())?;
        for (row, &label) in pass.dom_logits.rows().into_iter().zip(&b.labels) {
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            correct += usize::from(pred == label);
        }
        sq += pass
            .aux_out
            .iter()
            .zip(&b.clean)
            .map(|(p, c)| (p - c) * (p - c))
            .sum::<f64>();
        total += b.len();
    }
    if total == 0 {
        return Ok(EvalMetrics {
            accuracy: 0.0,
            aux_mse: 0.0,
            samples: 0,
        });
    }
    Ok(EvalMetrics {
        accuracy: correct as f64 / total as f64,
        aux_mse: sq / total as f64,
        samples: total,
    })
}

/// Trains with the built-in strategy selected by `config.remedy`.
pub fn train(config: &TrainConfig, source: &dyn BatchSource, net: Network) -> Result<TrainOutput, TrainError> {
    train_with(config, &config.remedy, source, net, &mut NullSink)
}

/// Trains with an arbitrary combiner, streaming statistics to `sink`.
pub fn train_with(
    config: &TrainConfig,
    combiner: &dyn GradientCombiner,
    source: &dyn BatchSource,
    mut net: Network,
    sink: &mut dyn StatsSink,
) -> Result<TrainOutput, TrainError> {
    config.validate()?;
    let eval = source.eval_batches()?;
    let mut optimizer = OptimizerState::new(config.optimizer, &net);
    let mut steps = Vec::with_capacity(config.epochs * config.batches_per_epoch);
    let mut epochs = Vec::with_capacity(config.epochs);
    let mut step_index = 0usize;

    for epoch in 0..config.epochs {
        let first = steps.len();
        for batch in 0..config.batches_per_epoch {
            let data = source.train_batch(epoch, batch, config.batch_size)?;
            let lr = warmup_lr(config, step_index);
            let (stats, records) = train_step(config, combiner, &mut net, &mut optimizer, &data, lr, epoch, batch)?;
            sink.step(&stats, &records)?;
            steps.push(stats);
            step_index += 1;
        }
        let metrics = evaluate(&net, &eval)?;
        let stats = summarize_epoch(epoch, &steps[first..], metrics);
        sink.epoch(&stats)?;
        epochs.push(stats);
    }
    Ok(TrainOutput { net, epochs, steps })
}

fn warmup_lr(config: &TrainConfig, step: usize) -> f64 {
    if config.warmup_steps == 0 {
        config.learning_rate
    } else {
        config.learning_rate * ((step + 1) as f64 / config.warmup_steps as f64).min(1.0)
    }
}

/// Runs one optimization step and returns its statistics.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    config: &TrainConfig,
    combiner: &dyn GradientCombiner,
    net: &mut Network,
    optimizer: &mut OptimizerState,
    data: &SampleBatch,
    learning_rate: f64,
    epoch: usize,
    batch: usize,
) -> Result<(StepStats, Vec<LayerRecord>), TrainError> {
    let pass = net.forward(data.noisy.view())?;
    let grads = net.backward_two_task(&pass, data.clean.view(), &data.labels, config.lambda)?;
    let losses = grads.losses;
    if !losses.loss_aux.is_finite() || !losses.loss_dom.is_finite() {
        return Err(TrainError::NonFiniteLoss {
            epoch,
            batch,
            loss_aux: losses.loss_aux,
            loss_dom: losses.loss_dom,
        });
    }

    let non_finite = |layer: String| TrainError::NonFiniteGradient { epoch, batch, layer };
    for (section, gs) in [("aux_head", &grads.aux_head), ("dom_head", &grads.dom_head)] {
        if let Some(i) = gs.iter().position(|g| !is_finite(g)) {
            return Err(non_finite(format!("{section}.{i}")));
        }
    }

    let mut records = Vec::new();
    let mut trunk_updates = Vec::with_capacity(grads.trunk.len());
    for (i, layer) in grads.trunk.iter().enumerate() {
        let name = format!("trunk.{i}");
        let (update, outcomes) =
            match combine_layer(&name, &layer.aux, &layer.dom, config.grouping, combiner) {
                Err(TrainError::Grad(GradError::NonFinite { layer, .. })) => {
                    return Err(non_finite(layer))
                }
                other => other?,
            };
        if !is_finite(&update) {
            return Err(non_finite(name));
        }
        for (unit, o) in outcomes {
            records.push(record(epoch, batch, unit, &o));
        }
        trunk_updates.push(update);
    }

    optimizer.step(net, Section::Trunk, &trunk_updates, learning_rate);
    optimizer.step(net, Section::AuxHead, &grads.aux_head, learning_rate);
    optimizer.step(net, Section::DomHead, &grads.dom_head, learning_rate);

    let live: Vec<f64> = records.iter().filter_map(|r| r.phi).collect();
    let mean_phi = if live.is_empty() {
        f64::NAN
    } else {
        live.iter().sum::<f64>() / live.len() as f64
    };
    let count = |f: fn(&LayerRecord) -> bool| records.iter().filter(|r| f(r)).count();
    let stats = StepStats {
        epoch,
        batch,
        layers_total: records.len(),
        conflicting_pre: count(|r| r.conflicting_pre),
        conflicting_post: count(|r| r.conflicting_post),
        wrongly_dominant_pre: count(|r| r.wrongly_dominant_pre),
        wrongly_dominant: count(|r| r.wrongly_dominant_post),
        mean_phi,
        loss_aux: losses.loss_aux,
        loss_dom: losses.loss_dom,
    };
    Ok((stats, records))
}

fn is_finite(g: &LayerGrad) -> bool {
    g.weights.iter().chain(&g.bias).all(|v| v.is_finite())
}

fn record(epoch: usize, batch: usize, unit: String, o: &RemedyOutcome) -> LayerRecord {
    LayerRecord {
        epoch,
        batch,
        unit,
        phi: o.phi,
        theta_prime: o.theta_prime,
        ratio: o.ratio,
        norm_aux_in: o.norm_aux_in,
        norm_dom_in: o.norm_dom_in,
        norm_aux_out: o.norm_aux_out,
        norm_dom_out: o.norm_dom_out,
        conflicting_pre: o.was_conflicting,
        conflicting_post: o.conflicting_post,
        wrongly_dominant_pre: o.was_wrongly_dominant,
        wrongly_dominant_post: o.wrongly_dominant_post,
    }
}

/// Flattens one trunk layer's task gradients, remedies them and reshapes the
/// combined gradient back into weight and bias form.
pub fn combine_layer(
    name: &str,
    aux: &LayerGrad,
    dom: &LayerGrad,
    grouping: LayerGrouping,
    combiner: &dyn GradientCombiner,
) -> Result<(LayerGrad, Vec<(String, RemedyOutcome)>), TrainError> {
    match grouping {
        LayerGrouping::Combined => {
            let a = augmented(aux);
            let d = augmented(dom);
            let pair = TaskGradients::new(
                name,
                flatten(name, a.view().into_dyn())?,
                flatten(name, d.view().into_dyn())?,
            )?;
            let outcome = combiner.combine(&pair)?;
            let total = reshape(&outcome.g_total)
                .into_dimensionality::<ndarray::Ix2>()
                .expect("augmented gradients are two-dimensional");
            let cols = total.ncols() - 1;
            let update = LayerGrad {
                weights: total.slice(s![.., ..cols]).to_owned(),
                bias: total.column(cols).to_owned(),
            };
            Ok((update, vec![(name.to_string(), outcome)]))
        }
        LayerGrouping::Separate => {
            let wname = format!("{name}.weight");
            let bname = format!("{name}.bias");
            let w = TaskGradients::new(
                wname.as_str(),
                flatten(&wname, aux.weights.view().into_dyn())?,
                flatten(&wname, dom.weights.view().into_dyn())?,
            )?;
            let b = TaskGradients::new(
                bname.as_str(),
                flatten(&bname, aux.bias.view().into_dyn())?,
                flatten(&bname, dom.bias.view().into_dyn())?,
            )?;
            let wo = combiner.combine(&w)?;
            let bo = combiner.combine(&b)?;
            let update = LayerGrad {
                weights: reshape(&wo.g_total)
                    .into_dimensionality::<ndarray::Ix2>()
                    .expect("weight gradient is two-dimensional"),
                bias: reshape(&bo.g_total)
                    .into_dimensionality::<ndarray::Ix1>()
                    .expect("bias gradient is one-dimensional"),
            };
            Ok((update, vec![(wname, wo), (bname, bo)]))
        }
    }
}

/// `[W | b]`, the weight matrix with the bias appended as a last column.
fn augmented(g: &LayerGrad) -> Array2<f64> {
    concatenate![Axis(1), g.weights, g.bias.view().insert_axis(Axis(1))]
}

fn summarize_epoch(epoch: usize, steps: &[StepStats], eval: EvalMetrics) -> EpochStats {
    let n = steps.len().max(1) as f64;
    let pct = |f: fn(&StepStats) -> usize| {
        steps
            .iter()
            .map(|s| {
                if s.layers_total == 0 {
                    0.0
                } else {
                    f(s) as f64 / s.layers_total as f64 * 100.0
                }
            })
            .sum::<f64>()
            / n
    };
    EpochStats {
        epoch,
        pct_conflicting: pct(|s| s.conflicting_post),
        pct_conflicting_pre: pct(|s| s.conflicting_pre),
        pct_wrongly_dominant: pct(|s| s.wrongly_dominant),
        pct_wrongly_dominant_pre: pct(|s| s.wrongly_dominant_pre),
        loss_aux: steps.iter().map(|s| s.loss_aux).sum::<f64>() / n,
        loss_dom: steps.iter().map(|s| s.loss_dom).sum::<f64>() / n,
        eval_accuracy: eval.accuracy,
        eval_aux_mse: eval.aux_mse,
    }
}

/// Post-strategy interference counts of one observed strategy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ShadowTally {
    pub label: String,
    pub units: usize,
    pub conflicting_post: usize,
    pub wrongly_dominant_post: usize,
}

impl ShadowTally {
    pub fn pct_conflicting(&self) -> f64 {
        pct(self.conflicting_post, self.units)
    }

    pub fn pct_wrongly_dominant(&self) -> f64 {
        pct(self.wrongly_dominant_post, self.units)
    }
}

fn pct(count: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        count as f64 / total as f64 * 100.0
    }
}

/// Trains with `driver` while also running every observer strategy on the
/// very same gradient pairs, so strategies can be compared without their
/// training trajectories diverging.
pub struct ShadowCombiner {
    driver: RemedyConfig,
    observers: Vec<RemedyConfig>,
    tallies: Mutex<Vec<ShadowTally>>,
}

impl ShadowCombiner {
    pub fn new(driver: RemedyConfig, observers: Vec<RemedyConfig>) -> Self {
        let tallies = observers
            .iter()
            .map(|o| ShadowTally {
                label: o.label(),
                ..ShadowTally::default()
            })
            .collect();
        Self {
            driver,
            observers,
            tallies: Mutex::new(tallies),
        }
    }

    pub fn tallies(&self) -> Vec<ShadowTally> {
        self.tallies.lock().expect("tally lock").clone()
    }
}

impl GradientCombiner for ShadowCombiner {
    fn combine(&self, grads: &TaskGradients) -> Result<RemedyOutcome, SurgeryError> {
        let mut tallies = self.tallies.lock().expect("tally lock");
        for (observer, tally) in self.observers.iter().zip(tallies.iter_mut()) {
            let o = observer.combine(grads)?;
            tally.units += 1;
            tally.conflicting_post += usize::from(o.conflicting_post);
            tally.wrongly_dominant_post += usize::from(o.wrongly_dominant_post);
        }
        self.driver.combine(grads)
    }

    fn label(&self) -> String {
        self.driver.label()
    }

    fn dominance_threshold(&self) -> f64 {
        self.driver.k
    }
}

/// Optimizer moments for every layer of a network.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    kind: Optimizer,
    moments: Vec<Moments>,
    t: [u64; 3],
}

#[derive(Debug, Clone)]
struct Moments {
    m: LayerGrad,
    v: LayerGrad,
}

impl OptimizerState {
    pub fn new(kind: Optimizer, net: &Network) -> Self {
        let moments = [Section::Trunk, Section::AuxHead, Section::DomHead]
            .iter()
            .flat_map(|&s| net.section(s))
            .map(|l| Moments {
                m: LayerGrad::zeros_like(l),
                v: LayerGrad::zeros_like(l),
            })
            .collect();
        Self {
            kind,
            moments,
            t: [0; 3],
        }
    }

    fn offset(net: &Network, section: Section) -> usize {
        match section {
            Section::Trunk => 0,
            Section::AuxHead => net.section(Section::Trunk).len(),
            Section::DomHead => net.section(Section::Trunk).len() + net.section(Section::AuxHead).len(),
        }
    }

    /// Applies `grads` to every layer of `section`.
    pub fn step(&mut self, net: &mut Network, section: Section, grads: &[LayerGrad], lr: f64) {
        let offset = Self::offset(net, section);
        let slot = section as usize;
        self.t[slot] += 1;
        let t = self.t[slot];
        let layers = net.section_mut(section);
        assert_eq!(layers.len(), grads.len(), "one gradient per layer");
        for (i, (layer, g)) in layers.iter_mut().zip(grads).enumerate() {
            match self.kind {
                Optimizer::Sgd => sgd(layer, g, lr),
                Optimizer::Adam { beta1, beta2, eps } => {
                    let mo = &mut self.moments[offset + i];
                    let hp = AdamStep { lr, beta1, beta2, eps, t };
                    adam(&mut layer.weights, &g.weights, &mut mo.m.weights, &mut mo.v.weights, hp);
                    adam_1d(&mut layer.bias, &g.bias, &mut mo.m.bias, &mut mo.v.bias, hp);
                }
            }
        }
    }
}

fn sgd(layer: &mut Layer, g: &LayerGrad, lr: f64) {
    layer.weights.scaled_add(-lr, &g.weights);
    layer.bias.scaled_add(-lr, &g.bias);
}

#[derive(Clone, Copy)]
struct AdamStep {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
}

impl AdamStep {
    fn update(&self, p: &mut f64, g: f64, m: &mut f64, v: &mut f64) {
        *m = self.beta1 * *m + (1.0 - self.beta1) * g;
        *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
        let m_hat = *m / (1.0 - self.beta1.powi(self.t as i32));
        let v_hat = *v / (1.0 - self.beta2.powi(self.t as i32));
        *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
    }
}

fn adam(p: &mut Array2<f64>, g: &Array2<f64>, m: &mut Array2<f64>, v: &mut Array2<f64>, hp: AdamStep) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| hp.update(p, g, m, v));
}

fn adam_1d(p: &mut Array1<f64>, g: &Array1<f64>, m: &mut Array1<f64>, v: &mut Array1<f64>, hp: AdamStep) {
    Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| hp.update(p, g, m, v));
}

/// Float formatting used in every stats CSV: 13 significant digits.
pub fn fmt_float(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v:.12e}")
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(fmt_float).unwrap_or_default()
}

pub const STEPS_HEADER: [&str; 9] = [
    "epoch",
    "batch",
    "layers_total",
    "conflicting_pre",
    "conflicting_post",
    "wrongly_dominant",
    "mean_phi_rad",
    "loss_aux",
    "loss_dom",
];

pub const EPOCHS_HEADER: [&str; 6] = [
    "epoch",
    "pct_conflicting",
    "pct_wrongly_dominant",
    "loss_aux",
    "loss_dom",
    "eval_accuracy",
];

pub const LAYERS_HEADER: [&str; 14] = [
    "epoch",
    "batch",
    "unit",
    "phi_rad",
    "theta_prime_rad",
    "ratio",
    "norm_aux_in",
    "norm_dom_in",
    "norm_aux_out",
    "norm_dom_out",
    "conflicting_pre",
    "conflicting_post",
    "wrongly_dominant_pre",
    "wrongly_dominant_post",
];

/// Streams `steps.csv`, `epochs.csv` and `layers.csv` rows as they arrive.
pub struct CsvStatsWriter<W: Write> {
    steps: csv::Writer<W>,
    epochs: csv::Writer<W>,
    layers: Option<csv::Writer<W>>,
}

impl CsvStatsWriter<std::fs::File> {
    /// Creates the three files inside `dir`.
    pub fn create(dir: &Path, with_layers: bool) -> Result<Self, TrainError> {
        let open = |name: &str| std::fs::File::create(dir.join(name));
        let layers = if with_layers {
            Some(open("layers.csv")?)
        } else {
            None
        };
        Self::new(open("steps.csv")?, open("epochs.csv")?, layers)
    }
}

impl<W: Write> CsvStatsWriter<W> {
    pub fn new(steps: W, epochs: W, layers: Option<W>) -> Result<Self, TrainError> {
        let mut steps = csv::Writer::from_writer(steps);
        steps.write_record(STEPS_HEADER)?;
        let mut epochs = csv::Writer::from_writer(epochs);
        epochs.write_record(EPOCHS_HEADER)?;
        let layers = match layers {
            Some(w) => {
                let mut w = csv::Writer::from_writer(w);
                w.write_record(LAYERS_HEADER)?;
                Some(w)
            }
            None => None,
        };
        Ok(Self {
            steps,
            epochs,
            layers,
        })
    }

    pub fn flush(&mut self) -> Result<(), TrainError> {
        self.steps.flush()?;
        self.epochs.flush()?;
        if let Some(l) = &mut self.layers {
            l.flush()?;
        }
        Ok(())
    }

    pub fn consume(&mut self, event: StatsEvent) -> Result<(), TrainError> {
        match event {
            StatsEvent::Step(s, l) => self.step(&s, &l),
            StatsEvent::Epoch(e) => self.epoch(&e),
        }
    }
}

impl<W: Write> StatsSink for CsvStatsWriter<W> {
    fn step(&mut self, s: &StepStats, layers: &[LayerRecord]) -> Result<(), TrainError> {
        self.steps.write_record([
            s.epoch.to_string(),
            s.batch.to_string(),
            s.layers_total.to_string(),
            s.conflicting_pre.to_string(),
            s.conflicting_post.to_string(),
            s.wrongly_dominant.to_string(),
            fmt_float(s.mean_phi),
            fmt_float(s.loss_aux),
            fmt_float(s.loss_dom),
        ])?;
        if let Some(w) = &mut self.layers {
            let b = |v: bool| u8::from(v).to_string();
            for r in layers {
                w.write_record([
                    r.epoch.to_string(),
                    r.batch.to_string(),
                    r.unit.clone(),
                    fmt_opt(r.phi),
                    fmt_opt(r.theta_prime),
                    fmt_opt(r.ratio),
                    fmt_float(r.norm_aux_in),
                    fmt_float(r.norm_dom_in),
                    fmt_float(r.norm_aux_out),
                    fmt_float(r.norm_dom_out),
                    b(r.conflicting_pre),
                    b(r.conflicting_post),
                    b(r.wrongly_dominant_pre),
                    b(r.wrongly_dominant_post),
                ])?;
            }
        }
        Ok(())
    }

    fn epoch(&mut self, e: &EpochStats) -> Result<(), TrainError> {
        self.epochs.write_record([
            e.epoch.to_string(),
            fmt_float(e.pct_conflicting),
            fmt_float(e.pct_wrongly_dominant),
            fmt_float(e.loss_aux),
            fmt_float(e.loss_dom),
            fmt_float(e.eval_accuracy),
        ])?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::NetworkShape;
    use crate::surgery::Strategy;

    fn setup(strategy: Strategy) -> (TrainConfig, SyntheticSource, Network) {
        let shape = NetworkShape {
            input_dim: 8,
            trunk: vec![8, 8],
            aux_hidden: vec![],
            dom_hidden: vec![8],
            num_classes: 3,
        };
        let config = TrainConfig {
            remedy: RemedyConfig::with_strategy(strategy),
            epochs: 2,
            batches_per_epoch: 5,
            batch_size: 16,
            ..TrainConfig::default()
        };
        let source = SyntheticSource {
            task: SyntheticTask::new(3, 3, 8).unwrap(),
            snr_db: 0.0,
            eval_samples: 100,
            batches_per_epoch: config.batches_per_epoch,
        };
        (config, source, Network::new(&shape, 4).unwrap())
    }

    #[test]
    fn sgd_step_is_exact() {
        let (mut config, source, net) = setup(Strategy::NaiveSum);
        config.optimizer = Optimizer::Sgd;
        let lr = 0.05;
        let data = source.train_batch(0, 0, 16).unwrap();
        let pass = net.forward(data.noisy.view()).unwrap();
        let g = net
            .backward_two_task(&pass, data.clean.view(), &data.labels, config.lambda)
            .unwrap();
        let mut after = net.clone();
        let mut opt = OptimizerState::new(Optimizer::Sgd, &after);
        train_step(&config, &config.remedy, &mut after, &mut opt, &data, lr, 0, 0).unwrap();
        for (i, (old, new)) in net
            .section(Section::Trunk)
            .iter()
            .zip(after.section(Section::Trunk))
            .enumerate()
        {
            let combined = g.trunk[i].aux.sum(&g.trunk[i].dom);
            for ((o, n), gr) in old.weights.iter().zip(&new.weights).zip(&combined.weights) {
                assert!((n - o + lr * gr).abs() <= 1e-12);
            }
            for ((o, n), gr) in old.bias.iter().zip(&new.bias).zip(&combined.bias) {
                assert!((n - o + lr * gr).abs() <= 1e-12);
            }
        }
        for (old, new) in net.section(Section::DomHead).iter().zip(after.section(Section::DomHead)) {
            assert_ne!(old.weights, new.weights);
        }
    }

    #[test]
    fn combined_and_separate_grouping_agree_for_naive_sum() {
        let (config, source, net) = setup(Strategy::NaiveSum);
        let data = source.train_batch(0, 0, 16).unwrap();
        let pass = net.forward(data.noisy.view()).unwrap();
        let g = net
            .backward_two_task(&pass, data.clean.view(), &data.labels, config.lambda)
            .unwrap();
        let (c, co) = combine_layer("t", &g.trunk[0].aux, &g.trunk[0].dom, LayerGrouping::Combined, &config.remedy).unwrap();
        let (s, so) = combine_layer("t", &g.trunk[0].aux, &g.trunk[0].dom, LayerGrouping::Separate, &config.remedy).unwrap();
        assert_eq!(co.len(), 1);
        assert_eq!(so.len(), 2);
        assert_eq!(c, s);
        assert_eq!(c, g.trunk[0].aux.sum(&g.trunk[0].dom));
    }

    #[test]
    fn remedy_leaves_no_conflict() {
        let (config, source, net) = setup(Strategy::GradientRemedy);
        let out = train(&config, &source, net).unwrap();
        assert!(out.steps.iter().all(|s| s.conflicting_post == 0));
        assert!(out.epochs.iter().all(|e| e.pct_conflicting == 0.0));
        assert!(out.steps.iter().all(|s| s.conflicting_pre <= s.layers_total));
    }

    #[test]
    fn training_is_deterministic() {
        let (config, source, net) = setup(Strategy::GradientRemedy);
        let a = train(&config, &source, net.clone()).unwrap();
        let b = train(&config, &source, net).unwrap();
        assert_eq!(a.epochs, b.epochs);
        assert_eq!(a.net, b.net);
    }

    #[test]
    fn separate_grouping_doubles_units() {
        let (mut config, source, net) = setup(Strategy::PCGrad);
        config.grouping = LayerGrouping::Separate;
        config.epochs = 1;
        let out = train(&config, &source, net).unwrap();
        assert!(out.steps.iter().all(|s| s.layers_total == 4));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let (mut config, source, net) = setup(Strategy::NaiveSum);
        config.lambda = 1.5;
        assert!(matches!(train(&config, &source, net.clone()), Err(TrainError::Config(_))));
        config.lambda = 0.7;
        config.learning_rate = 0.0;
        assert!(matches!(train(&config, &source, net), Err(TrainError::Config(_))));
    }

    struct Poisoned(SyntheticSource);

    impl BatchSource for Poisoned {
        fn train_batch(&self, epoch: usize, batch: usize, size: usize) -> Result<SampleBatch, TrainError> {
            let mut b = self.0.train_batch(epoch, batch, size)?;
            if (epoch, batch) == (1, 3) {
                b.noisy[[0, 0]] = f64::INFINITY;
            }
            Ok(b)
        }

        fn eval_batches(&self) -> Result<Vec<SampleBatch>, TrainError> {
            self.0.eval_batches()
        }
    }

    #[test]
    fn non_finite_loss_reports_location() {
        let (config, source, net) = setup(Strategy::GradientRemedy);
        match train(&config, &Poisoned(source), net) {
            Err(TrainError::NonFiniteLoss { epoch, batch, .. }) => assert_eq!((epoch, batch), (1, 3)),
            other => panic!("expected a non-finite loss, got {other:?}"),
        }
    }

    #[test]
    fn shadow_observers_see_the_driver_trajectory() {
        let (config, source, net) = setup(Strategy::NaiveSum);
        let observers = vec![
            RemedyConfig::with_strategy(Strategy::NaiveSum),
            RemedyConfig::with_strategy(Strategy::PCGrad),
            RemedyConfig {
                rescale_enabled: false,
                ..RemedyConfig::default()
            },
        ];
        let shadow = ShadowCombiner::new(config.remedy.clone(), observers);
        let out = train_with(&config, &shadow, &source, net.clone(), &mut NullSink).unwrap();
        let plain = train(&config, &source, net).unwrap();
        assert_eq!(out.epochs, plain.epochs);
        let t = shadow.tallies();
        let naive_wd: usize = plain.steps.iter().map(|s| s.wrongly_dominant).sum();
        let naive_c: usize = plain.steps.iter().map(|s| s.conflicting_post).sum();
        assert_eq!(t[0].wrongly_dominant_post, naive_wd);
        assert_eq!(t[0].conflicting_post, naive_c);
        assert_eq!(t[1].conflicting_post, 0);
        assert!(t[1].wrongly_dominant_post <= t[0].wrongly_dominant_post);
        assert!(t[2].wrongly_dominant_post >= t[1].wrongly_dominant_post);
    }

    #[test]
    fn warmup_ramps_linearly() {
        let config = TrainConfig {
            warmup_steps: 4,
            learning_rate: 1.0,
            ..TrainConfig::default()
        };
        let lrs: Vec<f64> = (0..6).map(|s| warmup_lr(&config, s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn csv_headers_and_precision() {
        let (config, source, net) = setup(Strategy::NaiveSum);
        let mut steps = Vec::new();
        let mut epochs = Vec::new();
        {
            let mut w = CsvStatsWriter::new(&mut steps, &mut epochs, None).unwrap();
            train_with(&config, &config.remedy, &source, net, &mut w).unwrap();
            w.flush().unwrap();
        }
        let steps = String::from_utf8(steps).unwrap();
        let epochs = String::from_utf8(epochs).unwrap();
        assert!(steps.starts_with(
            "epoch,batch,layers_total,conflicting_pre,conflicting_post,wrongly_dominant,mean_phi_rad,loss_aux,loss_dom\n"
        ));
        assert!(epochs.starts_with("epoch,pct_conflicting,pct_wrongly_dominant,loss_aux,loss_dom,eval_accuracy\n"));
        assert_eq!(steps.lines().count(), 11);
        assert_eq!(epochs.lines().count(), 3);
        let loss = steps.lines().nth(1).unwrap().split(',').nth(7).unwrap();
        let mantissa = loss.split('e').next().unwrap().replace(['.', '-'], "");
        assert!(mantissa.len() >= 9, "{loss}");
    }
}
