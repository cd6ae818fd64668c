//! A small feed-forward network with a shared trunk and two heads.
//!
//! The trunk is the module whose layers receive both task gradients. The
//! auxiliary head reconstructs the clean input (mean squared error) and the
//! dominant head classifies it (softmax cross-entropy). Backpropagation is
//! written out by hand, one pass per task, so the trunk gradients of the two
//! tasks are available separately.

use std::fmt;
use std::io::{BufRead, Write};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("layer {layer}: expected input width {expected}, got {actual}")]
    DimensionMismatch {
        layer: LayerId,
        expected: usize,
        actual: usize,
    },
    #[error("{what}: expected {expected} rows, got {actual}")]
    BatchMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label {label} at row {row} is outside [0, {classes})")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("forward cache is stale: computed for parameter version {cache}, network is at {network}")]
    StaleCache { cache: u64, network: u64 },
    #[error("invalid network shape: {0}")]
    Shape(String),
    #[error("checkpoint line {line}: {msg}")]
    Checkpoint { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    /// Multiplies the upstream gradient by the activation derivative at `z`.
    fn backprop(self, z: &Array2<f64>, upstream: Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Relu => {
                let mut g = upstream;
                g.zip_mut_with(z, |g, &z| {
                    if z <= 0.0 {
                        *g = 0.0
                    }
                });
                g
            }
            Activation::Identity => upstream,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Section {
    Trunk,
    AuxHead,
    DomHead,
}

impl Section {
    fn name(self) -> &'static str {
        match self {
            Section::Trunk => "trunk",
            Section::AuxHead => "aux_head",
            Section::DomHead => "dom_head",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerId {
    pub section: Section,
    pub index: usize,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}.{}", self.section.name(), self.index)
    }
}

/// Fully connected layer `y = act(x·Wᵀ + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out_dim × in_dim`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: Array2<f64>, bias: Array1<f64>, activation: Activation) -> Result<Self, NetError> {
        if weights.nrows() != bias.len() {
            return Err(NetError::Shape(format!(
                "weights have {} rows but bias has {} entries",
                weights.nrows(),
                bias.len()
            )));
        }
        if weights.iter().chain(bias.iter()).any(|v| !v.is_finite()) {
            return Err(NetError::Shape("non-finite parameter".into()));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    /// Uniform in `±1/√fan_in` for weights and bias.
    pub fn init(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weights = Array2::from_shape_simple_fn((out_dim, in_dim), || rng.gen_range(-bound..bound));
        let bias = Array1::from_shape_simple_fn(out_dim, || rng.gen_range(-bound..bound));
        Self {
            weights,
            bias,
            activation,
        }
    }

    pub fn identity(dim: usize, activation: Activation) -> Self {
        Self {
            weights: Array2::eye(dim),
            bias: Array1::zeros(dim),
            activation,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weights.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.nrows()
    }

    pub fn num_params(&self) -> usize {
        self.weights.len() + self.bias.len()
    }
}

/// Gradient of one layer's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LayerGrad {
    pub fn zeros_like(layer: &Layer) -> Self {
        Self {
            weights: Array2::zeros(layer.weights.raw_dim()),
            bias: Array1::zeros(layer.bias.len()),
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            weights: &self.weights * factor,
            bias: &self.bias * factor,
        }
    }

    pub fn sum(&self, other: &LayerGrad) -> Self {
        Self {
            weights: &self.weights + &other.weights,
            bias: &self.bias + &other.bias,
        }
    }
}

/// Layer widths of a [`Network`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkShape {
    pub input_dim: usize,
    /// Output widths of the trunk layers (all ReLU).
    pub trunk: Vec<usize>,
    /// Hidden widths of the reconstruction head; its output width is
    /// `input_dim`.
    pub aux_hidden: Vec<usize>,
    /// Hidden widths of the classification head.
    pub dom_hidden: Vec<usize>,
    pub num_classes: usize,
}

impl Default for NetworkShape {
    fn default() -> Self {
        Self {
            input_dim: 32,
            trunk: vec![32, 32, 32],
            aux_hidden: vec![],
            dom_hidden: vec![32],
            num_classes: 4,
        }
    }
}

impl NetworkShape {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_dim == 0 {
            return Err(NetError::Shape("input_dim must be positive".into()));
        }
        if self.trunk.is_empty() {
            return Err(NetError::Shape("trunk needs at least one layer".into()));
        }
        if self.num_classes < 2 {
            return Err(NetError::Shape("need at least two classes".into()));
        }
        let widths = self.trunk.iter().chain(&self.aux_hidden).chain(&self.dom_hidden);
        if widths.into_iter().any(|&w| w == 0) {
            return Err(NetError::Shape("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Shared trunk plus reconstruction and classification heads.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    trunk: Vec<Layer>,
    aux_head: Vec<Layer>,
    dom_head: Vec<Layer>,
    version: u64,
}

/// Everything a backward pass needs from the forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub trunk_out: Array2<f64>,
    pub aux_out: Array2<f64>,
    pub dom_logits: Array2<f64>,
    trunk: SectionCache,
    aux: SectionCache,
    dom: SectionCache,
    version: u64,
}

/// Inputs and pre-activations of every layer in a section.
#[derive(Debug, Clone, Default)]
struct SectionCache {
    inputs: Vec<Array2<f64>>,
    preacts: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBundle {
    /// Mean over the batch of the per-sample squared reconstruction error.
    pub loss_aux: f64,
    /// Mean softmax cross-entropy.
    pub loss_dom: f64,
    /// `(1 − λ)·loss_aux + λ·loss_dom`.
    pub loss_total: f64,
    pub lambda: f64,
}

impl LossBundle {
    pub fn new(loss_aux: f64, loss_dom: f64, lambda: f64) -> Self {
        Self {
            loss_aux,
            loss_dom,
            loss_total: (1.0 - lambda) * loss_aux + lambda * loss_dom,
            lambda,
        }
    }
}

/// Trunk layer gradients split by task.
#[derive(Debug, Clone, PartialEq)]
pub struct TrunkLayerGrads {
    /// `∇[(1 − λ)·loss_aux]`.
    pub aux: LayerGrad,
    /// `∇[λ·loss_dom]`.
    pub dom: LayerGrad,
}

#[derive(Debug, Clone)]
pub struct TwoTaskGradients {
    pub trunk: Vec<TrunkLayerGrads>,
    /// Reconstruction head, from the weighted auxiliary loss only.
    pub aux_head: Vec<LayerGrad>,
    /// Classification head, from the weighted dominant loss only.
    pub dom_head: Vec<LayerGrad>,
    pub losses: LossBundle,
}

impl Network {
    pub fn new(shape: &NetworkShape, seed: u64) -> Result<Self, NetError> {
        shape.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trunk = Vec::with_capacity(shape.trunk.len());
        let mut width = shape.input_dim;
        for &w in &shape.trunk {
            trunk.push(Layer::init(width, w, Activation::Relu, &mut rng));
            width = w;
        }
        let trunk_out = width;
        let aux_head = head(trunk_out, &shape.aux_hidden, shape.input_dim, &mut rng);
        let dom_head = head(trunk_out, &shape.dom_hidden, shape.num_classes, &mut rng);
        Ok(Self {
            trunk,
            aux_head,
            dom_head,
            version: 0,
        })
    }

    pub fn from_layers(trunk: Vec<Layer>, aux_head: Vec<Layer>, dom_head: Vec<Layer>) -> Result<Self, NetError> {
        if trunk.is_empty() || aux_head.is_empty() || dom_head.is_empty() {
            return Err(NetError::Shape("every section needs at least one layer".into()));
        }
        let net = Self {
            trunk,
            aux_head,
            dom_head,
            version: 0,
        };
        for section in [Section::Trunk, Section::AuxHead, Section::DomHead] {
            let layers = net.section(section);
            for (i, pair) in layers.windows(2).enumerate() {
                if pair[0].out_dim() != pair[1].in_dim() {
                    return Err(NetError::DimensionMismatch {
                        layer: LayerId { section, index: i + 1 },
                        expected: pair[1].in_dim(),
                        actual: pair[0].out_dim(),
                    });
                }
            }
        }
        let trunk_out = net.trunk.last().unwrap().out_dim();
        for section in [Section::AuxHead, Section::DomHead] {
            let first = &net.section(section)[0];
            if first.in_dim() != trunk_out {
                return Err(NetError::DimensionMismatch {
                    layer: LayerId { section, index: 0 },
                    expected: first.in_dim(),
                    actual: trunk_out,
                });
            }
        }
        Ok(net)
    }

    pub fn section(&self, section: Section) -> &[Layer] {
        match section {
            Section::Trunk => &self.trunk,
            Section::AuxHead => &self.aux_head,
            Section::DomHead => &self.dom_head,
        }
    }

    /// Mutable access to a section. Invalidates outstanding forward caches.
    pub fn section_mut(&mut self, section: Section) -> &mut [Layer] {
        self.version += 1;
        match section {
            Section::Trunk => &mut self.trunk,
            Section::AuxHead => &mut self.aux_head,
            Section::DomHead => &mut self.dom_head,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.trunk[0].in_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.dom_head.last().unwrap().out_dim()
    }

    pub fn aux_dim(&self) -> usize {
        self.aux_head.last().unwrap().out_dim()
    }

    pub fn num_params(&self) -> usize {
        [Section::Trunk, Section::AuxHead, Section::DomHead]
            .iter()
            .flat_map(|&s| self.section(s))
            .map(Layer::num_params)
            .sum()
    }

    pub fn forward(&self, inputs: ArrayView2<'_, f64>) -> Result<ForwardPass, NetError> {
        let mut trunk = SectionCache::default();
        let trunk_out = run_section(Section::Trunk, &self.trunk, inputs.to_owned(), &mut trunk)?;
        let mut aux = SectionCache::default();
        let aux_out = run_section(Section::AuxHead, &self.aux_head, trunk_out.clone(), &mut aux)?;
        let mut dom = SectionCache::default();
        let dom_logits = run_section(Section::DomHead, &self.dom_head, trunk_out.clone(), &mut dom)?;
        Ok(ForwardPass {
            trunk_out,
            aux_out,
            dom_logits,
            trunk,
            aux,
            dom,
            version: self.version,
        })
    }

    /// Losses for a completed forward pass.
    pub fn losses(
        &self,
        pass: &ForwardPass,
        clean: ArrayView2<'_, f64>,
        labels: &[usize],
        lambda: f64,
    ) -> Result<LossBundle, NetError> {
        check_targets(pass, clean, labels, self.num_classes())?;
        let (loss_aux, _) = squared_error(&pass.aux_out, clean);
        let (loss_dom, _) = cross_entropy(&pass.dom_logits, labels);
        Ok(LossBundle::new(loss_aux, loss_dom, lambda))
    }

    /// Two backward passes: one for `(1 − λ)·loss_aux`, one for `λ·loss_dom`.
    /// Each head only sees its own task; the trunk sees both, separately.
    pub fn backward_two_task(
        &self,
        pass: &ForwardPass,
        clean: ArrayView2<'_, f64>,
        labels: &[usize],
        lambda: f64,
    ) -> Result<TwoTaskGradients, NetError> {
        if pass.version != self.version {
            return Err(NetError::StaleCache {
                cache: pass.version,
                network: self.version,
            });
        }
        check_targets(pass, clean, labels, self.num_classes())?;

        let (loss_aux, d_aux_out) = squared_error(&pass.aux_out, clean);
        let (loss_dom, d_logits) = cross_entropy(&pass.dom_logits, labels);

        let (aux_head, d_trunk_aux) =
            backprop_section(&self.aux_head, &pass.aux, d_aux_out * (1.0 - lambda));
        let (dom_head, d_trunk_dom) =
            backprop_section(&self.dom_head, &pass.dom, d_logits * lambda);

        let (trunk_aux, _) = backprop_section(&self.trunk, &pass.trunk, d_trunk_aux);
        let (trunk_dom, _) = backprop_section(&self.trunk, &pass.trunk, d_trunk_dom);
        let trunk = trunk_aux
            .into_iter()
            .zip(trunk_dom)
            .map(|(aux, dom)| TrunkLayerGrads { aux, dom })
            .collect();

        Ok(TwoTaskGradients {
            trunk,
            aux_head,
            dom_head,
            losses: LossBundle::new(loss_aux, loss_dom, lambda),
        })
    }

    /// Writes the plain-text checkpoint format:
    ///
    /// ```text
    /// gradient-remedy-network v1
    /// section trunk <layers>
    /// layer <out_dim> <in_dim> <relu|identity>
    /// w <in_dim values>        (out_dim lines, row-major)
    /// b <out_dim values>
    /// ...                      (then section aux_head, section dom_head)
    /// ```
    ///
    /// Values are written in Rust's shortest round-trip form, so loading
    /// a checkpoint restores every parameter bit for bit.
    pub fn write_checkpoint(&self, mut out: impl Write) -> Result<(), NetError> {
        writeln!(out, "gradient-remedy-network v1")?;
        for section in [Section::Trunk, Section::AuxHead, Section::DomHead] {
            let layers = self.section(section);
            writeln!(out, "section {} {}", section.name(), layers.len())?;
            for layer in layers {
                writeln!(
                    out,
                    "layer {} {} {}",
                    layer.out_dim(),
                    layer.in_dim(),
                    layer.activation.name()
                )?;
                for row in layer.weights.rows() {
                    write!(out, "w")?;
                    for v in row {
                        write!(out, " {v:?}")?;
                    }
                    writeln!(out)?;
                }
                write!(out, "b")?;
                for v in &layer.bias {
                    write!(out, " {v:?}")?;
                }
                writeln!(out)?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(input: impl BufRead) -> Result<Self, NetError> {
        let mut lines = input.lines().enumerate().map(|(i, l)| (i + 1, l));
        let mut next = |expect: &str| -> Result<(usize, String), NetError> {
            match lines.next() {
                Some((n, Ok(l))) => Ok((n, l)),
                Some((_, Err(e))) => Err(e.into()),
                None => Err(NetError::Checkpoint {
                    line: 0,
                    msg: format!("unexpected end of file, expected {expect}"),
                }),
            }
        };
        let (n, header) = next("header")?;
        if header.trim() != "gradient-remedy-network v1" {
            return Err(NetError::Checkpoint {
                line: n,
                msg: format!("bad header `{header}`"),
            });
        }
        let mut sections = Vec::new();
        for section in [Section::Trunk, Section::AuxHead, Section::DomHead] {
            let (n, line) = next("section")?;
            let parts: Vec<&str> = line.split_whitespace().collect();
            let count = match parts.as_slice() {
                ["section", name, count] if *name == section.name() => parse_num::<usize>(count, n)?,
                _ => {
                    return Err(NetError::Checkpoint {
                        line: n,
                        msg: format!("expected `section {} <count>`", section.name()),
                    })
                }
            };
            let mut layers = Vec::with_capacity(count);
            for _ in 0..count {
                let (n, line) = next("layer")?;
                let parts: Vec<&str> = line.split_whitespace().collect();
                let (out_dim, in_dim, activation) = match parts.as_slice() {
                    ["layer", o, i, a] => {
                        let act = match *a {
                            "relu" => Activation::Relu,
                            "identity" => Activation::Identity,
                            other => {
                                return Err(NetError::Checkpoint {
                                    line: n,
                                    msg: format!("unknown activation `{other}`"),
                                })
                            }
                        };
                        (parse_num::<usize>(o, n)?, parse_num::<usize>(i, n)?, act)
                    }
                    _ => {
                        return Err(NetError::Checkpoint {
                            line: n,
                            msg: "expected `layer <out> <in> <activation>`".into(),
                        })
                    }
                };
                let mut weights = Vec::with_capacity(out_dim * in_dim);
                for _ in 0..out_dim {
                    let (n, line) = next("weight row")?;
                    weights.extend(parse_row(&line, "w", in_dim, n)?);
                }
                let (n, line) = next("bias")?;
                let bias = parse_row(&line, "b", out_dim, n)?;
                let weights = Array2::from_shape_vec((out_dim, in_dim), weights)
                    .expect("row count checked");
                layers.push(Layer::new(weights, Array1::from(bias), activation).map_err(|e| {
                    NetError::Checkpoint {
                        line: n,
                        msg: e.to_string(),
                    }
                })?);
            }
            sections.push(layers);
        }
        let dom = sections.pop().unwrap();
        let aux = sections.pop().unwrap();
        let trunk = sections.pop().unwrap();
        Self::from_layers(trunk, aux, dom)
    }
}

fn head(in_dim: usize, hidden: &[usize], out_dim: usize, rng: &mut impl Rng) -> Vec<Layer> {
    let mut layers = Vec::with_capacity(hidden.len() + 1);
    let mut width = in_dim;
    for &h in hidden {
        layers.push(Layer::init(width, h, Activation::Relu, rng));
        width = h;
    }
    layers.push(Layer::init(width, out_dim, Activation::Identity, rng));
    layers
}

fn run_section(
    section: Section,
    layers: &[Layer],
    mut x: Array2<f64>,
    cache: &mut SectionCache,
) -> Result<Array2<f64>, NetError> {
    for (index, layer) in layers.iter().enumerate() {
        if x.ncols() != layer.in_dim() {
            return Err(NetError::DimensionMismatch {
                layer: LayerId { section, index },
                expected: layer.in_dim(),
                actual: x.ncols(),
            });
        }
        let z = x.dot(&layer.weights.t()) + &layer.bias;
        let a = layer.activation.apply(&z);
        cache.inputs.push(x);
        cache.preacts.push(z);
        x = a;
    }
    Ok(x)
}

/// Returns per-layer parameter gradients and the gradient w.r.t. the
/// section's input, given the gradient w.r.t. its output.
fn backprop_section(
    layers: &[Layer],
    cache: &SectionCache,
    d_out: Array2<f64>,
) -> (Vec<LayerGrad>, Array2<f64>) {
    let mut grads = Vec::with_capacity(layers.len());
    let mut upstream = d_out;
    for (i, layer) in layers.iter().enumerate().rev() {
        let dz = layer.activation.backprop(&cache.preacts[i], upstream);
        let weights = dz.t().dot(&cache.inputs[i]);
        let bias = dz.sum_axis(Axis(0));
        upstream = dz.dot(&layer.weights);
        grads.push(LayerGrad { weights, bias });
    }
    grads.reverse();
    (grads, upstream)
}

fn check_targets(
    pass: &ForwardPass,
    clean: ArrayView2<'_, f64>,
    labels: &[usize],
    classes: usize,
) -> Result<(), NetError> {
    let rows = pass.aux_out.nrows();
    if clean.nrows() != rows {
        return Err(NetError::BatchMismatch {
            what: "clean targets",
            expected: rows,
            actual: clean.nrows(),
        });
    }
    if clean.ncols() != pass.aux_out.ncols() {
        return Err(NetError::Shape(format!(
            "clean targets have width {}, reconstruction has {}",
            clean.ncols(),
            pass.aux_out.ncols()
        )));
    }
    if labels.len() != rows {
        return Err(NetError::BatchMismatch {
            what: "labels",
            expected: rows,
            actual: labels.len(),
        });
    }
    if let Some((row, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(NetError::LabelOutOfRange { row, label, classes });
    }
    Ok(())
}

/// Mean over rows of `‖pred − target‖²`, and its gradient w.r.t. `pred`.
pub(crate) fn squared_error(pred: &Array2<f64>, target: ArrayView2<'_, f64>) -> (f64, Array2<f64>) {
    let n = pred.nrows() as f64;
    let diff = pred - &target;
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n;
    (loss, diff * (2.0 / n))
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub(crate) fn cross_entropy(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let n = logits.nrows() as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_sum = max + sum.ln();
        loss += log_sum - row[label];
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_sum).exp() / n;
        }
        g[label] -= 1.0 / n;
    }
    (loss / n, grad)
}

fn parse_num<T: std::str::FromStr>(s: &str, line: usize) -> Result<T, NetError> {
    s.parse().map_err(|_| NetError::Checkpoint {
        line,
        msg: format!("cannot parse `{s}`"),
    })
}

fn parse_row(line: &str, tag: &str, len: usize, n: usize) -> Result<Vec<f64>, NetError> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(NetError::Checkpoint {
            line: n,
            msg: format!("expected a `{tag}` row"),
        });
    }
    let values = parts.map(|p| parse_num::<f64>(p, n)).collect::<Result<Vec<_>, _>>()?;
    if values.len() != len {
        return Err(NetError::Checkpoint {
            line: n,
            msg: format!("expected {len} values, found {}", values.len()),
        });
    }
    Ok(values)
}
