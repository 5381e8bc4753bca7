//! Feature extractor, split classifier head and the frozen-snapshot state.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};
use crate::ClassId;

/// Cosine-head logit scale used when none is configured.
pub const DEFAULT_COSINE_SCALE: f64 = 16.0;
/// Std of freshly added head rows.
pub const DEFAULT_HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    fn apply<'t>(self, v: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => v.relu(),
            Activation::Tanh => v.tanh(),
            Activation::Identity => Ok(v),
        }
    }
}

/// `act(x · W + b)` with `W: [in, out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(weight: Tensor, bias: Tensor, activation: Activation) -> Result<Self> {
        let (_, out) = weight.as_matrix("dense layer")?;
        if bias.shape() != [out] {
            return Err(Error::dim(format!(
                "bias shape {:?} for {out} outputs",
                bias.shape()
            )));
        }
        Ok(DenseLayer {
            weight,
            bias,
            activation,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }
}

/// Multi-layer perceptron feature extractor `f`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Extractor {
    layers: Vec<DenseLayer>,
}

impl Extractor {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::config("extractor needs at least one layer"));
        }
        for pair in layers.windows(2) {
            if pair[0].out_dim() != pair[1].in_dim() {
                return Err(Error::dim(format!(
                    "layer widths {} -> {} do not chain",
                    pair[0].out_dim(),
                    pair[1].in_dim()
                )));
            }
        }
        Ok(Extractor { layers })
    }

    /// He-initialized MLP through `widths` (input first, feature dim last).
    pub fn mlp(widths: &[usize], activation: Activation, rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::config(format!("bad extractor widths {widths:?}")));
        }
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = match activation {
                    Activation::Relu => (2.0 / fan_in as f64).sqrt(),
                    _ => (1.0 / fan_in as f64).sqrt(),
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
                DenseLayer::new(
                    Tensor::from_parts(vec![fan_in, fan_out], data),
                    Tensor::zeros(&[fan_out]),
                    activation,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Extractor::new(layers)
    }

    /// Single linear layer with identity weights: `extract(x) = x`.
    pub fn identity(dim: usize) -> Self {
        Extractor {
            layers: vec![DenseLayer {
                weight: Tensor::identity(dim),
                bias: Tensor::zeros(&[dim]),
                activation: Activation::Identity,
            }],
        }
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim()
    }

    /// Registers the parameters on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundExtractor<'t> {
        let put = |t: &Tensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundExtractor {
            layers: self
                .layers
                .iter()
                .map(|l| (put(&l.weight), put(&l.bias), l.activation))
                .collect(),
        }
    }

    /// Features for a `[batch, input_dim]` batch with no gradient tracking.
    pub fn extract(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let input = tape.constant(x.clone());
        Ok(bound.forward(input)?.value())
    }

    pub(crate) fn parameters_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    fn parameters(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }
}

/// An [`Extractor`] whose parameters live on a tape.
pub struct BoundExtractor<'t> {
    layers: Vec<(Var<'t>, Var<'t>, Activation)>,
}

impl<'t> BoundExtractor<'t> {
    pub fn forward(&self, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        let in_dim = self.layers[0].0.shape()[0];
        if shape.len() != 2 || shape[1] != in_dim {
            return Err(Error::dim(format!(
                "extractor expects [batch, {in_dim}], got {shape:?}"
            )));
        }
        let mut h = x;
        for (w, b, act) in &self.layers {
            h = act.apply(h.matmul(w)?.add(b)?)?;
        }
        Ok(h)
    }

    /// Parameter handles in `Extractor::parameters_mut` order.
    pub fn params(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|(w, b, _)| [*w, *b]).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum HeadMode {
    /// `scale · cos(f, w_c)`
    Cosine { scale: f64 },
    /// `f · w_c`
    Linear,
}

impl Default for HeadMode {
    fn default() -> Self {
        HeadMode::Cosine {
            scale: DEFAULT_COSINE_SCALE,
        }
    }
}

/// Which logit columns to produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    All,
    /// Classes from every task before the latest one.
    OldOnly,
    /// Classes of the latest task.
    NewOnly,
}

/// Per-class weight rows, grouped by the task that introduced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierHead {
    weights: Tensor,
    classes: Vec<ClassId>,
    group_sizes: Vec<usize>,
    mode: HeadMode,
}

impl ClassifierHead {
    /// Head over the first task's classes.
    pub fn new(
        feature_dim: usize,
        classes: &[ClassId],
        mode: HeadMode,
        init_std: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if let HeadMode::Cosine { scale } = mode {
            if !(scale > 0.0) {
                return Err(Error::config("cosine scale must be positive"));
            }
        }
        let classes = sorted_unique(classes)?;
        let weights = init_rows(classes.len(), feature_dim, init_std, rng)?;
        Ok(ClassifierHead {
            weights,
            group_sizes: vec![classes.len()],
            classes,
            mode,
        })
    }

    pub fn from_weights(weights: Tensor, classes: Vec<ClassId>, mode: HeadMode) -> Result<Self> {
        let (rows, _) = weights.as_matrix("head weights")?;
        if rows != classes.len() {
            return Err(Error::dim(format!(
                "{rows} weight rows for {} classes",
                classes.len()
            )));
        }
        Ok(ClassifierHead {
            weights,
            group_sizes: vec![classes.len()],
            classes,
            mode,
        })
    }

    /// Appends a new task's classes as fresh rows.
    pub fn add_classes(&mut self, classes: &[ClassId], init_std: f64, rng: &mut impl Rng) -> Result<()> {
        let new = sorted_unique(classes)?;
        if let Some(c) = new.iter().find(|c| self.classes.contains(c)) {
            return Err(Error::contract(format!("class {c} already in head")));
        }
        let rows = init_rows(new.len(), self.feature_dim(), init_std, rng)?;
        self.weights = Tensor::concat_rows(&[&self.weights, &rows])?;
        self.group_sizes.push(new.len());
        self.classes.extend(new);
        Ok(())
    }

    pub fn classes(&self) -> &[ClassId] {
        &self.classes
    }

    pub fn group_sizes(&self) -> &[usize] {
        &self.group_sizes
    }

    pub fn mode(&self) -> HeadMode {
        self.mode
    }

    pub fn weights(&self) -> &Tensor {
        &self.weights
    }

    pub(crate) fn weights_mut(&mut self) -> &mut Tensor {
        &mut self.weights
    }

    pub fn feature_dim(&self) -> usize {
        self.weights.cols()
    }

    /// Column indices a split covers, in head order.
    pub fn split_columns(&self, split: Split) -> Result<Vec<usize>> {
        let total = self.classes.len();
        let newest = *self.group_sizes.last().expect("head has a group");
        let range = match split {
            Split::All => 0..total,
            Split::OldOnly => 0..total - newest,
            Split::NewOnly => total - newest..total,
        };
        if range.is_empty() {
            return Err(Error::contract(format!(
                "{split:?} selects no classes (groups {:?})",
                self.group_sizes
            )));
        }
        Ok(range.collect())
    }

    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundHead<'t> {
        let weights = if trainable {
            tape.leaf(self.weights.clone())
        } else {
            tape.constant(self.weights.clone())
        };
        BoundHead {
            feature_dim: self.feature_dim(),
            n_classes: self.classes.len(),
            old: self.split_columns(Split::OldOnly).ok(),
            new: self.split_columns(Split::NewOnly).ok(),
            mode: self.mode,
            weights,
        }
    }

    /// Eager logits with no gradient tracking.
    pub fn logits(&self, features: &Tensor, split: Split) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(bound.logits(tape.constant(features.clone()), split)?.value())
    }
}

/// A [`ClassifierHead`] whose weights live on a tape.
pub struct BoundHead<'t> {
    feature_dim: usize,
    n_classes: usize,
    old: Option<Vec<usize>>,
    new: Option<Vec<usize>>,
    mode: HeadMode,
    weights: Var<'t>,
}

impl<'t> BoundHead<'t> {
    pub fn weights(&self) -> Var<'t> {
        self.weights
    }

    pub fn logits(&self, features: Var<'t>, split: Split) -> Result<Var<'t>> {
        let d = self.feature_dim;
        let shape = features.shape();
        if shape.len() != 2 || shape[1] != d {
            return Err(Error::dim(format!(
                "head expects [batch, {d}] features, got {shape:?}"
            )));
        }
        let cols = match split {
            Split::All => None,
            Split::OldOnly => Some(self.old.as_ref().ok_or_else(|| Error::contract("head has no old classes"))?),
            Split::NewOnly => Some(self.new.as_ref().ok_or_else(|| Error::contract("head has no new classes"))?),
        };
        let w = match cols {
            Some(cols) if cols.len() != self.n_classes => self.weights.select_rows(cols)?,
            _ => self.weights,
        };
        match self.mode {
            HeadMode::Linear => features.matmul_nt(&w),
            HeadMode::Cosine { scale } => features
                .normalize_rows()?
                .matmul_nt(&w.normalize_rows()?)?
                .scale(scale),
        }
    }
}

/// Extractor plus head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub extractor: Extractor,
    pub head: ClassifierHead,
}

impl Model {
    /// All trainable tensors: extractor parameters then head weights.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = self.extractor.parameters_mut().collect();
        out.push(self.head.weights_mut());
        out
    }

    /// FNV-1a over every parameter's bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let params = self
            .extractor
            .parameters()
            .chain(std::iter::once(&self.head.weights));
        for t in params {
            for v in t.data() {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Current model, the frozen previous-task model, and the task index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub current: Model,
    frozen: Option<Model>,
    task: usize,
}

impl ModelState {
    pub fn new(current: Model) -> Self {
        ModelState {
            current,
            frozen: None,
            task: 0,
        }
    }

    pub fn task(&self) -> usize {
        self.task
    }

    pub fn frozen(&self) -> Option<&Model> {
        self.frozen.as_ref()
    }

    /// Copy of the state with `current` deep-copied into the frozen slot.
    pub fn snapshot(&self) -> ModelState {
        ModelState {
            current: self.current.clone(),
            frozen: Some(self.current.clone()),
            task: self.task,
        }
    }

    /// Snapshots, moves to the next task and adds its classes to the head.
    pub fn advance(&self, new_classes: &[ClassId], init_std: f64, rng: &mut impl Rng) -> Result<ModelState> {
        let mut next = self.snapshot();
        next.task += 1;
        next.current.head.add_classes(new_classes, init_std, rng)?;
        Ok(next)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let record = ModelCheckpoint {
            format: MODEL_FORMAT.to_string(),
            version: MODEL_VERSION,
            state: self.clone(),
        };
        fs::write(path, serde_json::to_vec(&record)?)?;
        Ok(())
    }

    pub fn load_json(path: &Path) -> Result<ModelState> {
        let record: ModelCheckpoint = serde_json::from_slice(&fs::read(path)?)?;
        if record.format != MODEL_FORMAT || record.version != MODEL_VERSION {
            return Err(Error::Decode(format!(
                "unsupported checkpoint {} v{}",
                record.format, record.version
            )));
        }
        if (record.state.task > 0) != record.state.frozen.is_some() {
            return Err(Error::Decode(
                "frozen model must be present exactly when task > 0".into(),
            ));
        }
        Ok(record.state)
    }
}

const MODEL_FORMAT: &str = "apr-model";
const MODEL_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ModelCheckpoint {
    format: String,
    version: u32,
    state: ModelState,
}

fn sorted_unique(classes: &[ClassId]) -> Result<Vec<ClassId>> {
    let mut v = classes.to_vec();
    v.sort_unstable();
    v.dedup();
    if v.len() != classes.len() || v.is_empty() {
        return Err(Error::contract(format!(
            "class list must be non-empty and unique: {classes:?}"
        )));
    }
    Ok(v)
}

fn init_rows(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Result<Tensor> {
    let normal = Normal::new(0.0, std).map_err(|e| Error::config(format!("head init: {e}")))?;
    let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
    Tensor::new(vec![rows, cols], data)
}
