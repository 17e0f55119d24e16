//! Teacher (ResNet18) and student (3 conv + 3 dense) networks.
//!
//! A [`Model`] owns its tensors; a forward pass binds them into a
//! [`Graph`] so the same code serves inference, training and f64 gradient
//! checks.

mod format;
mod student;
mod teacher;

use std::sync::Arc;

use edgekd_tensor::{BatchNormStats, Element, Graph, Mode, Tensor, TensorError, Var};
use indexmap::IndexMap;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use format::{decode_model, encode_model, load_model, save_model, SKDM_MAGIC, SKDM_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("input {height}x{width} too small, need at least {min}x{min}")]
    InputTooSmall { height: usize, width: usize, min: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic {0:?}, expected \"SKDM\"")]
    BadMagic([u8; 4]),
    #[error("checksum mismatch: stored {stored:08x}, computed {computed:08x}")]
    ChecksumMismatch { stored: u32, computed: u32 },
    #[error("unsupported model file version {0}")]
    VersionMismatch(u8),
    #[error("malformed model file: {0}")]
    Malformed(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Teacher,
    Student,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::Student => "student",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub in_channels: usize,
    pub num_classes: usize,
    pub adaptive_pool_hw: (usize, usize),
    pub dropout_p: f64,
}

impl ModelConfig {
    pub fn student() -> Self {
        ModelConfig { kind: ModelKind::Student, in_channels: 3, num_classes: 2, adaptive_pool_hw: (12, 14), dropout_p: 0.1 }
    }

    /// The teacher has no dropout and pools globally.
    pub fn teacher() -> Self {
        ModelConfig { kind: ModelKind::Teacher, in_channels: 3, num_classes: 2, adaptive_pool_hw: (1, 1), dropout_p: 0.0 }
    }

    pub fn for_kind(kind: ModelKind) -> Self {
        match kind {
            ModelKind::Teacher => Self::teacher(),
            ModelKind::Student => Self::student(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.in_channels == 0 {
            return bad("in_channels must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return bad(format!("dropout_p {} outside [0, 1)", self.dropout_p));
        }
        let (h, w) = self.adaptive_pool_hw;
        if h == 0 || w == 0 {
            return bad(format!("adaptive pool {h}x{w}"));
        }
        if self.kind == ModelKind::Teacher && (self.adaptive_pool_hw != (1, 1) || self.dropout_p != 0.0) {
            return bad("teacher uses global average pooling and no dropout".into());
        }
        Ok(())
    }

    /// Smallest spatial extent the network accepts.
    pub fn min_input(&self) -> usize {
        match self.kind {
            ModelKind::Student => student::MIN_INPUT,
            ModelKind::Teacher => teacher::MIN_INPUT,
        }
    }

    /// Width of the activations feeding the final dense layer.
    pub fn embedding_width(&self) -> usize {
        match self.kind {
            ModelKind::Student => 64,
            ModelKind::Teacher => 512,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Role {
    Param,
    Buffer,
}

/// Name, shape, role and init fan-in of one tensor in a model.
#[derive(Clone, Debug, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: Role,
    pub init: Init,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Kaiming uniform, bound `sqrt(6 / fan_in)`.
    KaimingUniform { fan_in: usize },
    Zeros,
    Ones,
}

impl TensorSpec {
    fn param(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        TensorSpec { name: name.into(), shape: shape.to_vec(), role: Role::Param, init }
    }

    fn buffer(name: impl Into<String>, shape: &[usize], init: Init) -> Self {
        TensorSpec { name: name.into(), shape: shape.to_vec(), role: Role::Buffer, init }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Deterministic tensor inventory for a config.
pub fn tensor_specs(config: &ModelConfig) -> Result<Vec<TensorSpec>> {
    config.validate()?;
    Ok(match config.kind {
        ModelKind::Student => student::specs(config),
        ModelKind::Teacher => teacher::specs(config),
    })
}

pub(crate) fn conv_specs(out: &mut Vec<TensorSpec>, name: &str, f: usize, c: usize, k: usize, bias: bool) {
    let fan_in = c * k * k;
    out.push(TensorSpec::param(format!("{name}.weight"), &[f, c, k, k], Init::KaimingUniform { fan_in }));
    if bias {
        out.push(TensorSpec::param(format!("{name}.bias"), &[f], Init::Zeros));
    }
}

pub(crate) fn dense_specs(out: &mut Vec<TensorSpec>, name: &str, d: usize, o: usize) {
    out.push(TensorSpec::param(format!("{name}.weight"), &[d, o], Init::KaimingUniform { fan_in: d }));
    out.push(TensorSpec::param(format!("{name}.bias"), &[o], Init::Zeros));
}

pub(crate) fn bn_specs(out: &mut Vec<TensorSpec>, name: &str, c: usize) {
    out.push(TensorSpec::param(format!("{name}.weight"), &[c], Init::Ones));
    out.push(TensorSpec::param(format!("{name}.bias"), &[c], Init::Zeros));
    out.push(TensorSpec::buffer(format!("{name}.running_mean"), &[c], Init::Zeros));
    out.push(TensorSpec::buffer(format!("{name}.running_var"), &[c], Init::Ones));
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    params: IndexMap<String, Arc<Tensor>>,
    buffers: IndexMap<String, Arc<Tensor>>,
    frozen: bool,
    /// Free-form provenance (feature params, hyperparameters, history).
    pub metadata: serde_json::Map<String, serde_json::Value>,
}

/// Build a freshly initialized model; identical for identical `(config, seed)`.
pub fn build(config: &ModelConfig, seed: u64) -> Result<Model> {
    let specs = tensor_specs(config)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = IndexMap::new();
    let mut buffers = IndexMap::new();
    for spec in specs {
        let n = spec.numel();
        let data: Vec<f32> = match spec.init {
            Init::KaimingUniform { fan_in } => {
                let bound = (6.0 / fan_in as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-bound..bound)).collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
        };
        let t = Arc::new(Tensor::new(&spec.shape, data)?);
        match spec.role {
            Role::Param => params.insert(spec.name, t),
            Role::Buffer => buffers.insert(spec.name, t),
        };
    }
    Ok(Model { config: config.clone(), params, buffers, frozen: false, metadata: Default::default() })
}

pub fn build_student(config: &ModelConfig, seed: u64) -> Result<Model> {
    if config.kind != ModelKind::Student {
        return Err(ModelError::InvalidConfig("build_student needs a student config".into()));
    }
    build(config, seed)
}

pub fn build_teacher(config: &ModelConfig, seed: u64) -> Result<Model> {
    if config.kind != ModelKind::Teacher {
        return Err(ModelError::InvalidConfig("build_teacher needs a teacher config".into()));
    }
    build(config, seed)
}

/// Element count of parameters, plus buffers unless `trainable_only`.
pub fn count_params(model: &Model, trainable_only: bool) -> usize {
    let p: usize = model.params.values().map(|t| t.numel()).sum();
    if trainable_only {
        p
    } else {
        p + model.buffers.values().map(|t| t.numel()).sum::<usize>()
    }
}

/// Graph handles for a model's tensors plus working copies of its
/// batch-norm running statistics (in layer order).
pub struct Binding<E: Element> {
    pub params: Vec<Var>,
    pub stats: Vec<BatchNormStats<E>>,
}

/// Outputs of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub logits: Var,
    pub penultimate: Var,
}

impl Model {
    /// Assemble a model from named tensors, checking them against the
    /// config's inventory.
    pub fn from_tensors(
        config: ModelConfig,
        params: IndexMap<String, Arc<Tensor>>,
        buffers: IndexMap<String, Arc<Tensor>>,
    ) -> Result<Model> {
        let specs = tensor_specs(&config)?;
        let n_params = specs.iter().filter(|s| s.role == Role::Param).count();
        if n_params != params.len() || specs.len() - n_params != buffers.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "expected {} params and {} buffers, got {} and {}",
                n_params,
                specs.len() - n_params,
                params.len(),
                buffers.len()
            )));
        }
        for spec in &specs {
            let map = if spec.role == Role::Param { &params } else { &buffers };
            match map.get(&spec.name) {
                Some(t) if t.shape() == spec.shape.as_slice() => {}
                Some(t) => {
                    return Err(ModelError::ShapeMismatch(format!(
                        "{}: expected {:?}, got {:?}",
                        spec.name,
                        spec.shape,
                        t.shape()
                    )))
                }
                None => return Err(ModelError::ShapeMismatch(format!("missing tensor {}", spec.name))),
            }
        }
        Ok(Model { config, params, buffers, frozen: false, metadata: Default::default() })
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn params(&self) -> &IndexMap<String, Arc<Tensor>> {
        &self.params
    }

    pub fn buffers(&self) -> &IndexMap<String, Arc<Tensor>> {
        &self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name).map(|t| &**t)
    }

    /// Mutable access to every parameter, in inventory order (copy-on-write
    /// if a graph still shares a tensor).
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.values_mut().map(Arc::make_mut).collect()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Short identifier derived from kind and parameter checksum.
    pub fn model_id(&self) -> String {
        let mut h = crc32fast::Hasher::new();
        for t in self.params.values() {
            for v in t.data() {
                h.update(&v.to_le_bytes());
            }
        }
        format!("{}-{:08x}", self.kind().as_str(), h.finalize())
    }

    fn running_stats<E: Element>(&self) -> Vec<BatchNormStats<E>> {
        let mut out = Vec::with_capacity(self.buffers.len() / 2);
        for (name, mean) in &self.buffers {
            if let Some(prefix) = name.strip_suffix(".running_mean") {
                let var = &self.buffers[&format!("{prefix}.running_var")];
                out.push(BatchNormStats::from_tensors(mean.cast(), var.cast()));
            }
        }
        out
    }

    /// Bind parameters into an f32 graph without copying. `trainable`
    /// decides whether they receive gradients.
    pub fn bind(&self, g: &mut Graph<f32>, trainable: bool) -> Binding<f32> {
        let params = self
            .params
            .values()
            .map(|t| if trainable { g.param(Arc::clone(t)) } else { g.constant(Arc::clone(t)) })
            .collect();
        Binding { params, stats: self.running_stats() }
    }

    /// Bind converted copies of the parameters into a graph of another
    /// element type (used for f64 gradient checks).
    pub fn bind_cast<E: Element>(&self, g: &mut Graph<E>, trainable: bool) -> Binding<E> {
        let params = self
            .params
            .values()
            .map(|t| {
                let t: Tensor<E> = t.cast();
                if trainable {
                    g.param(t)
                } else {
                    g.constant(t)
                }
            })
            .collect();
        Binding { params, stats: self.running_stats() }
    }

    /// Copy updated running statistics back after a train-mode forward.
    pub fn store_running_stats(&mut self, stats: &[BatchNormStats<f32>]) {
        let names: Vec<String> = self
            .buffers
            .keys()
            .filter_map(|n| n.strip_suffix(".running_mean").map(str::to_string))
            .collect();
        for (prefix, s) in names.iter().zip(stats) {
            self.buffers.insert(format!("{prefix}.running_mean"), Arc::new(s.mean.clone()));
            self.buffers.insert(format!("{prefix}.running_var"), Arc::new(s.var.clone()));
        }
    }

    /// Replace batch-norm running statistics with plain averages of the
    /// batch statistics over `batches` (train-mode forward, no updates to
    /// parameters). No-op for models without batch norm.
    pub fn recalibrate_batch_norm(&mut self, batches: impl IntoIterator<Item = Tensor>) -> Result<()> {
        if self.buffers.is_empty() {
            return Ok(());
        }
        let mut stats: Vec<BatchNormStats<f32>> =
            self.running_stats::<f32>().iter().map(|s| BatchNormStats::averaging(s.mean.numel())).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = false;
        for x in batches {
            let mut g = Graph::<f32>::inference();
            let mut binding = self.bind(&mut g, false);
            binding.stats = stats;
            let xv = g.constant(x);
            self.forward_graph(&mut g, &mut binding, xv, Mode::Train, &mut rng)?;
            stats = binding.stats;
            seen = true;
        }
        if seen {
            for s in &mut stats {
                s.averaged_batches = None;
            }
            self.store_running_stats(&stats);
        }
        Ok(())
    }

    pub(crate) fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(ModelError::ShapeMismatch(format!("expected [N,C,H,W], got {shape:?}")));
        };
        if shape[0] == 0 {
            return Err(ModelError::ShapeMismatch("empty batch".into()));
        }
        if c != self.config.in_channels {
            return Err(ModelError::ShapeMismatch(format!("expected {} channels, got {c}", self.config.in_channels)));
        }
        let min = self.config.min_input();
        if h < min || w < min {
            return Err(ModelError::InputTooSmall { height: h, width: w, min });
        }
        Ok(())
    }

    /// Record a forward pass on `g`. Dropout draws from `rng` in train mode.
    pub fn forward_graph<E: Element>(
        &self,
        g: &mut Graph<E>,
        binding: &mut Binding<E>,
        x: Var,
        mode: Mode,
        rng: &mut dyn RngCore,
    ) -> Result<Forward> {
        self.check_input(g.value(x)?.shape())?;
        if binding.params.len() != self.params.len() {
            return Err(ModelError::ShapeMismatch(format!(
                "binding has {} params, model {}",
                binding.params.len(),
                self.params.len()
            )));
        }
        let mut layers = Layers { g, model: self, binding, mode, rng };
        match self.config.kind {
            ModelKind::Student => student::forward(&mut layers, x),
            ModelKind::Teacher => teacher::forward(&mut layers, x),
        }
    }

    fn eval_outputs(&self, batch: impl Into<Arc<Tensor>>) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::<f32>::inference();
        let mut binding = self.bind(&mut g, false);
        let x = g.constant(batch);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward_graph(&mut g, &mut binding, x, Mode::Eval, &mut rng)?;
        Ok((g.value(out.logits)?.clone(), g.value(out.penultimate)?.clone()))
    }

    /// Eval-mode logits `[N, num_classes]`.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.eval_outputs(batch.clone())?.0)
    }

    /// [`Model::forward`] without copying the input.
    pub fn forward_shared(&self, batch: &Arc<Tensor>) -> Result<Tensor> {
        Ok(self.eval_outputs(Arc::clone(batch))?.0)
    }

    /// Eval-mode activations feeding the final dense layer.
    pub fn penultimate(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.eval_outputs(batch.clone())?.1)
    }
}

/// Name-addressed layer helpers shared by both architectures.
pub(crate) struct Layers<'a, E: Element> {
    g: &'a mut Graph<E>,
    model: &'a Model,
    binding: &'a mut Binding<E>,
    mode: Mode,
    rng: &'a mut dyn RngCore,
}

impl<E: Element> Layers<'_, E> {
    fn var(&self, name: &str) -> Var {
        let idx = self.model.params.get_index_of(name).unwrap_or_else(|| panic!("no parameter {name}"));
        self.binding.params[idx]
    }

    fn has(&self, name: &str) -> bool {
        self.model.params.contains_key(name)
    }

    fn conv(&mut self, name: &str, x: Var, stride: usize, pad: usize) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        let bias_name = format!("{name}.bias");
        let b = self.has(&bias_name).then(|| self.var(&bias_name));
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn dense(&mut self, name: &str, x: Var) -> Result<Var> {
        let w = self.var(&format!("{name}.weight"));
        let b = self.var(&format!("{name}.bias"));
        Ok(self.g.dense(x, w, Some(b))?)
    }

    fn bn(&mut self, name: &str, x: Var) -> Result<Var> {
        let gamma = self.var(&format!("{name}.weight"));
        let beta = self.var(&format!("{name}.bias"));
        let idx = self
            .model
            .buffers
            .keys()
            .filter(|k| k.ends_with(".running_mean"))
            .position(|k| k.strip_suffix(".running_mean") == Some(name))
            .unwrap_or_else(|| panic!("no batch norm {name}"));
        let stats = &mut self.binding.stats[idx];
        Ok(self.g.batch_norm2d(x, gamma, beta, stats, self.mode)?)
    }

    fn relu(&mut self, x: Var) -> Result<Var> {
        Ok(self.g.relu(x)?)
    }

    fn dropout(&mut self, x: Var) -> Result<Var> {
        let p = self.model.config.dropout_p;
        Ok(self.g.dropout(x, p, self.mode, &mut *self.rng)?)
    }

    fn maxpool(&mut self, x: Var, k: usize, stride: usize, pad: usize) -> Result<Var> {
        Ok(self.g.maxpool2d(x, k, stride, pad)?)
    }
}

/// Replicate single-channel `[rows, cols]` spectrograms into a
/// `[N, channels, rows, cols]` batch.
pub fn batch_from_specs(specs: &[&crate::dsp::MelSpec], channels: usize) -> Result<Tensor> {
    let Some(first) = specs.first() else {
        return Err(ModelError::ShapeMismatch("empty batch".into()));
    };
    let (rows, cols) = (first.rows, first.cols);
    let mut data = Vec::with_capacity(specs.len() * channels * rows * cols);
    for s in specs {
        if (s.rows, s.cols) != (rows, cols) {
            return Err(ModelError::ShapeMismatch(format!(
                "spectrogram {}x{} in a {rows}x{cols} batch",
                s.rows, s.cols
            )));
        }
        for _ in 0..channels {
            data.extend_from_slice(&s.values);
        }
    }
    Ok(Tensor::new(&[specs.len(), channels, rows, cols], data)?)
}

/// Row-wise probability of each class.
pub fn softmax_rows(logits: &Tensor) -> Vec<Vec<f64>> {
    let k = logits.shape().last().copied().unwrap_or(0);
    if k == 0 {
        return Vec::new();
    }
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let m = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
            let e: Vec<f64> = row.iter().map(|&v| (v as f64 - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Random test input in `[-1, 1]`.
pub fn random_input(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0f32..=1.0)).collect()).expect("shape matches data")
}
