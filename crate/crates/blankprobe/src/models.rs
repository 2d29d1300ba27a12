//! Classifier architectures, the training loop, and checkpoint persistence.
//!
//! Two desk-scale architectures are supported:
//!
//! * `simple_cnn3` — conv(8, 3x3) / relu / pool, conv(16, 3x3) / relu /
//!   pool, dense head.
//! * `micro_resnet5` — conv stem plus two residual blocks (conv 3x3 / relu /
//!   conv 3x3 with identity skip, relu after the add), pooled dense head.
//!
//! A trained [`Model`] is immutable and shareable across threads for
//! prediction and gradient queries; training takes `&mut` and is exclusive.

use std::fs;
use std::path::Path;

use crate::dataset::LabeledImageSet;
use crate::error::{Error, Result};
use crate::graph::{ComputeGraph, GraphBuilder};
use crate::parallel::map_indices;
use crate::rng::{derive_seed, Rng};
use crate::tensor::Tensor;

const CHECKPOINT_MAGIC: &[u8; 4] = b"BPCK";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arch {
    SimpleCnn3,
    MicroResNet5,
}

impl Arch {
    pub fn id(&self) -> &'static str {
        match self {
            Arch::SimpleCnn3 => "simple_cnn3",
            Arch::MicroResNet5 => "micro_resnet5",
        }
    }

    pub fn parse(id: &str) -> Result<Arch> {
        match id {
            "simple_cnn3" => Ok(Arch::SimpleCnn3),
            "micro_resnet5" => Ok(Arch::MicroResNet5),
            other => Err(Error::Config(format!(
                "unknown architecture '{other}' (expected simple_cnn3 or micro_resnet5)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: Arch,
    /// Input shape as (channels, height, width).
    pub input: [usize; 3],
    pub classes: usize,
}

impl ModelSpec {
    pub fn new(arch: Arch, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        if classes < 2 {
            return Err(Error::Config(format!(
                "class count must be >= 2, got {classes}"
            )));
        }
        Ok(ModelSpec {
            arch,
            input,
            classes,
        })
    }

    /// Canonical single-line descriptor used in checkpoints.
    pub fn descriptor(&self) -> String {
        format!(
            "arch={};input={}x{}x{};classes={}",
            self.arch.id(),
            self.input[0],
            self.input[1],
            self.input[2],
            self.classes
        )
    }

    pub fn from_descriptor(s: &str) -> Result<ModelSpec> {
        let mut arch = None;
        let mut input = None;
        let mut classes = None;
        for part in s.split(';') {
            let (key, value) = part.split_once('=').ok_or_else(|| {
                Error::Config(format!("malformed descriptor field '{part}'"))
            })?;
            match key {
                "arch" => arch = Some(Arch::parse(value)?),
                "input" => {
                    let dims: Vec<usize> = value
                        .split('x')
                        .map(|d| d.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Config(format!("bad input dims '{value}'")))?;
                    if dims.len() != 3 {
                        return Err(Error::Config(format!("input dims '{value}' not CxHxW")));
                    }
                    input = Some([dims[0], dims[1], dims[2]]);
                }
                "classes" => {
                    classes = Some(value.parse::<usize>().map_err(|_| {
                        Error::Config(format!("bad class count '{value}'"))
                    })?)
                }
                other => return Err(Error::Config(format!("unknown descriptor key '{other}'"))),
            }
        }
        match (arch, input, classes) {
            (Some(arch), Some(input), Some(classes)) => ModelSpec::new(arch, input, classes),
            _ => Err(Error::Config(format!("incomplete descriptor '{s}'"))),
        }
    }

    pub fn build_graph(&self) -> Result<ComputeGraph> {
        let shape = self.input.to_vec();
        match self.arch {
            Arch::SimpleCnn3 => {
                let mut b = GraphBuilder::new(shape);
                let x = b.input();
                let c1 = b.conv2d(x, 8, 3, 1, 1)?;
                let r1 = b.relu(c1);
                let p1 = b.maxpool2(r1)?;
                let c2 = b.conv2d(p1, 16, 3, 1, 1)?;
                let r2 = b.relu(c2);
                let p2 = b.maxpool2(r2)?;
                let logits = b.dense(p2, self.classes)?;
                b.finish(logits)
            }
            Arch::MicroResNet5 => {
                let mut b = GraphBuilder::new(shape);
                let x = b.input();
                let stem = b.conv2d(x, 8, 3, 1, 1)?;
                let stem = b.relu(stem);
                let mut trunk = b.maxpool2(stem)?;
                for _ in 0..2 {
                    let c1 = b.conv2d(trunk, 8, 3, 1, 1)?;
                    let r = b.relu(c1);
                    let c2 = b.conv2d(r, 8, 3, 1, 1)?;
                    let joined = b.add(c2, trunk)?;
                    trunk = b.relu(joined);
                }
                let pooled = b.maxpool2(trunk)?;
                let logits = b.dense(pooled, self.classes)?;
                b.finish(logits)
            }
        }
    }
}

/// Fan-in-scaled uniform initialization for one parameter tensor.
fn init_param(shape: &[usize], rng: &mut Rng) -> Tensor {
    let fan_in = match shape.len() {
        // conv weights [F,C,kh,kw]
        4 => shape[1] * shape[2] * shape[3],
        // dense weights [m,n]
        2 => shape[1],
        // biases take the fan-in of their layer's weights; the builder
        // registers them right after, so reuse the element heuristic below.
        _ => 0,
    };
    let len: usize = shape.iter().product();
    let bound = if fan_in > 0 {
        1.0 / (fan_in as f32).sqrt()
    } else {
        0.05
    };
    let data = (0..len).map(|_| rng.next_range(-bound, bound)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

#[derive(Debug, Clone)]
pub struct Model {
    spec: ModelSpec,
    graph: ComputeGraph,
    params: Vec<Tensor>,
}

impl Model {
    /// Build a freshly initialized model; identical seeds give bit-identical
    /// parameters.
    pub fn build(spec: ModelSpec, seed: u64) -> Result<Model> {
        let graph = spec.build_graph()?;
        let mut rng = Rng::new(derive_seed(seed, "param-init", 0));
        let params = graph
            .param_shapes()
            .iter()
            .map(|shape| init_param(shape, &mut rng))
            .collect();
        Ok(Model {
            spec,
            graph,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &ComputeGraph {
        &self.graph
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        let shapes = self.graph.param_shapes();
        if params.len() != shapes.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (tensor, shape) in params.iter().zip(&shapes) {
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Dimension {
                    context: "model parameters",
                    expected: format!("{shape:?}"),
                    found: format!("{:?}", tensor.shape()),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Softmax probability vector for an image.
    pub fn predict(&self, image: &Tensor) -> Result<Tensor> {
        let fwd = self.graph.forward(&self.params, image, None)?;
        Ok(fwd.probs(&self.graph).clone())
    }

    pub fn predict_class(&self, image: &Tensor) -> Result<usize> {
        Ok(self.predict(image)?.argmax())
    }

    pub fn loss(&self, image: &Tensor, label: usize) -> Result<f32> {
        self.graph.loss(&self.params, image, label)
    }

    /// Full-precision loss used by finite-difference oracles.
    pub fn loss_f64(&self, image: &Tensor, label: usize) -> Result<f64> {
        self.graph.loss_f64(&self.params, image, label)
    }

    /// Loss gradient with respect to the input pixels.
    pub fn input_gradient(&self, image: &Tensor, label: usize) -> Result<Tensor> {
        self.graph.backprop_to_input(&self.params, image, label)
    }

    pub fn loss_and_input_gradient(&self, image: &Tensor, label: usize) -> Result<(f32, Tensor)> {
        let (loss, grads) = self
            .graph
            .loss_and_gradients(&self.params, image, label, true, false)?;
        Ok((loss, grads.input.expect("input gradient requested")))
    }

    /// Top-1 accuracy and mean loss over a dataset.
    pub fn evaluate(&self, set: &LabeledImageSet) -> Result<(f64, f64)> {
        let results = map_indices(set.len(), |i| {
            let image = set.image(i);
            let label = set.label(i);
            let fwd = self.graph.forward(&self.params, &image, Some(label))?;
            let correct = fwd.probs(&self.graph).argmax() == label;
            Ok::<_, Error>((fwd.loss().unwrap_or(f32::NAN) as f64, correct))
        });
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for r in results {
            let (loss, ok) = r?;
            loss_sum += loss;
            if ok {
                correct += 1;
            }
        }
        Ok((
            correct as f64 / set.len() as f64,
            loss_sum / set.len() as f64,
        ))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TrainConfig {
    pub lr: f32,
    pub momentum: f32,
    pub batch: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.05,
            momentum: 0.9,
            batch: 64,
            epochs: 5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub test_loss: Option<f64>,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub final_test_accuracy: Option<f64>,
}

/// SGD with momentum. Deterministic for a fixed seed and data order,
/// independent of the thread cap: per-sample gradients reduce in index
/// order.
pub fn train(
    model: &mut Model,
    train_set: &LabeledImageSet,
    test_set: Option<&LabeledImageSet>,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    if train_set.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if !cfg.lr.is_finite() || cfg.lr < 0.0 {
        return Err(Error::Config(format!("learning rate {} invalid", cfg.lr)));
    }
    let mut velocity: Vec<Vec<f32>> = model
        .params
        .iter()
        .map(|p| vec![0.0; p.len()])
        .collect();
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs {
        let epoch_seed = derive_seed(cfg.seed, "epoch-shuffle", epoch as u64);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, batch) in train_set.batches(cfg.batch, epoch_seed)?.enumerate() {
            // Per-sample loss and gradients, parallel-capable.
            let graph = &model.graph;
            let params = &model.params;
            let samples = map_indices(batch.len(), |j| {
                let idx = batch[j];
                let image = train_set.image(idx);
                let label = train_set.label(idx);
                let fwd = graph.forward(params, &image, Some(label))?;
                let loss = fwd.loss().expect("training forward carries a label");
                let correct = fwd.probs(graph).argmax() == label;
                let grads = graph.backward_seeded(&fwd, params, 1.0, false, true)?;
                Ok::<_, Error>((loss, correct, grads.params.expect("param grads")))
            });

            // Reduce in index order with f64 accumulators.
            let mut grad_acc: Vec<Vec<f64>> = model
                .params
                .iter()
                .map(|p| vec![0.0; p.len()])
                .collect();
            let mut batch_count = 0usize;
            for sample in samples {
                let (loss, ok, grads) = sample?;
                if !loss.is_finite() {
                    return Err(Error::TrainingDiverged {
                        epoch,
                        batch: batch_idx,
                        loss,
                    });
                }
                loss_sum += loss as f64;
                if ok {
                    correct += 1;
                }
                for (acc, g) in grad_acc.iter_mut().zip(&grads) {
                    for (a, &v) in acc.iter_mut().zip(g.data()) {
                        *a += v as f64;
                    }
                }
                batch_count += 1;
            }

            let scale = 1.0 / batch_count as f64;
            for ((param, vel), acc) in model
                .params
                .iter_mut()
                .zip(velocity.iter_mut())
                .zip(&grad_acc)
            {
                let data = param.data_mut();
                for i in 0..data.len() {
                    let g = (acc[i] * scale) as f32;
                    vel[i] = cfg.momentum * vel[i] + g;
                    data[i] -= cfg.lr * vel[i];
                }
            }
        }

        let (test_accuracy, test_loss) = match test_set {
            Some(set) => {
                let (acc, loss) = model.evaluate(set)?;
                (Some(acc), Some(loss))
            }
            None => (None, None),
        };
        history.epochs.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            test_loss,
            test_accuracy,
        });
        if let Some(acc) = test_accuracy {
            history.final_test_accuracy = Some(acc);
        }
    }
    Ok(history)
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingMeta {
    pub epochs: u32,
    pub final_test_accuracy: f32,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct ModelCheckpoint {
    pub version: u32,
    pub spec: ModelSpec,
    pub params: Vec<Tensor>,
    pub meta: TrainingMeta,
}

impl ModelCheckpoint {
    pub fn of(model: &Model, meta: TrainingMeta) -> ModelCheckpoint {
        ModelCheckpoint {
            version: CHECKPOINT_VERSION,
            spec: model.spec.clone(),
            params: model.params.clone(),
            meta,
        }
    }
}

impl Model {
    /// Rebuild a model from a checkpoint, validating every tensor shape
    /// against the architecture the descriptor names.
    pub fn from_checkpoint(cp: &ModelCheckpoint) -> Result<Model> {
        let mut model = Model::build(cp.spec.clone(), 0)?;
        model.set_params(cp.params.clone())?;
        Ok(model)
    }
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.offset + n > self.bytes.len() {
            return Err(Error::Format {
                offset: self.offset,
                message: format!("truncated while reading {what}"),
            });
        }
        let out = &self.bytes[self.offset..self.offset + n];
        self.offset += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.take(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        let b = self.take(4, what)?;
        Ok(f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn checkpoint_to_bytes(cp: &ModelCheckpoint) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&cp.version.to_le_bytes());
    let descriptor = cp.spec.descriptor();
    out.extend_from_slice(&(descriptor.len() as u32).to_le_bytes());
    out.extend_from_slice(descriptor.as_bytes());
    out.extend_from_slice(&cp.meta.epochs.to_le_bytes());
    out.extend_from_slice(&cp.meta.final_test_accuracy.to_le_bytes());
    out.extend_from_slice(&cp.meta.seed.to_le_bytes());
    out.extend_from_slice(&(cp.params.len() as u32).to_le_bytes());
    for tensor in &cp.params {
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &dim in tensor.shape() {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ModelCheckpoint> {
    let mut r = ByteReader { bytes, offset: 0 };
    let magic = r.take(4, "checkpoint magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad checkpoint magic {magic:02x?}, expected \"BPCK\""),
        });
    }
    let version = r.u32("checkpoint version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            what: "checkpoint",
            found: version,
            supported: CHECKPOINT_VERSION,
        });
    }
    let desc_len = r.u32("descriptor length")? as usize;
    let desc_bytes = r.take(desc_len, "descriptor")?;
    let descriptor = std::str::from_utf8(desc_bytes).map_err(|_| Error::Format {
        offset: r.offset - desc_len,
        message: "descriptor is not UTF-8".into(),
    })?;
    let spec = ModelSpec::from_descriptor(descriptor)?;
    let meta = TrainingMeta {
        epochs: r.u32("epoch count")?,
        final_test_accuracy: r.f32("final test accuracy")?,
        seed: r.u64("training seed")?,
    };
    let tensor_count = r.u32("tensor count")? as usize;
    let mut params = Vec::with_capacity(tensor_count);
    for t in 0..tensor_count {
        let ndim = r.u32("tensor rank")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("tensor dimension")? as usize);
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len * 4, "tensor data")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        params.push(Tensor::new(shape, data).map_err(|e| match e {
            Error::Numeric(msg) => Error::Format {
                offset: r.offset,
                message: format!("tensor {t}: {msg}"),
            },
            other => other,
        })?);
    }
    if r.offset != bytes.len() {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{} trailing bytes after checkpoint", bytes.len() - r.offset),
        });
    }
    Ok(ModelCheckpoint {
        version,
        spec,
        params,
        meta,
    })
}

pub fn save_checkpoint(path: &Path, cp: &ModelCheckpoint) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(cp)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
