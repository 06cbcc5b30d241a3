//! Model assembly, training, evaluation, and checkpointing.
//!
//! The classifier stacks masked attention layers, mean-pools node
//! embeddings into one graph embedding, and applies a linear layer with a
//! softmax. Training is plain SGD over per-graph losses with gradient
//! accumulation across a batch, a stepped learning-rate decay, and
//! best-validation checkpoint selection. Everything is seeded and
//! single-threaded, so identical inputs give bit-identical outputs.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, VarId};
use crate::error::{Error, Result};
use crate::gat::{
    multi_head, Activation, AttentionHead, EdgeIndex, HeadCombine, HeadVars, LayerConfig,
};
use crate::graph::FEATURE_DIM;
use crate::knn::SparseGraph;
use crate::tensor::Tensor;

/// Checkpoint container identity; bumped on any layout change.
pub const CHECKPOINT_FORMAT: &str = "sigat-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub out_dim: usize,
    pub heads: usize,
    pub combine: HeadCombine,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub layers: Vec<LayerSpec>,
    pub class_names: Vec<String>,
    pub leaky_slope: f64,
    /// Graph-construction settings the model was trained with, stored so a
    /// checkpoint is enough to rebuild compatible graphs at inference.
    pub gamma: f64,
    pub k: usize,
    /// Parameter initialization seed.
    pub seed: u64,
}

impl ModelConfig {
    /// Default architecture: three 8-head concat layers of width 8 (64-wide
    /// embeddings), one 8-head averaging layer of width 152, identity
    /// activation on the final layer, ELU elsewhere.
    pub fn default_plan(class_names: Vec<String>) -> Self {
        let hidden = LayerSpec {
            out_dim: 8,
            heads: 8,
            combine: HeadCombine::Concat,
            activation: Activation::Elu,
        };
        ModelConfig {
            input_dim: FEATURE_DIM,
            layers: vec![
                hidden.clone(),
                hidden.clone(),
                hidden,
                LayerSpec {
                    out_dim: 152,
                    heads: 8,
                    combine: HeadCombine::Average,
                    activation: Activation::Identity,
                },
            ],
            class_names,
            leaky_slope: 0.2,
            gamma: 0.5,
            k: 8,
            seed: 42,
        }
    }

    pub fn classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be nonzero".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidConfig("at least one layer required".into()));
        }
        if self.classes() < 2 {
            return Err(Error::InvalidConfig(format!(
                "need at least 2 classes, got {}",
                self.classes()
            )));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &self.class_names {
            if name.is_empty() || !seen.insert(name) {
                return Err(Error::InvalidConfig(format!(
                    "class names must be unique and nonempty, offending entry {name:?}"
                )));
            }
        }
        for (i, cfg) in self.layer_configs().enumerate() {
            cfg.validate()
                .map_err(|e| Error::InvalidConfig(format!("layer {i}: {e}")))?;
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in [0, 1], got {}",
                self.gamma
            )));
        }
        if self.k == 0 {
            return Err(Error::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }

    /// Per-layer configs with input dims chained through the stack.
    pub fn layer_configs(&self) -> impl Iterator<Item = LayerConfig> + '_ {
        let mut in_dim = self.input_dim;
        self.layers.iter().map(move |plan| {
            let cfg = LayerConfig {
                in_dim,
                out_dim: plan.out_dim,
                heads: plan.heads,
                combine: plan.combine,
                activation: plan.activation,
                leaky_slope: self.leaky_slope,
            };
            in_dim = cfg.output_dim();
            cfg
        })
    }

    /// Width of the graph embedding entering the classifier.
    pub fn hidden_dim(&self) -> usize {
        self.layer_configs()
            .last()
            .map(|c| c.output_dim())
            .unwrap_or(self.input_dim)
    }

    /// Total trainable parameter count:
    /// per layer `heads * (out_dim * in_dim + 2 * out_dim)`, plus the
    /// classifier `hidden * classes + classes`.
    pub fn param_count(&self) -> usize {
        let mut total = 0;
        for cfg in self.layer_configs() {
            total += cfg.heads * (cfg.out_dim * cfg.in_dim + 2 * cfg.out_dim);
        }
        total + self.hidden_dim() * self.classes() + self.classes()
    }
}

/// One classifiable graph: node features plus sparsified structure.
#[derive(Debug, Clone)]
pub struct GraphSample {
    pub features: Tensor,
    pub edges: EdgeIndex,
    pub label: usize,
}

impl GraphSample {
    pub fn new(features: Tensor, graph: &SparseGraph, label: usize) -> Result<Self> {
        if features.rows() != graph.n() {
            return Err(Error::Shape(format!(
                "{} feature rows for a graph of {} nodes",
                features.rows(),
                graph.n()
            )));
        }
        Ok(GraphSample {
            features,
            edges: EdgeIndex::from_graph(graph),
            label,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SigatModel {
    config: ModelConfig,
    /// `layers[l][h]` are the parameters of head `h` in layer `l`.
    layers: Vec<Vec<AttentionHead>>,
    /// hidden_dim x classes.
    classifier_w: Tensor,
    /// 1 x classes.
    classifier_b: Tensor,
}

/// Builds a model with seeded uniform initialization. The parameter count
/// is fixed by the config; callers report it via
/// [`ModelConfig::param_count`].
pub fn build_model(config: ModelConfig) -> Result<SigatModel> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut layers = Vec::with_capacity(config.layers.len());
    for cfg in config.layer_configs() {
        let heads = (0..cfg.heads)
            .map(|_| AttentionHead::init(cfg.in_dim, cfg.out_dim, &mut rng))
            .collect();
        layers.push(heads);
    }
    let hidden = config.hidden_dim();
    let classes = config.classes();
    let bound = (6.0 / (hidden + classes) as f64).sqrt();
    let u = rand::distributions::Uniform::new_inclusive(-bound, bound);
    use rand::distributions::Distribution;
    let w_vals = (0..hidden * classes).map(|_| u.sample(&mut rng)).collect();
    let classifier_w = Tensor::new(hidden, classes, w_vals)?;
    let classifier_b = Tensor::zeros(1, classes);
    Ok(SigatModel {
        config,
        layers,
        classifier_w,
        classifier_b,
    })
}

impl SigatModel {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_count(&self) -> usize {
        self.config.param_count()
    }

    /// Flat parameter order: layers in order, heads in order, `q` then `a`;
    /// then classifier weights, then bias. Every per-parameter walk in this
    /// module follows this order.
    pub fn params_flat(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        for heads in &self.layers {
            for head in heads {
                out.push(head.q.clone());
                out.push(head.a.clone());
            }
        }
        out.push(self.classifier_w.clone());
        out.push(self.classifier_b.clone());
        out
    }

    fn params_iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|head| [&mut head.q, &mut head.a])
            .chain([&mut self.classifier_w, &mut self.classifier_b])
    }

    fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (l, heads) in self.layers.iter().enumerate() {
            for h in 0..heads.len() {
                names.push(format!("layer{l}.head{h}.q"));
                names.push(format!("layer{l}.head{h}.a"));
            }
        }
        names.push("classifier.w".into());
        names.push("classifier.b".into());
        names
    }

    /// Pushes all parameters onto a tape in flat order.
    fn push_params(&self, tape: &mut Tape, trainable: bool) -> Result<Vec<VarId>> {
        let mut ids = Vec::new();
        for t in self.params_flat() {
            ids.push(if trainable {
                tape.param(t)?
            } else {
                tape.leaf(t)?
            });
        }
        Ok(ids)
    }

    /// Builds the forward pass from already-pushed parameter ids (flat
    /// order) to the class probability vector (1 x classes).
    fn forward_from(
        &self,
        tape: &mut Tape,
        param_ids: &[VarId],
        features: &Tensor,
        edges: &EdgeIndex,
    ) -> Result<VarId> {
        if features.cols() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "model expects {} input features, graph provides {}",
                self.config.input_dim,
                features.cols()
            )));
        }
        let expected = 2 * self.layers.iter().map(Vec::len).sum::<usize>() + 2;
        if param_ids.len() != expected {
            return Err(Error::Contract(format!(
                "{} parameter ids, expected {expected}",
                param_ids.len()
            )));
        }
        let mut h = tape.leaf(features.clone())?;
        let mut next = 0;
        for cfg in self.config.layer_configs() {
            let heads: Vec<HeadVars> = (0..cfg.heads)
                .map(|i| HeadVars {
                    q: param_ids[next + 2 * i],
                    a: param_ids[next + 2 * i + 1],
                })
                .collect();
            next += 2 * cfg.heads;
            h = multi_head(tape, h, &heads, edges, &cfg)?;
        }
        let pooled = tape.mean_over_rows(h)?;
        let logits = tape.matmul(pooled, param_ids[next])?;
        let biased = tape.add(logits, param_ids[next + 1])?;
        let all: Arc<Vec<usize>> = Arc::new((0..self.config.classes()).collect());
        tape.softmax_subset(biased, all)
    }

    /// Class probabilities for one graph; sums to 1.
    pub fn forward(&self, sample: &GraphSample) -> Result<Tensor> {
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape, false)?;
        let probs = self.forward_from(&mut tape, &ids, &sample.features, &sample.edges)?;
        Ok(tape.value(probs).clone())
    }

    /// Loss and gradients (flat order) for one graph.
    fn loss_and_grads(&self, sample: &GraphSample) -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let ids = self.push_params(&mut tape, true)?;
        let probs = self.forward_from(&mut tape, &ids, &sample.features, &sample.edges)?;
        let loss = tape.nll_clamped(probs, sample.label)?;
        let loss_val = tape.value(loss).scalar_value()?;
        let grads = tape.backward(loss)?;
        let flat = ids.iter().map(|&id| grads.get(id).cloned()).collect();
        Ok((loss_val, flat))
    }

    /// Mean NLL over a dataset, no gradients.
    pub fn mean_loss(&self, samples: &[GraphSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Contract("loss over an empty dataset".into()));
        }
        let mut sum = 0.0;
        for s in samples {
            let mut tape = Tape::new();
            let ids = self.push_params(&mut tape, false)?;
            let probs = self.forward_from(&mut tape, &ids, &s.features, &s.edges)?;
            let loss = tape.nll_clamped(probs, s.label)?;
            sum += tape.value(loss).scalar_value()?;
        }
        Ok(sum / samples.len() as f64)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let names = self.param_names();
        let params: Vec<ParamBlob> = self
            .params_flat()
            .into_iter()
            .zip(names)
            .map(|(t, name)| ParamBlob {
                name,
                rows: t.rows(),
                cols: t.cols(),
                values: t.into_values(),
            })
            .collect();
        let file = CheckpointFile {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params,
        };
        let json = serde_json::to_string(&file)
            .map_err(|e| Error::Contract(format!("checkpoint serialization: {e}")))?;
        fs::write(path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn load(path: &Path) -> Result<SigatModel> {
        let data = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let file: CheckpointFile = serde_json::from_str(&data).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })?;
        if file.format != CHECKPOINT_FORMAT || file.version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion {
                expected: format!("{CHECKPOINT_FORMAT} v{CHECKPOINT_VERSION}"),
                found: format!("{} v{}", file.format, file.version),
            });
        }
        file.config.validate()?;
        let mut model = build_model(file.config)?;
        let names = model.param_names();
        if file.params.len() != names.len() {
            return Err(Error::Contract(format!(
                "checkpoint holds {} tensors, model needs {}",
                file.params.len(),
                names.len()
            )));
        }
        for ((blob, name), slot) in file
            .params
            .into_iter()
            .zip(names)
            .zip(model.params_iter_mut())
        {
            if blob.name != name {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {:?} where {name:?} was expected",
                    blob.name
                )));
            }
            let t = Tensor::new(blob.rows, blob.cols, blob.values).map_err(|e| {
                Error::Contract(format!("checkpoint tensor {name}: {e}"))
            })?;
            if t.shape() != slot.shape() {
                return Err(Error::Contract(format!(
                    "checkpoint tensor {name} is {}x{}, model expects {}x{}",
                    t.rows(),
                    t.cols(),
                    slot.rows(),
                    slot.cols()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Numeric(format!(
                    "checkpoint tensor {name} contains non-finite values"
                )));
            }
            *slot = t;
        }
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    version: u32,
    config: ModelConfig,
    params: Vec<ParamBlob>,
}

#[derive(Serialize, Deserialize)]
struct ParamBlob {
    name: String,
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

/// Parameter update rule. Both are deterministic: identical gradients give
/// identical parameter trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    /// Plain gradient step `p -= lr * g`.
    Sgd,
    /// Adam with the standard constants (0.9, 0.999, 1e-8) and the stepped
    /// schedule feeding its learning rate. The graph-level signal here is
    /// carried by a handful of nodes out of each graph, which leaves raw
    /// gradients orders of magnitude too small for plain SGD at the stock
    /// learning rate; Adam's per-parameter normalization closes that gap.
    Adam,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub optimizer: Optimizer,
    /// Seed for the per-epoch shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 250,
            batch_size: 4,
            lr0: 0.001,
            lr_decay: 0.5,
            decay_every: 50,
            optimizer: Optimizer::Adam,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(Error::InvalidConfig(
                "epochs, batch_size, and decay_every must be nonzero".into(),
            ));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr0 {} must be positive", self.lr0)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "lr_decay {} must lie in (0, 1]",
                self.lr_decay
            )));
        }
        Ok(())
    }

    /// Stepped schedule: `lr0 * decay^floor(epoch / decay_every)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi((epoch / self.decay_every) as i32)
    }
}

/// First and second moment estimates per parameter, one buffer pair per
/// parameter tensor, plus the shared step counter for bias correction.
struct AdamState {
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamState {
    fn new(param_sizes: &[usize]) -> Self {
        AdamState {
            step: 0,
            m: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One Adam update from summed gradients; `inv` is 1/batch so moments
    /// see the batch-mean gradient. A missing gradient tensor counts as
    /// zero: moments still decay and momentum still moves the parameter.
    fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut Tensor>,
        grad_sums: &[Option<Tensor>],
        lr: f64,
        inv: f64,
    ) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step);
        for ((p, g), (m, v)) in params
            .zip(grad_sums)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (i, x) in p.values_mut().iter_mut().enumerate() {
                let gbar = g.as_ref().map_or(0.0, |g| g.values()[i] * inv);
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gbar;
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gbar * gbar;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * mhat / (vhat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Metrics {
    pub rows: Vec<EpochRow>,
}

impl Metrics {
    /// CSV with header `epoch,train_loss,val_loss,val_acc`. Floats use the
    /// shortest representation that round-trips, so files are deterministic.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_loss,val_loss,val_acc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.train_loss, r.val_loss, r.val_acc
            ));
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read_csv(path: &Path) -> Result<Metrics> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let p = path.display().to_string();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "epoch,train_loss,val_loss,val_acc")) => {}
            other => {
                return Err(Error::Parse {
                    path: p,
                    line: 1,
                    msg: format!("bad header {:?}", other.map(|(_, l)| l)),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse {
                    path: p,
                    line: i + 1,
                    msg: format!("{} fields, expected 4", fields.len()),
                });
            }
            let parse_f = |s: &str, what: &str| -> Result<f64> {
                s.parse().map_err(|_| Error::Parse {
                    path: p.clone(),
                    line: i + 1,
                    msg: format!("bad {what} {s:?}"),
                })
            };
            rows.push(EpochRow {
                epoch: fields[0].parse().map_err(|_| Error::Parse {
                    path: p.clone(),
                    line: i + 1,
                    msg: format!("bad epoch {:?}", fields[0]),
                })?,
                train_loss: parse_f(fields[1], "train_loss")?,
                val_loss: parse_f(fields[2], "val_loss")?,
                val_acc: parse_f(fields[3], "val_acc")?,
            });
        }
        Ok(Metrics { rows })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub metrics: Metrics,
    /// Learning rate applied at each epoch, for schedule verification.
    pub lrs: Vec<f64>,
    /// Epoch whose validation result selected the saved parameters.
    pub best_epoch: usize,
}

/// Runs the training loop. On return the model holds the parameters of the
/// best validation epoch (highest accuracy, ties to lower loss, then to the
/// earlier epoch). Per-epoch lines go through `log` so the CLI can print
/// progress without the library depending on a logger.
pub fn train(
    model: &mut SigatModel,
    train_set: &[GraphSample],
    val_set: &[GraphSample],
    config: &TrainConfig,
    mut log: impl FnMut(&EpochRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    if val_set.is_empty() {
        return Err(Error::InvalidConfig("validation set is empty".into()));
    }
    for (i, s) in train_set.iter().chain(val_set).enumerate() {
        if s.features.cols() != model.config.input_dim {
            return Err(Error::Shape(format!(
                "sample {i} has {} features, model expects {}",
                s.features.cols(),
                model.config.input_dim
            )));
        }
        if s.label >= model.config.classes() {
            return Err(Error::InvalidConfig(format!(
                "sample {i} label {} outside {} classes",
                s.label,
                model.config.classes()
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut metrics = Metrics::default();
    let mut lrs = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, f64, usize, Vec<Tensor>)> = None;
    let param_sizes: Vec<usize> = model.params_flat().iter().map(Tensor::len).collect();
    let mut adam = match config.optimizer {
        Optimizer::Adam => Some(AdamState::new(&param_sizes)),
        Optimizer::Sgd => None,
    };

    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        lrs.push(lr);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let mut acc: Vec<Option<Tensor>> = vec![None; param_sizes.len()];
            for &si in chunk {
                let (loss, grads) = model
                    .loss_and_grads(&train_set[si])
                    .map_err(|e| Error::Numeric(format!("epoch {epoch}, sample {si}: {e}")))?;
                loss_sum += loss;
                for (slot, g) in acc.iter_mut().zip(grads) {
                    match (slot.as_mut(), g) {
                        (Some(a), Some(g)) => {
                            for (x, y) in a.values_mut().iter_mut().zip(g.values()) {
                                *x += y;
                            }
                        }
                        (None, Some(g)) => *slot = Some(g),
                        _ => {}
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            match &mut adam {
                None => {
                    let scale = lr * inv;
                    for (p, g) in model.params_iter_mut().zip(&acc) {
                        if let Some(g) = g {
                            for (x, y) in p.values_mut().iter_mut().zip(g.values()) {
                                *x -= scale * y;
                            }
                        }
                    }
                }
                Some(state) => state.step(model.params_iter_mut(), &acc, lr, inv),
            }
        }
        let train_loss = loss_sum / train_set.len() as f64;
        let report = evaluate(model, val_set)
            .map_err(|e| Error::Numeric(format!("epoch {epoch}, validation: {e}")))?;
        let row = EpochRow {
            epoch,
            train_loss,
            val_loss: report.mean_loss,
            val_acc: report.accuracy,
        };
        log(&row);
        let better = match &best {
            None => true,
            Some((acc, loss, _, _)) => {
                report.accuracy > *acc || (report.accuracy == *acc && report.mean_loss < *loss)
            }
        };
        if better {
            best = Some((report.accuracy, report.mean_loss, epoch, model.params_flat()));
        }
        metrics.rows.push(row);
    }

    let (_, _, best_epoch, best_params) = best.expect("epochs >= 1");
    for (slot, t) in model.params_iter_mut().zip(best_params) {
        *slot = t;
    }
    Ok(TrainOutcome {
        metrics,
        lrs,
        best_epoch,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Argmax prediction over a dataset; ties break to the lowest class index.
pub fn evaluate(model: &SigatModel, samples: &[GraphSample]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Contract("evaluation over an empty dataset".into()));
    }
    let classes = model.config.classes();
    let mut confusion = vec![vec![0usize; classes]; classes];
    let mut correct = 0usize;
    let mut loss_sum = 0.0;
    for s in samples {
        if s.label >= classes {
            return Err(Error::InvalidConfig(format!(
                "label {} outside {} classes",
                s.label, classes
            )));
        }
        let probs = model.forward(s)?;
        let p = probs.values();
        let mut pred = 0;
        for (c, &v) in p.iter().enumerate() {
            if v > p[pred] {
                pred = c;
            }
        }
        confusion[s.label][pred] += 1;
        if pred == s.label {
            correct += 1;
        }
        loss_sum += -(p[s.label].max(crate::autodiff::PROB_CLAMP)).ln();
    }
    Ok(EvalReport {
        accuracy: correct as f64 / samples.len() as f64,
        mean_loss: loss_sum / samples.len() as f64,
        confusion,
    })
}

/// Deterministic 6-node, 2-class fixture used by the gradient-check command
/// and its tests: small enough for fast finite differences, wide enough to
/// exercise concat and average layers.
pub fn gradcheck_fixture() -> Result<(SigatModel, GraphSample)> {
    use crate::graph::{correlation_matrix, Node};
    use crate::knn::build_sparse_graph;

    let spots: [(f64, f64, f64); 6] = [
        (0.15, 0.2, 0.9),
        (0.8, 0.15, 0.15),
        (0.45, 0.5, 0.6),
        (0.2, 0.85, 0.3),
        (0.7, 0.75, 0.8),
        (0.9, 0.5, 0.4),
    ];
    let nodes: Vec<Node> = spots
        .iter()
        .enumerate()
        .map(|(id, &(x, y, v))| Node {
            id,
            centroid: (x, y),
            mean_intensity: v,
            features: vec![v, 0.1 + 0.05 * id as f64, x, y],
        })
        .collect();
    let w = correlation_matrix(&nodes, 0.5)?;
    let graph = build_sparse_graph(&nodes, &w, 2)?;
    let mut features = Tensor::zeros(6, FEATURE_DIM);
    for (i, n) in nodes.iter().enumerate() {
        for (j, &f) in n.features.iter().enumerate() {
            features.set(i, j, f);
        }
    }
    let sample = GraphSample::new(features, &graph, 1)?;
    let config = ModelConfig {
        input_dim: FEATURE_DIM,
        layers: vec![
            LayerSpec {
                out_dim: 3,
                heads: 2,
                combine: HeadCombine::Concat,
                activation: Activation::Elu,
            },
            LayerSpec {
                out_dim: 4,
                heads: 2,
                combine: HeadCombine::Average,
                activation: Activation::Identity,
            },
        ],
        class_names: vec!["negative".into(), "positive".into()],
        leaky_slope: 0.2,
        gamma: 0.5,
        k: 2,
        // This seed keeps every gradient coordinate well above the
        // finite-difference noise floor (loss ULP / 2 eps), so the check
        // measures the ops rather than double-precision quantization.
        seed: 11,
    };
    Ok((build_model(config)?, sample))
}

/// Max relative gradient error of the full model loss on
/// [`gradcheck_fixture`]-style inputs, against central finite differences.
pub fn model_grad_check(model: &SigatModel, sample: &GraphSample, epsilon: f64) -> Result<f64> {
    let params = model.params_flat();
    crate::autodiff::grad_check(
        |tape, ids| {
            let probs = model.forward_from(tape, ids, &sample.features, &sample.edges)?;
            tape.nll_clamped(probs, sample.label)
        },
        &params,
        epsilon,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            input_dim: FEATURE_DIM,
            layers: vec![
                LayerSpec {
                    out_dim: 2,
                    heads: 2,
                    combine: HeadCombine::Concat,
                    activation: Activation::Elu,
                },
                LayerSpec {
                    out_dim: 3,
                    heads: 2,
                    combine: HeadCombine::Average,
                    activation: Activation::Identity,
                },
            ],
            class_names: vec!["a".into(), "b".into()],
            leaky_slope: 0.2,
            gamma: 0.5,
            k: 2,
            seed: 9,
        }
    }

    #[test]
    fn param_count_matches_hand_derivation() {
        // 1 layer, 1 head, input 4, out 2, 2 classes:
        // q: 2*4 = 8, a: 2*2 = 4, classifier: 2*2 + 2 = 6 -> 18 total.
        let cfg = ModelConfig {
            input_dim: 4,
            layers: vec![LayerSpec {
                out_dim: 2,
                heads: 1,
                combine: HeadCombine::Concat,
                activation: Activation::Elu,
            }],
            class_names: vec!["a".into(), "b".into()],
            leaky_slope: 0.2,
            gamma: 0.5,
            k: 1,
            seed: 0,
        };
        assert_eq!(cfg.param_count(), 18);
    }

    #[test]
    fn default_plan_dims_chain_to_152() {
        let cfg = ModelConfig::default_plan(vec!["a".into(), "b".into(), "c".into()]);
        let dims: Vec<usize> = cfg.layer_configs().map(|c| c.output_dim()).collect();
        assert_eq!(dims, vec![64, 64, 64, 152]);
        assert_eq!(cfg.hidden_dim(), 152);
        // 8 * (8*4 + 16) + 2 * 8 * (8*64 + 16) + 8 * (152*64 + 304) + (152*3 + 3)
        assert_eq!(cfg.param_count(), 89_547);
    }

    #[test]
    fn same_seed_gives_identical_initialization() {
        let a = build_model(tiny_config()).unwrap();
        let b = build_model(tiny_config()).unwrap();
        assert_eq!(a, b);
        let mut other = tiny_config();
        other.seed = 10;
        assert_ne!(a, build_model(other).unwrap());
    }

    #[test]
    fn forward_produces_a_distribution() {
        let (model, sample) = gradcheck_fixture().unwrap();
        let probs = model.forward(&sample).unwrap();
        assert_eq!(probs.shape(), (1, 2));
        let s: f64 = probs.values().iter().sum();
        assert!((s - 1.0).abs() < 1e-9);
        assert!(probs.values().iter().all(|&p| p > 0.0));
    }

    #[test]
    fn forward_rejects_feature_dim_mismatch() {
        let (model, sample) = gradcheck_fixture().unwrap();
        let bad = GraphSample {
            features: Tensor::zeros(6, 3),
            edges: sample.edges.clone(),
            label: 0,
        };
        assert_eq!(model.forward(&bad).unwrap_err().code(), "shape");
    }

    #[test]
    fn full_model_gradients_pass_finite_differences() {
        let (model, sample) = gradcheck_fixture().unwrap();
        let err = model_grad_check(&model, &sample, 1e-5).unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn one_small_step_decreases_loss() {
        let (mut model, sample) = gradcheck_fixture().unwrap();
        let before = model.mean_loss(std::slice::from_ref(&sample)).unwrap();
        let samples = vec![sample];
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr0: 1e-3,
            lr_decay: 1.0,
            decay_every: 50,
            optimizer: Optimizer::Sgd,
            seed: 3,
        };
        train(&mut model, &samples, &samples, &cfg, |_| {}).unwrap();
        let after = model.mean_loss(&samples).unwrap();
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn lr_schedule_is_stepped() {
        let cfg = TrainConfig {
            epochs: 120,
            decay_every: 50,
            lr0: 0.001,
            lr_decay: 0.5,
            ..TrainConfig::default()
        };
        assert_eq!(cfg.lr_at(0), 0.001);
        assert_eq!(cfg.lr_at(49), 0.001);
        assert_eq!(cfg.lr_at(50), 0.0005);
        assert_eq!(cfg.lr_at(99), 0.0005);
        assert_eq!(cfg.lr_at(100), 0.00025);
        let constant = TrainConfig {
            lr_decay: 1.0,
            ..cfg
        };
        assert_eq!(constant.lr_at(119), 0.001);
    }

    #[test]
    fn training_is_deterministic() {
        let run = || {
            let (mut model, sample) = gradcheck_fixture().unwrap();
            let samples = vec![sample];
            let cfg = TrainConfig {
                epochs: 5,
                batch_size: 2,
                lr0: 0.01,
                lr_decay: 0.5,
                decay_every: 2,
                optimizer: Optimizer::Adam,
                seed: 11,
            };
            let out = train(&mut model, &samples, &samples, &cfg, |_| {}).unwrap();
            (out, model)
        };
        let (out_a, model_a) = run();
        let (out_b, model_b) = run();
        assert_eq!(out_a, out_b);
        assert_eq!(model_a, model_b);
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (model, _) = gradcheck_fixture().unwrap();
        model.save(&path).unwrap();
        let loaded = SigatModel::load(&path).unwrap();
        assert_eq!(loaded, model);
        // Same content -> byte-identical file.
        let path2 = dir.path().join("ckpt2.json");
        loaded.save(&path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn checkpoint_version_mismatch_is_explicit() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (model, _) = gradcheck_fixture().unwrap();
        model.save(&path).unwrap();
        let text = std::fs::read_to_string(&path)
            .unwrap()
            .replace("\"version\":1", "\"version\":2");
        std::fs::write(&path, text).unwrap();
        let e = SigatModel::load(&path).unwrap_err();
        assert_eq!(e.code(), "version");
    }

    #[test]
    fn metrics_csv_round_trips() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("metrics.csv");
        let m = Metrics {
            rows: vec![
                EpochRow {
                    epoch: 0,
                    train_loss: 1.0986122886681098,
                    val_loss: 1.1,
                    val_acc: 0.3333333333333333,
                },
                EpochRow {
                    epoch: 1,
                    train_loss: 0.9,
                    val_loss: 1.05,
                    val_acc: 0.5,
                },
            ],
        };
        m.write_csv(&path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("epoch,train_loss,val_loss,val_acc\n"));
        let back = Metrics::read_csv(&path).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn evaluate_reports_confusion_and_ties_to_lowest() {
        let (model, sample) = gradcheck_fixture().unwrap();
        let report = evaluate(&model, std::slice::from_ref(&sample)).unwrap();
        let total: usize = report.confusion.iter().flatten().sum();
        assert_eq!(total, 1);
        assert!(report.accuracy == 0.0 || report.accuracy == 1.0);
        assert!(evaluate(&model, &[]).is_err());
    }

    #[test]
    fn train_rejects_empty_sets_and_bad_labels() {
        let (mut model, sample) = gradcheck_fixture().unwrap();
        let cfg = TrainConfig::default();
        let e = train(&mut model, &[], &[sample.clone()], &cfg, |_| {}).unwrap_err();
        assert_eq!(e.code(), "config");
        let mut bad = sample.clone();
        bad.label = 9;
        let e = train(&mut model, &[bad], &[sample], &cfg, |_| {}).unwrap_err();
        assert_eq!(e.code(), "config");
    }

    /// The fixture model's output on the fixture graph, frozen after the
    /// first verified run. Any change to initialization, layer arithmetic,
    /// or summation order shows up here as a drift beyond 1e-12.
    #[test]
    fn golden_forward_probabilities_reproduce() {
        const GOLDEN: [f64; 2] = [5.84719574202138048e-1, 4.15280425797862063e-1];
        let dir = tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let (model, sample) = gradcheck_fixture().unwrap();
        model.save(&path).unwrap();
        let restored = SigatModel::load(&path).unwrap();
        let probs = restored.forward(&sample).unwrap();
        assert_eq!(probs.len(), 2);
        for (p, g) in probs.values().iter().zip(GOLDEN) {
            assert!((p - g).abs() < 1e-12, "probability {p} drifted from {g}");
        }
    }

    fn random_two_class_samples(count: usize, seed: u64) -> Vec<GraphSample> {
        use crate::graph::{correlation_matrix, Node};
        use crate::knn::build_sparse_graph;
        use rand::Rng;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..count)
            .map(|i| {
                let nodes: Vec<Node> = (0..6)
                    .map(|id| {
                        let (x, y, v) =
                            (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
                        Node {
                            id,
                            centroid: (x, y),
                            mean_intensity: v,
                            features: vec![v, rng.gen::<f64>(), x, y],
                        }
                    })
                    .collect();
                let w = correlation_matrix(&nodes, 0.5).unwrap();
                let graph = build_sparse_graph(&nodes, &w, 2).unwrap();
                let mut features = Tensor::zeros(6, FEATURE_DIM);
                for (r, n) in nodes.iter().enumerate() {
                    for (c, &f) in n.features.iter().enumerate() {
                        features.set(r, c, f);
                    }
                }
                GraphSample::new(features, &graph, i % 2).unwrap()
            })
            .collect()
    }

    /// Untrained models carry no information about the balanced random
    /// labels, so their accuracy must hover around chance. A wide band
    /// keeps this a sanity check rather than a statistics exam.
    #[test]
    fn untrained_models_score_near_chance() {
        let samples = random_two_class_samples(200, 77);
        let mut total = 0.0;
        let seeds = [0u64, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        for &seed in &seeds {
            let config = ModelConfig {
                seed,
                ..ModelConfig::default_plan(vec!["a".into(), "b".into()])
            };
            let model = build_model(config).unwrap();
            total += evaluate(&model, &samples).unwrap().accuracy;
        }
        let mean = total / seeds.len() as f64;
        assert!((0.3..=0.7).contains(&mean), "ensemble accuracy {mean}");
    }

    /// Memorization check: one graph, Adam at a constant 0.02, 100 epochs.
    #[test]
    fn single_graph_overfits_below_threshold() {
        let (mut model, sample) = gradcheck_fixture().unwrap();
        let samples = vec![sample];
        let cfg = TrainConfig {
            epochs: 100,
            batch_size: 1,
            lr0: 0.02,
            lr_decay: 1.0,
            decay_every: 50,
            optimizer: Optimizer::Adam,
            seed: 3,
        };
        let out = train(&mut model, &samples, &samples, &cfg, |_| {}).unwrap();
        let losses: Vec<f64> = out.metrics.rows.iter().map(|r| r.train_loss).collect();
        assert!(
            losses.windows(2).skip(10).all(|w| w[1] <= w[0]),
            "loss not monotone non-increasing after epoch 10: {losses:?}"
        );
        let last = *losses.last().unwrap();
        assert!(last < 0.01, "final loss {last}");
        // The trained model memorized its one sample perfectly.
        let report = evaluate(&model, &samples).unwrap();
        assert_eq!(report.accuracy, 1.0);
    }
}
