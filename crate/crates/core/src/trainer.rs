//! Pretraining and stream training with interleaved compositional replay.
//!
//! Every new-image batch is quantized through the codebook and trained with
//! the weighted sum of the direct loss (classifier on the raw feature map) and
//! the codebook-out loss (classifier on the reconstruction). From the second
//! task on, each new-image batch is followed by one replay batch rebuilt from
//! stored block indices and trained on the codebook-out loss alone.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codebook::{init_codebook, Codebook, Geometry, IndexMap, InitStrategy};
use crate::error::{Error, Result};
use crate::nn::{softmax_cross_entropy, Network, NetworkSpec, Trace};
use crate::replay::{Exemplar, ExemplarStore, ImageBytes, Payload, PayloadKind};
use crate::stream::{fisher_yates, Sample, Task};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Crumb,
    NoReplay,
    ImageReplay,
    EarlyFeatureReplay,
    UpperBound,
}

impl Mode {
    pub fn payload_kind(self) -> Option<PayloadKind> {
        match self {
            Mode::Crumb => Some(PayloadKind::Indices),
            Mode::ImageReplay => Some(PayloadKind::Image),
            Mode::EarlyFeatureReplay => Some(PayloadKind::Features),
            Mode::NoReplay | Mode::UpperBound => None,
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Crumb => "crumb",
            Mode::NoReplay => "no_replay",
            Mode::ImageReplay => "image_replay",
            Mode::EarlyFeatureReplay => "early_feature_replay",
            Mode::UpperBound => "upper_bound",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crumb" => Ok(Mode::Crumb),
            "no_replay" => Ok(Mode::NoReplay),
            "image_replay" => Ok(Mode::ImageReplay),
            "early_feature_replay" => Ok(Mode::EarlyFeatureReplay),
            "upper_bound" => Ok(Mode::UpperBound),
            _ => Err(Error::InvalidArgument(format!(
                "unknown mode `{s}` (crumb, no_replay, image_replay, early_feature_replay, upper_bound)"
            ))),
        }
    }
}

/// Weights of the direct (`alpha`) and codebook-out (`beta`) cross-entropies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f32,
    pub beta: f32,
}

impl LossWeights {
    pub const PRETRAIN: LossWeights = LossWeights { alpha: 1.0, beta: 1.0 };
    pub const STREAM: LossWeights = LossWeights { alpha: 0.0, beta: 1.0 };
    pub const REPLAY: LossWeights = LossWeights { alpha: 0.0, beta: 1.0 };

    pub fn validate(self, phase: &str) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "{phase} loss weights must be non-negative and not both zero"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CodebookConfig {
    pub blocks: usize,
    pub block_dim: usize,
    pub init: InitStrategy,
    pub zero_fraction: f32,
    /// Training images whose feature maps seed the matched initialisations.
    pub reference_maps: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        Self {
            blocks: 256,
            block_dim: 8,
            init: InitStrategy::MatchedSparse,
            zero_fraction: crate::codebook::MATCHED_ZERO_FRACTION,
            reference_maps: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub pretrain_weights: LossWeights,
    pub stream_weights: LossWeights,
    pub learning_rate: f32,
    pub batch_size: usize,
    pub replay_batch_size: usize,
    pub pretrain_epochs: usize,
    /// Epochs of offline retraining per task in `upper_bound` mode.
    pub offline_epochs: usize,
    pub buffer_capacity: usize,
    pub freeze_codebook: bool,
    pub mode: Mode,
    /// Apply the new-image and replay gradients in one update instead of two.
    pub joint_replay_step: bool,
    /// Hold new exemplars back until the task ends, then rebalance.
    pub evict_at_task_boundary: bool,
    /// Fill the buffer even in `no_replay` mode.
    pub record_without_replay: bool,
    /// Run the direct forward pass for logging even when `alpha == 0`.
    pub log_direct_loss: bool,
    /// Layer whose output is stored in `early_feature_replay` mode.
    pub early_feature_layer: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_weights: LossWeights::PRETRAIN,
            stream_weights: LossWeights::STREAM,
            learning_rate: 0.05,
            batch_size: 10,
            replay_batch_size: 10,
            pretrain_epochs: 3,
            offline_epochs: 10,
            buffer_capacity: 100,
            freeze_codebook: false,
            mode: Mode::Crumb,
            joint_replay_step: false,
            evict_at_task_boundary: false,
            record_without_replay: false,
            log_direct_loss: true,
            early_feature_layer: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.pretrain_weights.validate("pretrain")?;
        self.stream_weights.validate("stream")?;
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be positive".into()));
        }
        if self.batch_size == 0 || self.replay_batch_size == 0 {
            return Err(Error::InvalidArgument("batch sizes must be positive".into()));
        }
        Ok(())
    }
}

/// One line of the per-batch training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLog {
    pub task: usize,
    pub batch: usize,
    pub phase: String,
    pub loss_direct: Option<f32>,
    pub loss_codebook: Option<f32>,
    pub buffer_size: usize,
    pub seen_classes: usize,
}

/// Network, codebook, and the mapping from output units to class ids.
#[derive(Clone, Debug, PartialEq)]
pub struct Learner {
    pub net: Network,
    pub codebook: Codebook,
    pub geometry: Geometry,
    /// `classes[k]` is the class id predicted by output unit `k`.
    pub classes: Vec<u32>,
    /// Optimizer steps taken so far.
    pub steps: u64,
}

/// Per-example loss terms; `grad_z` is the direct-path gradient at the
/// feature map, for callers that also train the extractor.
#[derive(Clone, Debug, Default)]
pub struct LossTerms {
    pub direct: Option<f32>,
    pub codebook: Option<f32>,
    pub total: f32,
    pub grad_z: Option<Tensor>,
}

/// `L = α·CE(P(z), y) + β·CE(P(z̃), y)`, with gradients scaled by
/// `grad_scale` and accumulated into the classifier; the codebook-out gradient
/// at `z̃` is routed into the selected blocks. With `α == 0` the direct path
/// adds no gradient; it is still evaluated when `eval_direct` is set so the
/// loss can be logged.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    net: &mut Network,
    codebook: &mut Codebook,
    z: Option<&Tensor>,
    quantized: Option<(&IndexMap, &Tensor)>,
    target: usize,
    weights: LossWeights,
    grad_scale: f32,
    eval_direct: bool,
) -> Result<LossTerms> {
    let split = net.split_index();
    if target >= net.output_width() {
        return Err(Error::InvalidArgument(format!(
            "label index {target} outside {} outputs",
            net.output_width()
        )));
    }
    let mut terms = LossTerms::default();
    if let Some(z) = z {
        if weights.alpha != 0.0 || eval_direct {
            let trace = net.forward(z.clone(), split)?;
            let (loss, mut g) = softmax_cross_entropy(trace.output(), target)?;
            terms.direct = Some(loss);
            if weights.alpha != 0.0 {
                terms.total += weights.alpha * loss;
                let k = weights.alpha * grad_scale;
                g.data_mut().iter_mut().for_each(|v| *v *= k);
                terms.grad_z = Some(net.backward(&trace, &g, split)?);
            }
        }
    } else if weights.alpha != 0.0 {
        return Err(Error::InvalidArgument("direct loss needs the feature map".into()));
    }
    if weights.beta != 0.0 {
        let (map, z_tilde) =
            quantized.ok_or_else(|| Error::InvalidArgument("codebook-out loss needs a reconstruction".into()))?;
        let trace = net.forward(z_tilde.clone(), split)?;
        let (loss, mut g) = softmax_cross_entropy(trace.output(), target)?;
        terms.codebook = Some(loss);
        terms.total += weights.beta * loss;
        let k = weights.beta * grad_scale;
        g.data_mut().iter_mut().for_each(|v| *v *= k);
        let grad_z_tilde = net.backward(&trace, &g, split)?;
        codebook.route_gradients(map, &grad_z_tilde)?;
    }
    Ok(terms)
}

impl Learner {
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        Ok(self.net.forward(image.clone(), 0)?.into_output())
    }

    /// Class id from the direct path; the codebook is not consulted.
    pub fn predict(&self, image: &Tensor) -> Result<u32> {
        let logits = self.logits(image)?;
        Ok(self.classes[logits.argmax()])
    }

    pub fn label_index(&self, class: u32) -> Result<usize> {
        self.classes
            .iter()
            .position(|&c| c == class)
            .ok_or_else(|| Error::InvalidArgument(format!("class {class} has no output unit")))
    }

    pub fn quantize(&self, z: &Tensor) -> Result<(IndexMap, Tensor)> {
        self.codebook.quantize(z, &self.geometry)
    }

    /// One optimizer update of the network and (unless frozen) the codebook.
    pub fn apply_step(&mut self, learning_rate: f32) -> Result<()> {
        self.net.sgd_step(learning_rate)?;
        self.codebook.sgd_step(learning_rate)?;
        self.steps += 1;
        Ok(())
    }

    /// Registers output units for `new_classes`. The first call replaces the
    /// pretraining head; later calls append rows and keep existing ones.
    pub fn add_classes<R: Rng + ?Sized>(&mut self, new_classes: &[u32], rng: &mut R) -> Result<()> {
        if new_classes.iter().any(|c| self.classes.contains(c)) {
            return Err(Error::InvalidArgument("task repeats an already-seen class".into()));
        }
        if self.classes.is_empty() {
            self.net.reset_output(new_classes.len(), rng)?;
        } else {
            self.net.grow_output(new_classes.len(), rng)?;
        }
        self.classes.extend_from_slice(new_classes);
        Ok(())
    }
}

impl Learner {
    /// Builds a network for the classes in `data` and initialises the
    /// codebook, seeding the matched strategies from feature maps of a random
    /// subset of `data`.
    pub fn init(spec: &NetworkSpec, book_cfg: &CodebookConfig, data: &[Sample], seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("empty pretraining set".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut classes: Vec<u32> = data.iter().map(|s| s.class_id).collect();
        classes.sort_unstable();
        classes.dedup();
        if classes.len() < 2 {
            return Err(Error::Data("pretraining needs at least two classes".into()));
        }
        let mut spec = spec.clone();
        match spec.layers.last_mut() {
            Some(crate::nn::LayerKind::Linear { out_features, .. }) => *out_features = classes.len(),
            _ => return Err(Error::InvalidArgument("network must end in a linear layer".into())),
        }
        let net = spec.build(&mut rng)?;
        let geometry = Geometry::for_feature_shape(net.feature_shape(), book_cfg.block_dim)?;
        let mut picks: Vec<usize> = (0..data.len()).collect();
        fisher_yates(&mut picks, &mut rng);
        let references = picks
            .iter()
            .take(book_cfg.reference_maps.max(1))
            .map(|&i| net.extract(data[i].image.clone()))
            .collect::<Result<Vec<_>>>()?;
        let codebook = init_codebook(
            book_cfg.init,
            book_cfg.blocks,
            book_cfg.block_dim,
            Some(&references),
            book_cfg.zero_fraction,
            &mut rng,
        )?;
        Ok(Self {
            net,
            codebook,
            geometry,
            classes,
            steps: 0,
        })
    }
}

/// Trains extractor, classifier and codebook jointly on `data` (classes
/// disjoint from the stream), then freezes the extractor.
pub fn pretrain(learner: &mut Learner, data: &[Sample], cfg: &TrainConfig) -> Result<Vec<BatchLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("empty pretraining set".into()));
    }
    learner.codebook.frozen = cfg.freeze_codebook;
    learner.net.set_extractor_frozen(false);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut batch_no = 0;
    for _epoch in 0..cfg.pretrain_epochs {
        fisher_yates(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let (mut sum_d, mut sum_c) = (0.0f32, 0.0f32);
            for &i in batch {
                let sample = &data[i];
                let target = learner.label_index(sample.class_id)?;
                let trace: Trace = learner
                    .net
                    .forward_range(sample.image.clone(), 0, learner.net.split_index())?;
                let z = trace.output().clone();
                let (map, z_tilde) = learner.quantize(&z)?;
                let terms = compute_loss(
                    &mut learner.net,
                    &mut learner.codebook,
                    Some(&z),
                    Some((&map, &z_tilde)),
                    target,
                    cfg.pretrain_weights,
                    scale,
                    true,
                )?;
                if let Some(gz) = &terms.grad_z {
                    learner.net.backward(&trace, gz, 0)?;
                }
                sum_d += terms.direct.unwrap_or(0.0);
                sum_c += terms.codebook.unwrap_or(0.0);
            }
            learner.apply_step(cfg.learning_rate)?;
            log.push(BatchLog {
                task: 0,
                batch: batch_no,
                phase: "pretrain".into(),
                loss_direct: Some(sum_d * scale),
                loss_codebook: (cfg.pretrain_weights.beta != 0.0).then_some(sum_c * scale),
                buffer_size: 0,
                seen_classes: learner.classes.len(),
            });
            batch_no += 1;
        }
    }
    learner.net.set_extractor_frozen(true);
    Ok(log)
}

/// Everything that evolves across stream tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamState {
    pub learner: Learner,
    pub buffer: Option<ExemplarStore>,
    /// New exemplars held back until the task ends (boundary eviction only).
    pub staging: Option<ExemplarStore>,
    /// Tasks completed so far.
    pub tasks_done: usize,
    pub rng: ChaCha8Rng,
}

impl StreamState {
    /// Prepares a pretrained learner for streaming under `cfg`.
    pub fn new(mut learner: Learner, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        learner.net.set_extractor_frozen(true);
        learner.codebook.frozen = cfg.freeze_codebook;
        learner.classes.clear();
        if cfg.mode == Mode::EarlyFeatureReplay && cfg.early_feature_layer + 1 >= learner.net.split_index() {
            return Err(Error::InvalidArgument(format!(
                "early feature layer {} must precede the feature map at layer {}",
                cfg.early_feature_layer,
                learner.net.split_index()
            )));
        }
        let kind = match (cfg.mode.payload_kind(), cfg.record_without_replay) {
            (Some(k), _) => Some(k),
            (None, true) if cfg.mode == Mode::NoReplay => Some(PayloadKind::Indices),
            _ => None,
        };
        let buffer = kind.map(|k| ExemplarStore::new(cfg.buffer_capacity, k, cfg.seed ^ 0xB0FF));
        let staging = match (&buffer, cfg.evict_at_task_boundary) {
            (Some(b), true) => Some(ExemplarStore::new(cfg.buffer_capacity, b.kind(), cfg.seed ^ 0x57A6)),
            _ => None,
        };
        Ok(Self {
            learner,
            buffer,
            staging,
            tasks_done: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED),
        })
    }

    fn payload_for(&self, cfg: &TrainConfig, sample: &Sample, map: &IndexMap) -> Result<Payload> {
        Ok(match self.buffer.as_ref().map(ExemplarStore::kind) {
            Some(PayloadKind::Image) => Payload::Image(ImageBytes::from_tensor(&sample.image)),
            Some(PayloadKind::Features) => {
                let trace = self
                    .learner
                    .net
                    .forward_range(sample.image.clone(), 0, cfg.early_feature_layer + 1)?;
                Payload::Features(trace.into_output())
            }
            _ => Payload::Indices(map.clone()),
        })
    }

    /// Rebuilds the feature map for a stored payload and quantizes it.
    fn replay_input(&self, cfg: &TrainConfig, payload: &Payload) -> Result<(IndexMap, Tensor)> {
        let net = &self.learner.net;
        match payload {
            Payload::Indices(m) => Ok((m.clone(), self.learner.codebook.reconstruct(m)?)),
            Payload::Image(img) => self.learner.quantize(&net.extract(img.to_tensor())?),
            Payload::Features(f) => {
                let z = net
                    .forward_range(f.clone(), cfg.early_feature_layer + 1, net.split_index())?
                    .into_output();
                self.learner.quantize(&z)
            }
        }
    }

    fn end_task(&mut self) -> Result<()> {
        if let (Some(staging), Some(buffer)) = (self.staging.as_mut(), self.buffer.as_mut()) {
            let held: Vec<Exemplar> = staging.iter().cloned().collect();
            let kind = staging.kind();
            let cap = staging.capacity();
            for e in held {
                buffer.insert(e)?;
            }
            buffer.rebalance();
            *staging = ExemplarStore::new(cap, kind, self.rng.random());
        }
        self.tasks_done += 1;
        Ok(())
    }

    fn buffer_len(&self) -> usize {
        self.buffer.as_ref().map_or(0, ExemplarStore::len)
    }
}

/// Trains one stream task. `first_pass_len` is the number of leading positions
/// of `task.order` that form the first epoch; only those are offered to the
/// buffer so repeated epochs do not store duplicates.
pub fn stream_task(
    state: &mut StreamState,
    samples: &[Sample],
    task: &Task,
    first_pass_len: usize,
    cfg: &TrainConfig,
) -> Result<Vec<BatchLog>> {
    if task.order.is_empty() {
        return Err(Error::Data("empty task".into()));
    }
    let task_no = state.tasks_done;
    let mut rng = state.rng.clone();
    state.learner.add_classes(&task.classes, &mut rng)?;
    state.rng = rng;
    if cfg.mode == Mode::UpperBound {
        return Err(Error::InvalidArgument(
            "upper_bound retrains offline; use `offline_task`".into(),
        ));
    }
    let replays = task_no > 0 && cfg.mode.payload_kind().is_some();
    let records = state.buffer.is_some();
    let mut log = Vec::new();
    for (b, batch) in task.order.chunks(cfg.batch_size).enumerate() {
        let scale = 1.0 / batch.len() as f32;
        let (mut sum_d, mut sum_c, mut n_d) = (0.0f32, 0.0f32, 0usize);
        let mut pending = Vec::new();
        for (offset, &i) in batch.iter().enumerate() {
            let sample = &samples[i];
            let target = state.learner.label_index(sample.class_id)?;
            let z = state.learner.net.extract(sample.image.clone())?;
            let (map, z_tilde) = state.learner.quantize(&z)?;
            let learner = &mut state.learner;
            let terms = compute_loss(
                &mut learner.net,
                &mut learner.codebook,
                Some(&z),
                Some((&map, &z_tilde)),
                target,
                cfg.stream_weights,
                scale,
                cfg.log_direct_loss,
            )?;
            if let Some(d) = terms.direct {
                sum_d += d;
                n_d += 1;
            }
            sum_c += terms.codebook.unwrap_or(0.0);
            let position = b * cfg.batch_size + offset;
            if records && position < first_pass_len {
                pending.push(Exemplar {
                    label: sample.class_id,
                    payload: state.payload_for(cfg, sample, &map)?,
                });
            }
        }
        if !cfg.joint_replay_step {
            state.learner.apply_step(cfg.learning_rate)?;
        }
        for e in pending {
            match (state.staging.as_mut(), state.buffer.as_mut()) {
                (Some(s), _) => s.insert(e)?,
                (None, Some(buf)) => buf.insert(e)?,
                (None, None) => {}
            }
        }
        log.push(BatchLog {
            task: task_no + 1,
            batch: b,
            phase: "new".into(),
            loss_direct: (n_d > 0).then(|| sum_d / n_d as f32),
            loss_codebook: (cfg.stream_weights.beta != 0.0).then_some(sum_c * scale),
            buffer_size: state.buffer_len(),
            seen_classes: state.learner.classes.len(),
        });

        if replays && state.buffer_len() > 0 {
            let picked: Vec<Exemplar> = state
                .buffer
                .as_mut()
                .expect("replaying modes keep a buffer")
                .sample_batch(cfg.replay_batch_size)?
                .into_iter()
                .cloned()
                .collect();
            let rscale = 1.0 / picked.len() as f32;
            let mut sum_r = 0.0f32;
            for e in &picked {
                let target = state.learner.label_index(e.label)?;
                let (map, z_tilde) = state.replay_input(cfg, &e.payload)?;
                let learner = &mut state.learner;
                let terms = compute_loss(
                    &mut learner.net,
                    &mut learner.codebook,
                    None,
                    Some((&map, &z_tilde)),
                    target,
                    LossWeights::REPLAY,
                    rscale,
                    false,
                )?;
                sum_r += terms.codebook.unwrap_or(0.0);
            }
            if !cfg.joint_replay_step {
                state.learner.apply_step(cfg.learning_rate)?;
            }
            log.push(BatchLog {
                task: task_no + 1,
                batch: b,
                phase: "replay".into(),
                loss_direct: None,
                loss_codebook: Some(sum_r * rscale),
                buffer_size: state.buffer_len(),
                seen_classes: state.learner.classes.len(),
            });
        }
        if cfg.joint_replay_step {
            state.learner.apply_step(cfg.learning_rate)?;
        }
    }
    state.end_task()?;
    Ok(log)
}

/// Upper bound: retrains the classifier offline on every training sample seen
/// so far (`seen`), shuffled, for `cfg.offline_epochs` epochs, with the
/// pretraining loss weights.
pub fn offline_task(
    state: &mut StreamState,
    samples: &[Sample],
    new_classes: &[u32],
    seen: &[usize],
    cfg: &TrainConfig,
) -> Result<Vec<BatchLog>> {
    if seen.is_empty() {
        return Err(Error::Data("empty task".into()));
    }
    let task_no = state.tasks_done;
    let mut rng = state.rng.clone();
    state.learner.add_classes(new_classes, &mut rng)?;
    let mut order = seen.to_vec();
    let mut log = Vec::new();
    let mut batch_no = 0;
    for _ in 0..cfg.offline_epochs {
        fisher_yates(&mut order, &mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let scale = 1.0 / batch.len() as f32;
            let (mut sum_d, mut sum_c) = (0.0f32, 0.0f32);
            for &i in batch {
                let sample = &samples[i];
                let target = state.learner.label_index(sample.class_id)?;
                let z = state.learner.net.extract(sample.image.clone())?;
                let (map, z_tilde) = state.learner.quantize(&z)?;
                let learner = &mut state.learner;
                let terms = compute_loss(
                    &mut learner.net,
                    &mut learner.codebook,
                    Some(&z),
                    Some((&map, &z_tilde)),
                    target,
                    cfg.pretrain_weights,
                    scale,
                    true,
                )?;
                sum_d += terms.direct.unwrap_or(0.0);
                sum_c += terms.codebook.unwrap_or(0.0);
            }
            state.learner.apply_step(cfg.learning_rate)?;
            log.push(BatchLog {
                task: task_no + 1,
                batch: batch_no,
                phase: "offline".into(),
                loss_direct: Some(sum_d * scale),
                loss_codebook: (cfg.pretrain_weights.beta != 0.0).then_some(sum_c * scale),
                buffer_size: 0,
                seen_classes: state.learner.classes.len(),
            });
            batch_no += 1;
        }
    }
    state.rng = rng;
    state.end_task()?;
    Ok(log)
}

#[derive(Serialize, Deserialize)]
struct LearnerMeta {
    format_version: u32,
    classes: Vec<u32>,
    steps: u64,
}

impl Learner {
    /// Writes `net/`, `codebook.crtn` and `learner.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.net.save_checkpoint(&dir.join("net"))?;
        self.codebook.save(&dir.join("codebook.crtn"))?;
        let meta = LearnerMeta {
            format_version: 1,
            classes: self.classes.clone(),
            steps: self.steps,
        };
        write_json(&dir.join("learner.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let net = Network::load_checkpoint(&dir.join("net"))?;
        let codebook = Codebook::load(&dir.join("codebook.crtn"))?;
        let meta_path = dir.join("learner.json");
        let meta: LearnerMeta = read_json(&meta_path)?;
        if meta.format_version != 1 {
            return Err(Error::format(&meta_path, "unsupported format version"));
        }
        let geometry = Geometry::for_feature_shape(net.feature_shape(), codebook.d()).map_err(|e| {
            Error::Data(format!(
                "checkpoint/geometry mismatch in {}: codebook d = {} vs feature map {:?}: {e}",
                dir.display(),
                codebook.d(),
                net.feature_shape()
            ))
        })?;
        if meta.classes.len() != net.output_width() {
            return Err(Error::format(&meta_path, "class list does not match the output width"));
        }
        Ok(Self {
            net,
            codebook,
            geometry,
            classes: meta.classes,
            steps: meta.steps,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct StreamMeta {
    format_version: u32,
    tasks_done: usize,
    codebook_frozen: bool,
    rng: ChaCha8Rng,
}

impl StreamState {
    /// Writes the learner, buffers and rng state into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.learner.save(&dir.join("learner"))?;
        if let Some(b) = &self.buffer {
            b.save(&dir.join("buffer"))?;
        }
        if let Some(s) = &self.staging {
            s.save(&dir.join("staging"))?;
        }
        let meta = StreamMeta {
            format_version: 1,
            tasks_done: self.tasks_done,
            codebook_frozen: self.learner.codebook.frozen,
            rng: self.rng.clone(),
        };
        write_json(&dir.join("state.json"), &meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join("state.json");
        let meta: StreamMeta = read_json(&meta_path)?;
        if meta.format_version != 1 {
            return Err(Error::format(&meta_path, "unsupported format version"));
        }
        let mut learner = Learner::load(&dir.join("learner"))?;
        learner.codebook.frozen = meta.codebook_frozen;
        let optional = |name: &str| -> Result<Option<ExemplarStore>> {
            let p = dir.join(name);
            if p.exists() {
                ExemplarStore::load(&p).map(Some)
            } else {
                Ok(None)
            }
        };
        Ok(Self {
            learner,
            buffer: optional("buffer")?,
            staging: optional("staging")?,
            tasks_done: meta.tasks_done,
            rng: meta.rng,
        })
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::LayerKind;

    fn tiny_learner(seed: u64, classes: usize) -> Learner {
        let spec = NetworkSpec {
            input_shape: vec![2, 4, 4],
            layers: vec![
                LayerKind::Conv2d {
                    in_channels: 2,
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                    padding: 1,
                },
                LayerKind::Relu,
                LayerKind::MaxPool2d { kernel: 2, stride: 2 },
                LayerKind::Linear {
                    in_features: 16,
                    out_features: 6,
                },
                LayerKind::Relu,
                LayerKind::Linear {
                    in_features: 6,
                    out_features: classes,
                },
            ],
            split_index: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = spec.build(&mut rng).unwrap();
        let geometry = Geometry::for_feature_shape(net.feature_shape(), 2).unwrap();
        let codebook = init_codebook(InitStrategy::Normal, 5, 2, None, 0.64, &mut rng).unwrap();
        Learner {
            net,
            codebook,
            geometry,
            classes: (0..classes as u32).collect(),
            steps: 0,
        }
    }

    fn image(seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(vec![2, 4, 4], (0..32).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    #[test]
    fn alpha_zero_matches_codebook_path_alone() {
        let mut l = tiny_learner(1, 3);
        let z = l.net.extract(image(2)).unwrap();
        let (m, zt) = l.quantize(&z).unwrap();
        let terms = compute_loss(
            &mut l.net,
            &mut l.codebook,
            Some(&z),
            Some((&m, &zt)),
            1,
            LossWeights::STREAM,
            1.0,
            true,
        )
        .unwrap();
        let logits = l.net.forward(zt.clone(), 3).unwrap().into_output();
        let (ce, _) = softmax_cross_entropy(&logits, 1).unwrap();
        assert_eq!(terms.total, ce);
        assert!(terms.direct.is_some());
        assert!(terms.grad_z.is_none());
    }

    #[test]
    fn beta_zero_leaves_codebook_gradient_empty() {
        let mut l = tiny_learner(1, 3);
        let z = l.net.extract(image(3)).unwrap();
        let (m, zt) = l.quantize(&z).unwrap();
        let direct_only = LossWeights { alpha: 1.0, beta: 0.0 };
        compute_loss(
            &mut l.net,
            &mut l.codebook,
            Some(&z),
            Some((&m, &zt)),
            0,
            direct_only,
            1.0,
            true,
        )
        .unwrap();
        assert!(l.codebook.blocks().grad().is_none_or(|g| g.iter().all(|&v| v == 0.0)));
        compute_loss(
            &mut l.net,
            &mut l.codebook,
            Some(&z),
            Some((&m, &zt)),
            0,
            LossWeights::PRETRAIN,
            1.0,
            true,
        )
        .unwrap();
        assert!(l.codebook.blocks().grad().unwrap().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let mut l = tiny_learner(1, 3);
        let z = l.net.extract(image(3)).unwrap();
        let (m, zt) = l.quantize(&z).unwrap();
        assert!(compute_loss(
            &mut l.net,
            &mut l.codebook,
            Some(&z),
            Some((&m, &zt)),
            3,
            LossWeights::STREAM,
            1.0,
            false
        )
        .is_err());
    }

    #[test]
    fn predict_ignores_codebook() {
        let mut l = tiny_learner(4, 3);
        let x = image(9);
        let before = l.predict(&x).unwrap();
        assert_eq!(before, l.predict(&x).unwrap());
        l.codebook.blocks_mut().data_mut().iter_mut().for_each(|v| *v = 1e3);
        assert_eq!(before, l.predict(&x).unwrap());
    }

    #[test]
    fn classifier_growth_keeps_old_rows() {
        let mut l = tiny_learner(4, 3);
        l.classes.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        l.add_classes(&[10, 11], &mut rng).unwrap();
        assert_eq!(l.net.output_width(), 2);
        let head = l.net.layers().last().unwrap().params[0].value.data().to_vec();
        l.add_classes(&[12], &mut rng).unwrap();
        assert_eq!(l.net.output_width(), 3);
        assert_eq!(
            &l.net.layers().last().unwrap().params[0].value.data()[..head.len()],
            head.as_slice()
        );
        assert!(l.add_classes(&[11], &mut rng).is_err());
        assert_eq!(l.label_index(12).unwrap(), 2);
    }

    #[test]
    fn weights_validation() {
        assert!(LossWeights { alpha: 0.0, beta: 0.0 }.validate("x").is_err());
        assert!(LossWeights { alpha: -1.0, beta: 1.0 }.validate("x").is_err());
        assert!(LossWeights::STREAM.validate("x").is_ok());
        assert!("bogus".parse::<Mode>().is_err());
        assert_eq!(
            "early_feature_replay".parse::<Mode>().unwrap(),
            Mode::EarlyFeatureReplay
        );
    }
}
