//! Sequence-based training with truncated backpropagation through time.

use std::io::Write;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{
    draw_augmentation, pixel_targets, prepare_frames, AugmentConfig, PreparedFrame,
};
use super::optim::{compute_class_weights, Adam, OptimizerConfig};
use super::schedule::{tbptt_schedule, TbpttConfig};
use crate::autodiff::{Checkpoint, Graph, Mode, NamedTensor, Tensor, Var};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{build_range_image, ProjectionMode};
use crate::network::{InputNorm, Model, ModelConfig};

fn default_epochs() -> usize {
    1
}

fn default_batch() -> usize {
    4
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    /// Sub-sequences per batch.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default)]
    pub projection: ProjectionMode,
    /// Align the memory with ego motion between frames.
    #[serde(default = "yes")]
    pub tma: bool,
    #[serde(default)]
    pub freeze_backbone: bool,
    /// Fit per-channel input statistics before the first update.
    #[serde(default = "yes")]
    pub normalize_inputs: bool,
    /// Stop after this many optimiser updates in total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_updates: Option<u64>,
    pub model: ModelConfig,
    #[serde(default)]
    pub tbptt: TbpttConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default)]
    pub augment: AugmentConfig,
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("serialisable")
    }

    /// Checks everything that can be checked before touching data.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.tbptt.validate()?;
        self.optimizer.validate()?;
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0, 1]"));
        }
        if let Some(c) = self.augment.crop_width {
            let div = self.model.backbone.width_divisor();
            if c == 0 || c % div != 0 {
                return Err(Error::config(format!(
                    "crop width must be a positive multiple of {div}"
                )));
            }
        }
        Ok(())
    }
}

/// One logged optimiser update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateRecord {
    pub iteration: u64,
    pub frame: usize,
    pub loss: f64,
    pub lr: f64,
}

pub const LOG_HEADER: &str = "iteration\tframe\tloss\tlr";

impl UpdateRecord {
    pub fn tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6e}",
            self.iteration, self.frame, self.loss, self.lr
        )
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    model: Model,
    opt: Adam,
    iteration: u64,
    weights: Option<Vec<f64>>,
    dump_dir: Option<PathBuf>,
}

const ITER_KEY: &str = "iteration";
const STEPS_KEY: &str = "adam_steps";
const WEIGHTS_KEY: &str = "class_weights";

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Model::new(&cfg.model, cfg.seed)?;
        Self::with_model(cfg, model)
    }

    /// Starts from an existing model, e.g. a pretrained backbone.
    pub fn with_model(cfg: TrainConfig, mut model: Model) -> Result<Self> {
        cfg.validate()?;
        if !model.config().same_architecture(&cfg.model) {
            return Err(Error::config(
                "model does not match the training configuration",
            ));
        }
        if cfg.freeze_backbone {
            for p in model.store_mut().iter_mut() {
                if p.name.starts_with("backbone.") {
                    p.trainable = false;
                }
            }
        }
        Ok(Self {
            opt: Adam::new(cfg.optimizer),
            cfg,
            model,
            iteration: 0,
            weights: None,
            dump_dir: None,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, ck: &Checkpoint) -> Result<Self> {
        let model = Model::from_checkpoint(ck)?;
        let mut t = Self::with_model(cfg, model)?;
        let meta = |k: &str| ck.metadata.get(k).and_then(|v| v.parse::<u64>().ok());
        t.iteration = meta(ITER_KEY).unwrap_or(0);
        let n = t.model.store().len();
        let mut m = vec![None; n];
        let mut v = vec![None; n];
        for (id, p) in t.model.store().iter() {
            let i = id.index();
            m[i] = ck
                .get(&format!("adam.m.{}", p.name))
                .map(|x| x.to_tensor())
                .transpose()?;
            v[i] = ck
                .get(&format!("adam.v.{}", p.name))
                .map(|x| x.to_tensor())
                .transpose()?;
        }
        t.opt.restore(m, v, meta(STEPS_KEY).unwrap_or(0));
        if let Some(w) = ck.metadata.get(WEIGHTS_KEY) {
            let w = w
                .split(',')
                .map(|s| s.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::config(format!("bad class weights in checkpoint: {e}")))?;
            t.weights = Some(w);
        }
        Ok(t)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn class_weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    pub fn set_class_weights(&mut self, w: Vec<f64>) {
        self.weights = Some(w);
    }

    /// Where the offending batch is written on a non-finite loss.
    pub fn set_dump_dir(&mut self, dir: PathBuf) {
        self.dump_dir = Some(dir);
    }

    fn budget_left(&self) -> bool {
        self.cfg.max_updates.is_none_or(|m| self.iteration < m)
    }

    /// Weights, optimiser moments and counters.
    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = self.model.to_checkpoint()?;
        let (m, v) = self.opt.state();
        for (id, p) in self.model.store().iter() {
            let i = id.index();
            if let Some(t) = m.get(i).and_then(|x| x.as_ref()) {
                ck.tensors
                    .push(NamedTensor::from_tensor(format!("adam.m.{}", p.name), t));
            }
            if let Some(t) = v.get(i).and_then(|x| x.as_ref()) {
                ck.tensors
                    .push(NamedTensor::from_tensor(format!("adam.v.{}", p.name), t));
            }
        }
        ck.metadata
            .insert(ITER_KEY.into(), self.iteration.to_string());
        ck.metadata
            .insert(STEPS_KEY.into(), self.opt.steps().to_string());
        if let Some(w) = &self.weights {
            let s: Vec<String> = w.iter().map(|x| format!("{x:e}")).collect();
            ck.metadata.insert(WEIGHTS_KEY.into(), s.join(","));
        }
        Ok(ck)
    }

    /// Input statistics over every frame of every sequence.
    pub fn fit_input_norm(&mut self, data: &[Sequence]) -> Result<()> {
        let mut images = Vec::new();
        for seq in data {
            for f in &seq.frames {
                images.push(build_range_image(
                    &f.cloud,
                    &seq.sensor,
                    self.cfg.projection,
                )?);
            }
        }
        let norm = InputNorm::fit(&images)?;
        self.model.set_input_norm(Some(norm))
    }

    /// Class weights from the projected pixel labels of all sequences.
    pub fn fit_class_weights(&mut self, data: &[Sequence]) -> Result<()> {
        let c = self.model.num_classes();
        let mut counts = vec![0u64; c];
        for seq in data {
            if seq.mapping.num_classes() != c {
                return Err(Error::config(format!(
                    "sequence '{}' has {} classes, model has {c}",
                    seq.name,
                    seq.mapping.num_classes()
                )));
            }
            for f in &seq.frames {
                let Some(labels) = &f.labels else { continue };
                let ri = build_range_image(&f.cloud, &seq.sensor, self.cfg.projection)?;
                for t in pixel_targets(&ri, labels, &seq.mapping)
                    .into_iter()
                    .flatten()
                {
                    counts[t] += 1;
                }
            }
        }
        self.weights = Some(compute_class_weights(&counts)?.weights);
        Ok(())
    }

    /// Runs the configured number of epochs over random sub-sequences.
    pub fn train(&mut self, data: &[Sequence], log: &mut dyn Write) -> Result<Vec<UpdateRecord>> {
        if self.weights.is_none() {
            self.fit_class_weights(data)?;
        }
        if self.cfg.normalize_inputs && self.model.config().input_norm.is_none() {
            self.fit_input_norm(data)?;
        }
        let len = self.cfg.tbptt.length;
        let mut records = Vec::new();
        writeln!(log, "{LOG_HEADER}").map_err(|e| Error::io("metrics log", e))?;
        for epoch in 0..self.cfg.epochs {
            let mut rng = ChaCha8Rng::seed_from_u64(
                self.cfg.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15)
                    ^ (epoch as u64 + 1)
                    ^ self.iteration << 20,
            );
            let mut starts = Vec::new();
            for (s, seq) in data.iter().enumerate() {
                let n = seq.frames.len() / len;
                if n == 0 {
                    continue;
                }
                let shift = rng.random_range(0..=seq.frames.len() - n * len);
                starts.extend((0..n).map(|k| (s, shift + k * len)));
            }
            if starts.is_empty() {
                return Err(Error::Sequence(format!("no sequence has {len} frames")));
            }
            starts.shuffle(&mut rng);
            for chunk in starts.chunks(self.cfg.batch) {
                if !self.budget_left() {
                    return Ok(records);
                }
                let mut batch = Vec::with_capacity(chunk.len());
                for &(s, start) in chunk {
                    let seq = &data[s];
                    let aug = draw_augmentation(&self.cfg.augment, seq.sensor.w(), &mut rng)?;
                    batch.push(prepare_frames(
                        &seq.frames[start..start + len],
                        &seq.sensor,
                        self.cfg.projection,
                        &seq.mapping,
                        aug,
                    )?);
                }
                records.extend(self.train_batch(&batch, log)?);
            }
        }
        Ok(records)
    }

    /// One pass of the update schedule over a batch of prepared
    /// sub-sequences of equal length and image size.
    pub fn train_batch(
        &mut self,
        batch: &[Vec<PreparedFrame>],
        log: &mut dyn Write,
    ) -> Result<Vec<UpdateRecord>> {
        let weights = self
            .weights
            .clone()
            .ok_or_else(|| Error::State("class weights not set".into()))?;
        let len = self.cfg.tbptt.length;
        if batch.is_empty() || batch.iter().any(|s| s.len() != len) {
            return Err(Error::Sequence(format!(
                "every sub-sequence must have {len} frames"
            )));
        }
        let [_, _, h, w] = batch[0][0].input.shape();
        let frames: Vec<BatchFrame> = (0..len)
            .map(|k| BatchFrame::stack(&self.model, batch, k, h, w, self.cfg.tma))
            .collect::<Result<_>>()?;
        let temporal = self.model.is_temporal();
        let mut mem: Vec<Option<Tensor>> = vec![None; len + 1];
        let mut have = 0usize;
        let mut records = Vec::new();
        for upd in tbptt_schedule(&self.cfg.tbptt)? {
            if !self.budget_left() {
                break;
            }
            // Forward-only up to the frame before the window.
            if temporal {
                for f in have + 1..upd.start {
                    let mut g = Graph::inference(Mode::Train);
                    let h_prev = mem[f - 1].clone().map(|t| g.input(t));
                    let out = self.step(&mut g, &frames[f - 1], h_prev, h, w)?;
                    mem[f] = out.map(|v| g.value(v).clone());
                }
                have = have.max(upd.start - 1);
            }
            let mut g = Graph::new(Mode::Train);
            let start_mem = if temporal {
                mem[upd.start - 1].clone()
            } else {
                None
            };
            let (losses, memories) = self.record_window(
                &mut g,
                &frames[upd.start - 1..upd.frame],
                start_mem,
                &weights,
                h,
                w,
            )?;
            for (f, m) in upd.frames().zip(memories) {
                if m.is_some() {
                    mem[f] = m;
                }
            }
            have = have.max(upd.frame);
            if losses.is_empty() {
                continue;
            }
            let mut total = losses[0];
            for l in &losses[1..] {
                total = g.add(total, *l)?;
            }
            let loss = g.scale(total, 1.0 / losses.len() as f64);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(self.nan_abort(&frames, upd.start, upd.frame, value));
            }
            let grads = g.backward(loss)?;
            grads.accumulate_into(self.model.store_mut());
            let lr = self.opt.config().lr(self.iteration);
            self.opt.step(self.model.store_mut(), self.iteration);
            let rec = UpdateRecord {
                iteration: self.iteration,
                frame: upd.frame,
                loss: value,
                lr,
            };
            writeln!(log, "{}", rec.tsv()).map_err(|e| Error::io("metrics log", e))?;
            records.push(rec);
            self.iteration += 1;
        }
        Ok(records)
    }

    /// Records consecutive frames starting from a detached memory and
    /// returns the per-frame losses of labelled frames and the new memories.
    fn record_window(
        &mut self,
        g: &mut Graph,
        frames: &[BatchFrame],
        start_mem: Option<Tensor>,
        weights: &[f64],
        h: usize,
        w: usize,
    ) -> Result<(Vec<Var>, Vec<Option<Tensor>>)> {
        let mut h_prev = start_mem.map(|t| g.input(t));
        let mut losses = Vec::new();
        let mut memories = Vec::with_capacity(frames.len());
        for bf in frames {
            let x = g.input(bf.input.clone());
            let aligned = match h_prev {
                Some(hv) => Some(g.gather(hv, bf.warp.clone(), h, w)?),
                None => None,
            };
            let out = self.model.forward_step(g, x, aligned)?;
            if bf.labelled {
                losses.push(g.weighted_cross_entropy(out.logits, &bf.targets, weights)?);
            }
            h_prev = out.memory;
            memories.push(out.memory.map(|v| g.value(v).clone()));
        }
        Ok((losses, memories))
    }

    fn step(
        &mut self,
        g: &mut Graph,
        bf: &BatchFrame,
        h_prev: Option<Var>,
        h: usize,
        w: usize,
    ) -> Result<Option<Var>> {
        let x = g.input(bf.input.clone());
        let aligned = match h_prev {
            Some(hv) => Some(g.gather(hv, bf.warp.clone(), h, w)?),
            None => None,
        };
        Ok(self.model.forward_step(g, x, aligned)?.memory)
    }

    fn nan_abort(&self, frames: &[BatchFrame], start: usize, end: usize, value: f64) -> Error {
        let mut msg = format!(
            "loss {value} at iteration {}, frames {start}..={end}",
            self.iteration
        );
        if let Some(dir) = &self.dump_dir {
            let mut ck = Checkpoint::default();
            for f in start..=end {
                ck.tensors.push(NamedTensor::from_tensor(
                    format!("frame{f}.input"),
                    &frames[f - 1].input,
                ));
            }
            ck.metadata
                .insert(ITER_KEY.into(), self.iteration.to_string());
            let path = dir.join("nan_batch.ckpt");
            match std::fs::create_dir_all(dir)
                .map_err(|e| Error::io(dir, e))
                .and_then(|_| ck.save(&path))
            {
                Ok(()) => msg.push_str(&format!("; batch written to {}", path.display())),
                Err(e) => msg.push_str(&format!("; batch dump failed: {e}")),
            }
        }
        Error::Numeric(msg)
    }
}

/// All sub-sequences' frame `k`, stacked along the batch axis.
struct BatchFrame {
    input: Tensor,
    targets: Vec<Option<usize>>,
    labelled: bool,
    warp: Vec<Vec<Option<usize>>>,
}

impl BatchFrame {
    fn stack(
        model: &Model,
        batch: &[Vec<PreparedFrame>],
        k: usize,
        h: usize,
        w: usize,
        tma: bool,
    ) -> Result<Self> {
        let inputs: Vec<Tensor> = batch.iter().map(|s| s[k].input.clone()).collect();
        let input = model.prepare_input(Tensor::stack_batch(&inputs)?);
        if input.shape()[2..] != [h, w] {
            return Err(Error::shape(
                "sub-sequences in a batch differ in image size",
            ));
        }
        let mut targets = Vec::with_capacity(batch.len() * h * w);
        let mut labelled = false;
        for s in batch {
            match &s[k].targets {
                Some(t) => {
                    labelled = true;
                    targets.extend_from_slice(t);
                }
                None => targets.extend(std::iter::repeat_n(None, h * w)),
            }
        }
        let warp = batch
            .iter()
            .map(|s| match (&s[k].warp, tma) {
                (Some(wi), true) => wi.clone(),
                _ => (0..h * w).map(Some).collect(),
            })
            .collect();
        Ok(Self {
            input,
            targets,
            labelled,
            warp,
        })
    }
}

/// Training profile for a model: the temporal one uses the slower rate.
pub fn default_optimizer(model: &ModelConfig) -> OptimizerConfig {
    if model.update.is_some() {
        OptimizerConfig::temporal()
    } else {
        OptimizerConfig::single_frame()
    }
}
