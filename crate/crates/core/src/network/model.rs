//! The full segmentation model and its frame-by-frame recurrent driver.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{Backbone, BackboneConfig};
use super::layers::Conv;
use super::memory::{MemoryModule, MemoryUpdateKind};
use crate::alignment::{compute_warp_map, relative_transform, RigidTransform};
use crate::autodiff::{softmax_channels, Checkpoint, Graph, Mode, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::geometry::{
    PointCloud, ProjectionMode, RangeImage, SensorModel, CHANNELS, CH_OCCUPANCY,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default)]
    pub backbone: BackboneConfig,
    /// Memory update; `None` gives the single-frame baseline.
    #[serde(default)]
    pub update: Option<MemoryUpdateKind>,
    pub num_classes: usize,
    /// Per-channel input standardisation, fitted on training data.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_norm: Option<InputNorm>,
}

/// `(x - mean) / std` per channel on occupied pixels. The occupancy channel
/// is passed through and empty pixels stay zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputNorm {
    pub mean: [f64; CHANNELS],
    pub std: [f64; CHANNELS],
}

impl InputNorm {
    /// Statistics over the occupied pixels of `images`.
    pub fn fit<'a>(images: impl IntoIterator<Item = &'a RangeImage>) -> Result<Self> {
        let mut n = 0usize;
        let mut sum = [0.0; CHANNELS];
        let mut sq = [0.0; CHANNELS];
        for ri in images {
            for u in 0..ri.h() {
                for v in 0..ri.w() {
                    if !ri.occupied(u, v) {
                        continue;
                    }
                    n += 1;
                    for (c, x) in ri.pixel_values(u, v).iter().enumerate() {
                        sum[c] += x;
                        sq[c] += x * x;
                    }
                }
            }
        }
        if n == 0 {
            return Err(Error::config("no occupied pixels to fit input statistics"));
        }
        let mean = sum.map(|s| s / n as f64);
        let mut std = [1.0; CHANNELS];
        for c in 0..CHANNELS {
            let var = (sq[c] / n as f64 - mean[c] * mean[c]).max(0.0);
            if var.sqrt() > 1e-6 {
                std[c] = var.sqrt();
            }
        }
        let mut norm = Self { mean, std };
        norm.mean[CH_OCCUPANCY] = 0.0;
        norm.std[CH_OCCUPANCY] = 1.0;
        Ok(norm)
    }

    pub fn apply(&self, t: &mut Tensor) {
        let [n, c, h, w] = t.shape();
        debug_assert_eq!(c, CHANNELS);
        let hw = h * w;
        let data = t.data_mut();
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let occ = data[base + CH_OCCUPANCY * hw + p];
                for ch in (0..c).filter(|&ch| ch != CH_OCCUPANCY) {
                    let x = &mut data[base + ch * hw + p];
                    *x = occ * (*x - self.mean[ch]) / self.std[ch];
                }
            }
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.num_classes < 2 {
            return Err(Error::config("a model needs at least two classes"));
        }
        if let Some(n) = &self.input_norm {
            if n.std.iter().chain(&n.mean).any(|x| !x.is_finite())
                || n.std.iter().any(|s| *s <= 0.0)
            {
                return Err(Error::config(
                    "input statistics must be finite with positive std",
                ));
            }
        }
        Ok(())
    }

    /// Equal up to fitted input statistics.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.backbone == other.backbone
            && self.update == other.update
            && self.num_classes == other.num_classes
    }
}

/// Result of one recorded step.
#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    pub logits: Var,
    /// New memory `H_t`; `None` for the single-frame model.
    pub memory: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    backbone: Backbone,
    memory: Option<MemoryModule>,
    head: Conv,
}

pub const CONFIG_KEY: &str = "model_config";

impl Model {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&mut store, &mut rng, "backbone", &cfg.backbone)?;
        let c = cfg.backbone.out_channels();
        let memory = cfg
            .update
            .map(|k| MemoryModule::new(k, &mut store, &mut rng, "memory", c))
            .transpose()?;
        let head = Conv::new(
            &mut store,
            &mut rng,
            "head",
            c,
            cfg.num_classes,
            (1, 1),
            (1, 1),
            true,
        )?;
        Ok(Self {
            cfg: cfg.clone(),
            store,
            backbone,
            memory,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn set_input_norm(&mut self, norm: Option<InputNorm>) -> Result<()> {
        let mut cfg = self.cfg.clone();
        cfg.input_norm = norm;
        cfg.validate()?;
        self.cfg = cfg;
        Ok(())
    }

    /// Network input for a `[n, 6, h, w]` range-image tensor.
    pub fn prepare_input(&self, mut t: Tensor) -> Tensor {
        if let Some(n) = &self.cfg.input_norm {
            n.apply(&mut t);
        }
        t
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn memory_channels(&self) -> usize {
        self.cfg.backbone.out_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    pub fn is_temporal(&self) -> bool {
        self.memory.is_some()
    }

    pub fn memory_module(&self) -> Option<&MemoryModule> {
        self.memory.as_ref()
    }

    /// Trainable scalar count.
    pub fn count_parameters(&self) -> usize {
        self.store.count_trainable()
    }

    /// Backbone features only.
    pub fn features(&mut self, g: &mut Graph, x: Var) -> Result<Var> {
        self.backbone.forward(g, &mut self.store, x)
    }

    /// Records one frame: features, memory update against the aligned memory
    /// (zeros when `aligned` is `None`) and class logits.
    pub fn forward_step(
        &mut self,
        g: &mut Graph,
        x: Var,
        aligned: Option<Var>,
    ) -> Result<StepOutput> {
        let Self {
            store,
            backbone,
            memory,
            head,
            ..
        } = self;
        let f = backbone.forward(g, store, x)?;
        let Some(module) = memory else {
            let logits = head.forward(g, store, f)?;
            return Ok(StepOutput {
                logits,
                memory: None,
            });
        };
        let h_aligned = match aligned {
            Some(h) => h,
            None => g.input(Tensor::zeros(g.shape(f))),
        };
        let h = module.forward(g, store, f, h_aligned)?;
        let logits = head.forward(g, store, h)?;
        Ok(StepOutput {
            logits,
            memory: Some(h),
        })
    }

    /// Weights plus the model configuration as metadata.
    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint::from_store(&self.store);
        let text = toml::to_string(&self.cfg).map_err(|e| Error::config(e.to_string()))?;
        ck.metadata.insert(CONFIG_KEY.into(), text);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let text = ck
            .metadata
            .get(CONFIG_KEY)
            .ok_or_else(|| Error::config("checkpoint carries no model configuration"))?;
        let cfg: ModelConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        let mut model = Self::new(&cfg, 0)?;
        ck.load_into(&mut model.store)?;
        Ok(model)
    }

    pub fn load_weights(&mut self, ck: &Checkpoint) -> Result<()> {
        ck.load_into(&mut self.store)
    }

    /// Inference on one frame, advancing `state`.
    pub fn recurrent_step(
        &mut self,
        state: &mut ModelState,
        frame: &FrameInput<'_>,
        opts: StepOptions,
    ) -> Result<Prediction> {
        if frame.index != state.next_index {
            return Err(Error::Sequence(format!(
                "frame {} supplied, expected frame {}",
                frame.index, state.next_index
            )));
        }
        let (h, w) = (frame.image.h(), frame.image.w());
        if (h, w) != (state.sensor.h(), state.sensor.w()) {
            return Err(Error::shape(format!(
                "frame is {h}x{w}, sensor is {}x{}",
                state.sensor.h(),
                state.sensor.w()
            )));
        }
        let mut g = Graph::inference(Mode::Eval);
        let x = g.input(self.prepare_input(image_tensor(frame.image)));
        let aligned = match (&state.memory, &state.prev) {
            (Some(mem), Some(prev)) if self.is_temporal() && !opts.empty_memory => {
                let index = if opts.no_tma {
                    (0..h * w).map(Some).collect()
                } else {
                    let rel = relative_transform(&prev.pose, frame.pose)?;
                    compute_warp_map(&prev.cloud, &prev.image, &rel, &state.sensor, state.mode)?
                        .gather_index()
                };
                let m = g.input(mem.clone());
                Some(g.gather(m, vec![index], h, w)?)
            }
            _ => None,
        };
        state.last_aligned = aligned.map(|v| g.value(v).clone());
        let out = self.forward_step(&mut g, x, aligned)?;
        let probs = softmax_channels(g.value(out.logits)).batch_item(0);
        state.memory = out.memory.map(|m| g.value(m).clone());
        state.prev = Some(PrevFrame {
            cloud: frame.cloud.clone(),
            image: frame.image.clone(),
            pose: *frame.pose,
        });
        state.next_index += 1;
        Ok(Prediction::from_probs(probs))
    }
}

/// `[1, 6, h, w]` network input of a range image.
pub fn image_tensor(ri: &RangeImage) -> Tensor {
    Tensor::from_vec([1, CHANNELS, ri.h(), ri.w()], ri.channels().to_vec())
        .expect("channel-major buffer")
}

#[derive(Debug, Clone)]
struct PrevFrame {
    cloud: PointCloud,
    image: RangeImage,
    pose: RigidTransform,
}

/// Per-sequence recurrent state. A fresh state holds the zero memory.
#[derive(Debug, Clone)]
pub struct ModelState {
    sensor: SensorModel,
    mode: ProjectionMode,
    memory: Option<Tensor>,
    last_aligned: Option<Tensor>,
    prev: Option<PrevFrame>,
    next_index: usize,
}

impl ModelState {
    pub fn new(sensor: SensorModel, mode: ProjectionMode) -> Self {
        Self {
            sensor,
            mode,
            memory: None,
            last_aligned: None,
            prev: None,
            next_index: 0,
        }
    }

    /// `H_t` after the last step.
    pub fn memory(&self) -> Option<&Tensor> {
        self.memory.as_ref()
    }

    /// `H~` used by the last step; `None` means it was all-zero.
    pub fn last_aligned(&self) -> Option<&Tensor> {
        self.last_aligned.as_ref()
    }

    pub fn frames_seen(&self) -> usize {
        self.next_index
    }
}

pub struct FrameInput<'a> {
    pub index: usize,
    pub cloud: &'a PointCloud,
    pub image: &'a RangeImage,
    pub pose: &'a RigidTransform,
}

/// Evaluation-time ablations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct StepOptions {
    /// Feed a zero memory on every frame.
    pub empty_memory: bool,
    /// Feed the previous memory without ego-motion alignment.
    pub no_tma: bool,
}

#[derive(Debug, Clone)]
pub struct Prediction {
    /// `[1, C, h, w]` class distribution.
    pub probs: Tensor,
    /// Row-major arg-max class per pixel.
    pub labels: Vec<usize>,
}

impl Prediction {
    pub fn from_probs(probs: Tensor) -> Self {
        let labels = argmax_channels(&probs);
        Self { probs, labels }
    }
}

/// Per-pixel arg-max over channels of item 0; ties go to the lower class.
pub fn argmax_channels(t: &Tensor) -> Vec<usize> {
    let [_, c, h, w] = t.shape();
    let hw = h * w;
    (0..hw)
        .map(|p| {
            let mut best = 0;
            for k in 1..c {
                if t.data()[k * hw + p] > t.data()[best * hw + p] {
                    best = k;
                }
            }
            best
        })
        .collect()
}

/// Human-readable parameter breakdown by top-level block.
pub fn parameter_breakdown(model: &Model) -> BTreeMap<String, usize> {
    let mut out = BTreeMap::new();
    for (_, p) in model.store().iter().filter(|(_, p)| p.trainable) {
        let key = p.name.split('.').next().unwrap_or("").to_string();
        *out.entry(key).or_insert(0) += p.value.numel();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_range_image, Point};

    fn tiny(update: Option<MemoryUpdateKind>) -> ModelConfig {
        ModelConfig {
            backbone: BackboneConfig::tiny(),
            update,
            num_classes: 3,
            input_norm: None,
        }
    }

    fn scene() -> (SensorModel, PointCloud, RangeImage) {
        let m = SensorModel::uniform(4, 16, 10.0, -10.0).unwrap();
        let mut pts = Vec::new();
        for u in 0..4 {
            for v in 0..16 {
                if (u + v) % 3 == 0 {
                    continue;
                }
                let theta = (8.0 - 5.0 * u as f64).to_radians();
                let phi = m.column_azimuth(v);
                let r = 5.0 + v as f64 * 0.25;
                pts.push(Point::new(
                    r * theta.cos() * phi.cos(),
                    r * theta.cos() * phi.sin(),
                    r * theta.sin(),
                    0.3,
                ));
            }
        }
        let pc = PointCloud::new(pts).unwrap();
        let ri = build_range_image(&pc, &m, ProjectionMode::Simple).unwrap();
        (m, pc, ri)
    }

    #[test]
    fn classify_is_a_distribution() {
        let (m, pc, ri) = scene();
        let mut model = Model::new(&tiny(Some(MemoryUpdateKind::ConvGru)), 1).unwrap();
        let mut st = ModelState::new(m, ProjectionMode::Simple);
        let pose = RigidTransform::identity();
        let p = model
            .recurrent_step(
                &mut st,
                &FrameInput {
                    index: 0,
                    cloud: &pc,
                    image: &ri,
                    pose: &pose,
                },
                StepOptions::default(),
            )
            .unwrap();
        let [_, c, h, w] = p.probs.shape();
        for px in 0..h * w {
            let s: f64 = (0..c).map(|k| p.probs.data()[k * h * w + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn first_frame_uses_zero_memory_and_identity_warp_copies_memory() {
        let (m, pc, ri) = scene();
        let mut model = Model::new(&tiny(Some(MemoryUpdateKind::Residual)), 2).unwrap();
        let mut st = ModelState::new(m, ProjectionMode::Simple);
        let pose = RigidTransform::from_yaw_translation(0.3, 1.0, 2.0, 0.0);
        let f0 = FrameInput {
            index: 0,
            cloud: &pc,
            image: &ri,
            pose: &pose,
        };
        let p0 = model
            .recurrent_step(&mut st, &f0, StepOptions::default())
            .unwrap();
        assert!(st.last_aligned().is_none());

        let mut g = Graph::inference(Mode::Eval);
        let x = g.input(image_tensor(&ri));
        let out = model.forward_step(&mut g, x, None).unwrap();
        assert_eq!(softmax_channels(g.value(out.logits)), p0.probs);

        let h1 = st.memory().unwrap().clone();
        let f1 = FrameInput {
            index: 1,
            cloud: &pc,
            image: &ri,
            pose: &pose,
        };
        model
            .recurrent_step(&mut st, &f1, StepOptions::default())
            .unwrap();
        let aligned = st.last_aligned().unwrap();
        let (h, w) = (ri.h(), ri.w());
        for u in 0..h {
            for v in 0..w {
                for c in 0..model.memory_channels() {
                    let got = aligned.at(0, c, u, v);
                    let want = if ri.occupied(u, v) {
                        h1.at(0, c, u, v)
                    } else {
                        0.0
                    };
                    assert_eq!(got.to_bits(), want.to_bits());
                }
            }
        }
    }

    #[test]
    fn out_of_order_frames_are_rejected() {
        let (m, pc, ri) = scene();
        let mut model = Model::new(&tiny(None), 3).unwrap();
        let mut st = ModelState::new(m, ProjectionMode::Simple);
        let pose = RigidTransform::identity();
        let f = FrameInput {
            index: 1,
            cloud: &pc,
            image: &ri,
            pose: &pose,
        };
        assert!(matches!(
            model.recurrent_step(&mut st, &f, StepOptions::default()),
            Err(Error::Sequence(_))
        ));
    }

    #[test]
    fn recurrence_is_deterministic() {
        let (m, pc, ri) = scene();
        let run = || {
            let mut model = Model::new(&tiny(Some(MemoryUpdateKind::ConvGru)), 9).unwrap();
            let mut st = ModelState::new(m.clone(), ProjectionMode::Simple);
            let mut last = None;
            for i in 0..3 {
                let pose =
                    RigidTransform::from_yaw_translation(0.05 * i as f64, 0.2 * i as f64, 0.0, 0.0);
                let f = FrameInput {
                    index: i,
                    cloud: &pc,
                    image: &ri,
                    pose: &pose,
                };
                last = Some(
                    model
                        .recurrent_step(&mut st, &f, StepOptions::default())
                        .unwrap()
                        .probs,
                );
            }
            last.unwrap()
        };
        let (a, b) = (run(), run());
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn bptt_over_five_steps_spans_39_residual_units() {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                widths: [2, 2, 2],
                ..BackboneConfig::paper()
            },
            update: Some(MemoryUpdateKind::Residual),
            num_classes: 2,
            input_norm: None,
        };
        let mut model = Model::new(&cfg, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new(Mode::Train);
        let mut mem = None;
        let mut logits = None;
        for _ in 0..5 {
            let x = g.input(Tensor::randn([1, 6, 1, 8], 1.0, &mut rng));
            let out = model.forward_step(&mut g, x, mem).unwrap();
            mem = out.memory;
            logits = Some(out.logits);
        }
        assert_eq!(g.max_marked_depth(logits.unwrap(), g.marks()), 39);
    }

    #[test]
    fn checkpoint_roundtrip_restores_predictions() {
        let (m, pc, ri) = scene();
        let mut a = Model::new(&tiny(Some(MemoryUpdateKind::Residual)), 5).unwrap();
        let mut b = Model::from_checkpoint(&a.to_checkpoint().unwrap()).unwrap();
        let pose = RigidTransform::identity();
        let f = FrameInput {
            index: 0,
            cloud: &pc,
            image: &ri,
            pose: &pose,
        };
        let mut sa = ModelState::new(m.clone(), ProjectionMode::Simple);
        let mut sb = ModelState::new(m, ProjectionMode::Simple);
        let pa = a
            .recurrent_step(&mut sa, &f, StepOptions::default())
            .unwrap();
        let pb = b
            .recurrent_step(&mut sb, &f, StepOptions::default())
            .unwrap();
        assert_eq!(pa.probs, pb.probs);
    }

    #[test]
    fn mismatched_checkpoint_names_the_layer() {
        let a = Model::new(&tiny(Some(MemoryUpdateKind::Residual)), 6).unwrap();
        let mut cfg = tiny(Some(MemoryUpdateKind::Residual));
        cfg.backbone.widths = [8, 8, 12];
        let mut b = Model::new(&cfg, 6).unwrap();
        let err = b.load_weights(&a.to_checkpoint().unwrap()).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("backbone."));
    }

    #[test]
    fn argmax_prefers_boosted_class() {
        let mut t = Tensor::zeros([1, 4, 1, 2]);
        t.data_mut()[2 * 2 + 1] = 10.0;
        let p = softmax_channels(&t);
        assert_eq!(argmax_channels(&p), vec![0, 2]);
        assert!((p.at(0, 1, 0, 0) - 0.25).abs() < 1e-15);
    }
}
