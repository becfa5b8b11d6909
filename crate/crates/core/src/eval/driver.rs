//! Sequence evaluation with optional ablations and post-processing.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::knn::{knn_backproject, pixel_lookup, KnnConfig};
use super::metrics::{ConfusionMatrix, IouReport};
use super::vote::{majority_vote_baseline, LabelledFrame};
use crate::data::Sequence;
use crate::error::{Error, Result};
use crate::geometry::{build_range_image, ProjectionMode};
use crate::network::{FrameInput, Model, ModelState, StepOptions};

fn five() -> usize {
    5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    #[serde(default)]
    pub projection: ProjectionMode,
    #[serde(default)]
    pub empty_memory: bool,
    #[serde(default)]
    pub no_tma: bool,
    #[serde(default)]
    pub majority_vote: bool,
    /// Frames in the vote, the current one included.
    #[serde(default = "five")]
    pub vote_frames: usize,
    /// k for range-based back-projection; `None` uses each point's pixel.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knn: Option<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            projection: ProjectionMode::default(),
            empty_memory: false,
            no_tma: false,
            majority_vote: false,
            vote_frames: 5,
            knn: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    pub confusion: ConfusionMatrix,
    pub iou: IouReport,
    pub frames: usize,
}

impl EvalReport {
    pub fn miou(&self) -> f64 {
        self.iou.mean
    }

    /// Tab-separated `class  iou` lines, then the mean and the hash.
    pub fn to_tsv(&self, config_hash: &str) -> String {
        let mut s = String::from("class\tiou\n");
        for (name, iou) in self.class_names.iter().zip(&self.iou.per_class) {
            match iou {
                Some(v) => writeln!(s, "{name}\t{v:.6}"),
                None => writeln!(s, "{name}\t-"),
            }
            .expect("string write");
        }
        writeln!(s, "mIoU\t{:.6}", self.iou.mean).expect("string write");
        writeln!(s, "frames\t{}", self.frames).expect("string write");
        writeln!(s, "points\t{}", self.confusion.total()).expect("string write");
        writeln!(s, "config_sha256\t{config_hash}").expect("string write");
        s
    }
}

/// Hex SHA-256 of a canonical configuration text.
pub fn config_hash(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

pub fn evaluate(model: &mut Model, data: &[Sequence], opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(model, data, opts, |_, _, _| Ok(()))
}

/// Runs every sequence from its first frame. `on_frame` receives the
/// sequence name, frame index and per-point predicted train ids.
pub fn evaluate_with(
    model: &mut Model,
    data: &[Sequence],
    opts: &EvalOptions,
    mut on_frame: impl FnMut(&str, usize, &[u32]) -> Result<()>,
) -> Result<EvalReport> {
    let first = data
        .first()
        .ok_or_else(|| Error::Sequence("nothing to evaluate".into()))?;
    let c = model.num_classes();
    let knn = opts.knn.map(|k| KnnConfig { k, window: 5 });
    if let Some(k) = knn {
        k.validate()?;
    }
    if opts.vote_frames == 0 {
        return Err(Error::config("vote_frames must be at least 1"));
    }
    let ignore = first.mapping.ignore_id();
    let mut cm = ConfusionMatrix::new(c, Some(ignore));
    let mut frames = 0;
    for seq in data {
        if seq.mapping.num_classes() != c || seq.mapping.ignore_id() != ignore {
            return Err(Error::config(format!(
                "sequence '{}' uses a different class mapping than the model",
                seq.name
            )));
        }
        let mut state = ModelState::new(seq.sensor.clone(), opts.projection);
        let mut history: VecDeque<LabelledFrame> = VecDeque::new();
        let step = StepOptions {
            empty_memory: opts.empty_memory,
            no_tma: opts.no_tma,
        };
        for (t, f) in seq.frames.iter().enumerate() {
            let ri = build_range_image(&f.cloud, &seq.sensor, opts.projection)?;
            let pred = model.recurrent_step(
                &mut state,
                &FrameInput {
                    index: t,
                    cloud: &f.cloud,
                    image: &ri,
                    pose: &f.pose,
                },
                step,
            )?;
            let mut pixel: Vec<u32> = pred.labels.iter().map(|&l| l as u32).collect();
            if opts.majority_vote {
                history.push_back(LabelledFrame {
                    cloud: f.cloud.clone(),
                    image: ri.clone(),
                    pose: f.pose,
                    labels: pixel,
                });
                if history.len() > opts.vote_frames {
                    history.pop_front();
                }
                history.make_contiguous();
                pixel =
                    majority_vote_baseline(history.as_slices().0, &seq.sensor, opts.projection)?;
            }
            let points = match knn {
                Some(k) => knn_backproject(&f.cloud, &ri, &pixel, k, ignore)?,
                None => pixel_lookup(&ri, &pixel),
            };
            if let Some(gt) = &f.labels {
                cm.accumulate(gt, &points)?;
            }
            on_frame(&seq.name, t, &points)?;
            frames += 1;
        }
    }
    Ok(EvalReport {
        class_names: first.mapping.class_names().to_vec(),
        iou: cm.iou()?,
        confusion: cm,
        frames,
    })
}
