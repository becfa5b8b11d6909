//! Multi-scale single-frame backbone.
//!
//! Three feature extractors run at horizontal scales 1, 1/2 and 1/4 (rows are
//! never subsampled). Aggregation nodes upsample the coarser stream, fuse it
//! with the finer one and refine the result:
//!
//! ```text
//! 1a ──────────► 1b ─────────► 1c   (c_mem channels, full width)
//!  └─► 2a ──┬──► ┘      ┌────► ┘
//!           └─► 3a ─► 2b
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{run_units, BatchNorm, Conv, ConvTranspose, ResidualUnit};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};
use crate::geometry::CHANNELS;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub in_channels: usize,
    /// Channel widths at scales 1, 1/2, 1/4. The last one is the output width.
    pub widths: [usize; 3],
    /// Residual units in extractors 1a, 2a, 3a.
    pub extractor_units: [usize; 3],
    pub aggregator_units: usize,
    /// Halve the width already in the first extractor; the output is then
    /// upsampled once more to full resolution.
    pub downsample_first: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BackboneConfig {
    pub fn paper() -> Self {
        Self {
            in_channels: CHANNELS,
            widths: [64, 64, 128],
            extractor_units: [4, 5, 6],
            aggregator_units: 2,
            downsample_first: false,
        }
    }

    pub fn toy() -> Self {
        Self {
            widths: [16, 16, 32],
            ..Self::paper()
        }
    }

    /// Small enough to train on one CPU core in minutes.
    pub fn tiny() -> Self {
        Self {
            widths: [8, 8, 16],
            extractor_units: [1, 1, 1],
            aggregator_units: 1,
            ..Self::paper()
        }
    }

    pub fn out_channels(&self) -> usize {
        self.widths[2]
    }

    /// Horizontal size must survive the downsampling chain exactly.
    pub fn width_divisor(&self) -> usize {
        if self.downsample_first {
            8
        } else {
            4
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.widths.contains(&0) {
            return Err(Error::config("backbone widths must be positive"));
        }
        if self.extractor_units.contains(&0) {
            return Err(Error::config(
                "every extractor needs at least one residual unit",
            ));
        }
        Ok(())
    }

    /// Longest chain of residual units from input to output.
    pub fn depth(&self) -> usize {
        let [a, b, c] = self.extractor_units;
        let g = self.aggregator_units;
        // Paths: 1a-1b-1c, 1a-2a-1b-1c, 1a-2a-2b-1c, 1a-2a-3a-2b-1c.
        [a + 2 * g, a + b + 2 * g, a + b + 2 * g, a + b + c + 2 * g]
            .into_iter()
            .max()
            .unwrap()
    }
}

#[derive(Debug, Clone)]
pub struct Aggregator {
    pub up: ConvTranspose,
    pub fuse: Conv,
    pub bn: BatchNorm,
    pub units: Vec<ResidualUnit>,
}

impl Aggregator {
    #[allow(clippy::too_many_arguments)]
    fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        fine: usize,
        coarse: usize,
        out: usize,
        units: usize,
    ) -> Result<Self> {
        let up = ConvTranspose::new(
            store,
            rng,
            &format!("{name}.up"),
            coarse,
            coarse,
            (1, 2),
            (1, 2),
        )?;
        let fuse = Conv::new(
            store,
            rng,
            &format!("{name}.fuse"),
            fine + coarse,
            out,
            (1, 1),
            (1, 1),
            false,
        )?;
        let bn = BatchNorm::new(store, &format!("{name}.bn"), out)?;
        let units = (0..units)
            .map(|i| ResidualUnit::new(store, rng, &format!("{name}.unit{i}"), out, out, (1, 1)))
            .collect::<Result<_>>()?;
        Ok(Self {
            up,
            fuse,
            bn,
            units,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        fine: Var,
        coarse: Var,
    ) -> Result<Var> {
        let up = self.up.forward(g, store, coarse)?;
        let cat = g.concat(&[fine, up])?;
        let h = self.fuse.forward(g, store, cat)?;
        let h = self.bn.forward(g, store, h)?;
        let h = g.relu(h);
        run_units(&self.units, g, store, h)
    }
}

fn extractor(
    store: &mut ParamStore,
    rng: &mut impl Rng,
    name: &str,
    cin: usize,
    cout: usize,
    units: usize,
    downsample: bool,
) -> Result<Vec<ResidualUnit>> {
    (0..units)
        .map(|i| {
            let (c, stride) = if i == 0 {
                (cin, if downsample { (1, 2) } else { (1, 1) })
            } else {
                (cout, (1, 1))
            };
            ResidualUnit::new(store, rng, &format!("{name}.unit{i}"), c, cout, stride)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    e1: Vec<ResidualUnit>,
    e2: Vec<ResidualUnit>,
    e3: Vec<ResidualUnit>,
    a1b: Aggregator,
    a2b: Aggregator,
    a1c: Aggregator,
    final_up: Option<ConvTranspose>,
}

impl Backbone {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        cfg: &BackboneConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let [w1, w2, w3] = cfg.widths;
        let [n1, n2, n3] = cfg.extractor_units;
        let g = cfg.aggregator_units;
        let p = |s: &str| format!("{prefix}.{s}");
        Ok(Self {
            cfg: cfg.clone(),
            e1: extractor(
                store,
                rng,
                &p("e1"),
                cfg.in_channels,
                w1,
                n1,
                cfg.downsample_first,
            )?,
            e2: extractor(store, rng, &p("e2"), w1, w2, n2, true)?,
            e3: extractor(store, rng, &p("e3"), w2, w3, n3, true)?,
            a1b: Aggregator::new(store, rng, &p("a1b"), w1, w2, w1, g)?,
            a2b: Aggregator::new(store, rng, &p("a2b"), w2, w3, w3, g)?,
            a1c: Aggregator::new(store, rng, &p("a1c"), w1, w3, w3, g)?,
            final_up: if cfg.downsample_first {
                Some(ConvTranspose::new(
                    store,
                    rng,
                    &p("final_up"),
                    w3,
                    w3,
                    (1, 2),
                    (1, 2),
                )?)
            } else {
                None
            },
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    /// `x` is `[n, in_channels, h, w]`; the result is `[n, widths[2], h, w]`.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var) -> Result<Var> {
        let [_, c, _, w] = g.shape(x);
        if c != self.cfg.in_channels {
            return Err(Error::shape(format!(
                "backbone expects {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.width_divisor();
        if w % div != 0 {
            return Err(Error::shape(format!(
                "input width {w} is not a multiple of {div}"
            )));
        }
        let f1 = run_units(&self.e1, g, store, x)?;
        let f2 = run_units(&self.e2, g, store, f1)?;
        let f3 = run_units(&self.e3, g, store, f2)?;
        let f1b = self.a1b.forward(g, store, f1, f2)?;
        let f2b = self.a2b.forward(g, store, f2, f3)?;
        let out = self.a1c.forward(g, store, f1b, f2b)?;
        match &self.final_up {
            Some(up) => up.forward(g, store, out),
            None => Ok(out),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Mode, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn toy_output_shape_and_depth() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            extractor_units: [1, 1, 1],
            aggregator_units: 1,
            ..BackboneConfig::toy()
        };
        let bb = Backbone::new(&mut store, &mut rng, "bb", &cfg).unwrap();
        let mut g = Graph::inference(Mode::Train);
        let x = g.input(Tensor::randn([1, 6, 16, 64], 1.0, &mut rng));
        let y = bb.forward(&mut g, &mut store, x).unwrap();
        assert_eq!(g.shape(y), [1, 32, 16, 64]);
    }

    #[test]
    fn marked_depth_matches_topology() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            widths: [2, 2, 2],
            ..BackboneConfig::paper()
        };
        assert_eq!(cfg.depth(), 19);
        let bb = Backbone::new(&mut store, &mut rng, "bb", &cfg).unwrap();
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::randn([1, 6, 1, 8], 1.0, &mut rng));
        let y = bb.forward(&mut g, &mut store, x).unwrap();
        assert_eq!(g.max_marked_depth(y, g.marks()), 19);
    }

    #[test]
    fn zero_input_stays_zero_through_the_backbone() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, "bb", &BackboneConfig::tiny()).unwrap();
        let mut g = Graph::inference(Mode::Eval);
        let x = g.input(Tensor::zeros([1, 6, 2, 8]));
        let y = bb.forward(&mut g, &mut store, x).unwrap();
        assert!(g.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_bad_width_and_channels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bb = Backbone::new(&mut store, &mut rng, "bb", &BackboneConfig::tiny()).unwrap();
        let mut g = Graph::inference(Mode::Eval);
        let x = g.input(Tensor::zeros([1, 6, 2, 10]));
        assert!(matches!(
            bb.forward(&mut g, &mut store, x),
            Err(Error::Shape(_))
        ));
        let x = g.input(Tensor::zeros([1, 5, 2, 8]));
        assert!(matches!(
            bb.forward(&mut g, &mut store, x),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn downsampling_first_extractor_keeps_output_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cfg = BackboneConfig {
            downsample_first: true,
            ..BackboneConfig::tiny()
        };
        let bb = Backbone::new(&mut store, &mut rng, "bb", &cfg).unwrap();
        let mut g = Graph::inference(Mode::Train);
        let x = g.input(Tensor::randn([1, 6, 2, 16], 1.0, &mut rng));
        let y = bb.forward(&mut g, &mut store, x).unwrap();
        assert_eq!(g.shape(y), [1, 16, 2, 16]);
    }
}
