//! Memory update modules combining the aligned memory `H~` with the current
//! feature map `F` into the new memory `H`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{run_units, BatchNorm, Conv, ResidualUnit};
use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryUpdateKind {
    Residual,
    #[serde(alias = "gru")]
    ConvGru,
}

impl std::str::FromStr for MemoryUpdateKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "residual" => Ok(Self::Residual),
            "gru" | "conv_gru" | "convgru" => Ok(Self::ConvGru),
            other => Err(Error::config(format!("unknown memory update '{other}'"))),
        }
    }
}

pub const MEMORY_UNITS: usize = 4;

fn check_pair(g: &Graph, f: Var, h: Var, c: usize) -> Result<()> {
    let (fs, hs) = (g.shape(f), g.shape(h));
    if fs != hs || fs[1] != c {
        return Err(Error::shape(format!(
            "memory update expects two {c}-channel maps of equal size, got {fs:?} and {hs:?}"
        )));
    }
    Ok(())
}

/// `concat(H~, F)` -> 1x1 conv halving the channels -> BN -> residual units.
#[derive(Debug, Clone)]
pub struct ResidualMemory {
    pub channels: usize,
    pub fuse: Conv,
    pub bn: BatchNorm,
    pub units: Vec<ResidualUnit>,
}

impl ResidualMemory {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize) -> Result<Self> {
        Ok(Self {
            channels: c,
            fuse: Conv::new(
                store,
                rng,
                &format!("{prefix}.fuse"),
                2 * c,
                c,
                (1, 1),
                (1, 1),
                true,
            )?,
            bn: BatchNorm::new(store, &format!("{prefix}.bn"), c)?,
            units: (0..MEMORY_UNITS)
                .map(|i| ResidualUnit::new(store, rng, &format!("{prefix}.unit{i}"), c, c, (1, 1)))
                .collect::<Result<_>>()?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        f: Var,
        h_aligned: Var,
    ) -> Result<Var> {
        check_pair(g, f, h_aligned, self.channels)?;
        let cat = g.concat(&[h_aligned, f])?;
        let x = self.fuse.forward(g, store, cat)?;
        let x = self.bn.forward(g, store, x)?;
        run_units(&self.units, g, store, x)
    }
}

/// Convolutional GRU with 3x3 kernels; only the input-side (`W`) paths carry
/// a bias.
#[derive(Debug, Clone)]
pub struct ConvGru {
    pub channels: usize,
    pub wz: Conv,
    pub uz: Conv,
    pub wr: Conv,
    pub ur: Conv,
    pub w: Conv,
    pub u: Conv,
}

/// Intermediate values of one GRU step.
#[derive(Debug, Clone, Copy)]
pub struct GruStep {
    pub z: Var,
    pub r: Var,
    pub candidate: Var,
    pub h: Var,
}

impl ConvGru {
    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, prefix: &str, c: usize) -> Result<Self> {
        let mut conv = |name: &str, bias: bool| {
            Conv::new(
                store,
                rng,
                &format!("{prefix}.{name}"),
                c,
                c,
                (3, 3),
                (1, 1),
                bias,
            )
        };
        Ok(Self {
            channels: c,
            wz: conv("wz", true)?,
            uz: conv("uz", false)?,
            wr: conv("wr", true)?,
            ur: conv("ur", false)?,
            w: conv("w", true)?,
            u: conv("u", false)?,
        })
    }

    pub fn step(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        h_aligned: Var,
    ) -> Result<GruStep> {
        check_pair(g, f, h_aligned, self.channels)?;
        let gate = |g: &mut Graph, w: &Conv, u: &Conv, h: Var| -> Result<Var> {
            let a = w.forward(g, store, f)?;
            let b = u.forward(g, store, h)?;
            g.add(a, b)
        };
        let z = gate(g, &self.wz, &self.uz, h_aligned)?;
        let z = g.sigmoid(z);
        let r = gate(g, &self.wr, &self.ur, h_aligned)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h_aligned)?;
        let cand = gate(g, &self.w, &self.u, rh)?;
        let cand = g.tanh(cand);
        let keep = g.one_minus(z);
        let old = g.mul(keep, h_aligned)?;
        let new = g.mul(z, cand)?;
        let h = g.add(old, new)?;
        Ok(GruStep {
            z,
            r,
            candidate: cand,
            h,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: Var,
        h_aligned: Var,
    ) -> Result<Var> {
        Ok(self.step(g, store, f, h_aligned)?.h)
    }
}

#[derive(Debug, Clone)]
pub enum MemoryModule {
    Residual(ResidualMemory),
    ConvGru(ConvGru),
}

impl MemoryModule {
    pub fn new(
        kind: MemoryUpdateKind,
        store: &mut ParamStore,
        rng: &mut impl Rng,
        prefix: &str,
        c: usize,
    ) -> Result<Self> {
        Ok(match kind {
            MemoryUpdateKind::Residual => {
                Self::Residual(ResidualMemory::new(store, rng, prefix, c)?)
            }
            MemoryUpdateKind::ConvGru => Self::ConvGru(ConvGru::new(store, rng, prefix, c)?),
        })
    }

    pub fn kind(&self) -> MemoryUpdateKind {
        match self {
            Self::Residual(_) => MemoryUpdateKind::Residual,
            Self::ConvGru(_) => MemoryUpdateKind::ConvGru,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &mut ParamStore,
        f: Var,
        h_aligned: Var,
    ) -> Result<Var> {
        match self {
            Self::Residual(m) => m.forward(g, store, f, h_aligned),
            Self::ConvGru(m) => m.forward(g, store, f, h_aligned),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check_params, kernels, Mode, Tensor, BN_EPS};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn memory_parameter_count_at_paper_width() {
        let mut store = ParamStore::new();
        ResidualMemory::new(&mut store, &mut rng(1), "m", 128).unwrap();
        let fuse = 256 * 128 + 128;
        let bn = 2 * 128;
        let unit = 2 * 9 * 128 * 128 + 2 * 2 * 128;
        assert_eq!(store.count_trainable(), fuse + bn + 4 * unit);
        assert_eq!(store.count_trainable(), 1_214_848);
    }

    #[test]
    fn residual_memory_concat_width_and_output() {
        let mut r = rng(2);
        let mut store = ParamStore::new();
        let m = ResidualMemory::new(&mut store, &mut r, "m", 4).unwrap();
        assert_eq!(store.value(m.fuse.weight).shape(), [4, 8, 1, 1]);
        let mut g = Graph::inference(Mode::Train);
        let f = g.input(Tensor::randn([1, 4, 2, 4], 1.0, &mut r));
        let h = g.input(Tensor::randn([1, 4, 2, 4], 1.0, &mut r));
        let y = m.forward(&mut g, &mut store, f, h).unwrap();
        assert_eq!(g.shape(y), [1, 4, 2, 4]);
        let bad = g.input(Tensor::zeros([1, 3, 2, 4]));
        assert!(matches!(
            m.forward(&mut g, &mut store, f, bad),
            Err(Error::Shape(_))
        ));
    }

    /// Straight-line recomputation of the residual memory in eval mode from
    /// the raw parameter tensors.
    fn reference_memory(store: &ParamStore, prefix: &str, f: &Tensor, h: &Tensor) -> Tensor {
        let get = |n: &str| {
            store
                .value(store.id(&format!("{prefix}.{n}")).unwrap())
                .clone()
        };
        let conv = |x: &Tensor, n: &str, bias: bool, pad: usize| {
            let b = if bias {
                Some(get(&format!("{n}.bias")))
            } else {
                None
            };
            let geo = kernels::Conv2dGeometry {
                stride: (1, 1),
                pad: (pad, pad),
            };
            kernels::conv2d_forward(x, &get(&format!("{n}.weight")), b.as_ref(), geo)
        };
        let bn = |x: &Tensor, n: &str| {
            let (g, b) = (get(&format!("{n}.gamma")), get(&format!("{n}.beta")));
            let (m, v) = (
                get(&format!("{n}.running_mean")),
                get(&format!("{n}.running_var")),
            );
            let [nb, c, hh, ww] = x.shape();
            let mut out = x.clone();
            for i in 0..nb {
                for ch in 0..c {
                    for y in 0..hh {
                        for z in 0..ww {
                            let idx = x.index(i, ch, y, z);
                            out.data_mut()[idx] = g.data()[ch] * (x.data()[idx] - m.data()[ch])
                                / (v.data()[ch] + BN_EPS).sqrt()
                                + b.data()[ch];
                        }
                    }
                }
            }
            out
        };
        let [n, c, hh, ww] = f.shape();
        let mut cat = Tensor::zeros([n, 2 * c, hh, ww]);
        for i in 0..n {
            for ch in 0..2 * c {
                for y in 0..hh {
                    for z in 0..ww {
                        let v = if ch < c {
                            h.at(i, ch, y, z)
                        } else {
                            f.at(i, ch - c, y, z)
                        };
                        let idx = cat.index(i, ch, y, z);
                        cat.data_mut()[idx] = v;
                    }
                }
            }
        }
        let mut x = bn(&conv(&cat, "fuse", true, 0), "bn");
        for u in 0..MEMORY_UNITS {
            let p = format!("unit{u}");
            let a = bn(
                &conv(&x, &format!("{p}.conv1"), false, 1),
                &format!("{p}.bn1"),
            )
            .map(|v| v.max(0.0));
            let b = bn(
                &conv(&a, &format!("{p}.conv2"), false, 1),
                &format!("{p}.bn2"),
            );
            x.add_assign(&b);
        }
        x
    }

    #[test]
    fn residual_memory_matches_reference() {
        let mut r = rng(3);
        let mut store = ParamStore::new();
        let m = ResidualMemory::new(&mut store, &mut r, "m", 3).unwrap();
        // Non-trivial running statistics and affine parameters.
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let name = store.get(id).name.clone();
            let shape = store.value(id).shape();
            if name.ends_with("running_var") {
                *store.value_mut(id) = Tensor::randn(shape, 0.3, &mut r).map(|v| 1.0 + v.abs());
            } else if !name.ends_with("weight") {
                *store.value_mut(id) = Tensor::randn(shape, 0.5, &mut r);
            }
        }
        let f = Tensor::randn([2, 3, 3, 5], 1.0, &mut r);
        let h = Tensor::randn([2, 3, 3, 5], 1.0, &mut r);
        let mut g = Graph::inference(Mode::Eval);
        let (fv, hv) = (g.input(f.clone()), g.input(h.clone()));
        let y = m.forward(&mut g, &mut store, fv, hv).unwrap();
        let want = reference_memory(&store, "m", &f, &h);
        assert!(g.value(y).max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn residual_memory_units_are_identity_with_zero_convs() {
        let mut r = rng(4);
        let mut store = ParamStore::new();
        let m = ResidualMemory::new(&mut store, &mut r, "m", 2).unwrap();
        for u in &m.units {
            for id in [u.conv1.weight, u.conv2.weight] {
                *store.value_mut(id) = Tensor::zeros(store.value(id).shape());
            }
        }
        let mut g = Graph::inference(Mode::Train);
        let f = g.input(Tensor::randn([1, 2, 2, 4], 1.0, &mut r));
        let h = g.input(Tensor::randn([1, 2, 2, 4], 1.0, &mut r));
        let cat = g.concat(&[h, f]).unwrap();
        let x = m.fuse.forward(&mut g, &store, cat).unwrap();
        let pre = m.bn.forward(&mut g, &mut store, x).unwrap();
        let y = m.forward(&mut g, &mut store, f, h).unwrap();
        assert_eq!(g.value(y), g.value(pre));
    }

    #[test]
    fn residual_memory_gradients() {
        let mut r = rng(5);
        let mut store = ParamStore::new();
        let m = ResidualMemory::new(&mut store, &mut r, "m", 2).unwrap();
        let f = Tensor::randn([2, 2, 2, 3], 1.0, &mut r);
        let h = Tensor::randn([2, 2, 2, 3], 1.0, &mut r);
        let probe = Tensor::randn([2, 2, 2, 3], 1.0, &mut r);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, store| {
                let (fv, hv) = (g.input(f.clone()), g.input(h.clone()));
                let y = m.forward(g, store, fv, hv)?;
                let p = g.input(probe.clone());
                let y = g.mul(y, p)?;
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    fn zero_gru(store: &mut ParamStore) {
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            let shape = store.value(id).shape();
            *store.value_mut(id) = Tensor::zeros(shape);
        }
    }

    #[test]
    fn gru_with_zero_kernels_halves_the_memory() {
        let mut r = rng(6);
        let mut store = ParamStore::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 3).unwrap();
        zero_gru(&mut store);
        let mut g = Graph::inference(Mode::Eval);
        let f = g.input(Tensor::randn([1, 3, 2, 4], 1.0, &mut r));
        let ht = Tensor::randn([1, 3, 2, 4], 1.0, &mut r);
        let h = g.input(ht.clone());
        let s = gru.step(&mut g, &store, f, h).unwrap();
        assert!(g.value(s.z).data().iter().all(|v| *v == 0.5));
        assert!(g.value(s.r).data().iter().all(|v| *v == 0.5));
        assert!(g.value(s.candidate).data().iter().all(|v| *v == 0.0));
        assert!(g.value(s.h).max_abs_diff(&ht.map(|v| 0.5 * v)) < 1e-15);
    }

    #[test]
    fn saturated_update_gate_takes_the_candidate() {
        let mut r = rng(7);
        let mut store = ParamStore::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 2).unwrap();
        for conv in [&gru.wz, &gru.uz] {
            let id = conv.weight;
            *store.value_mut(id) = Tensor::zeros(store.value(id).shape());
        }
        *store.value_mut(gru.wz.bias.unwrap()) = Tensor::full([1, 2, 1, 1], 20.0);
        let mut g = Graph::inference(Mode::Eval);
        let f = g.input(Tensor::randn([1, 2, 3, 4], 1.0, &mut r));
        let h = g.input(Tensor::randn([1, 2, 3, 4], 1.0, &mut r));
        let s = gru.step(&mut g, &store, f, h).unwrap();
        assert!(g.value(s.h).max_abs_diff(g.value(s.candidate)) < 1e-3);
    }

    #[test]
    fn gru_unrolled_three_steps_gradients() {
        let mut r = rng(8);
        let mut store = ParamStore::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 2).unwrap();
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in &ids {
            let shape = store.value(*id).shape();
            *store.value_mut(*id) = Tensor::randn(shape, 0.4, &mut r);
        }
        let fs: Vec<_> = (0..3)
            .map(|_| Tensor::randn([1, 2, 3, 4], 1.0, &mut r))
            .collect();
        let probe = Tensor::randn([1, 2, 3, 4], 1.0, &mut r);
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, store| {
                let mut h = g.input(Tensor::zeros([1, 2, 3, 4]));
                for f in &fs {
                    let fv = g.input(f.clone());
                    h = gru.forward(g, store, fv, h)?;
                }
                let p = g.input(probe.clone());
                let y = g.mul(h, p)?;
                Ok(g.sum(y))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn gru_shape_mismatch() {
        let mut r = rng(9);
        let mut store = ParamStore::new();
        let gru = ConvGru::new(&mut store, &mut r, "g", 2).unwrap();
        let mut g = Graph::inference(Mode::Eval);
        let f = g.input(Tensor::zeros([1, 2, 3, 4]));
        let h = g.input(Tensor::zeros([1, 2, 3, 5]));
        assert!(gru.step(&mut g, &store, f, h).is_err());
    }
}
