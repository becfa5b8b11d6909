//! Parameterised building blocks. Each layer owns the ids of its parameters
//! in a shared [`ParamStore`] and records its forward pass on a [`Graph`].

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Mode, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

fn he_normal(shape: [usize; 4], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let data = (0..shape.iter().product::<usize>())
        .map(|_| normal.sample(rng))
        .collect();
    Tensor::from_vec(shape, data).expect("sized")
}

/// 2-d convolution with "same" padding for odd kernels.
#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        bias: bool,
    ) -> Result<Self> {
        let shape = [cout, cin, kernel.0, kernel.1];
        let weight = store.add(
            format!("{name}.weight"),
            he_normal(shape, cin * kernel.0 * kernel.1, rng),
            true,
        )?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros([1, cout, 1, 1]), true)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            stride,
            pad: (kernel.0 / 2, kernel.1 / 2),
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.weight);
        let b = self.bias.map(|b| g.param(store, b));
        g.conv2d(x, k, b, self.stride, self.pad)
    }
}

/// Transposed convolution used for `x2` horizontal upsampling.
#[derive(Debug, Clone)]
pub struct ConvTranspose {
    pub weight: ParamId,
    pub stride: (usize, usize),
}

impl ConvTranspose {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
    ) -> Result<Self> {
        let w = he_normal([cin, cout, kernel.0, kernel.1], cin, rng);
        let weight = store.add(format!("{name}.weight"), w, true)?;
        Ok(Self { weight, stride })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let k = g.param(store, self.weight);
        g.conv_transpose2d(x, k, None, self.stride)
    }
}

/// Batch normalisation with running statistics kept as non-trainable
/// parameters, so they travel with checkpoints.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, c: usize) -> Result<Self> {
        let shape = [1, c, 1, 1];
        Ok(Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(shape, 1.0), true)?,
            beta: store.add(format!("{name}.beta"), Tensor::zeros(shape), true)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(shape), false)?,
            running_var: store.add(
                format!("{name}.running_var"),
                Tensor::full(shape, 1.0),
                false,
            )?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var) -> Result<Var> {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        let mut mean = store.value(self.running_mean).clone();
        let mut var = store.value(self.running_var).clone();
        let y = g.batch_norm(x, gamma, beta, &mut mean, &mut var)?;
        if g.mode() == Mode::Train {
            *store.value_mut(self.running_mean) = mean;
            *store.value_mut(self.running_var) = var;
        }
        Ok(y)
    }
}

/// `y = skip(x) + BN(conv(relu(BN(conv(x)))))`. The skip is the identity
/// unless the unit strides or changes width, in which case it is a 1x1
/// convolution followed by batch norm.
#[derive(Debug, Clone)]
pub struct ResidualUnit {
    pub conv1: Conv,
    pub bn1: BatchNorm,
    pub conv2: Conv,
    pub bn2: BatchNorm,
    pub skip: Option<(Conv, BatchNorm)>,
}

impl ResidualUnit {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut impl Rng,
        name: &str,
        cin: usize,
        cout: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        let conv1 = Conv::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            (3, 3),
            stride,
            false,
        )?;
        let bn1 = BatchNorm::new(store, &format!("{name}.bn1"), cout)?;
        let conv2 = Conv::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            (3, 3),
            (1, 1),
            false,
        )?;
        let bn2 = BatchNorm::new(store, &format!("{name}.bn2"), cout)?;
        let skip = if cin != cout || stride != (1, 1) {
            Some((
                Conv::new(
                    store,
                    rng,
                    &format!("{name}.skip"),
                    cin,
                    cout,
                    (1, 1),
                    stride,
                    false,
                )?,
                BatchNorm::new(store, &format!("{name}.skip_bn"), cout)?,
            ))
        } else {
            None
        };
        Ok(Self {
            conv1,
            bn1,
            conv2,
            bn2,
            skip,
        })
    }

    /// Records the unit and marks its output node.
    pub fn forward(&self, g: &mut Graph, store: &mut ParamStore, x: Var) -> Result<Var> {
        let h = self.conv1.forward(g, store, x)?;
        let h = self.bn1.forward(g, store, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, store, h)?;
        let h = self.bn2.forward(g, store, h)?;
        let s = match &self.skip {
            Some((conv, bn)) => {
                let s = conv.forward(g, store, x)?;
                bn.forward(g, store, s)?
            }
            None => x,
        };
        let y = g.add(s, h)?;
        g.mark(y);
        Ok(y)
    }
}

pub fn run_units(
    units: &[ResidualUnit],
    g: &mut Graph,
    store: &mut ParamStore,
    mut x: Var,
) -> Result<Var> {
    for u in units {
        x = u.forward(g, store, x)?;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_weights_make_a_unit_the_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let unit = ResidualUnit::new(&mut store, &mut rng, "u", 3, 3, (1, 1)).unwrap();
        for id in [unit.conv1.weight, unit.conv2.weight] {
            *store.value_mut(id) = Tensor::zeros(store.value(id).shape());
        }
        let x = Tensor::randn([2, 3, 4, 6], 1.0, &mut rng);
        let mut g = Graph::new(Mode::Train);
        let xv = g.input(x.clone());
        let y = unit.forward(&mut g, &mut store, xv).unwrap();
        assert_eq!(g.value(y), &x);
    }

    #[test]
    fn strided_unit_projects_the_skip() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let unit = ResidualUnit::new(&mut store, &mut rng, "u", 2, 4, (1, 2)).unwrap();
        assert!(unit.skip.is_some());
        let mut g = Graph::new(Mode::Train);
        let x = g.input(Tensor::randn([1, 2, 3, 8], 1.0, &mut rng));
        let y = unit.forward(&mut g, &mut store, x).unwrap();
        assert_eq!(g.shape(y), [1, 4, 3, 4]);
    }

    #[test]
    fn conv_parameter_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        Conv::new(&mut store, &mut rng, "a", 256, 128, (1, 1), (1, 1), true).unwrap();
        assert_eq!(store.count_trainable(), 32_896);
        let mut store = ParamStore::new();
        Conv::new(&mut store, &mut rng, "b", 128, 128, (3, 3), (1, 1), false).unwrap();
        assert_eq!(store.count_trainable(), 147_456);
    }

    #[test]
    fn batch_norm_updates_running_stats_only_in_train_mode() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::randn([2, 2, 3, 3], 2.0, &mut rng).map(|v| v + 1.0);
        let mut g = Graph::inference(Mode::Eval);
        let xv = g.input(x.clone());
        bn.forward(&mut g, &mut store, xv).unwrap();
        assert_eq!(store.value(bn.running_mean), &Tensor::zeros([1, 2, 1, 1]));
        let mut g = Graph::inference(Mode::Train);
        let xv = g.input(x);
        bn.forward(&mut g, &mut store, xv).unwrap();
        assert!(store
            .value(bn.running_mean)
            .data()
            .iter()
            .all(|m| *m != 0.0));
    }

    #[test]
    fn residual_unit_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let unit = ResidualUnit::new(&mut store, &mut rng, "u", 2, 3, (1, 2)).unwrap();
        let x = Tensor::randn([2, 2, 3, 4], 1.0, &mut rng);
        let probe = Tensor::randn([2, 3, 3, 2], 1.0, &mut rng);
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect();
        let err = grad_check_params(
            &mut store,
            &ids,
            |g, store| {
                let xv = g.input(x.clone());
                let y = unit.forward(g, store, xv)?;
                let p = g.input(probe.clone());
                let m = g.mul(y, p)?;
                Ok(g.sum(m))
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}
