//! Compares reverse-mode gradients of a residual unit against central
//! finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangeseg::autodiff::{grad_check_params, ParamStore, Tensor};
use rangeseg::network::layers::ResidualUnit;

fn main() -> rangeseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut store = ParamStore::new();
    let unit = ResidualUnit::new(&mut store, &mut rng, "unit", 3, 4, (1, 2))?;
    let x = Tensor::randn([2, 3, 4, 8], 1.0, &mut rng);
    let probe = Tensor::randn([2, 4, 4, 4], 1.0, &mut rng);
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(id, _)| id)
        .collect();
    let err = grad_check_params(
        &mut store,
        &ids,
        |g, s| {
            let xv = g.input(x.clone());
            let y = unit.forward(g, s, xv)?;
            let p = g.input(probe.clone());
            let m = g.mul(y, p)?;
            Ok(g.sum(m))
        },
        1e-5,
    )?;
    println!(
        "{} parameters checked, max relative error {err:.2e}",
        store.count_trainable()
    );
    Ok(())
}
