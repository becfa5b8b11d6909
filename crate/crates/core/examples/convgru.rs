//! Runs a ConvGRU memory update over a few frames and prints the gate
//! statistics and how far the memory moved toward each candidate.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rangeseg::autodiff::{Graph, Mode, ParamStore, Tensor};
use rangeseg::network::ConvGru;

fn mean(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel() as f64
}

fn main() -> rangeseg::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut store = ParamStore::new();
    let gru = ConvGru::new(&mut store, &mut rng, "memory", 8)?;
    let mut h = Tensor::zeros([1, 8, 4, 32]);
    for t in 0..5 {
        let mut g = Graph::inference(Mode::Eval);
        let f = g.input(Tensor::randn([1, 8, 4, 32], 1.0, &mut rng));
        let hv = g.input(h.clone());
        let step = gru.step(&mut g, &store, f, hv)?;
        println!(
            "step {t}: mean z {:.3}, mean r {:.3}, mean |h| {:.3}",
            mean(g.value(step.z)),
            mean(g.value(step.r)),
            g.value(step.h).data().iter().map(|v| v.abs()).sum::<f64>() / h.numel() as f64
        );
        h = g.value(step.h).clone();
    }
    Ok(())
}
