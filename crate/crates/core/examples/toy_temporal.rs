//! Trains a single-frame and a temporal model on toy scenes whose box
//! classes show only intermittently, then compares held-out mIoU, including
//! the temporal model run without alignment and with an empty memory.
//!
//!     cargo run --release --example toy_temporal -- [seed] [train_sequences] [epochs]

use std::time::Instant;

use rangeseg::training::ToyExperiment;

fn main() -> rangeseg::Result<()> {
    let args: Vec<u64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("integer argument"))
        .collect();
    let mut exp = ToyExperiment::default();
    let seed = args.first().copied().unwrap_or(0);
    if let Some(n) = args.get(1) {
        exp.train_sequences = *n as usize;
    }
    if let Some(e) = args.get(2) {
        exp.epochs = *e as usize;
    }
    let start = Instant::now();
    let r = exp.run(seed)?;
    println!("seed {seed}, {:.0}s", start.elapsed().as_secs_f64());
    println!("single frame              {:.4}", r.single_frame);
    println!("single frame + vote       {:.4}", r.majority_vote);
    println!("temporal                  {:.4}", r.temporal);
    println!("temporal, no alignment    {:.4}", r.no_alignment);
    println!("temporal, empty memory    {:.4}", r.empty_memory);
    Ok(())
}
