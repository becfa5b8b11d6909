//! Prints the truncated back-propagation schedule for a sub-sequence.
//!
//!     cargo run --example tbptt_schedule -- [k1] [k2] [k3] [length]

use rangeseg::training::{tbptt_schedule, TbpttConfig};

fn main() -> rangeseg::Result<()> {
    let a: Vec<usize> = std::env::args()
        .skip(1)
        .map(|s| s.parse().expect("integer argument"))
        .collect();
    let d = TbpttConfig::default();
    let cfg = TbpttConfig {
        k1: a.first().copied().unwrap_or(d.k1),
        k2: a.get(1).copied().unwrap_or(d.k2),
        k3: a.get(2).copied().unwrap_or(d.k3),
        length: a.get(3).copied().unwrap_or(d.length),
    };
    println!(
        "k1={} k2={} k3={} length={}",
        cfg.k1, cfg.k2, cfg.k3, cfg.length
    );
    for u in tbptt_schedule(&cfg)? {
        println!(
            "update after frame {:>3}: gradients through frames {}..={}",
            u.frame, u.start, u.frame
        );
    }
    Ok(())
}
