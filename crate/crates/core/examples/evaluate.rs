//! Briefly trains a temporal model on toy sequences, then evaluates it with
//! each evaluation-time ablation.

use rangeseg::data::{toy_dataset, ToySceneConfig};
use rangeseg::eval::{evaluate, EvalOptions};
use rangeseg::network::MemoryUpdateKind;
use rangeseg::training::{ToyExperiment, Trainer};

fn main() -> rangeseg::Result<()> {
    let exp = ToyExperiment {
        epochs: 2,
        train_sequences: 8,
        ..ToyExperiment::default()
    };
    let scene = ToySceneConfig::default();
    let train = toy_dataset(&scene, 1, exp.train_sequences)?;
    let test = toy_dataset(&scene, 2, 2)?;
    let mut trainer = Trainer::new(exp.train_config(Some(MemoryUpdateKind::Residual), 0))?;
    let records = trainer.train(&train, &mut std::io::sink())?;
    println!(
        "{} updates, final loss {:.4}",
        records.len(),
        records.last().map_or(f64::NAN, |r| r.loss)
    );
    let mut model = trainer.into_model();
    let variants = [
        ("default", EvalOptions::default()),
        (
            "empty memory",
            EvalOptions {
                empty_memory: true,
                ..Default::default()
            },
        ),
        (
            "no alignment",
            EvalOptions {
                no_tma: true,
                ..Default::default()
            },
        ),
        (
            "knn",
            EvalOptions {
                knn: Some(5),
                ..Default::default()
            },
        ),
    ];
    for (name, opts) in variants {
        let report = evaluate(&mut model, &test, &opts)?;
        println!("{name:<14} mIoU {:.4}", report.miou());
    }
    Ok(())
}
