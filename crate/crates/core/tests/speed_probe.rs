//! Temporary speed probe (ignored by default).

use std::time::Instant;

use backmix::augment::{AugmentationPlan, Augmenter, StandardAugmentConfig};
use backmix::classifier::{train, ModelSpec, Objective, TrainConfig};
use backmix::data::{synthesize_dataset, SyntheticSpec};

#[test]
#[ignore]
fn time_one_training_epoch() {
    let spec = SyntheticSpec {
        num_patients: 375,
        num_patients_ood: 50,
        shortcut_rho: 1.0,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let t0 = Instant::now();
    let generated = synthesize_dataset(&spec).unwrap();
    println!(
        "synthesis: {:?} ({} train frames)",
        t0.elapsed(),
        generated.train.len()
    );

    for widths in [[8usize, 16, 32, 64], [16, 32, 64, 128]] {
        let model_spec = ModelSpec {
            resolution: 64,
            widths,
            num_classes: 4,
            gradcam_stage: 3,
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 64,
            learning_rate: 1e-3,
            seeds: vec![1],
        };
        let plan = AugmentationPlan::build(
            &generated.train,
            1.0,
            StandardAugmentConfig::default(),
            11,
        )
        .unwrap();
        let t1 = Instant::now();
        let outcome = train(
            &model_spec,
            &Augmenter::Plan(plan),
            &Objective::PlainCrossEntropy,
            &cfg,
            &generated.train,
            &generated.val,
            1,
        )
        .unwrap();
        println!(
            "widths {widths:?}: one epoch {:?} (val acc {:.3})",
            t1.elapsed(),
            outcome.best_val_accuracy
        );
    }
}
