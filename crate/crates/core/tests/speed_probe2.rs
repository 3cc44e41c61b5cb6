//! Temporary fine-grained speed probe (ignored by default).

use std::time::Instant;

use backmix::augment::{AugmentationPlan, Augmenter, StandardAugmentConfig};
use backmix::data::{synthesize_dataset, SyntheticSpec};
use backmix::nn::{Adam, Mode, ResNet};
use ndarray::{Array2, Array4, Axis};

#[test]
#[ignore]
fn phase_timings() {
    let spec = SyntheticSpec {
        num_patients: 375,
        num_patients_ood: 50,
        shortcut_rho: 1.0,
        seed: 7,
        ..SyntheticSpec::default()
    };
    let generated = synthesize_dataset(&spec).unwrap();
    let frames = &generated.train;

    // Augmentation epoch.
    let plan =
        AugmentationPlan::build(frames, 1.0, StandardAugmentConfig::default(), 11).unwrap();
    let aug = Augmenter::Plan(plan);
    let t = Instant::now();
    let examples = aug.epoch(frames, 1).unwrap();
    println!("augment epoch ({} frames): {:?}", examples.len(), t.elapsed());

    // Batch assembly.
    let t = Instant::now();
    let mut batches = Vec::new();
    for chunk in examples.chunks(64) {
        let mut x = Array4::<f32>::zeros((chunk.len(), 1, 64, 64));
        for (i, ex) in chunk.iter().enumerate() {
            x.index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&ex.image);
        }
        batches.push(x);
    }
    println!("batch assembly: {:?}", t.elapsed());

    let mut rng = backmix::rng::derived_rng(1, &[0]);
    let mut net = ResNet::new(&[8, 16, 32, 64], 4, &mut rng);
    let mut opt = Adam::new(1e-3);

    // Forward only.
    let t = Instant::now();
    for x in batches.iter().take(10) {
        let _ = net.forward(x, Mode::Train);
    }
    println!("forward x10 batches: {:?}", t.elapsed());

    // Forward + backward + step.
    let t = Instant::now();
    for x in batches.iter().take(10) {
        net.zero_grad();
        let logits = net.forward(x, Mode::Train);
        let d = Array2::<f32>::ones(logits.raw_dim()) * 0.01;
        net.backward(&d);
        opt.step(&mut net.params_mut());
    }
    println!("fw+bw+step x10 batches: {:?}", t.elapsed());

    // Inference pass over validation-size set.
    let t = Instant::now();
    for x in batches.iter().take(5) {
        let _ = net.forward_infer(x);
    }
    println!("infer x5 batches: {:?}", t.elapsed());
}
