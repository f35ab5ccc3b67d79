use fewshot::backbones::{build_backbone, BackboneConfig};
use fewshot::data::{to_batch, Normalization, ResolutionMode};
use fewshot::image::Image;
use fewshot::pretext::{TaskKind, TaskSet};
use fewshot::rng;
use fewshot::trainer::{compose_multitask_batch, CopyMode, Learner, TaskWeights, ViewSpec};
use rand::Rng;

fn images(count: usize, side: usize, seed: u64) -> Vec<Image<u8>> {
    let mut r = rng::seeded(seed);
    (0..count)
        .map(|_| Image::from_vec(3, side, side, (0..3 * side * side).map(|_| r.random()).collect()).unwrap())
        .collect()
}

fn rel_diff(a: &[f32], b: &[f32]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| f64::from(x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| f64::from(*y).powi(2)).sum();
    (num / den).sqrt()
}

/// One step of {CLS, ROT} training with the given weights, and one step of
/// CLS-only training, from identical initial states on the same batch.
fn paired_steps(weights: TaskWeights) -> (Learner<f32>, Learner<f32>) {
    let imgs = images(8, 16, 1);
    let refs: Vec<&Image<u8>> = imgs.iter().collect();
    let labels: Vec<usize> = (0..8).map(|i| i % 4).collect();
    let joint = TaskSet::new([TaskKind::Cls, TaskKind::Rot]).unwrap();
    let view = ViewSpec {
        mode: ResolutionMode::Resized,
        view_size: 16,
        loc_source: 32,
        train_time: true,
    };
    let batch = compose_multitask_batch(&refs, &labels, &joint, CopyMode::AllCopies, &view, &mut rng::seeded(2)).unwrap();
    let x = to_batch::<f32>(&batch.images, &Normalization::default());
    let backbone = build_backbone::<f32>(&BackboneConfig::convnet4(16).with_widths(&[4; 4]), 3).unwrap();

    let mut multi = Learner::new(backbone.clone(), &joint, 4, 0.9, 5e-4, 4);
    let mut single = Learner::new(backbone, &TaskSet::single(TaskKind::Cls), 4, 0.9, 5e-4, 4);
    let all = batch.labels(&joint);
    let cls_only = batch.labels(&TaskSet::single(TaskKind::Cls));
    multi.step(&x, &all, &weights, 0.05).unwrap();
    single.step(&x, &cls_only, &TaskWeights::default(), 0.05).unwrap();
    (multi, single)
}

#[test]
fn zero_weights_reduce_to_classification_step() {
    let zero = TaskWeights {
        lambda_rot: 0.0,
        lambda_loc: 0.0,
    };
    let (multi, single) = paired_steps(zero);
    let d = rel_diff(&multi.backbone.params().flatten(), &single.backbone.params().flatten());
    assert!(d < 1e-6, "backbone relative diff {d}");
    let hm = multi.head(TaskKind::Cls).unwrap().params().flatten();
    let hs = single.head(TaskKind::Cls).unwrap().params().flatten();
    assert!(rel_diff(&hm, &hs) < 1e-6);
}

#[test]
fn nonzero_rotation_weight_changes_the_step() {
    let (multi, single) = paired_steps(TaskWeights::default());
    let d = rel_diff(&multi.backbone.params().flatten(), &single.backbone.params().flatten());
    assert!(d > 1e-6, "rotation loss should move the backbone, diff {d}");
}
