mod common;

use common::{all_patterns, random_matrix, vote_bruteforce};
use fewshot::adapt::{
    fit_probe, majority_vote, predict_task, predict_vote, vote_copies, vote_from_copy_features, ProbeConfig, VoteScheme,
};
use fewshot::backbones::{build_backbone, BackboneConfig};
use fewshot::data::{eval_view, to_batch, Normalization, ResolutionMode};
use fewshot::image::Image;
use fewshot::rng;
use fewshot::Error;
use rand::Rng;

fn prob_sums_for(pattern_id: usize, classes: usize) -> Vec<f64> {
    // Coarse values so equal sums, and with them the index rule, occur often.
    let mut r = rng::stream(5, &[pattern_id as u64]);
    (0..classes).map(|_| f64::from(r.random_range(0..3u8)) * 0.5).collect()
}

#[test]
fn majority_matches_enumeration_for_four_copies() {
    for (i, votes) in all_patterns(4, 4).iter().enumerate() {
        let sums = prob_sums_for(i, 4);
        assert_eq!(majority_vote(votes, &sums), vote_bruteforce(votes, &sums), "{votes:?} {sums:?}");
    }
}

#[test]
fn majority_matches_enumeration_for_five_copies() {
    for (i, votes) in all_patterns(5, 5).iter().enumerate() {
        let sums = prob_sums_for(i, 5);
        assert_eq!(majority_vote(votes, &sums), vote_bruteforce(votes, &sums), "{votes:?} {sums:?}");
    }
}

#[test]
fn two_one_one_split_goes_to_the_pair() {
    assert_eq!(majority_vote(&[0, 1, 0, 2], &[0.1, 5.0, 5.0, 0.0]), 0);
    assert_eq!(majority_vote(&[3, 3, 3, 3], &[1.0, 1.0, 1.0, 0.0]), 3);
}

#[test]
fn identical_copies_equal_plain_prediction() {
    let mut r = rng::seeded(31);
    for _ in 0..100 {
        let n = r.random_range(2..=5);
        let xs = random_matrix(n, 6, &mut r);
        let ys: Vec<usize> = (0..n).collect();
        let m = fit_probe(&xs, &ys, n, None, &ProbeConfig::default()).unwrap().model;
        let q = random_matrix(15 * n, 6, &mut r);
        let copies = vec![q.clone(); r.random_range(1..=5)];
        assert_eq!(vote_from_copy_features(&m, &copies).unwrap(), predict_task(&m, &q).unwrap());
    }
}

fn noise_u8(side: usize, seed: u64) -> Image<u8> {
    let mut r = rng::seeded(seed);
    Image::from_vec(3, side, side, (0..3 * side * side).map(|_| r.random()).collect()).unwrap()
}

#[test]
fn scheme_none_through_a_backbone_equals_predict_task() {
    let fe = build_backbone::<f32>(&BackboneConfig::convnet4(16).with_widths(&[4; 4]), 1).unwrap();
    let norm = Normalization::default();
    let imgs: Vec<Image<u8>> = (0..12).map(|i| noise_u8(32, i)).collect();
    let refs: Vec<&Image<u8>> = imgs.iter().collect();
    let views: Vec<_> = imgs.iter().map(|i| eval_view(i, ResolutionMode::Resized, 16)).collect();
    let feats = fe.extract_features(&to_batch::<f32>(&views, &norm)).unwrap().cast::<f64>();
    let ys: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let m = fit_probe(&feats, &ys, 3, None, &ProbeConfig::default()).unwrap().model;
    let plain = predict_task(&m, &feats).unwrap();
    assert_eq!(predict_vote(&m, &fe, &refs, VoteScheme::None, ResolutionMode::Resized, &norm).unwrap(), plain);
    assert_eq!(predict_vote(&m, &fe, &refs, VoteScheme::Rot4, ResolutionMode::Resized, &norm).unwrap().len(), 12);
    assert_eq!(predict_vote(&m, &fe, &refs, VoteScheme::Loc5, ResolutionMode::Resized, &norm).unwrap().len(), 12);
}

#[test]
fn copy_counts_and_guard() {
    let img = noise_u8(32, 9);
    assert_eq!(vote_copies(VoteScheme::Rot4, &img, ResolutionMode::Resized, 16).unwrap().len(), 4);
    assert_eq!(vote_copies(VoteScheme::Loc5, &img, ResolutionMode::Resized, 16).unwrap().len(), 5);
    assert!(matches!(
        vote_copies(VoteScheme::Loc5, &img, ResolutionMode::Resized, 17),
        Err(Error::IncompatibleScheme(_))
    ));
}
