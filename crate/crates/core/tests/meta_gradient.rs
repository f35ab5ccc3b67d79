use fewshot::backbones::{build_backbone, BackboneConfig};
use fewshot::data::{Episode, EpisodeIndices};
use fewshot::meta::{evaluate_episode, meta_gradient, meta_outer_step, Head, MetaConfig, MetaState};
use fewshot::nn::loss::cross_entropy;
use fewshot::rng;
use fewshot::Tensor;
use rand::Rng;

fn toy_episode(n_way: usize, k: usize, q: usize, seed: u64) -> Episode<f64> {
    let mut r = rng::seeded(seed);
    let mut draw = |rows: usize| Tensor::from_vec(&[rows, 3, 2, 2], (0..rows * 12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
    let support_x = draw(n_way * k);
    let query_x = draw(n_way * q);
    let support_y = (0..n_way).flat_map(|c| std::iter::repeat_n(c, k)).collect();
    let query_y = (0..n_way).flat_map(|c| std::iter::repeat_n(c, q)).collect();
    Episode {
        n_way,
        k_shot: k,
        support_x,
        support_y,
        query_x,
        query_y,
        indices: EpisodeIndices {
            n_way,
            k_shot: k,
            q_per_class: q,
            classes: (0..n_way as u32).collect(),
            support: Vec::new(),
            query: Vec::new(),
        },
    }
}

fn toy_state(seed: u64) -> MetaState<f64> {
    let theta = build_backbone::<f64>(&BackboneConfig::mlp(2, 3, 3), seed).unwrap();
    MetaState::new(theta, 2, seed)
}

/// Bilevel objective evaluated directly: adapt, then query loss.
fn bilevel_objective(state: &MetaState<f64>, eps: &[Episode<f64>], alpha: f64, steps: usize) -> f64 {
    eps.iter().map(|ep| evaluate_episode(state, ep, alpha, steps).unwrap().0).sum()
}

fn flat_state(state: &MetaState<f64>) -> Vec<f64> {
    let mut v = state.theta.params().flatten();
    v.extend_from_slice(state.phi.weight.data());
    v.extend_from_slice(state.phi.bias.data());
    v
}

fn set_flat(state: &mut MetaState<f64>, v: &[f64]) {
    let nt = state.theta.params().numel();
    state.theta.params_mut().assign_flat(&v[..nt]).unwrap();
    let nw = state.phi.weight.len();
    state.phi.weight.data_mut().copy_from_slice(&v[nt..nt + nw]);
    state.phi.bias.data_mut().copy_from_slice(&v[nt + nw..]);
}

#[test]
fn outer_gradient_matches_finite_differences() {
    let state = toy_state(3);
    assert!(flat_state(&state).len() <= 60);
    let eps: Vec<_> = (0..2).map(|s| toy_episode(2, 1, 3, 10 + s)).collect();
    let (alpha, steps) = (0.4, 3);
    let g = meta_gradient(&state, &eps, alpha, steps, false).unwrap();
    let mut analytic = g.theta.flatten();
    analytic.extend_from_slice(g.phi.weight.data());
    analytic.extend_from_slice(g.phi.bias.data());

    let base = flat_state(&state);
    let mut worst: f64 = 0.0;
    for j in 0..base.len() {
        let mut s = state.clone();
        let mut v = base.clone();
        v[j] += 1e-5;
        set_flat(&mut s, &v);
        let lp = bilevel_objective(&s, &eps, alpha, steps);
        v[j] -= 2e-5;
        set_flat(&mut s, &v);
        let lm = bilevel_objective(&s, &eps, alpha, steps);
        let fd = (lp - lm) / 2e-5;
        let rel = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    assert!(worst < 1e-3, "worst relative error {worst}");

    // The second-order path is not negligible on this instance.
    let fo = meta_gradient(&state, &eps, alpha, steps, true).unwrap();
    let diff: f64 = fo.theta.flatten().iter().zip(g.theta.flatten()).map(|(a, b)| (a - b).abs()).sum();
    assert!(diff > 1e-6);
}

#[test]
fn zero_inner_steps_is_a_query_gradient_step() {
    let mut state = toy_state(4);
    let ep = toy_episode(2, 1, 4, 20);
    let cfg = MetaConfig {
        inner_steps_train: 0,
        task_batch: 1,
        beta: 0.1,
        ..MetaConfig::new(2, 1)
    };
    let before = state.clone();
    meta_outer_step(&mut state, std::slice::from_ref(&ep), &cfg).unwrap();

    // Joint supervised gradient on the query set, computed without the meta code.
    let (fq, tq) = before.theta.forward_train(&ep.query_x).unwrap();
    let z = before.phi.logits(&fq);
    let (_, gz) = cross_entropy(&z, &ep.query_y);
    let mut dw = Tensor::zeros(before.phi.weight.shape());
    let mut db = Tensor::zeros(before.phi.bias.shape());
    let dfeat = fewshot::nn::linear::backward(&gz, &fq, &before.phi.weight, &mut dw, Some(&mut db), true).unwrap();
    let gt = before.theta.backward(&tq, &dfeat);
    let mut expect = before.theta.params().clone();
    let mut step = gt.clone();
    step.scale(-0.1);
    expect.add_assign(&step);
    for (a, b) in state.theta.params().flatten().iter().zip(expect.flatten()) {
        assert!((a - b).abs() < 1e-14);
    }
    for (a, (w, g)) in state.phi.weight.data().iter().zip(before.phi.weight.data().iter().zip(dw.data())) {
        assert!((a - (w - 0.1 * g)).abs() < 1e-14);
    }
}

#[test]
fn zero_beta_leaves_state_unchanged() {
    let mut state = toy_state(5);
    let eps: Vec<_> = (0..4).map(|s| toy_episode(2, 1, 2, 30 + s)).collect();
    let cfg = MetaConfig {
        beta: 0.0,
        ..MetaConfig::new(2, 1)
    };
    let before = state.clone();
    meta_outer_step(&mut state, &eps, &cfg).unwrap();
    assert_eq!(state.theta.params(), before.theta.params());
    assert_eq!(state.phi, before.phi);
}

#[test]
fn relabeling_an_episode_leaves_query_loss_unchanged() {
    let state = toy_state(6);
    let ep = toy_episode(2, 2, 3, 40);
    let (loss, _) = evaluate_episode(&state, &ep, 0.3, 4).unwrap();
    let mut swapped_ep = ep.clone();
    swapped_ep.support_y.iter_mut().for_each(|y| *y = 1 - *y);
    swapped_ep.query_y.iter_mut().for_each(|y| *y = 1 - *y);
    let mut swapped = state.clone();
    let d = state.phi.weight.dim(1);
    let w = state.phi.weight.data();
    let b = state.phi.bias.data();
    swapped.phi = Head {
        weight: Tensor::from_vec(&[2, d], [&w[d..], &w[..d]].concat()).unwrap(),
        bias: Tensor::from_vec(&[2], vec![b[1], b[0]]).unwrap(),
    };
    let (loss2, _) = evaluate_episode(&swapped, &swapped_ep, 0.3, 4).unwrap();
    assert!((loss - loss2).abs() < 1e-9);
}
