mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::*;
use contembed_core::losses::{
    build, loss_inter_data_coherence, loss_intra_discrimination, loss_neighbor_model_coherence, total_loss,
    total_loss_and_gradients, weighted_total, BatchView, ClassIndexSets, LossConfig, LossContext, LossTerm,
};
use contembed_core::replay::{CentroidDivisor, CentroidStore};
use contembed_core::{Error, ModelState};
use proptest::prelude::*;

const TOL: f64 = 1e-12;

fn batch<'a>(current: &'a [(Vec<f64>, u32)], replayed: &'a [(Vec<f64>, u32)]) -> BatchView<'a> {
    BatchView {
        current: current.iter().map(|(x, c)| (x.as_slice(), *c)).collect(),
        replayed: replayed.iter().map(|(x, c)| (x.as_slice(), *c)).collect(),
    }
}

fn store(entries: &[(u32, Vec<f64>)]) -> CentroidStore {
    let mut s = CentroidStore::new(CentroidDivisor::ContributingSessions);
    let block: BTreeMap<u32, Vec<Vec<f64>>> = entries.iter().map(|(c, v)| (*c, vec![v.clone()])).collect();
    s.update_centroids(&block, 1).unwrap();
    s
}

fn set(xs: &[u32]) -> BTreeSet<u32> {
    xs.iter().copied().collect()
}

#[test]
fn uniform_logits_give_ln_k() {
    let rows = vec![vec![1.0, 0.0, 0.0]; 3];
    let m = model_with_head(linear_net(&identity(3)), &[0, 1, 2], &rows, 0.05);
    let items = vec![(vec![0.0, 1.0, 0.0], 0), (vec![0.0, 0.3, -0.7], 2)];
    let v = loss_intra_discrimination(&m, &batch(&items, &[]), 0.05).unwrap();
    assert!(close(v, 3f64.ln(), TOL), "{v}");
}

#[test]
fn two_class_closed_form() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]], 1.0);
    let items = vec![(vec![2.0, 0.0], 0), (vec![0.0, 0.5], 1)];
    let v = loss_intra_discrimination(&m, &batch(&items, &[]), 1.0).unwrap();
    let e = std::f64::consts::E;
    let expected = -(e / (e + 1.0)).ln();
    assert!(close(v, expected, TOL));
    assert!(close(v, 0.313_261_687_518_222_8, 1e-15));
}

#[test]
fn discrimination_matches_softmax_oracle() {
    let a = vec![vec![1.0, 0.2, -0.3], vec![0.1, 0.9, 0.4], vec![-0.5, 0.3, 1.2]];
    let rows = vec![vec![0.3, -1.0, 0.2], vec![1.0, 1.0, 0.0], vec![0.0, 0.4, 2.0], vec![-0.2, 0.1, 0.1]];
    let m = model_with_head(linear_net(&a), &[7, 3, 9, 1], &rows, 0.05);
    let cur = vec![(vec![0.4, -1.1, 0.9], 3), (vec![1.5, 0.2, 0.1], 7), (vec![-0.3, 0.8, 0.6], 9)];
    let rep = vec![(vec![0.2, 0.2, -1.0], 1)];
    let v = loss_intra_discrimination(&m, &batch(&cur, &rep), 0.05).unwrap();
    let all: Vec<_> = cur.iter().chain(&rep).cloned().collect();
    assert!(close(v, softmax_oracle(&m, &all, 0.05), TOL));
}

#[test]
fn hinge_inactive_right_after_snapshot() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.05);
    let teacher = m.snapshot(1);
    let items = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 1), (vec![-1.0, 0.1], 1)];
    let v = loss_neighbor_model_coherence(&m, &teacher, &batch(&items, &[]), &LossConfig::default()).unwrap();
    assert_eq!(v, 0.0);
}

#[test]
fn hinge_equals_margin_when_both_distances_vanish() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1], &[vec![1.0, 0.0], vec![0.0, 1.0]], 0.05);
    let teacher = m.snapshot(1);
    let items = vec![(vec![1.0, 0.0], 0), (vec![1.0, 0.0], 1)];
    let v = loss_neighbor_model_coherence(&m, &teacher, &batch(&items, &[]), &LossConfig::default()).unwrap();
    assert!(close(v, 0.1, TOL));
}

#[test]
fn four_sample_triplet_matches_hand_evaluation() {
    let rows = vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]];
    let student_a = vec![vec![1.0, 0.3, 0.0], vec![-0.2, 1.0, 0.1], vec![0.0, 0.4, 0.8]];
    let student = model_with_head(linear_net(&student_a), &[0, 1, 2], &rows, 0.05);
    let teacher_m = model_with_head(linear_net(&identity(3)), &[0, 1, 2], &rows, 0.05);
    let teacher = teacher_m.snapshot(1);
    let cur = vec![(vec![1.0, 0.2, 0.1], 0), (vec![0.9, 0.4, 0.0], 0), (vec![0.95, 0.3, 0.1], 1)];
    let rep = vec![(vec![1.0, 0.25, 0.2], 2)];
    let cfg = LossConfig::default();
    let v = loss_neighbor_model_coherence(&student, &teacher, &batch(&cur, &rep), &cfg).unwrap();
    let all: Vec<_> = cur.iter().chain(&rep).cloned().collect();
    let expected = triplet_oracle(&student, &teacher_m, &all, 0.1);
    assert!(close(v, expected, TOL), "{v} vs {expected}");
    assert!(v > 0.0);
}

#[test]
fn anchors_without_negatives_contribute_nothing() {
    let m = model_with_head(linear_net(&identity(2)), &[0], &[vec![1.0, 0.0]], 0.05);
    let t = m.snapshot(1);
    let items = vec![(vec![1.0, 0.0], 0), (vec![0.0, 1.0], 0)];
    let (_, _, r) = build(
        LossTerm::ModelCoherence,
        &m,
        &batch(&items, &[]),
        LossContext { teacher: Some(&t), centroids: None, sets: &ClassIndexSets::default(), config: &LossConfig::default() },
    )
    .unwrap();
    assert_eq!(r.l_m, 0.0);
    assert_eq!(r.triplets, 0);
}

#[test]
fn data_coherence_vanishes_at_perfect_coherence() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1, 2], &vec![vec![1.0, 0.0]; 3], 0.05);
    let x0 = vec![3.0, 4.0];
    let x1 = vec![-1.0, 1.0];
    let cents = store(&[(0, normalize(&x0)), (1, normalize(&x1))]);
    let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2]));
    let cur = vec![(x0, 0), (vec![0.5, 0.5], 2)];
    let rep = vec![(x1, 1)];
    let d = loss_inter_data_coherence(&m, &batch(&cur, &rep), &cents, &sets).unwrap();
    assert_eq!(d.inner, 0.0);
    assert_eq!(d.outer, 0.0);
    assert_eq!(d.total, 0.0);
}

#[test]
fn inner_sum_is_empty_without_shared_classes() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1, 2], &vec![vec![1.0, 0.0]; 3], 0.05);
    let cents = store(&[(0, vec![0.0, 1.0])]);
    let sets = ClassIndexSets::new(&set(&[0]), &set(&[1, 2]));
    let cur = vec![(vec![1.0, 0.0], 1), (vec![0.0, 1.0], 2)];
    let d = loss_inter_data_coherence(&m, &batch(&cur, &[]), &cents, &sets).unwrap();
    assert_eq!((d.inner, d.outer, d.total), (0.0, 0.0, 0.0));
}

#[test]
fn three_item_data_coherence_by_hand() {
    // f(x1) = (1,0) against E0 = (0,1): 2.0. f(x3) = (0,1) against
    // E1 = (0.6,0.8): 0.36 + 0.04. The class-2 item is new: no term.
    let m = model_with_head(linear_net(&identity(2)), &[0, 1, 2], &vec![vec![1.0, 0.0]; 3], 0.05);
    let cents = store(&[(0, vec![0.0, 1.0]), (1, vec![0.6, 0.8])]);
    let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2]));
    let cur = vec![(vec![5.0, 0.0], 0), (vec![1.0, 1.0], 2)];
    let rep = vec![(vec![0.0, 2.0], 1)];
    let d = loss_inter_data_coherence(&m, &batch(&cur, &rep), &cents, &sets).unwrap();
    assert!(close(d.inner, 2.0, TOL));
    assert!(close(d.outer, 0.4, TOL));
    assert!(close(d.total, 0.8, TOL));
}

#[test]
fn replayed_items_of_unseen_classes_are_outside_gamma() {
    let m = model_with_head(linear_net(&identity(2)), &[0, 1], &vec![vec![1.0, 0.0]; 2], 0.05);
    let cents = store(&[(0, vec![0.0, 1.0])]);
    let sets = ClassIndexSets::new(&set(&[0]), &set(&[0, 1]));
    // current class-1 item is new; replayed class-0 item counts in the outer sum
    let cur = vec![(vec![1.0, 0.0], 1)];
    let rep = vec![(vec![1.0, 0.0], 0)];
    let d = loss_inter_data_coherence(&m, &batch(&cur, &rep), &cents, &sets).unwrap();
    assert!(close(d.inner, 0.0, TOL));
    assert!(close(d.outer, 2.0, TOL));
    assert!(close(d.total, 1.0, TOL));
}

#[test]
fn weighted_total_arithmetic() {
    assert!(close(weighted_total(0.5, 0.02, 0.3, 10.0, 1.0), 1.0, TOL));
}

fn random_setup(seed: u64) -> (ModelState, ModelState, CentroidStore, Vec<(Vec<f64>, u32)>, Vec<(Vec<f64>, u32)>) {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let hyper = contembed_core::Hyperparameters { embed_dim: 4, hidden_dim: 6, seed, ..Default::default() };
    let mut student = ModelState::new(3, hyper.clone()).unwrap();
    student.register_classes(&set(&[0, 1, 2, 3])).unwrap();
    let teacher =
        ModelState::new(3, contembed_core::Hyperparameters { seed: seed + 1000, ..hyper }).unwrap();
    let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
    let cents = {
        let mut s = CentroidStore::new(CentroidDivisor::ContributingSessions);
        let block: BTreeMap<u32, Vec<Vec<f64>>> = [0u32, 1].iter().map(|&c| (c, vec![v(4), v(4)])).collect();
        s.update_centroids(&block, 1).unwrap();
        s
    };
    let cur = vec![(v(3), 0), (v(3), 2), (v(3), 3), (v(3), 2)];
    let rep = vec![(v(3), 1), (v(3), 0)];
    (student, teacher, cents, cur, rep)
}

#[test]
fn first_session_total_is_discrimination_only() {
    let (student, _, cents, cur, rep) = random_setup(4);
    let sets = ClassIndexSets::default();
    let cfg = LossConfig::default();
    let r = total_loss(
        &student,
        &batch(&cur, &rep),
        LossContext { teacher: None, centroids: Some(&cents), sets: &sets, config: &cfg },
    )
    .unwrap();
    assert_eq!(r.total, r.l_c);
    assert_eq!((r.l_m, r.l_d), (0.0, 0.0));
}

#[test]
fn zero_weights_total_is_discrimination() {
    let (student, teacher, cents, cur, rep) = random_setup(5);
    let t = teacher.snapshot(1);
    let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2, 3]));
    let cfg = LossConfig { alpha: 0.0, beta: 0.0, ..Default::default() };
    let b = batch(&cur, &rep);
    let r = total_loss(&student, &b, LossContext { teacher: Some(&t), centroids: Some(&cents), sets: &sets, config: &cfg })
        .unwrap();
    assert_eq!(r.total, r.l_c);
    assert!(close(r.l_c, loss_intra_discrimination(&student, &b, cfg.temperature).unwrap(), 0.0));
}

#[test]
fn centroids_are_constants_on_the_tape() {
    let (student, teacher, cents, cur, rep) = random_setup(6);
    let t = teacher.snapshot(1);
    let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2, 3]));
    let cfg = LossConfig::default();
    let b = batch(&cur, &rep);
    let ctx = LossContext { teacher: Some(&t), centroids: Some(&cents), sets: &sets, config: &cfg };
    let (r, grads) = total_loss_and_gradients(&student, &b, ctx).unwrap();
    assert_eq!(grads.len(), 5);
    let moved = store(&[(0, vec![0.5, 0.5, 0.5, 0.5]), (1, vec![-0.5, 0.0, 0.5, 0.0])]);
    let r2 = total_loss(&student, &b, LossContext { centroids: Some(&moved), ..ctx }).unwrap();
    assert_ne!(r.l_d, r2.l_d);
}

#[test]
fn missing_teacher_for_model_coherence_is_a_contract_error() {
    let (student, _, cents, cur, rep) = random_setup(7);
    let sets = ClassIndexSets::default();
    let cfg = LossConfig::default();
    let err = build(
        LossTerm::ModelCoherence,
        &student,
        &batch(&cur, &rep),
        LossContext { teacher: None, centroids: Some(&cents), sets: &sets, config: &cfg },
    )
    .err()
    .unwrap();
    assert!(matches!(err, Error::Contract(_)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_is_weighted_sum_and_terms_are_nonnegative(seed in 0u64..10_000, alpha in 0.0f64..20.0, beta in 0.0f64..5.0) {
        let (student, teacher, cents, cur, rep) = random_setup(seed);
        let t = teacher.snapshot(1);
        let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2, 3]));
        let cfg = LossConfig { alpha, beta, ..Default::default() };
        let r = total_loss(&student, &batch(&cur, &rep), LossContext { teacher: Some(&t), centroids: Some(&cents), sets: &sets, config: &cfg }).unwrap();
        prop_assert!(r.l_c >= 0.0 && r.l_m >= 0.0 && r.l_d >= 0.0);
        prop_assert!((r.total - weighted_total(r.l_c, r.l_m, r.l_d, alpha, beta)).abs() <= 1e-12);
        prop_assert!((r.l_d - (r.l_d_inner + r.l_d_outer) / 6.0).abs() <= 1e-12);
    }

    #[test]
    fn data_coherence_ignores_item_order(seed in 0u64..10_000, rot in 0usize..4) {
        let (student, _, cents, mut cur, rep) = random_setup(seed);
        let sets = ClassIndexSets::new(&set(&[0, 1]), &set(&[0, 2, 3]));
        let a = loss_inter_data_coherence(&student, &batch(&cur, &rep), &cents, &sets).unwrap();
        cur.rotate_left(rot);
        let b = loss_inter_data_coherence(&student, &batch(&cur, &rep), &cents, &sets).unwrap();
        prop_assert!((a.total - b.total).abs() <= 1e-12);
    }
}
