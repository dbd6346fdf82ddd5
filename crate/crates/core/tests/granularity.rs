mod common;

use common::{guess_corpus, random_corpus, rng};
use intent_core::embed::{embed_corpus_with, EmbedderConfig, EmbeddingMatrix};
use intent_core::granularity::{select_k, split_score, split_score_upper_bound, sweep, GranularityError};
use intent_core::hac::build_dendrogram;
use intent_core::traj::{Player, Task, Trajectory, TrajectorySet};
use proptest::prelude::*;
use rand::Rng;
use std::collections::BTreeMap;

fn embed(set: &TrajectorySet) -> EmbeddingMatrix {
    embed_corpus_with(EmbedderConfig::default().build().unwrap().as_ref(), set, None).unwrap().0
}

#[test]
fn sweep_agrees_with_full_recomputation() {
    let mut r = rng(41);
    for _ in 0..4 {
        let set = random_corpus(&mut r, 80, 8, 4);
        let m = embed(&set);
        let dg = build_dendrogram(&m).unwrap();
        let gamma = r.random_range(0.5..=1.0);
        let curve = sweep(&set, &dg, m.uids(), gamma, m.n(), 0.01, 3).unwrap();
        assert_eq!(curve.k_max(), m.n() - 1);
        for (&k, &s) in &curve.scores {
            let full = split_score(&set, &dg, m.uids(), k, gamma).unwrap();
            assert!((s - full).abs() < 1e-9, "k={k}: {s} vs {full}");
            let bound = split_score_upper_bound(&set, &dg, m.uids(), k).unwrap();
            assert_eq!(curve.changed[&k] as f64 / curve.num_pairs as f64, bound);
        }
    }
}

#[test]
fn bound_chain_holds_on_the_guess_corpus() {
    let (_, set) = guess_corpus(5, 300);
    let m = embed(&set);
    let dg = build_dendrogram(&m).unwrap();
    let curve = sweep(&set, &dg, m.uids(), 0.9, m.n(), 0.01, 10).unwrap();
    let mut prev = f64::INFINITY;
    for (&k, &s) in &curve.scores {
        let n_k = curve.changed[&k] as f64 / curve.num_pairs as f64;
        let ub = curve.upper_bound[&k];
        assert!(0.0 <= s && s <= n_k + 1e-12 && n_k <= ub && ub <= 1.0, "k={k}");
        assert!(ub <= prev);
        prev = ub;
    }
    let k_star = curve.k_star.expect("stopping rule fires");
    assert!(k_star < curve.k_max());
}

#[test]
fn hand_example_scores_one_half() {
    let set = TrajectorySet::build(vec![
        Trajectory::from_texts("a", Task::Guess, Player::Solo, None, &[("x", None)], 1.0),
        Trajectory::from_texts("b", Task::Guess, Player::Solo, None, &[("y", None)], 0.0),
    ])
    .unwrap();
    // A third, distant leaf lets k = 2 pool x with y.
    let m = EmbeddingMatrix::new(1, vec![0.0, 0.1, 10.0], vec![0, 1, 2]).unwrap();
    let dg = build_dendrogram(&m).unwrap();
    assert_eq!(split_score(&set, &dg, m.uids(), 2, 0.9).unwrap(), 0.5);
    assert_eq!(split_score_upper_bound(&set, &dg, m.uids(), 2).unwrap(), 1.0);
}

#[test]
fn split_of_equal_rewards_scores_zero() {
    let set = TrajectorySet::build(vec![
        Trajectory::from_texts("a", Task::Guess, Player::Solo, None, &[("x", None)], 1.0),
        Trajectory::from_texts("b", Task::Guess, Player::Solo, None, &[("y", None)], 1.0),
        Trajectory::from_texts("c", Task::Guess, Player::Solo, None, &[("z", None)], 0.0),
    ])
    .unwrap();
    let m = EmbeddingMatrix::new(1, vec![0.0, 0.1, 10.0], vec![0, 1, 2]).unwrap();
    let dg = build_dendrogram(&m).unwrap();
    assert_eq!(split_score(&set, &dg, m.uids(), 2, 0.9).unwrap(), 0.0);
}

#[test]
fn k_outside_range_is_rejected() {
    let m = EmbeddingMatrix::new(1, vec![0.0, 0.1, 10.0], vec![0, 1, 2]).unwrap();
    let dg = build_dendrogram(&m).unwrap();
    let set = TrajectorySet::empty();
    for k in [0, 1, 3] {
        assert!(matches!(split_score(&set, &dg, m.uids(), k, 0.9), Err(GranularityError::KOutOfRange { .. })));
    }
}

proptest! {
    #[test]
    fn larger_epsilon_never_selects_a_larger_k(
        values in proptest::collection::vec(0.0f64..0.05, 2..40),
        e1 in 0.001f64..0.05,
        e2 in 0.001f64..0.05,
        tau in 0usize..5,
    ) {
        let scores: BTreeMap<usize, f64> = values.iter().enumerate().map(|(i, &s)| (i + 2, s)).collect();
        let (lo, hi) = if e1 <= e2 { (e1, e2) } else { (e2, e1) };
        if let Some(k_lo) = select_k(&scores, lo, tau) {
            let k_hi = select_k(&scores, hi, tau);
            prop_assert!(k_hi.is_some_and(|k| k <= k_lo));
        }
        if let Some(k) = select_k(&scores, lo, tau) {
            prop_assert!((k..=k + tau).all(|j| scores[&j] < lo));
        }
    }
}
