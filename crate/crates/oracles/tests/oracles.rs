use intent_core::embed::EmbeddingMatrix;
use intent_core::train::mdp::TabularMdpSpec;
use intent_core::traj::{Player, Task, Trajectory, TrajectorySet};
use intent_oracles::*;

fn line(xs: &[f32]) -> EmbeddingMatrix {
    EmbeddingMatrix::from_rows(&xs.iter().map(|x| vec![*x]).collect::<Vec<_>>()).unwrap()
}

#[test]
fn two_points_merge_once() {
    let dg = naive_average_linkage(&line(&[0.0, 3.0])).unwrap();
    assert_eq!(dg.value.merges.len(), 1);
    assert_eq!((dg.value.merges[0].left, dg.value.merges[0].right, dg.value.merges[0].height), (0, 1, 3.0));
    assert_eq!(dg.method, "naive-average-linkage");
}

#[test]
fn three_points_on_a_line() {
    let dg = naive_average_linkage(&line(&[0.0, 0.1, 1.0])).unwrap().value;
    assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
    assert!((dg.merges[0].height - 0.1).abs() < 1e-7);
    assert_eq!((dg.merges[1].left, dg.merges[1].right), (2, 3));
    assert!((dg.merges[1].height - 0.95).abs() < 1e-7);
}

#[test]
fn duplicates_merge_at_zero() {
    let dg = naive_average_linkage(&line(&[2.0, 2.0, 2.0, 5.0])).unwrap().value;
    assert_eq!(dg.merges[0].height, 0.0);
    assert_eq!(dg.merges[1].height, 0.0);
    assert_eq!((dg.merges[0].left, dg.merges[0].right), (0, 1));
    assert_eq!((dg.merges[1].left, dg.merges[1].right), (2, 4));
}

#[test]
fn hac_cap_is_enforced() {
    let xs: Vec<f32> = (0..HAC_CAP + 1).map(|i| i as f32).collect();
    assert_eq!(
        naive_average_linkage(&line(&xs)).unwrap_err(),
        OracleError::OverCap { what: "points", size: HAC_CAP + 1, cap: HAC_CAP }
    );
}

#[test]
fn worked_metric_values() {
    let m = line(&[0.0, 1.0, 10.0, 11.0]);
    let labels = [0, 0, 1, 1];
    assert!((calinski_harabasz(&m, &labels, 2).unwrap().value - 200.0).abs() < 1e-9);
    assert!((davies_bouldin(&m, &labels, 2).unwrap().value - 0.1).abs() < 1e-12);
    let expected = (2.0 * (9.5 / 10.5) + 2.0 * (8.5 / 9.5)) / 4.0;
    assert!((silhouette(&m, &labels, 2).unwrap().value - expected).abs() < 1e-12);
}

fn corpus() -> TrajectorySet {
    TrajectorySet::build(vec![
        Trajectory::from_texts("a", Task::Guess, Player::Solo, None, &[("x", Some("yes")), ("y", None)], 1.0),
        Trajectory::from_texts("b", Task::Guess, Player::Solo, None, &[("x", Some("yes")), ("z", None)], 0.0),
        Trajectory::from_texts("c", Task::Guess, Player::Solo, None, &[("x", None)], 0.0),
    ])
    .unwrap()
}

#[test]
fn exhaustive_table_groups_pairs() {
    let set = corpus();
    // uids: x=0, yes=1, y=2, z=3; y and z share a cluster.
    let labels = vec![0, 1, 2, 2];
    let t = exhaustive_reward_table(&set, &labels, 0.5).unwrap().value;
    assert_eq!(t.len(), 2);
    assert_eq!(t[&(None, vec![], 0)], (0.5 / 3.0, 3));
    assert_eq!(t[&(None, vec![(0, 1)], 2)], (0.5, 2));
}

#[test]
fn empty_and_single_pair_tables() {
    let t = exhaustive_reward_table(&TrajectorySet::empty(), &[], 0.9).unwrap();
    assert!(t.value.is_empty());
    let one = TrajectorySet::build(vec![Trajectory::from_texts("a", Task::Guess, Player::Solo, None, &[("x", None)], 1.0)]).unwrap();
    let t = exhaustive_reward_table(&one, &[0], 0.9).unwrap().value;
    assert_eq!(t.values().copied().collect::<Vec<_>>(), vec![(1.0, 1)]);
}

#[test]
fn gradient_of_uniform_policy() {
    let g = naive_policy_gradient(&[0.0, 0.0], 2, &[vec![NaiveStep { block: 0, action: 1 }]], &[vec![2.0]]).unwrap();
    assert_eq!(g.value, vec![-1.0, 1.0]);
}

fn single_state(reward: f64, gamma: f64) -> TabularMdpSpec {
    TabularMdpSpec {
        n_states: 1,
        n_actions: 1,
        rewards: vec![reward],
        transitions: vec![1.0],
        initial: vec![1.0],
        gamma,
        clusters: vec![0],
        epsilon: 0.0,
    }
}

#[test]
fn geometric_series_value() {
    let q = exact_policy_evaluation(&single_state(1.0, 0.5), &[vec![1.0]]).unwrap().value;
    assert!((q[0] - 2.0).abs() < 1e-11);
    let q = exact_policy_evaluation(&single_state(0.0, 0.9), &[vec![1.0]]).unwrap().value;
    assert_eq!(q, vec![0.0]);
}

#[test]
fn non_stochastic_rows_are_rejected() {
    let mut spec = single_state(1.0, 0.5);
    spec.transitions = vec![0.9];
    assert_eq!(
        exact_policy_evaluation(&spec, &[vec![1.0]]).unwrap_err(),
        OracleError::NonStochastic { state: 0, action: 0 }
    );
}
