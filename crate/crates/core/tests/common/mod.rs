#![allow(dead_code)]

use intent_core::embed::EmbeddingMatrix;
use intent_core::envs::guess::{GuessGame, GuessGameSpec};
use intent_core::envs::{game_rng, Environment, UniformActor};
use intent_core::traj::{Player, Task, Trajectory, TrajectorySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random rows; with `grid`, coordinates are small integers so that exact ties and
/// duplicated points are common.
pub fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, grid: bool) -> EmbeddingMatrix {
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            (0..d)
                .map(|_| if grid { rng.random_range(0..3) as f32 } else { rng.random_range(-1.0..1.0) })
                .collect()
        })
        .collect();
    EmbeddingMatrix::from_rows(&rows).unwrap()
}

/// Guess-task trajectories over a small vocabulary so that keys collide.
pub fn random_corpus(rng: &mut ChaCha8Rng, n_traj: usize, vocab: usize, max_len: usize) -> TrajectorySet {
    let actions: Vec<String> = (0..vocab).map(|i| format!("ask {i}")).collect();
    let answers: Vec<String> = (0..vocab.min(3)).map(|i| format!("answer {i}")).collect();
    let trajs = (0..n_traj)
        .map(|g| {
            let len = rng.random_range(1..=max_len);
            let steps: Vec<(String, Option<String>)> = (0..len)
                .map(|t| {
                    let a = actions[rng.random_range(0..actions.len())].clone();
                    let o = (t + 1 < len).then(|| answers[rng.random_range(0..answers.len())].clone());
                    (a, o)
                })
                .collect();
            let borrowed: Vec<(&str, Option<&str>)> = steps.iter().map(|(a, o)| (a.as_str(), o.as_deref())).collect();
            let reward = if rng.random::<f64>() < 0.4 { 1.0 } else { 0.0 };
            Trajectory::from_texts(format!("g{g}"), Task::Guess, Player::Solo, None, &borrowed, reward)
        })
        .collect();
    TrajectorySet::build(trajs).unwrap()
}

/// Uniformly random cluster label per corpus uid.
pub fn random_labels(rng: &mut ChaCha8Rng, set: &TrajectorySet, k: usize) -> Vec<u32> {
    set.corpus().iter().map(|_| rng.random_range(0..k as u32)).collect()
}

/// Uniform-policy games of the desk guess game.
pub fn guess_corpus(seed: u64, n: usize) -> (GuessGame, TrajectorySet) {
    let game = GuessGame::new(GuessGameSpec::desk()).unwrap();
    let actor = UniformActor { num_templates: game.action_bank().num_templates() };
    let trajs = (0..n).map(|i| game.play(&actor, format!("g{i}"), &mut game_rng(seed, i as u64)).unwrap()).collect();
    (game, TrajectorySet::build(trajs).unwrap())
}

/// Everything the offline phase produces for a guess corpus, cut at the selected k.
pub struct Fitted {
    pub game: GuessGame,
    pub set: TrajectorySet,
    pub assignment: intent_core::hac::ClusterAssignment,
    pub table: intent_core::aggregate::RewardTable,
    pub adv: intent_core::aggregate::AdvantageSet,
    pub steps: Vec<Vec<intent_core::train::StepRef>>,
}

pub fn fit_guess(seed: u64, n: usize, gamma: f64) -> Fitted {
    use intent_core::embed::{embed_corpus_with, EmbedderConfig};
    use intent_core::granularity::sweep;
    use intent_core::hac::{build_dendrogram, cut_dendrogram};
    let (game, set) = guess_corpus(seed, n);
    let m = embed_corpus_with(EmbedderConfig::default().build().unwrap().as_ref(), &set, None).unwrap().0;
    let dg = build_dendrogram(&m).unwrap();
    let curve = sweep(&set, &dg, m.uids(), gamma, m.n().min(512), 0.01, 10).unwrap();
    let k = curve.k_star.unwrap_or(curve.k_max());
    let assignment = cut_dendrogram(&dg, k, &m).unwrap();
    let table = intent_core::aggregate::build_reward_table(&set, &assignment, gamma, k).unwrap();
    let adv = intent_core::aggregate::assign_advantages(&set, &assignment, &table).unwrap();
    let steps = intent_core::train::policy_steps(&set, &assignment, game.action_bank(), 2).unwrap();
    Fitted { game, set, assignment, table, adv, steps }
}
