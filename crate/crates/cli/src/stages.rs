//! The pipeline stages, their artifacts, and manifest-gated execution.

use crate::config::{AdvantageKind, PipelineConfig, TaskKind};
use crate::error::CliError;
use crate::manifest::{checksums, Manifest};
use intent_core::aggregate::{assign_advantages, build_reward_table, AdvantageSet, RewardTable};
use intent_core::embed::{embed_corpus_with, load_matrix, save_matrix, EmbeddingMatrix};
use intent_core::envs::agent::Projector;
use intent_core::envs::eval::{eval_average_final_reward, eval_win_rate_bargain, eval_win_rate_negotiation, write_summary_csv, SummaryRow};
use intent_core::envs::guess::GuessGame;
use intent_core::envs::offers::{OfferArena, OfferGame, OfferGameSpec, OfferKind, Seat};
use intent_core::envs::opponents::OpponentStyle;
use intent_core::envs::{game_rng, Actor, DialogueView, EnvError, Environment, IntentTemplateBank, NoiseConfig, UniformActor};
use intent_core::granularity::sweep;
use intent_core::hac::{build_dendrogram, cut_dendrogram, ClusterAssignment, Dendrogram};
use intent_core::io::{file_sha256, write_atomic};
use intent_core::metrics::{fill_combined, metric_report};
use intent_core::train::diagnostics::{advantage_variance_report, convergence_slope_check, gradient_variance_report, SyntheticBandit};
use intent_core::train::gradient::register_contexts;
use intent_core::train::online::{train_online, OnlineConfig};
use intent_core::train::{policy_steps, train_offline, ActMode, OfflineConfig, PolicyActor, PolicyParams};
use intent_core::traj::{parse_trajectories, write_trajectories, Player, Task, Trajectory, TrajectorySet};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub const TRAJECTORIES: &str = "trajectories.jsonl";
pub const EMBEDDINGS: &str = "embeddings.bin";
pub const EMBEDDINGS_META: &str = "embeddings.meta.json";
pub const DENDROGRAM: &str = "dendrogram.json";
pub const METRICS: &str = "metrics.csv";
pub const SPLIT_SCORES: &str = "split_scores.csv";
pub const SELECTION: &str = "selection.json";
pub const CLUSTERS: &str = "clusters.json";
pub const CENTROIDS: &str = "clusters.centroids.bin";
pub const TABLE: &str = "reward_table.json";
pub const ADVANTAGES: &str = "advantages.csv";
pub const VARIANCE: &str = "variance.json";
pub const POLICY: &str = "policy.json";
pub const POLICY_LOGITS: &str = "policy.logits.bin";
pub const LOSS: &str = "loss.csv";
pub const GRADIENT_VARIANCE: &str = "gradient_variance.json";
pub const ONLINE_POLICY: &str = "policy_online.json";
pub const ONLINE_LOGITS: &str = "policy_online.logits.bin";
pub const ONLINE_TABLE: &str = "reward_table_online.json";
pub const ONLINE_CURVE: &str = "online_curve.csv";
pub const EVAL: &str = "eval.csv";
pub const SUMMARY: &str = "report/summary.txt";
pub const REPORT_VARIANCE: &str = "report/variance.csv";
pub const REPORT_SLOPE: &str = "report/slope.csv";

const REPORT_COPIES: [&str; 5] = [SPLIT_SCORES, METRICS, LOSS, ONLINE_CURVE, EVAL];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Collect,
    Embed,
    Cluster,
    SelectK,
    Aggregate,
    Train,
    TrainOnline,
    Eval,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 9] = [
        Self::Collect,
        Self::Embed,
        Self::Cluster,
        Self::SelectK,
        Self::Aggregate,
        Self::Train,
        Self::TrainOnline,
        Self::Eval,
        Self::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Collect => "collect",
            Self::Embed => "embed",
            Self::Cluster => "cluster",
            Self::SelectK => "select-k",
            Self::Aggregate => "aggregate",
            Self::Train => "train",
            Self::TrainOnline => "train-online",
            Self::Eval => "eval",
            Self::Report => "report",
        }
    }

    pub fn outputs(self) -> Vec<String> {
        let files: &[&str] = match self {
            Self::Collect => &[TRAJECTORIES],
            Self::Embed => &[EMBEDDINGS, EMBEDDINGS_META],
            Self::Cluster => &[DENDROGRAM, METRICS],
            Self::SelectK => &[SPLIT_SCORES, SELECTION, CLUSTERS, CENTROIDS],
            Self::Aggregate => &[TABLE, ADVANTAGES, VARIANCE],
            Self::Train => &[POLICY, POLICY_LOGITS, LOSS, GRADIENT_VARIANCE],
            Self::TrainOnline => &[ONLINE_POLICY, ONLINE_LOGITS, ONLINE_TABLE, ONLINE_CURVE],
            Self::Eval => &[EVAL],
            Self::Report => {
                let mut v: Vec<String> = REPORT_COPIES.iter().map(|f| format!("report/{f}")).collect();
                v.extend([SUMMARY, REPORT_VARIANCE, REPORT_SLOPE].map(String::from));
                return v;
            }
        };
        files.iter().map(|f| f.to_string()).collect()
    }

    /// Upstream files read by the stage. Every one is an output of an earlier stage.
    pub fn inputs(self) -> &'static [&'static str] {
        const CUT: [&str; 6] = [TRAJECTORIES, EMBEDDINGS, EMBEDDINGS_META, CLUSTERS, CENTROIDS, TABLE];
        match self {
            Self::Collect => &[],
            Self::Embed => &[TRAJECTORIES],
            Self::Cluster => &[EMBEDDINGS, EMBEDDINGS_META],
            Self::SelectK => &[TRAJECTORIES, EMBEDDINGS, EMBEDDINGS_META, DENDROGRAM],
            Self::Aggregate => &CUT[..5],
            Self::Train => &CUT,
            Self::TrainOnline => &[TRAJECTORIES, EMBEDDINGS, EMBEDDINGS_META, CLUSTERS, CENTROIDS, TABLE, POLICY, POLICY_LOGITS],
            Self::Eval => &[TRAJECTORIES, EMBEDDINGS, EMBEDDINGS_META, CLUSTERS, CENTROIDS, POLICY, POLICY_LOGITS, ONLINE_POLICY, ONLINE_LOGITS],
            Self::Report => &[SPLIT_SCORES, SELECTION, METRICS, VARIANCE, LOSS, GRADIENT_VARIANCE, ONLINE_CURVE, EVAL],
        }
    }

    pub fn producer(file: &str) -> Stage {
        Self::ALL.into_iter().find(|s| s.outputs().iter().any(|o| o == file)).expect("every input has a producer")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Ran,
    Skipped,
}

/// Runs `stage` unless its manifest shows the same inputs, config and intact outputs.
pub fn run_stage(cfg: &PipelineConfig, stage: Stage) -> Result<Status, CliError> {
    let out = cfg.paths.out.as_path();
    let mut inputs = BTreeMap::new();
    let mut missing = Vec::new();
    let mut manifests: BTreeMap<Stage, Option<Manifest>> = BTreeMap::new();
    for &file in stage.inputs() {
        let producer = Stage::producer(file);
        if !manifests.contains_key(&producer) {
            manifests.insert(producer, Manifest::load(out, producer.name())?);
        }
        match &manifests[&producer] {
            Some(m) if out.join(file).is_file() => {
                inputs.insert(file.to_string(), m.verify_output(out, file)?);
            }
            _ => missing.push(format!("{} (produced by `{}`)", out.join(file).display(), producer.name())),
        }
    }
    if !missing.is_empty() {
        return Err(CliError::Upstream(format!("missing upstream artifacts: {}", missing.join(", "))));
    }
    if let (Stage::Collect, Some(logs)) = (stage, &cfg.paths.logs) {
        let sum = file_sha256(logs).map_err(|e| CliError::Upstream(format!("{}: {e}", logs.display())))?;
        inputs.insert(logs.display().to_string(), sum);
    }
    let fingerprint = cfg.fingerprint(stage);
    if let Some(prev) = Manifest::load(out, stage.name())? {
        if prev.config_fingerprint == fingerprint && prev.inputs == inputs && prev.outputs_intact(out) {
            return Ok(Status::Skipped);
        }
    }
    fs::create_dir_all(out).map_err(|e| CliError::Runtime(format!("{}: {e}", out.display())))?;
    match stage {
        Stage::Collect => collect(cfg)?,
        Stage::Embed => embed(cfg)?,
        Stage::Cluster => cluster(cfg)?,
        Stage::SelectK => select_k(cfg)?,
        Stage::Aggregate => aggregate(cfg)?,
        Stage::Train => train(cfg)?,
        Stage::TrainOnline => online(cfg)?,
        Stage::Eval => eval(cfg)?,
        Stage::Report => report(cfg)?,
    }
    let outputs = checksums(out, &stage.outputs())?;
    Manifest::new(stage.name(), fingerprint, inputs, outputs).save(out)?;
    Ok(Status::Ran)
}

/// Every stage in order.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<Vec<(Stage, Status)>, CliError> {
    Stage::ALL.into_iter().map(|s| run_stage(cfg, s).map(|st| (s, st))).collect()
}

fn path(cfg: &PipelineConfig, file: &str) -> PathBuf {
    cfg.paths.out.join(file)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
    }
    write_atomic(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    write_file(path, &bytes)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(path, &bytes)
}

fn read_json(path: &Path) -> Result<serde_json::Value, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::Upstream(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Upstream(format!("{}: {e}", path.display())))
}

/// The game a config describes.
pub enum Game {
    Guess(GuessGame),
    Offer(OfferGame),
}

impl Game {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self, CliError> {
        let noise = NoiseConfig::default();
        Ok(match cfg.env.task {
            TaskKind::Guess => Self::Guess(GuessGame::new(cfg.env.guess_spec())?),
            TaskKind::Bargain => Self::Offer(OfferGame::new(OfferGameSpec { kind: OfferKind::Bargain(cfg.env.bargain.clone()), noise })?),
            TaskKind::Negotiate => {
                Self::Offer(OfferGame::new(OfferGameSpec { kind: OfferKind::Negotiate(cfg.env.negotiation.clone()), noise })?)
            }
        })
    }

    pub fn bank(&self) -> &IntentTemplateBank {
        match self {
            Self::Guess(g) => g.action_bank(),
            Self::Offer(g) => g.bank(),
        }
    }
}

/// The scripted opponent used for training and evaluation; fixed-threshold unless
/// the config names one.
pub fn opponent(cfg: &PipelineConfig) -> Result<OpponentStyle, CliError> {
    Ok(cfg.env.opponent_style()?.unwrap_or(OpponentStyle::FixedThreshold { threshold: cfg.env.threshold }))
}

/// Environment the learning agent plays in. Offer games put the agent in `role`.
pub fn agent_env(cfg: &PipelineConfig, role: Player) -> Result<Box<dyn Environment>, CliError> {
    Ok(match Game::from_config(cfg)? {
        Game::Guess(g) => Box::new(g),
        Game::Offer(game) => Box::new(OfferArena { game, opponent: opponent(cfg)?, agent_role: role }),
    })
}

/// Uniform behavior that never opens a game by accepting, since there is nothing to
/// accept yet and the game would end before the second seat speaks.
pub struct SelfPlayActor {
    num_templates: usize,
    offers: Vec<usize>,
}

impl SelfPlayActor {
    pub fn new(game: &OfferGame) -> Self {
        let bank = game.bank();
        let offers = (0..bank.num_templates()).filter(|&t| bank.intent_of(t) < game.num_levels()).collect();
        Self { num_templates: bank.num_templates(), offers }
    }
}

impl Actor for SelfPlayActor {
    fn act(&self, view: &DialogueView<'_>, rng: &mut ChaCha8Rng) -> Result<usize, EnvError> {
        if view.opening.is_none() && view.history.is_empty() {
            Ok(self.offers[rng.random_range(0..self.offers.len())])
        } else {
            Ok(rng.random_range(0..self.num_templates))
        }
    }
}

fn game_err(i: usize) -> impl FnOnce(EnvError) -> CliError {
    move |e| CliError::Runtime(format!("game g{i}: {e}"))
}

/// Rolls out `cfg.env.games` games under uniform behavior.
pub fn collect_trajectories(cfg: &PipelineConfig) -> Result<TrajectorySet, CliError> {
    let seed = cfg.seeds.collect;
    let n = cfg.env.games;
    let trajs: Vec<Vec<Trajectory>> = match Game::from_config(cfg)? {
        Game::Guess(game) => {
            let actor = UniformActor { num_templates: game.action_bank().num_templates() };
            (0..n)
                .into_par_iter()
                .map(|i| game.play(&actor, format!("g{i}"), &mut game_rng(seed, i as u64)).map(|t| vec![t]).map_err(game_err(i)))
                .collect::<Result<_, _>>()?
        }
        Game::Offer(game) => match cfg.env.opponent_style()? {
            Some(style) => {
                let actor = UniformActor { num_templates: game.bank().num_templates() };
                let arenas = [Player::Alice, Player::Bob].map(|r| OfferArena { game: OfferGame::new(game.spec.clone()).expect("validated"), opponent: style, agent_role: r });
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        arenas[i % 2].play(&actor, format!("g{i}"), &mut game_rng(seed, i as u64)).map(|t| vec![t]).map_err(game_err(i))
                    })
                    .collect::<Result<_, _>>()?
            }
            None => {
                let actor = SelfPlayActor::new(&game);
                (0..n)
                    .into_par_iter()
                    .map(|i| {
                        let rec = game
                            .play(&mut Seat::Policy(&actor), &mut Seat::Policy(&actor), &format!("g{i}"), &mut game_rng(seed, i as u64))
                            .map_err(game_err(i))?;
                        let bob = rec.bob.ok_or_else(|| CliError::Runtime(format!("game g{i}: the second seat never spoke")))?;
                        Ok(vec![rec.alice, bob])
                    })
                    .collect::<Result<_, CliError>>()?
            }
        },
    };
    Ok(TrajectorySet::build(trajs.into_iter().flatten().collect())?)
}

fn collect(cfg: &PipelineConfig) -> Result<(), CliError> {
    let set = match &cfg.paths.logs {
        Some(logs) => parse_trajectories(logs)?,
        None => collect_trajectories(cfg)?,
    };
    write_trajectories(&set, &path(cfg, TRAJECTORIES))?;
    Ok(())
}

fn cache_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.paths.cache.clone().unwrap_or_else(|| path(cfg, "embed_cache.json"))
}

fn embed(cfg: &PipelineConfig) -> Result<(), CliError> {
    let set = parse_trajectories(&path(cfg, TRAJECTORIES))?;
    let embedder = cfg.embedder.build()?;
    let (m, _) = embed_corpus_with(embedder.as_ref(), &set, Some(&cache_path(cfg)))?;
    save_matrix(&m, &path(cfg, EMBEDDINGS))?;
    Ok(())
}

#[derive(Serialize)]
struct MetricRow {
    k: usize,
    silhouette: f64,
    chi: f64,
    dbi: f64,
    combined: f64,
}

fn cluster(cfg: &PipelineConfig) -> Result<(), CliError> {
    let m = load_matrix(&path(cfg, EMBEDDINGS))?;
    let dg = build_dendrogram(&m)?;
    dg.save(&path(cfg, DENDROGRAM))?;
    let top = cfg.metrics_k_max.min(m.n().saturating_sub(1));
    let mut reports = (2..=top)
        .into_par_iter()
        .map(|k| Ok(metric_report(&m, &cut_dendrogram(&dg, k, &m)?)?))
        .collect::<Result<Vec<_>, CliError>>()?;
    if reports.len() >= 2 {
        fill_combined(&mut reports)?;
    }
    let rows: Vec<MetricRow> =
        reports.iter().map(|r| MetricRow { k: r.k, silhouette: r.silhouette, chi: r.chi, dbi: r.dbi, combined: r.combined }).collect();
    write_csv(&path(cfg, METRICS), &rows)
}

#[derive(Serialize)]
struct ScoreRow {
    k: usize,
    split_score: f64,
    changed: usize,
    upper_bound: f64,
    below_epsilon: bool,
}

#[derive(Serialize)]
struct Selection {
    k_star: Option<usize>,
    /// Granularity actually cut: `k_star`, or the largest swept k when the rule never fired.
    k: usize,
    k_max: usize,
    epsilon: f64,
    tau: usize,
    num_pairs: usize,
}

fn select_k(cfg: &PipelineConfig) -> Result<(), CliError> {
    let set = parse_trajectories(&path(cfg, TRAJECTORIES))?;
    let m = load_matrix(&path(cfg, EMBEDDINGS))?;
    let dg = Dendrogram::load(&path(cfg, DENDROGRAM))?;
    let curve = sweep(&set, &dg, m.uids(), cfg.gamma, cfg.k_max, cfg.epsilon, cfg.tau)?;
    let rows: Vec<ScoreRow> = curve
        .scores
        .iter()
        .map(|(&k, &s)| ScoreRow { k, split_score: s, changed: curve.changed[&k], upper_bound: curve.upper_bound[&k], below_epsilon: s < cfg.epsilon })
        .collect();
    write_csv(&path(cfg, SPLIT_SCORES), &rows)?;
    let k = curve.k_star.unwrap_or(curve.k_max());
    let sel = Selection { k_star: curve.k_star, k, k_max: curve.k_max(), epsilon: cfg.epsilon, tau: cfg.tau, num_pairs: curve.num_pairs };
    write_json(&path(cfg, SELECTION), &sel)?;
    cut_dendrogram(&dg, k, &m)?.save(&path(cfg, CLUSTERS))?;
    Ok(())
}

/// The corpus, its embeddings and the selected cut.
pub struct Fitted {
    pub set: TrajectorySet,
    pub matrix: EmbeddingMatrix,
    pub assignment: ClusterAssignment,
}

fn load_fitted(cfg: &PipelineConfig) -> Result<Fitted, CliError> {
    let set = parse_trajectories(&path(cfg, TRAJECTORIES))?;
    let matrix = load_matrix(&path(cfg, EMBEDDINGS))?;
    let assignment = ClusterAssignment::load(&path(cfg, CLUSTERS), &matrix)?;
    Ok(Fitted { set, matrix, assignment })
}

#[derive(Serialize)]
struct AdvantageRow<'a> {
    game_id: &'a str,
    player: String,
    t: usize,
    key: usize,
    raw: f64,
    aggregated: f64,
}

#[derive(Serialize)]
struct VarianceSummary {
    n: usize,
    var_raw: f64,
    var_aggregated: f64,
    ratio: f64,
    expected_conditional: f64,
    residual: f64,
    keys: usize,
}

fn aggregate(cfg: &PipelineConfig) -> Result<(), CliError> {
    let f = load_fitted(cfg)?;
    let table = build_reward_table(&f.set, &f.assignment, cfg.gamma, f.assignment.k)?;
    table.save(&path(cfg, TABLE))?;
    let adv = assign_advantages(&f.set, &f.assignment, &table)?;
    let mut rows = Vec::with_capacity(adv.num_steps());
    for (i, traj) in f.set.trajectories().iter().enumerate() {
        for t in 0..traj.horizon() {
            rows.push(AdvantageRow {
                game_id: &traj.game_id,
                player: traj.player.to_string(),
                t: t + 1,
                key: adv.key_ids[i][t],
                raw: adv.raw[i][t],
                aggregated: adv.aggregated[i][t],
            });
        }
    }
    write_csv(&path(cfg, ADVANTAGES), &rows)?;
    let r = advantage_variance_report(&adv)?;
    let summary = VarianceSummary {
        n: r.n,
        var_raw: r.var_raw,
        var_aggregated: r.var_aggregated,
        ratio: if r.var_raw > 0.0 { r.var_aggregated / r.var_raw } else { 1.0 },
        expected_conditional: r.expected_conditional,
        residual: r.residual,
        keys: table.len(),
    };
    write_json(&path(cfg, VARIANCE), &summary)
}

/// Offline REINFORCE on the corpus with the configured advantage.
pub fn fit_offline(
    cfg: &PipelineConfig,
    f: &Fitted,
    bank: &IntentTemplateBank,
    adv: &AdvantageSet,
) -> Result<(PolicyParams, Vec<f64>), CliError> {
    let steps = policy_steps(&f.set, &f.assignment, bank, cfg.training.window)?;
    let t = &cfg.training;
    let mut p = PolicyParams::new(bank.num_templates(), t.lr, cfg.seeds.train);
    let values = match t.advantage {
        AdvantageKind::Aggregated => &adv.aggregated,
        AdvantageKind::Raw => &adv.raw,
    };
    let rep = train_offline(&mut p, &steps, values, &OfflineConfig { epochs: t.epochs, batch_size: t.batch, ..Default::default() })?;
    Ok((p, rep.loss_curve))
}

#[derive(Serialize)]
struct LossRow {
    epoch: usize,
    loss: f64,
}

fn train(cfg: &PipelineConfig) -> Result<(), CliError> {
    let f = load_fitted(cfg)?;
    let game = Game::from_config(cfg)?;
    let table = RewardTable::load(&path(cfg, TABLE))?;
    let adv = assign_advantages(&f.set, &f.assignment, &table)?;
    let (p, losses) = fit_offline(cfg, &f, game.bank(), &adv)?;
    p.save(&path(cfg, POLICY))?;
    let rows: Vec<LossRow> = losses.iter().enumerate().map(|(e, &loss)| LossRow { epoch: e + 1, loss }).collect();
    write_csv(&path(cfg, LOSS), &rows)?;
    let steps = policy_steps(&f.set, &f.assignment, game.bank(), cfg.training.window)?;
    let mut p0 = PolicyParams::new(game.bank().num_templates(), cfg.training.lr, cfg.seeds.train);
    register_contexts(&mut p0, &steps);
    let initial = gradient_variance_report(&p0, &steps, &adv)?;
    let trained = gradient_variance_report(&p, &steps, &adv)?;
    write_json(&path(cfg, GRADIENT_VARIANCE), &serde_json::json!({ "initial": initial, "trained": trained }))
}

#[derive(Serialize)]
struct CurveRow {
    iteration: usize,
    mean_reward: f64,
}

/// Online training from `p` with the table as critic, at the online step size.
pub fn fit_online(
    cfg: &PipelineConfig,
    p: &mut PolicyParams,
    projector: &Projector,
    table: RewardTable,
) -> Result<(RewardTable, Vec<f64>), CliError> {
    let env = agent_env(cfg, Player::Alice)?;
    let t = &cfg.training;
    let oc = OnlineConfig {
        iterations: t.iterations,
        batch_size: t.online_batch,
        refresh_every: (t.refresh_every > 0).then_some(t.refresh_every),
        table_window: t.table_window,
        window: t.window,
        seed: cfg.seeds.online,
    };
    p.learning_rate = t.online_lr;
    let (table, rep) = train_online(p, env.as_ref(), projector, table, &oc)?;
    Ok((table, rep.reward_curve))
}

fn online(cfg: &PipelineConfig) -> Result<(), CliError> {
    let f = load_fitted(cfg)?;
    let mut p = PolicyParams::load(&path(cfg, POLICY))?;
    let table = RewardTable::load(&path(cfg, TABLE))?;
    let projector = Projector::new(&f.set, f.assignment, cfg.embedder.build()?);
    let (table, curve) = fit_online(cfg, &mut p, &projector, table)?;
    p.save(&path(cfg, ONLINE_POLICY))?;
    table.save(&path(cfg, ONLINE_TABLE))?;
    let rows: Vec<CurveRow> = curve.iter().enumerate().map(|(i, &r)| CurveRow { iteration: i + 1, mean_reward: r }).collect();
    write_csv(&path(cfg, ONLINE_CURVE), &rows)
}

/// Greedy average final reward over `games` fresh guessing games.
pub fn evaluate_guess(game: &GuessGame, p: &PolicyParams, projector: &Projector, window: usize, games: usize, seed: u64) -> Result<f64, CliError> {
    let actor = PolicyActor { params: p, projector, window, mode: ActMode::Greedy };
    let trajs = (0..games)
        .into_par_iter()
        .map(|i| game.play(&actor, format!("eval{i}"), &mut game_rng(seed, i as u64)).map_err(game_err(i)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(eval_average_final_reward(&trajs)?)
}

/// Greedy win rate per role against `opponent`, `games` games per role.
pub fn evaluate_offer(
    game: &OfferGame,
    opponent: OpponentStyle,
    p: &PolicyParams,
    projector: &Projector,
    window: usize,
    games: usize,
    seed: u64,
) -> Result<[f64; 2], CliError> {
    let actor = PolicyActor { params: p, projector, window, mode: ActMode::Greedy };
    let mut rates = [0.0; 2];
    for (j, role) in [Player::Alice, Player::Bob].into_iter().enumerate() {
        let arena = OfferArena { game: OfferGame::new(game.spec.clone())?, opponent, agent_role: role };
        let outcomes = (0..games)
            .into_par_iter()
            .map(|i| {
                arena.play_record(&actor, &format!("eval{i}"), &mut game_rng(seed, (2 * i + j) as u64)).map(|r| r.outcome).map_err(game_err(i))
            })
            .collect::<Result<Vec<_>, _>>()?;
        rates[j] = match game.task() {
            Task::Negotiate => eval_win_rate_negotiation(&outcomes, role)?,
            _ => eval_win_rate_bargain(&outcomes, role)?,
        };
    }
    Ok(rates)
}

fn eval(cfg: &PipelineConfig) -> Result<(), CliError> {
    let f = load_fitted(cfg)?;
    let game = Game::from_config(cfg)?;
    let projector = Projector::new(&f.set, f.assignment, cfg.embedder.build()?);
    let untrained = PolicyParams::new(game.bank().num_templates(), cfg.training.lr, cfg.seeds.train);
    let offline = PolicyParams::load(&path(cfg, POLICY))?;
    let online = PolicyParams::load(&path(cfg, ONLINE_POLICY))?;
    let (w, n, seed) = (cfg.training.window, cfg.training.eval_games, cfg.seeds.eval);
    let mut rows = Vec::new();
    for (name, p) in [("untrained", &untrained), ("offline", &offline), ("online", &online)] {
        match &game {
            Game::Guess(g) => rows.push(SummaryRow {
                task: Task::Guess.to_string(),
                role: Player::Solo.to_string(),
                metric: format!("final_reward/{name}"),
                value: evaluate_guess(g, p, &projector, w, n, seed)?,
                n,
            }),
            Game::Offer(g) => {
                let rates = evaluate_offer(g, opponent(cfg)?, p, &projector, w, n, seed)?;
                for (role, rate) in [Player::Alice, Player::Bob].into_iter().zip(rates) {
                    rows.push(SummaryRow { task: g.task().to_string(), role: role.to_string(), metric: format!("win_rate/{name}"), value: rate, n });
                }
            }
        }
    }
    let mut buf = Vec::new();
    write_summary_csv(&rows, &mut buf)?;
    write_file(&path(cfg, EVAL), &buf)
}

/// Bandit used for the convergence-slope line of the report: six arms in three
/// reward-equivalent pairs.
pub fn reference_bandit() -> SyntheticBandit {
    SyntheticBandit::new(vec![0.3, -0.2, 0.1, 0.0, 0.4, -0.5], vec![0.8, 0.8, 0.3, 0.3, 0.5, 0.5], vec![0, 0, 1, 1, 2, 2])
        .expect("reference bandit is valid")
}

pub const SLOPE_GRID: [usize; 4] = [64, 256, 1024, 4096];

#[derive(Serialize)]
struct SlopeRow {
    n: usize,
    raw_error: f64,
    aggregated_error: f64,
}

fn report(cfg: &PipelineConfig) -> Result<(), CliError> {
    for file in REPORT_COPIES {
        let bytes = fs::read(path(cfg, file)).map_err(|e| CliError::Upstream(format!("{file}: {e}")))?;
        write_file(&path(cfg, &format!("report/{file}")), &bytes)?;
    }
    let sel = read_json(&path(cfg, SELECTION))?;
    let var = read_json(&path(cfg, VARIANCE))?;
    let grad = read_json(&path(cfg, GRADIENT_VARIANCE))?;
    let num = |v: &serde_json::Value, k: &str| v[k].as_f64().unwrap_or(f64::NAN);

    let bandit = reference_bandit();
    let raw = convergence_slope_check(&bandit, &SLOPE_GRID, 50, false, cfg.seeds.eval)?;
    let agg = convergence_slope_check(&bandit, &SLOPE_GRID, 50, true, cfg.seeds.eval)?;
    let slope_rows: Vec<SlopeRow> = SLOPE_GRID
        .iter()
        .enumerate()
        .map(|(i, &n)| SlopeRow { n, raw_error: raw.mean_errors[i], aggregated_error: agg.mean_errors[i] })
        .collect();
    write_csv(&path(cfg, REPORT_SLOPE), &slope_rows)?;

    let var_rows: Vec<(String, f64)> = [
        ("var_raw", num(&var, "var_raw")),
        ("var_aggregated", num(&var, "var_aggregated")),
        ("variance_ratio", num(&var, "ratio")),
        ("expected_conditional_variance", num(&var, "expected_conditional")),
        ("identity_residual", num(&var, "residual")),
        ("gradient_trace_raw", num(&grad["initial"], "trace_raw")),
        ("gradient_trace_aggregated", num(&grad["initial"], "trace_aggregated")),
        ("gradient_trace_ratio", num(&grad["initial"], "ratio")),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["statistic", "value"])?;
    for (k, v) in &var_rows {
        w.write_record([k.as_str(), &v.to_string()])?;
    }
    write_file(&path(cfg, REPORT_VARIANCE), &w.into_inner().map_err(|e| CliError::Runtime(e.to_string()))?)?;

    let mut s = String::new();
    let k_star = sel["k_star"].as_u64().map_or("none (sweep exhausted)".to_string(), |k| k.to_string());
    writeln!(s, "k* = {k_star}; cut at k = {} of {} (epsilon {}, tau {})", sel["k"], sel["k_max"], cfg.epsilon, cfg.tau).ok();
    writeln!(s, "Var(A) = {:.6}", num(&var, "var_raw")).ok();
    writeln!(s, "Var(Ã) = {:.6}", num(&var, "var_aggregated")).ok();
    writeln!(s, "Var(Ã)/Var(A) = {:.4}", num(&var, "ratio")).ok();
    writeln!(s, "gradient covariance trace ratio (initial policy) = {:.4}", num(&grad["initial"], "ratio")).ok();
    writeln!(s, "convergence slope (reference bandit) = {:.3} raw, {:.3} aggregated", raw.slope, agg.slope).ok();
    let mut eval_reader = csv::Reader::from_path(path(cfg, EVAL))?;
    for rec in eval_reader.records() {
        let rec = rec?;
        writeln!(s, "eval {} {} {} = {} (N={})", &rec[0], &rec[1], &rec[2], &rec[3], &rec[4]).ok();
    }
    write_file(&path(cfg, SUMMARY), s.as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_input_has_an_earlier_producer() {
        for s in Stage::ALL {
            for f in s.inputs() {
                assert!(Stage::producer(f) < s, "{} reads {f}", s.name());
            }
        }
    }

    #[test]
    fn outputs_are_disjoint() {
        let mut seen = std::collections::BTreeSet::new();
        for s in Stage::ALL {
            for f in s.outputs() {
                assert!(seen.insert(f.clone()), "{f} written twice");
            }
        }
    }
}
