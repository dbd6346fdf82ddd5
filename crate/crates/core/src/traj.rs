//! Trajectories of (action, observation) utterance steps with a terminal reward,
//! the deduplicated utterance corpus, and the `.traj.jsonl` log format.
//!
//! Each log line is one trajectory:
//!
//! ```text
//! {"game_id":"g0","task":"guess","player":"solo","reward":1.0,
//!  "steps":[{"t":1,"action":"Is it alive?","observation":"Yes."},{"t":2,"action":"..."}]}
//! ```
//!
//! Second movers in adversarial games carry an optional `opening` observation:
//! the opponent's first utterance, which precedes their own first action.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrajError {
    #[error("line {line}: malformed record: {msg}")]
    Malformed { line: usize, msg: String },
    #[error("line {line}: {msg}")]
    Invalid { line: usize, msg: String },
    #[error("invalid trajectory set: {0}")]
    InvalidSet(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent,
    Environment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Guess,
    Bargain,
    Negotiate,
    Custom,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Guess => "guess",
            Task::Bargain => "bargain",
            Task::Negotiate => "negotiate",
            Task::Custom => "custom",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Player {
    Solo,
    Alice,
    Bob,
}

impl fmt::Display for Player {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Player::Solo => "solo",
            Player::Alice => "alice",
            Player::Bob => "bob",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Utterance {
    pub text: String,
    pub speaker: Speaker,
    /// Corpus id; assigned by [`TrajectorySet::build`].
    pub uid: u32,
}

impl Utterance {
    pub fn agent(text: impl Into<String>) -> Self {
        Self { text: text.into().trim().to_string(), speaker: Speaker::Agent, uid: 0 }
    }

    pub fn environment(text: impl Into<String>) -> Self {
        Self { text: text.into().trim().to_string(), speaker: Speaker::Environment, uid: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    /// 1-based turn index.
    pub t: u32,
    pub action: Utterance,
    pub observation: Option<Utterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub game_id: String,
    pub task: Task,
    pub player: Player,
    pub opening: Option<Utterance>,
    pub steps: Vec<Step>,
    pub terminal_reward: f64,
}

impl Trajectory {
    /// Horizon T.
    pub fn horizon(&self) -> usize {
        self.steps.len()
    }

    /// Builds a trajectory from `(action, observation)` texts, numbering steps from 1.
    pub fn from_texts(
        game_id: impl Into<String>,
        task: Task,
        player: Player,
        opening: Option<&str>,
        steps: &[(&str, Option<&str>)],
        terminal_reward: f64,
    ) -> Self {
        Self {
            game_id: game_id.into(),
            task,
            player,
            opening: opening.map(Utterance::environment),
            steps: steps
                .iter()
                .enumerate()
                .map(|(i, (a, o))| Step {
                    t: i as u32 + 1,
                    action: Utterance::agent(*a),
                    observation: o.map(Utterance::environment),
                })
                .collect(),
            terminal_reward,
        }
    }

    fn utterances_mut(&mut self) -> impl Iterator<Item = &mut Utterance> {
        self.opening.iter_mut().chain(
            self.steps
                .iter_mut()
                .flat_map(|s| std::iter::once(&mut s.action).chain(s.observation.iter_mut())),
        )
    }

    pub fn utterances(&self) -> impl Iterator<Item = &Utterance> {
        self.opening.iter().chain(
            self.steps.iter().flat_map(|s| std::iter::once(&s.action).chain(s.observation.iter())),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    NoSteps,
    IndexGap,
    WrongSpeaker,
    EmptyText,
    MissingObservation,
    NonFiniteReward,
    NonBinaryReward,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

/// Returns every broken trajectory invariant; empty means the trajectory is well formed.
pub fn validate_trajectory(traj: &Trajectory) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |kind, message: String| out.push(Violation { kind, message });

    if traj.steps.is_empty() {
        push(ViolationKind::NoSteps, "trajectory has no steps (horizon must be positive)".into());
    }
    for (i, step) in traj.steps.iter().enumerate() {
        let expected = i as u32 + 1;
        if step.t != expected {
            push(
                ViolationKind::IndexGap,
                format!("step index {} found where {} expected (indices must be 1..T without gaps)", step.t, expected),
            );
        }
        if step.action.speaker != Speaker::Agent {
            push(ViolationKind::WrongSpeaker, format!("step {}: action must be spoken by the agent", step.t));
        }
        if step.action.text.trim().is_empty() {
            push(ViolationKind::EmptyText, format!("step {}: empty action text", step.t));
        }
        match &step.observation {
            Some(obs) => {
                if obs.speaker != Speaker::Environment {
                    push(
                        ViolationKind::WrongSpeaker,
                        format!("step {}: observation must be spoken by the environment", step.t),
                    );
                }
                if obs.text.trim().is_empty() {
                    push(ViolationKind::EmptyText, format!("step {}: empty observation text", step.t));
                }
            }
            None if i + 1 < traj.steps.len() => push(
                ViolationKind::MissingObservation,
                format!("step {}: only the final step may omit its observation", step.t),
            ),
            None => {}
        }
    }
    if let Some(op) = &traj.opening {
        if op.speaker != Speaker::Environment {
            push(ViolationKind::WrongSpeaker, "opening must be spoken by the environment".into());
        }
        if op.text.trim().is_empty() {
            push(ViolationKind::EmptyText, "empty opening text".into());
        }
    }
    if !traj.terminal_reward.is_finite() {
        push(ViolationKind::NonFiniteReward, format!("terminal reward {} is not finite", traj.terminal_reward));
    } else if traj.task == Task::Guess && traj.terminal_reward != 0.0 && traj.terminal_reward != 1.0 {
        push(
            ViolationKind::NonBinaryReward,
            format!("guess-task reward must be binary (0 or 1), found {}", traj.terminal_reward),
        );
    }
    out
}

/// Validated trajectories plus the deduplicated utterance corpus.
///
/// Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    trajectories: Vec<Trajectory>,
    corpus: Vec<Utterance>,
}

impl TrajectorySet {
    /// Validates `trajectories`, deduplicates utterances on `(text, speaker)` and assigns
    /// uids in order of first appearance.
    pub fn build(mut trajectories: Vec<Trajectory>) -> Result<Self, TrajError> {
        for (i, traj) in trajectories.iter().enumerate() {
            if let Some(v) = validate_trajectory(traj).into_iter().next() {
                return Err(TrajError::InvalidSet(format!("trajectory {} ({}): {}", i, traj.game_id, v)));
            }
        }
        let mut index: HashMap<(String, Speaker), u32> = HashMap::new();
        let mut corpus = Vec::new();
        for traj in trajectories.iter_mut() {
            for utt in traj.utterances_mut() {
                let text = utt.text.trim().to_string();
                let key = (text.clone(), utt.speaker);
                let uid = *index.entry(key).or_insert_with(|| {
                    let uid = corpus.len() as u32;
                    corpus.push(Utterance { text: text.clone(), speaker: utt.speaker, uid });
                    uid
                });
                utt.text = text;
                utt.uid = uid;
            }
        }
        Ok(Self { trajectories, corpus })
    }

    pub fn empty() -> Self {
        Self { trajectories: Vec::new(), corpus: Vec::new() }
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn corpus(&self) -> &[Utterance] {
        &self.corpus
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// |D|: number of (history, action) pairs across all trajectories.
    pub fn num_pairs(&self) -> usize {
        self.trajectories.iter().map(|t| t.steps.len()).sum()
    }

    pub fn utterance(&self, uid: u32) -> Option<&Utterance> {
        self.corpus.get(uid as usize)
    }

    /// Checks the set-level invariants (uid resolution, corpus uniqueness).
    pub fn validate(&self) -> Result<(), TrajError> {
        let mut seen = HashMap::new();
        for (i, u) in self.corpus.iter().enumerate() {
            if u.uid as usize != i {
                return Err(TrajError::InvalidSet(format!("corpus entry {} has uid {}", i, u.uid)));
            }
            if seen.insert((u.text.as_str(), u.speaker), u.uid).is_some() {
                return Err(TrajError::InvalidSet(format!("duplicate corpus entry {:?}", u.text)));
            }
        }
        for traj in &self.trajectories {
            for u in traj.utterances() {
                match self.corpus.get(u.uid as usize) {
                    Some(c) if c.text == u.text && c.speaker == u.speaker => {}
                    _ => {
                        return Err(TrajError::InvalidSet(format!(
                            "game {}: utterance {:?} does not resolve to corpus uid {}",
                            traj.game_id, u.text, u.uid
                        )))
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct StepRecord {
    t: u32,
    action: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    observation: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct TrajectoryRecord {
    game_id: String,
    task: Task,
    player: Player,
    reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    opening: Option<String>,
    steps: Vec<StepRecord>,
}

impl From<&Trajectory> for TrajectoryRecord {
    fn from(t: &Trajectory) -> Self {
        Self {
            game_id: t.game_id.clone(),
            task: t.task,
            player: t.player,
            reward: t.terminal_reward,
            opening: t.opening.as_ref().map(|u| u.text.clone()),
            steps: t
                .steps
                .iter()
                .map(|s| StepRecord {
                    t: s.t,
                    action: s.action.text.clone(),
                    observation: s.observation.as_ref().map(|o| o.text.clone()),
                })
                .collect(),
        }
    }
}

fn record_to_trajectory(rec: TrajectoryRecord, line: usize) -> Result<Trajectory, TrajError> {
    let mut seen = std::collections::HashSet::new();
    for s in &rec.steps {
        if !seen.insert(s.t) {
            return Err(TrajError::Invalid { line, msg: format!("duplicate step index {}", s.t) });
        }
    }
    let traj = Trajectory {
        game_id: rec.game_id,
        task: rec.task,
        player: rec.player,
        opening: rec.opening.map(Utterance::environment),
        steps: rec
            .steps
            .into_iter()
            .map(|s| Step {
                t: s.t,
                action: Utterance::agent(s.action),
                observation: s.observation.map(Utterance::environment),
            })
            .collect(),
        terminal_reward: rec.reward,
    };
    if let Some(v) = validate_trajectory(&traj).into_iter().next() {
        return Err(TrajError::Invalid { line, msg: v.message });
    }
    Ok(traj)
}

/// Parses trajectory records from a reader; line numbers in errors are 1-based.
pub fn read_trajectories<R: BufRead>(reader: R) -> Result<TrajectorySet, TrajError> {
    let mut trajs = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| TrajError::Malformed { line: line_no, msg: e.to_string() })?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TrajectoryRecord = serde_json::from_str(&line)
            .map_err(|e| TrajError::Malformed { line: line_no, msg: e.to_string() })?;
        trajs.push(record_to_trajectory(rec, line_no)?);
    }
    TrajectorySet::build(trajs)
}

pub fn parse_trajectories(path: &Path) -> Result<TrajectorySet, TrajError> {
    let f = fs::File::open(path).map_err(|source| TrajError::Io { path: path.display().to_string(), source })?;
    read_trajectories(BufReader::new(f))
}

/// Serializes the set to the line-delimited log format.
pub fn to_jsonl(set: &TrajectorySet) -> String {
    let mut out = String::new();
    for t in set.trajectories() {
        out.push_str(&serde_json::to_string(&TrajectoryRecord::from(t)).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn write_trajectories(set: &TrajectorySet, path: &Path) -> Result<(), TrajError> {
    crate::io::write_atomic(path, to_jsonl(set).as_bytes())
        .map_err(|source| TrajError::Io { path: path.display().to_string(), source })
}
