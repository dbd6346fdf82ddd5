//! Pipeline configuration: one TOML file shared by every stage.

use crate::error::CliError;
use intent_core::embed::{EmbedderConfig, EmbedderKind};
use intent_core::envs::guess::GuessGameSpec;
use intent_core::envs::offers::{BargainSpec, NegotiationSpec};
use intent_core::envs::opponents::OpponentStyle;
use intent_core::granularity::{DEFAULT_EPSILON, DEFAULT_K_MAX, DEFAULT_TAU};
use intent_core::io::sha256_hex;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Directory holding every artifact and manifest.
    pub out: PathBuf,
    /// Existing trajectory log to use instead of collecting one.
    pub logs: Option<PathBuf>,
    /// Embedding cache; defaults to `embed_cache.json` under `out`.
    pub cache: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self { out: PathBuf::from("out"), logs: None, cache: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Guess,
    Bargain,
    Negotiate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GuessPreset {
    Desk,
    Narrative157,
    Narrative100,
}

impl GuessPreset {
    pub fn spec(self) -> GuessGameSpec {
        match self {
            Self::Desk => GuessGameSpec::desk(),
            Self::Narrative157 => GuessGameSpec::narrative_157(),
            Self::Narrative100 => GuessGameSpec::narrative_100(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub task: TaskKind,
    /// Preset used when `guess` is not given explicitly.
    pub preset: GuessPreset,
    pub guess: Option<GuessGameSpec>,
    pub bargain: BargainSpec,
    pub negotiation: NegotiationSpec,
    /// Games rolled out by `collect`.
    pub games: usize,
    /// Scripted opponent for the offer games. Without one, `collect` runs self-play
    /// and logs both seats.
    pub opponent: Option<String>,
    /// Threshold of the fixed-threshold opponent.
    pub threshold: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: TaskKind::Guess,
            preset: GuessPreset::Desk,
            guess: None,
            bargain: BargainSpec::default(),
            negotiation: NegotiationSpec::default(),
            games: 1000,
            opponent: None,
            threshold: intent_core::envs::opponents::DEFAULT_THRESHOLD,
        }
    }
}

impl EnvConfig {
    pub fn guess_spec(&self) -> GuessGameSpec {
        self.guess.clone().unwrap_or_else(|| self.preset.spec())
    }

    pub fn opponent_style(&self) -> Result<Option<OpponentStyle>, CliError> {
        let Some(name) = &self.opponent else { return Ok(None) };
        let style: OpponentStyle = name.parse().map_err(|e: intent_core::envs::EnvError| CliError::Validation(e.to_string()))?;
        Ok(Some(match style {
            OpponentStyle::FixedThreshold { .. } => OpponentStyle::FixedThreshold { threshold: self.threshold },
            other => other,
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub collect: u64,
    pub train: u64,
    pub online: u64,
    pub eval: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Self { collect: 0, train: 1, online: 2, eval: 3 }
    }
}

impl Seeds {
    /// Every named seed derived from one master seed.
    pub fn from_master(seed: u64) -> Self {
        let at = |i: u64| seed.wrapping_mul(4).wrapping_add(i);
        Self { collect: at(0), train: at(1), online: at(2), eval: at(3) }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdvantageKind {
    Aggregated,
    Raw,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Training {
    pub advantage: AdvantageKind,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    /// Context window W of the tabular policy.
    pub window: usize,
    pub iterations: usize,
    /// Step size of the online phase, which starts from the offline checkpoint.
    pub online_lr: f64,
    pub online_batch: usize,
    /// Rebuild the online reward table every this many iterations; 0 never rebuilds.
    pub refresh_every: usize,
    pub table_window: usize,
    pub eval_games: usize,
}

impl Default for Training {
    fn default() -> Self {
        Self {
            advantage: AdvantageKind::Aggregated,
            epochs: 10,
            batch: 32,
            lr: 0.5,
            window: 2,
            iterations: 150,
            online_lr: 5.0,
            online_batch: 32,
            refresh_every: 50,
            table_window: 1024,
            eval_games: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub paths: Paths,
    pub embedder: EmbedderConfig,
    pub gamma: f64,
    pub epsilon: f64,
    pub tau: usize,
    pub k_max: usize,
    /// Largest k of the clustering-metric sweep written by `cluster`.
    pub metrics_k_max: usize,
    pub seeds: Seeds,
    pub env: EnvConfig,
    pub training: Training,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            paths: Paths::default(),
            embedder: EmbedderConfig::default(),
            gamma: intent_core::aggregate::DEFAULT_GAMMA,
            epsilon: DEFAULT_EPSILON,
            tau: DEFAULT_TAU,
            k_max: DEFAULT_K_MAX,
            metrics_k_max: 32,
            seeds: Seeds::default(),
            env: EnvConfig::default(),
            training: Training::default(),
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub gamma: Option<f64>,
    pub epsilon: Option<f64>,
    pub tau: Option<usize>,
    pub k_max: Option<usize>,
    pub embedder: Option<EmbedderKind>,
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Validation(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Validation(format!("config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seeds = Seeds::from_master(s);
        }
        if let Some(p) = &o.out {
            self.paths.out = p.clone();
        }
        if let Some(g) = o.gamma {
            self.gamma = g;
        }
        if let Some(e) = o.epsilon {
            self.epsilon = e;
        }
        if let Some(t) = o.tau {
            self.tau = t;
        }
        if let Some(k) = o.k_max {
            self.k_max = k;
        }
        if let Some(kind) = o.embedder {
            self.embedder.kind = kind;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |msg: String| Err(CliError::Validation(msg));
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must lie in (0, 1], got {}", self.gamma));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return bad(format!("epsilon must be positive, got {}", self.epsilon));
        }
        if self.k_max < 2 {
            return bad(format!("k_max must be at least 2, got {}", self.k_max));
        }
        if self.metrics_k_max < 3 {
            return bad(format!("metrics_k_max must be at least 3, got {}", self.metrics_k_max));
        }
        self.embedder.validate().map_err(|e| CliError::Validation(e.to_string()))?;
        let t = &self.training;
        if t.epochs == 0 || t.batch == 0 || t.online_batch == 0 || t.eval_games == 0 || t.table_window == 0 {
            return bad("epochs, batch sizes, eval_games and table_window must be positive".into());
        }
        if !(t.lr > 0.0 && t.lr.is_finite() && t.online_lr > 0.0 && t.online_lr.is_finite()) {
            return bad(format!("learning rates must be positive, got {} and {}", t.lr, t.online_lr));
        }
        if self.env.games == 0 {
            return bad("env.games must be positive".into());
        }
        match self.env.task {
            TaskKind::Guess => {
                intent_core::envs::guess::GuessGame::new(self.env.guess_spec()).map_err(|e| CliError::Validation(e.to_string()))?;
                if self.env.opponent.is_some() {
                    return bad("the guessing game has no opponent".into());
                }
            }
            TaskKind::Bargain => self.env.bargain.validate().map_err(|e| CliError::Validation(e.to_string()))?,
            TaskKind::Negotiate => self.env.negotiation.validate().map_err(|e| CliError::Validation(e.to_string()))?,
        }
        self.env.opponent_style()?;
        if let Some(logs) = &self.paths.logs {
            if !logs.is_file() {
                return bad(format!("log file {} does not exist", logs.display()));
            }
        }
        if let Some(cache) = &self.paths.cache {
            if let Some(parent) = cache.parent().filter(|p| !p.as_os_str().is_empty()) {
                if !parent.is_dir() {
                    return bad(format!("cache directory {} does not exist", parent.display()));
                }
            }
        }
        if self.paths.out.exists() && !self.paths.out.is_dir() {
            return bad(format!("output path {} is not a directory", self.paths.out.display()));
        }
        Ok(())
    }

    /// Hash of the config sections a stage reads, so unrelated edits do not
    /// invalidate its artifacts.
    pub fn fingerprint(&self, stage: crate::stages::Stage) -> String {
        use crate::stages::Stage::*;
        let c = self;
        let collect = serde_json::json!({ "env": c.env, "seed": c.seeds.collect, "logs": c.paths.logs.is_some() });
        let part = match stage {
            Collect => collect,
            Embed => serde_json::json!({ "embedder": c.embedder }),
            Cluster => serde_json::json!({ "metrics_k_max": c.metrics_k_max }),
            SelectK => serde_json::json!({ "gamma": c.gamma, "epsilon": c.epsilon, "tau": c.tau, "k_max": c.k_max }),
            Aggregate => serde_json::json!({ "gamma": c.gamma }),
            Train => serde_json::json!({ "env": c.env, "training": c.training, "seed": c.seeds.train }),
            TrainOnline => serde_json::json!({ "env": c.env, "training": c.training, "embedder": c.embedder, "seed": c.seeds.online }),
            Eval => serde_json::json!({ "env": c.env, "training": c.training, "embedder": c.embedder, "seed": c.seeds.eval }),
            Report => serde_json::json!({ "gamma": c.gamma }),
        };
        sha256_hex(&serde_json::to_vec(&part).expect("config section serializes"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);
        c.validate().unwrap();
        assert_eq!(c.env.games, 1000);
        assert_eq!((c.gamma, c.epsilon, c.tau, c.k_max), (0.9, 0.01, 10, 512));
    }

    #[test]
    fn partial_file_fills_defaults() {
        let c = PipelineConfig::from_toml("gamma = 0.8\n[env]\ntask = \"bargain\"\nopponent = \"greedy\"\n").unwrap();
        assert_eq!(c.gamma, 0.8);
        assert_eq!(c.env.task, TaskKind::Bargain);
        assert_eq!(c.training.epochs, 10);
        c.validate().unwrap();
    }

    #[test]
    fn ranges_are_enforced() {
        for (field, text) in [("gamma", "gamma = 0.0"), ("gamma", "gamma = 1.5"), ("epsilon", "epsilon = 0.0"), ("k_max", "k_max = 1")] {
            let err = PipelineConfig::from_toml(text).unwrap().validate().unwrap_err();
            assert!(err.to_string().contains(field), "{err}");
            assert_eq!(err.exit_code(), 2);
        }
        assert!(PipelineConfig::from_toml("tau = -1").is_err());
        assert!(PipelineConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn overrides_win() {
        let mut c = PipelineConfig::default();
        c.apply(&Overrides { seed: Some(7), gamma: Some(0.5), k_max: Some(64), ..Default::default() });
        assert_eq!(c.seeds, Seeds::from_master(7));
        assert_eq!((c.gamma, c.k_max), (0.5, 64));
    }

    #[test]
    fn fingerprints_track_only_their_section() {
        use crate::stages::Stage;
        let a = PipelineConfig::default();
        let mut b = a.clone();
        b.training.lr = 0.1;
        assert_eq!(a.fingerprint(Stage::Embed), b.fingerprint(Stage::Embed));
        assert_ne!(a.fingerprint(Stage::Train), b.fingerprint(Stage::Train));
    }
}
