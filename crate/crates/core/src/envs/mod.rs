//! Desk-scale dialogue games with known intent structure.
//!
//! The guessing game is single-agent: the agent asks yes/no questions about a hidden
//! item and finally guesses. The alternating-offer games (bargaining over a pie,
//! buyer/seller negotiation) are adversarial; the agent faces a scripted opponent or
//! itself. Every utterance is a noisy rendering of a template from an
//! [`IntentTemplateBank`], so utterance identity is not intent identity.

pub mod agent;
pub mod eval;
pub mod guess;
pub mod offers;
pub mod opponents;
pub mod templates;

use crate::traj::{Task, Trajectory};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use templates::{Intent, IntentTemplateBank, NoiseConfig};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("invalid environment spec: {0}")]
    Spec(String),
    #[error("utterance {0:?} matches no template in the bank")]
    UnknownUtterance(String),
    #[error("action {0} is outside the template bank")]
    ActionOutOfBank(usize),
    #[error("unknown opponent style {0:?}")]
    UnknownStyle(String),
    #[error("game {game}: {msg}")]
    Game { game: String, msg: String },
    #[error("evaluation: {0}")]
    Eval(String),
    #[error("policy failure: {0}")]
    Policy(String),
}

/// What an acting player has seen so far in its own trajectory.
#[derive(Debug, Clone, Copy)]
pub struct DialogueView<'a> {
    pub opening: Option<&'a str>,
    /// Completed `(own utterance, reply)` pairs.
    pub history: &'a [(String, String)],
}

/// Chooses a template of the environment's action bank.
pub trait Actor: Sync {
    fn act(&self, view: &DialogueView<'_>, rng: &mut ChaCha8Rng) -> Result<usize, EnvError>;
}

/// Uniformly random template choice.
#[derive(Debug, Clone, Copy)]
pub struct UniformActor {
    pub num_templates: usize,
}

impl Actor for UniformActor {
    fn act(&self, _view: &DialogueView<'_>, rng: &mut ChaCha8Rng) -> Result<usize, EnvError> {
        Ok(rng.random_range(0..self.num_templates))
    }
}

/// A game the agent can be dropped into, one trajectory per call.
pub trait Environment: Sync {
    fn task(&self) -> Task;
    fn action_bank(&self) -> &IntentTemplateBank;
    fn play(&self, actor: &dyn Actor, game_id: String, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError>;
}

/// Independent stream per game so games can run in any order.
pub fn game_rng(seed: u64, game: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(game);
    rng
}
