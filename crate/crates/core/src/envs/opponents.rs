//! Scripted opponents for the alternating-offer games.
//!
//! All styles reason in normalized own-gain terms (see [`OfferGame::gain`]), so the same
//! opponent works for bargaining and negotiation.

use super::offers::{Move, OfferGame, OfferState};
use super::EnvError;
use crate::traj::Player;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

pub const GREEDY_DEMAND: f64 = 0.8;
pub const TFT_OPENING_DEMAND: f64 = 0.7;
pub const TFT_FLOOR: f64 = 0.5;
pub const TFT_JITTER: f64 = 0.02;
pub const DEFAULT_THRESHOLD: f64 = 0.45;

pub trait Opponent {
    fn respond(&mut self, state: &OfferState<'_>) -> Move;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "style", rename_all = "kebab-case")]
pub enum OpponentStyle {
    Greedy,
    TitForTat,
    FixedThreshold { threshold: f64 },
}

impl OpponentStyle {
    pub fn registry() -> [&'static str; 3] {
        ["greedy", "tit-for-tat", "fixed-threshold"]
    }

    pub fn build(self, seed: u64) -> Box<dyn Opponent> {
        match self {
            Self::Greedy => Box::new(Greedy),
            Self::TitForTat => Box::new(TitForTat::new(seed)),
            Self::FixedThreshold { threshold } => Box::new(FixedThreshold { threshold }),
        }
    }
}

impl FromStr for OpponentStyle {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, EnvError> {
        match s {
            "greedy" => Ok(Self::Greedy),
            "tit-for-tat" => Ok(Self::TitForTat),
            "fixed-threshold" => Ok(Self::FixedThreshold { threshold: DEFAULT_THRESHOLD }),
            other => Err(EnvError::UnknownStyle(other.to_string())),
        }
    }
}

impl fmt::Display for OpponentStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Greedy => f.write_str("greedy"),
            Self::TitForTat => f.write_str("tit-for-tat"),
            Self::FixedThreshold { .. } => f.write_str("fixed-threshold"),
        }
    }
}

fn other(p: Player) -> Player {
    if p == Player::Alice {
        Player::Bob
    } else {
        Player::Alice
    }
}

fn pending_gain(state: &OfferState<'_>) -> Option<f64> {
    state.pending.map(|l| state.game.gain(state.me, l, other(state.me)))
}

/// The most generous offer whose own gain still meets `demand`, else the best one.
pub fn propose(game: &OfferGame, me: Player, demand: f64) -> Move {
    let gains: Vec<f64> = (0..game.num_levels()).map(|l| game.gain(me, l, me)).collect();
    let meets = (0..gains.len()).filter(|&l| gains[l] >= demand).min_by(|&a, &b| gains[a].total_cmp(&gains[b]));
    let level = meets.unwrap_or_else(|| (0..gains.len()).max_by(|&a, &b| gains[a].total_cmp(&gains[b])).unwrap());
    Move::Offer(level)
}

/// Demands 0.8 of the surplus and accepts nothing less.
pub struct Greedy;

impl Opponent for Greedy {
    fn respond(&mut self, state: &OfferState<'_>) -> Move {
        match pending_gain(state) {
            Some(g) if g >= GREEDY_DEMAND => Move::Accept,
            _ => propose(state.game, state.me, GREEDY_DEMAND),
        }
    }
}

/// Accepts any offer worth at least `threshold`; asks for `threshold + 0.1` otherwise.
pub struct FixedThreshold {
    pub threshold: f64,
}

impl Opponent for FixedThreshold {
    fn respond(&mut self, state: &OfferState<'_>) -> Move {
        match pending_gain(state) {
            Some(g) if g >= self.threshold => Move::Accept,
            _ => propose(state.game, state.me, self.threshold + 0.1),
        }
    }
}

/// Opens at 0.7 and concedes exactly as much as the other side conceded in its last
/// offer, with a small seeded jitter, never below 0.5.
pub struct TitForTat {
    rng: ChaCha8Rng,
    demand: f64,
    last_offer: Option<f64>,
}

impl TitForTat {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let demand = TFT_OPENING_DEMAND + rng.random_range(-TFT_JITTER..=TFT_JITTER);
        Self { rng, demand, last_offer: None }
    }

    pub fn demand(&self) -> f64 {
        self.demand
    }
}

impl Opponent for TitForTat {
    fn respond(&mut self, state: &OfferState<'_>) -> Move {
        let offered = pending_gain(state);
        if let (Some(prev), Some(now)) = (self.last_offer, offered) {
            if now > prev {
                let jitter = self.rng.random_range(-TFT_JITTER..=TFT_JITTER);
                self.demand = (self.demand - (now - prev) + jitter).max(TFT_FLOOR);
            }
        }
        if offered.is_some() {
            self.last_offer = offered;
        }
        match offered {
            Some(g) if g >= self.demand => Move::Accept,
            _ => propose(state.game, state.me, self.demand),
        }
    }
}
