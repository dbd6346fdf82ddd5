//! Alternating-offer games: bargaining over a pie and buyer/seller price negotiation.
//!
//! Alice moves first. On each turn a player either makes an offer or accepts the pending
//! offer of the other player. Offers are numbered; the game ends with a deal when an offer
//! is accepted, and with no deal when a player accepts with nothing pending or when the
//! offer budget `T` is exhausted and the responder counters instead of accepting.

use super::opponents::Opponent;
use super::templates::{Intent, IntentTemplateBank, NoiseConfig};
use super::{Actor, DialogueView, EnvError, Environment};
use crate::traj::{Player, Step, Task, Trajectory, Utterance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Listener shares of the pie, in percent, that bargaining offers can name.
pub const BARGAIN_SHARES: [u32; 10] = [10, 20, 30, 40, 45, 50, 55, 60, 70, 80];

/// Negotiation price grid as fractions of the true value.
pub const PRICE_FRACTIONS: [f64; 10] = [0.80, 0.85, 0.90, 0.95, 1.00, 1.05, 1.09, 1.15, 1.20, 1.30];

const REASONS: [&str; 10] = [
    "that barely covers what I put into the venture",
    "the market has been painfully slow all this week",
    "I have another eager partner waiting on the phone",
    "we both want a quick and painless close tonight",
    "that matches the recent deals on the public board",
    "I am meeting you exactly halfway on the numbers",
    "this is my best and final number for the season",
    "the craftsmanship here is excellent and rare",
    "shipping and handling are already included",
    "I need this whole matter settled before dinner",
];

const BARGAIN_FRAMES: [&str; 4] = [
    "You get {L} of {M}, because {R}.",
    "I offer you {L}, as {R}.",
    "{L} goes to you, since {R}.",
    "Take {L} of {M}, because {R}.",
];

const PRICE_FRAMES: [&str; 4] = ["I ask ${P}, because {R}.", "My price: ${P}, as {R}.", "${P} it is, since {R}.", "Pay ${P}, because {R}."];

const ACCEPT: [&str; 4] = [
    "I accept your offer.",
    "Fine, I accept your offer.",
    "Deal, I accept your offer.",
    "Sure thing, I accept your offer.",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BargainSpec {
    pub m: f64,
    pub t: u32,
    pub delta_a: f64,
    pub delta_b: f64,
}

impl Default for BargainSpec {
    fn default() -> Self {
        Self { m: 100.0, t: 20, delta_a: 0.95, delta_b: 0.95 }
    }
}

impl BargainSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.m > 0.0 && self.m.is_finite()) || self.t == 0 {
            return Err(EnvError::Spec("bargain needs M > 0 and T ≥ 1".into()));
        }
        for d in [self.delta_a, self.delta_b] {
            if !(d > 0.0 && d <= 1.0) {
                return Err(EnvError::Spec(format!("discount factor {d} outside (0, 1]")));
            }
        }
        Ok(())
    }

    /// Discounted payoffs `(p_A, p_B)` for a deal at offer `t_ev` giving Alice `p_ev`.
    pub fn payoffs(&self, t_ev: u32, p_ev: f64) -> (f64, f64) {
        let e = t_ev as i32 - 1;
        (self.m * self.delta_a.powi(e) * p_ev, self.m * self.delta_b.powi(e) * (1.0 - p_ev))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegotiationSpec {
    pub v: f64,
    pub v_a: f64,
    pub v_b: f64,
    pub t: u32,
    pub alternating: bool,
}

impl Default for NegotiationSpec {
    fn default() -> Self {
        Self { v: 100.0, v_a: 90.0, v_b: 120.0, t: 20, alternating: true }
    }
}

impl NegotiationSpec {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.v > 0.0 && self.v.is_finite()) || self.t == 0 {
            return Err(EnvError::Spec("negotiation needs V > 0 and T ≥ 1".into()));
        }
        if !(self.v_b > self.v_a) {
            return Err(EnvError::Spec("buyer valuation must exceed seller valuation".into()));
        }
        if !self.alternating {
            return Err(EnvError::Spec("only the alternating-offer protocol is implemented".into()));
        }
        Ok(())
    }

    /// `(u_A, u_B)` for a deal at price `p`; Alice sells, Bob buys.
    pub fn utilities(&self, p: f64) -> (f64, f64) {
        (p - self.v_a, self.v_b - p)
    }

    pub fn prices(&self) -> Vec<f64> {
        PRICE_FRACTIONS.iter().map(|f| (f * self.v).round()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OfferKind {
    Bargain(BargainSpec),
    Negotiate(NegotiationSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Move {
    Offer(usize),
    Accept,
}

/// Logged result of one game; payoffs can be recomputed from `(t_ev, p_ev)` or `price`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GameOutcome {
    pub game_id: String,
    pub task: Task,
    pub t_ev: Option<u32>,
    pub p_ev: Option<f64>,
    pub price: Option<f64>,
    pub payoff_a: Option<f64>,
    pub payoff_b: Option<f64>,
    pub turns: u32,
}

impl GameOutcome {
    pub fn deal(&self) -> bool {
        self.t_ev.is_some()
    }

    pub fn payoff(&self, role: Player) -> Option<f64> {
        match role {
            Player::Alice => self.payoff_a,
            Player::Bob => self.payoff_b,
            Player::Solo => None,
        }
    }
}

pub struct GameRecord {
    pub alice: Trajectory,
    /// `None` when Alice ended the game before Bob could speak.
    pub bob: Option<Trajectory>,
    pub outcome: GameOutcome,
}

/// One side of the table.
pub enum Seat<'a> {
    Policy(&'a dyn Actor),
    Scripted(Box<dyn Opponent + 'a>),
}

/// What a scripted player sees when it is its turn.
pub struct OfferState<'a> {
    pub game: &'a OfferGame,
    pub me: Player,
    /// Level of the other player's pending offer.
    pub pending: Option<usize>,
    pub offers_made: u32,
    pub history: &'a [(Player, Move)],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfferGameSpec {
    #[serde(flatten)]
    pub kind: OfferKind,
    #[serde(default)]
    pub noise: NoiseConfig,
}

pub struct OfferGame {
    pub spec: OfferGameSpec,
    bank: IntentTemplateBank,
    levels: usize,
}

fn fill(frame: &str, pairs: &[(&str, String)]) -> String {
    pairs.iter().fold(frame.to_string(), |s, (k, v)| s.replace(k, v))
}

impl OfferGame {
    pub fn new(spec: OfferGameSpec) -> Result<Self, EnvError> {
        let mut intents = Vec::new();
        match &spec.kind {
            OfferKind::Bargain(b) => {
                b.validate()?;
                for (i, share) in BARGAIN_SHARES.iter().enumerate() {
                    let l = (*share as f64 * b.m / 100.0).to_string();
                    let ts = BARGAIN_FRAMES.iter().map(|f| {
                        fill(f, &[("{L}", l.clone()), ("{M}", b.m.to_string()), ("{R}", REASONS[i].into())])
                    });
                    intents.push(Intent::new(format!("offer_{share}"), ts));
                }
            }
            OfferKind::Negotiate(n) => {
                n.validate()?;
                for (i, p) in n.prices().iter().enumerate() {
                    let ts = PRICE_FRAMES.iter().map(|f| fill(f, &[("{P}", p.to_string()), ("{R}", REASONS[i].into())]));
                    intents.push(Intent::new(format!("price_{p}"), ts));
                }
            }
        }
        let levels = intents.len();
        intents.push(Intent::new("accept", ACCEPT.iter().map(|s| s.to_string())));
        let bank = IntentTemplateBank::new(intents)?;
        Ok(Self { spec, bank, levels })
    }

    pub fn bargain(b: BargainSpec) -> Result<Self, EnvError> {
        Self::new(OfferGameSpec { kind: OfferKind::Bargain(b), noise: NoiseConfig::default() })
    }

    pub fn negotiation(n: NegotiationSpec) -> Result<Self, EnvError> {
        Self::new(OfferGameSpec { kind: OfferKind::Negotiate(n), noise: NoiseConfig::default() })
    }

    pub fn task(&self) -> Task {
        match self.spec.kind {
            OfferKind::Bargain(_) => Task::Bargain,
            OfferKind::Negotiate(_) => Task::Negotiate,
        }
    }

    pub fn bank(&self) -> &IntentTemplateBank {
        &self.bank
    }

    pub fn num_levels(&self) -> usize {
        self.levels
    }

    pub fn max_offers(&self) -> u32 {
        match &self.spec.kind {
            OfferKind::Bargain(b) => b.t,
            OfferKind::Negotiate(n) => n.t,
        }
    }

    /// Intent index of a move.
    pub fn move_intent(&self, mv: Move) -> usize {
        match mv {
            Move::Offer(l) => l,
            Move::Accept => self.levels,
        }
    }

    pub fn intent_move(&self, intent: usize) -> Move {
        if intent == self.levels {
            Move::Accept
        } else {
            Move::Offer(intent)
        }
    }

    /// Alice's normalized gain if offer `level` by `proposer` is accepted.
    pub fn alice_gain(&self, level: usize, proposer: Player) -> f64 {
        self.gain(Player::Alice, level, proposer)
    }

    /// Normalized gain of `me` if offer `level` by `proposer` is accepted: the pie share
    /// (bargaining) or the share of the surplus `V_B − V_A` (negotiation).
    pub fn gain(&self, me: Player, level: usize, proposer: Player) -> f64 {
        match &self.spec.kind {
            OfferKind::Bargain(_) => {
                let share = BARGAIN_SHARES[level] as f64 / 100.0;
                if proposer == me {
                    (100 - BARGAIN_SHARES[level]) as f64 / 100.0
                } else {
                    share
                }
            }
            OfferKind::Negotiate(n) => {
                let p = n.prices()[level];
                let u = if me == Player::Alice { p - n.v_a } else { n.v_b - p };
                u / (n.v_b - n.v_a)
            }
        }
    }

    fn outcome(&self, game_id: &str, deal: Option<(usize, Player, u32)>, turns: u32) -> GameOutcome {
        let mut out = GameOutcome {
            game_id: game_id.to_string(),
            task: self.task(),
            t_ev: None,
            p_ev: None,
            price: None,
            payoff_a: Some(0.0),
            payoff_b: Some(0.0),
            turns,
        };
        if let Some((level, proposer, t_ev)) = deal {
            out.t_ev = Some(t_ev);
            let (a, b) = match &self.spec.kind {
                OfferKind::Bargain(b) => {
                    let p_ev = self.alice_gain(level, proposer);
                    out.p_ev = Some(p_ev);
                    b.payoffs(t_ev, p_ev)
                }
                OfferKind::Negotiate(n) => {
                    let p = n.prices()[level];
                    out.price = Some(p);
                    n.utilities(p)
                }
            };
            out.payoff_a = Some(a);
            out.payoff_b = Some(b);
        }
        out
    }

    /// Per-player terminal reward: discounted pie fraction, or utility over the true value.
    pub fn reward(&self, outcome: &GameOutcome, role: Player) -> f64 {
        let payoff = outcome.payoff(role).unwrap_or(0.0);
        match &self.spec.kind {
            OfferKind::Bargain(b) => payoff / b.m,
            OfferKind::Negotiate(n) => payoff / n.v,
        }
    }

    /// Recomputes both payoffs from the logged deal terms.
    pub fn recompute(&self, outcome: &GameOutcome) -> Option<(f64, f64)> {
        match (&self.spec.kind, outcome.t_ev) {
            (_, None) => Some((0.0, 0.0)),
            (OfferKind::Bargain(b), Some(t)) => outcome.p_ev.map(|p| b.payoffs(t, p)),
            (OfferKind::Negotiate(n), Some(_)) => outcome.price.map(|p| n.utilities(p)),
        }
    }

    /// Plays one game; Alice opens.
    pub fn play<'a>(&self, alice: &mut Seat<'a>, bob: &mut Seat<'a>, game_id: &str, rng: &mut ChaCha8Rng) -> Result<GameRecord, EnvError> {
        let noise = self.spec.noise;
        let mut texts: Vec<String> = Vec::new();
        let mut moves: Vec<(Player, Move)> = Vec::new();
        let mut pending: Option<(usize, Player, u32)> = None;
        let mut offers = 0u32;
        let mut deal = None;
        loop {
            let me = if moves.len() % 2 == 0 { Player::Alice } else { Player::Bob };
            let seat = if me == Player::Alice { &mut *alice } else { &mut *bob };
            let (mv, text) = match seat {
                Seat::Policy(actor) => {
                    let (opening, history) = perspective(&texts, me);
                    let view = DialogueView { opening, history: &history };
                    let a = actor.act(&view, rng)?;
                    if a >= self.bank.num_templates() {
                        return Err(EnvError::ActionOutOfBank(a));
                    }
                    (self.intent_move(self.bank.intent_of(a)), self.bank.render(a, &noise, rng))
                }
                Seat::Scripted(opp) => {
                    let state = OfferState { game: self, me, pending: pending.map(|p| p.0), offers_made: offers, history: &moves };
                    let mv = opp.respond(&state);
                    (mv, self.bank.render_intent(self.move_intent(mv), &noise, rng))
                }
            };
            texts.push(text);
            moves.push((me, mv));
            match mv {
                Move::Accept => {
                    deal = pending;
                    break;
                }
                Move::Offer(level) => {
                    if offers == self.max_offers() {
                        break;
                    }
                    offers += 1;
                    pending = Some((level, me, offers));
                }
            }
        }
        let outcome = self.outcome(game_id, deal, texts.len() as u32);
        let task = self.task();
        let build = |player: Player, opening: Option<&String>, first: usize| {
            let steps = (first..texts.len())
                .step_by(2)
                .enumerate()
                .map(|(i, j)| Step {
                    t: i as u32 + 1,
                    action: Utterance::agent(texts[j].clone()),
                    observation: texts.get(j + 1).map(|o| Utterance::environment(o.clone())),
                })
                .collect();
            Trajectory {
                game_id: game_id.to_string(),
                task,
                player,
                opening: opening.map(|o| Utterance::environment(o.clone())),
                steps,
                terminal_reward: self.reward(&outcome, player),
            }
        };
        let alice_traj = build(Player::Alice, None, 0);
        let bob_traj = (texts.len() > 1).then(|| build(Player::Bob, texts.first(), 1));
        Ok(GameRecord { alice: alice_traj, bob: bob_traj, outcome })
    }
}

/// Opening and completed (own, reply) pairs from one player's side of the transcript.
fn perspective(texts: &[String], me: Player) -> (Option<&str>, Vec<(String, String)>) {
    let (opening, first) = match me {
        Player::Bob => (texts.first().map(String::as_str), 1),
        _ => (None, 0),
    };
    let history = texts[first.min(texts.len())..]
        .chunks_exact(2)
        .map(|c| (c[0].clone(), c[1].clone()))
        .collect();
    (opening, history)
}

/// The agent plays one seat against a scripted opponent.
pub struct OfferArena {
    pub game: OfferGame,
    pub opponent: super::opponents::OpponentStyle,
    pub agent_role: Player,
}

impl OfferArena {
    pub fn play_record(&self, actor: &dyn Actor, game_id: &str, rng: &mut ChaCha8Rng) -> Result<GameRecord, EnvError> {
        let opp = Seat::Scripted(self.opponent.build(rng.random()));
        let me = Seat::Policy(actor);
        let (mut a, mut b) = if self.agent_role == Player::Bob { (opp, me) } else { (me, opp) };
        self.game.play(&mut a, &mut b, game_id, rng)
    }
}

impl Environment for OfferArena {
    fn task(&self) -> Task {
        self.game.task()
    }

    fn action_bank(&self) -> &IntentTemplateBank {
        &self.game.bank
    }

    fn play(&self, actor: &dyn Actor, game_id: String, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
        let rec = self.play_record(actor, &game_id, rng)?;
        match self.agent_role {
            Player::Bob => rec.bob.ok_or_else(|| EnvError::Game { game: game_id, msg: "agent never moved".into() }),
            _ => Ok(rec.alice),
        }
    }
}

/// Twelve stand-in configurations: six bargaining `(δ_A, δ_B, T)` and six negotiation
/// `(V_A, V_B, T)` settings.
pub fn config_grid() -> Vec<OfferGameSpec> {
    let bargain = [(1.0, 1.0, 20), (0.95, 0.95, 20), (0.9, 0.95, 20), (0.95, 0.9, 20), (0.9, 0.9, 10), (0.8, 0.8, 10)];
    let negotiate = [(80.0, 120.0, 20), (90.0, 120.0, 20), (100.0, 120.0, 20), (80.0, 110.0, 20), (90.0, 110.0, 10), (100.0, 130.0, 10)];
    let noise = NoiseConfig::default();
    bargain
        .iter()
        .map(|&(delta_a, delta_b, t)| OfferGameSpec { kind: OfferKind::Bargain(BargainSpec { m: 100.0, t, delta_a, delta_b }), noise })
        .chain(negotiate.iter().map(|&(v_a, v_b, t)| OfferGameSpec {
            kind: OfferKind::Negotiate(NegotiationSpec { v: 100.0, v_a, v_b, t, alternating: true }),
            noise,
        }))
        .collect()
}
