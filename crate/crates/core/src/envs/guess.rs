//! Twenty-questions style guessing game.
//!
//! Item `i` has attribute `j` iff bit `j` of `i` is set, so asking about attributes in
//! bit order is a binary search. Distractor questions are answered "invalid". On a
//! guess the agent commits to a uniformly random item among those still consistent with
//! the answers, and wins with reward 1 if it is the hidden one.

use super::templates::{Intent, IntentTemplateBank, NoiseConfig};
use super::{Actor, DialogueView, EnvError, Environment};
use crate::traj::{Player, Step, Task, Trajectory, Utterance};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Long attribute phrases; each question intent shares its phrase across paraphrases.
const ATTRIBUTES: [&str; 8] = [
    "a living thing that grows",
    "larger than a loaf of bread",
    "usually kept inside a house",
    "something people can eat",
    "made mostly out of metal",
    "soft when you touch it",
    "painted in bright colors",
    "used nearly every single day",
];

const QUESTION_FRAMES: [&str; 4] = ["Is it {}?", "Is the item {}?", "Would you say it is {}?", "I wonder, is it {}?"];

const DISTRACTORS: [[&str; 4]; 3] = [
    [
        "What is your favorite color of paint?",
        "Tell me your favorite color of paint.",
        "Do you have a favorite color of paint?",
        "Name your favorite color of paint.",
    ],
    [
        "How was your long weekend trip to the lake?",
        "Tell me about your long weekend trip to the lake.",
        "Did you enjoy your long weekend trip to the lake?",
        "Describe your long weekend trip to the lake.",
    ],
    [
        "Can you count backwards from twenty by threes?",
        "Please count backwards from twenty by threes.",
        "Try to count backwards from twenty by threes.",
        "Now count backwards from twenty by threes.",
    ],
];

const GUESS: [&str; 4] = [
    "I am ready to make my final guess at the answer.",
    "Let me make my final guess at the answer.",
    "Now I make my final guess at the answer.",
    "Time to make my final guess at the answer.",
];

const ANSWERS: [(&str, [&str; 4]); 3] = [
    ("yes", ["Yes, that much is true.", "Yes indeed, that much is true.", "Oh yes, that much is true.", "Sure, that much is true."]),
    ("no", ["No, that is simply false.", "No no, that is simply false.", "Nope, that is simply false.", "Sorry, that is simply false."]),
    (
        "invalid",
        [
            "That is not a yes or no question.",
            "Sorry, not a yes or no question.",
            "I cannot answer, not a yes or no question.",
            "Please rephrase, not a yes or no question.",
        ],
    ),
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Answer {
    Yes,
    No,
    Invalid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GuessIntent {
    Ask(usize),
    Distractor(usize),
    Guess,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuessGameSpec {
    pub n_items: usize,
    pub n_distractors: usize,
    pub max_turns: usize,
    pub noise: NoiseConfig,
}

impl Default for GuessGameSpec {
    fn default() -> Self {
        Self::narrative_157()
    }
}

impl GuessGameSpec {
    /// 8 items, 3 attribute questions, 6 turns.
    pub fn desk() -> Self {
        Self { n_items: 8, n_distractors: 2, max_turns: 6, noise: NoiseConfig::default() }
    }

    pub fn narrative_157() -> Self {
        Self { n_items: 157, n_distractors: 3, max_turns: 20, noise: NoiseConfig::default() }
    }

    pub fn narrative_100() -> Self {
        Self { n_items: 100, n_distractors: 3, max_turns: 20, noise: NoiseConfig::default() }
    }

    /// ⌈log₂ n_items⌉ attribute questions.
    pub fn n_attributes(&self) -> usize {
        (usize::BITS - (self.n_items.max(2) - 1).leading_zeros()) as usize
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n_items < 2 || self.n_attributes() > ATTRIBUTES.len() {
            return Err(EnvError::Spec(format!("guess game supports 2..=256 items, got {}", self.n_items)));
        }
        if self.n_distractors > DISTRACTORS.len() {
            return Err(EnvError::Spec(format!("at most {} distractor intents", DISTRACTORS.len())));
        }
        if self.max_turns == 0 {
            return Err(EnvError::Spec("max_turns must be positive".into()));
        }
        Ok(())
    }

    /// Deterministic attribute oracle.
    pub fn answer(&self, item: usize, intent: GuessIntent) -> Answer {
        match intent {
            GuessIntent::Ask(j) if (item >> j) & 1 == 1 => Answer::Yes,
            GuessIntent::Ask(_) => Answer::No,
            _ => Answer::Invalid,
        }
    }
}

pub struct GuessGame {
    pub spec: GuessGameSpec,
    actions: IntentTemplateBank,
    answers: IntentTemplateBank,
}

impl GuessGame {
    pub fn new(spec: GuessGameSpec) -> Result<Self, EnvError> {
        spec.validate()?;
        let mut intents = Vec::new();
        for (j, attr) in ATTRIBUTES.iter().enumerate().take(spec.n_attributes()) {
            intents.push(Intent::new(format!("ask_{j}"), QUESTION_FRAMES.iter().map(|f| f.replace("{}", attr))));
        }
        for (j, d) in DISTRACTORS.iter().enumerate().take(spec.n_distractors) {
            intents.push(Intent::new(format!("distract_{j}"), d.iter().map(|s| s.to_string())));
        }
        intents.push(Intent::new("guess", GUESS.iter().map(|s| s.to_string())));
        let actions = IntentTemplateBank::new(intents)?;
        let answers = IntentTemplateBank::new(
            ANSWERS.iter().map(|(name, ts)| Intent::new(*name, ts.iter().map(|s| s.to_string()))).collect(),
        )?;
        Ok(Self { spec, actions, answers })
    }

    pub fn answer_bank(&self) -> &IntentTemplateBank {
        &self.answers
    }

    pub fn intent(&self, template: usize) -> GuessIntent {
        let name = self.actions.intent_name(self.actions.intent_of(template));
        if name == "guess" {
            GuessIntent::Guess
        } else if let Some(j) = name.strip_prefix("ask_") {
            GuessIntent::Ask(j.parse().expect("numbered intent"))
        } else {
            GuessIntent::Distractor(name.trim_start_matches("distract_").parse().expect("numbered intent"))
        }
    }

    /// Ground-truth intent label of any utterance of this game, actions first.
    pub fn intent_label(&self, text: &str) -> Option<usize> {
        if let Ok(t) = self.actions.resolve(text) {
            return Some(self.actions.intent_of(t));
        }
        self.answers.resolve(text).ok().map(|t| self.actions.intents().len() + self.answers.intent_of(t))
    }

    pub fn num_intents(&self) -> usize {
        self.actions.intents().len() + self.answers.intents().len()
    }

    /// Plays one game against a given hidden item.
    pub fn play_item(&self, actor: &dyn Actor, game_id: String, item: usize, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
        let noise = self.spec.noise;
        let mut consistent: Vec<usize> = (0..self.spec.n_items).collect();
        let mut history: Vec<(String, String)> = Vec::new();
        let mut steps = Vec::new();
        let mut reward = 0.0;
        for t in 1..=self.spec.max_turns {
            let a = actor.act(&DialogueView { opening: None, history: &history }, rng)?;
            if a >= self.actions.num_templates() {
                return Err(EnvError::ActionOutOfBank(a));
            }
            let action_text = self.actions.render(a, &noise, rng);
            let intent = self.intent(a);
            if intent == GuessIntent::Guess {
                let pick = consistent[rng.random_range(0..consistent.len())];
                reward = if pick == item { 1.0 } else { 0.0 };
                steps.push(Step { t: t as u32, action: Utterance::agent(action_text), observation: None });
                break;
            }
            let ans = self.spec.answer(item, intent);
            if let GuessIntent::Ask(j) = intent {
                let bit = (ans == Answer::Yes) as usize;
                consistent.retain(|c| (c >> j) & 1 == bit);
            }
            let ans_intent = match ans {
                Answer::Yes => 0,
                Answer::No => 1,
                Answer::Invalid => 2,
            };
            let obs_text = self.answers.render_intent(ans_intent, &noise, rng);
            steps.push(Step {
                t: t as u32,
                action: Utterance::agent(action_text.clone()),
                observation: Some(Utterance::environment(obs_text.clone())),
            });
            history.push((action_text, obs_text));
        }
        Ok(Trajectory { game_id, task: Task::Guess, player: Player::Solo, opening: None, steps, terminal_reward: reward })
    }
}

impl Environment for GuessGame {
    fn task(&self) -> Task {
        Task::Guess
    }

    fn action_bank(&self) -> &IntentTemplateBank {
        &self.actions
    }

    fn play(&self, actor: &dyn Actor, game_id: String, rng: &mut ChaCha8Rng) -> Result<Trajectory, EnvError> {
        let item = rng.random_range(0..self.spec.n_items);
        self.play_item(actor, game_id, item, rng)
    }
}

/// Asks the attribute questions in bit order, then guesses.
pub struct BinarySearchActor<'a> {
    pub game: &'a GuessGame,
}

impl Actor for BinarySearchActor<'_> {
    fn act(&self, view: &DialogueView<'_>, _rng: &mut ChaCha8Rng) -> Result<usize, EnvError> {
        let bank = self.game.action_bank();
        let asked = view.history.len();
        let name = if asked < self.game.spec.n_attributes() { format!("ask_{asked}") } else { "guess".into() };
        let intent = bank.intent_index(&name).expect("intent exists");
        Ok(bank.templates_of(intent)[0])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envs::game_rng;

    #[test]
    fn binary_search_always_wins() {
        for spec in [GuessGameSpec::desk(), GuessGameSpec::narrative_157(), GuessGameSpec::narrative_100()] {
            let game = GuessGame::new(spec.clone()).unwrap();
            let actor = BinarySearchActor { game: &game };
            let bits = spec.n_attributes();
            assert_eq!(bits, (spec.n_items as f64).log2().ceil() as usize);
            for item in 0..spec.n_items {
                let mut rng = game_rng(1, item as u64);
                let t = game.play_item(&actor, format!("g{item}"), item, &mut rng).unwrap();
                assert_eq!(t.terminal_reward, 1.0);
                assert_eq!(t.horizon(), bits + 1);
                assert!(crate::traj::validate_trajectory(&t).is_empty());
            }
        }
    }

    #[test]
    fn oracle_is_total() {
        let spec = GuessGameSpec::desk();
        for item in 0..spec.n_items {
            for j in 0..spec.n_attributes() {
                assert_ne!(spec.answer(item, GuessIntent::Ask(j)), Answer::Invalid);
            }
            assert_eq!(spec.answer(item, GuessIntent::Distractor(0)), Answer::Invalid);
        }
    }

    #[test]
    fn intent_labels_cover_both_banks() {
        let game = GuessGame::new(GuessGameSpec::desk()).unwrap();
        assert_eq!(game.intent_label("Okay. Is it a living thing that grows?"), Some(0));
        assert_eq!(game.intent_label("Yes, that much is true."), Some(game.action_bank().intents().len()));
        assert_eq!(game.intent_label("gibberish"), None);
    }
}
