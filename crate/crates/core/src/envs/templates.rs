//! Surface paraphrase templates grouped by intent, with bounded lexical noise.

use super::EnvError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Filler prefixes the noise model may prepend.
pub const FILLERS: [&str; 4] = ["Okay. ", "Hmm. ", "Well, ", "Alright, "];

/// Canonical word → replacement. Replacements never occur in templates, so the swap
/// is invertible.
pub const SYNONYMS: [(&str, &str); 6] = [
    ("item", "object"),
    ("think", "believe"),
    ("really", "truly"),
    ("split", "divide"),
    ("price", "amount"),
    ("quite", "fairly"),
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub filler_prob: f64,
    pub synonym_prob: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self { filler_prob: 0.3, synonym_prob: 0.3 }
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { filler_prob: 0.0, synonym_prob: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intent {
    pub name: String,
    pub templates: Vec<String>,
}

impl Intent {
    pub fn new(name: impl Into<String>, templates: impl IntoIterator<Item = String>) -> Self {
        Self { name: name.into(), templates: templates.into_iter().collect() }
    }
}

/// Intents with their paraphrases; templates are numbered globally in intent order.
#[derive(Debug, Clone, PartialEq)]
pub struct IntentTemplateBank {
    intents: Vec<Intent>,
    template_intent: Vec<usize>,
    templates: Vec<String>,
    index: HashMap<String, usize>,
    intent_index: HashMap<String, usize>,
}

fn map_words(text: &str, from: &str, to: &str) -> String {
    text.split(' ')
        .map(|tok| {
            let core = tok.trim_end_matches(['?', '.', ',', '!', ':', ';']);
            if core == from {
                format!("{to}{}", &tok[core.len()..])
            } else {
                tok.to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn has_word(text: &str, word: &str) -> bool {
    text.split(' ').any(|tok| tok.trim_end_matches(['?', '.', ',', '!', ':', ';']) == word)
}

impl IntentTemplateBank {
    pub fn new(intents: Vec<Intent>) -> Result<Self, EnvError> {
        let mut template_intent = Vec::new();
        let mut templates = Vec::new();
        let mut index = HashMap::new();
        let mut intent_index = HashMap::new();
        for (i, intent) in intents.iter().enumerate() {
            if intent.templates.len() < 2 {
                return Err(EnvError::Spec(format!("intent {} needs at least 2 templates", intent.name)));
            }
            if intent_index.insert(intent.name.clone(), i).is_some() {
                return Err(EnvError::Spec(format!("intent {} declared twice", intent.name)));
            }
            for t in &intent.templates {
                if FILLERS.iter().any(|f| t.starts_with(f)) {
                    return Err(EnvError::Spec(format!("template {t:?} starts with a filler")));
                }
                if let Some((_, alt)) = SYNONYMS.iter().find(|(_, alt)| has_word(t, alt)) {
                    return Err(EnvError::Spec(format!("template {t:?} contains reserved word {alt:?}")));
                }
                if index.insert(t.clone(), templates.len()).is_some() {
                    return Err(EnvError::Spec(format!("template {t:?} appears twice")));
                }
                templates.push(t.clone());
                template_intent.push(i);
            }
        }
        Ok(Self { intents, template_intent, templates, index, intent_index })
    }

    pub fn intents(&self) -> &[Intent] {
        &self.intents
    }

    pub fn num_templates(&self) -> usize {
        self.templates.len()
    }

    pub fn templates(&self) -> &[String] {
        &self.templates
    }

    pub fn template(&self, i: usize) -> &str {
        &self.templates[i]
    }

    pub fn intent_of(&self, template: usize) -> usize {
        self.template_intent[template]
    }

    pub fn intent_name(&self, intent: usize) -> &str {
        &self.intents[intent].name
    }

    pub fn intent_index(&self, name: &str) -> Option<usize> {
        self.intent_index.get(name).copied()
    }

    /// Global template ids of an intent.
    pub fn templates_of(&self, intent: usize) -> Vec<usize> {
        (0..self.templates.len()).filter(|&t| self.template_intent[t] == intent).collect()
    }

    /// Renders a template with random fillers and synonym swaps.
    pub fn render<R: Rng + ?Sized>(&self, template: usize, noise: &NoiseConfig, rng: &mut R) -> String {
        let mut text = self.templates[template].clone();
        for (word, alt) in SYNONYMS {
            if has_word(&text, word) && rng.random_bool(noise.synonym_prob.clamp(0.0, 1.0)) {
                text = map_words(&text, word, alt);
            }
        }
        if rng.random_bool(noise.filler_prob.clamp(0.0, 1.0)) {
            let f = FILLERS[rng.random_range(0..FILLERS.len())];
            text = format!("{f}{text}");
        }
        text
    }

    /// Renders a random paraphrase of `intent`.
    pub fn render_intent<R: Rng + ?Sized>(&self, intent: usize, noise: &NoiseConfig, rng: &mut R) -> String {
        let options = self.templates_of(intent);
        let t = options[rng.random_range(0..options.len())];
        self.render(t, noise, rng)
    }

    /// Recovers the template behind a (possibly noisy) rendering.
    pub fn resolve(&self, text: &str) -> Result<usize, EnvError> {
        let mut s = text.trim();
        for f in FILLERS {
            if let Some(rest) = s.strip_prefix(f) {
                s = rest;
                break;
            }
        }
        let mut s = s.to_string();
        for (word, alt) in SYNONYMS {
            s = map_words(&s, alt, word);
        }
        self.index.get(&s).copied().ok_or_else(|| EnvError::UnknownUtterance(text.to_string()))
    }
}
