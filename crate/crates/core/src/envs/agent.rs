//! Maps live dialogue text to cluster labels so a learned policy can act on it.

use super::DialogueView;
use crate::embed::{EmbedError, Embedder};
use crate::hac::{nearest_centroid_assign, ClusterAssignment};
use crate::aggregate::ProjectedTrajectory;
use crate::traj::{Speaker, Trajectory, TrajectorySet};
use std::collections::HashMap;
use std::sync::Mutex;

/// Marker for the opening slot in a context key.
pub const OPENING_MARK: u32 = u32::MAX;

/// Policy context: the last `W` projected `(action, observation)` events, flattened.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ContextKey(pub Vec<u32>);

impl ContextKey {
    /// Builds the key from an opening label and completed label pairs.
    pub fn from_labels(opening: Option<u32>, pairs: &[(u32, u32)], window: usize) -> Self {
        let events: Vec<(u32, u32)> = opening.map(|o| (OPENING_MARK, o)).into_iter().chain(pairs.iter().copied()).collect();
        let start = events.len().saturating_sub(window);
        Self(events[start..].iter().flat_map(|&(a, o)| [a, o]).collect())
    }
}

/// Text → label, exact for corpus utterances and nearest-centroid otherwise.
pub struct Projector {
    known: HashMap<(String, Speaker), u32>,
    embedder: Box<dyn Embedder>,
    assignment: ClusterAssignment,
    cache: Mutex<HashMap<String, u32>>,
}

impl Projector {
    pub fn new(set: &TrajectorySet, assignment: ClusterAssignment, embedder: Box<dyn Embedder>) -> Self {
        let known = set
            .corpus()
            .iter()
            .filter_map(|u| assignment.label(u.uid).map(|l| ((u.text.clone(), u.speaker), l)))
            .collect();
        Self { known, embedder, assignment, cache: Mutex::new(HashMap::new()) }
    }

    pub fn k(&self) -> usize {
        self.assignment.k
    }

    pub fn assignment(&self) -> &ClusterAssignment {
        &self.assignment
    }

    pub fn label(&self, text: &str, speaker: Speaker) -> Result<u32, EmbedError> {
        let text = text.trim();
        if let Some(&l) = self.known.get(&(text.to_string(), speaker)) {
            return Ok(l);
        }
        if let Some(&l) = self.cache.lock().expect("projector cache").get(text) {
            return Ok(l);
        }
        let v = self.embedder.embed(&[text.to_string()])?.pop().ok_or(EmbedError::EmptyInput)?;
        let l = nearest_centroid_assign(&self.assignment, &v).map_err(|e| EmbedError::Config(e.to_string()))?;
        self.cache.lock().expect("projector cache").insert(text.to_string(), l);
        Ok(l)
    }

    /// Labels of a live trajectory in the same layout as corpus projections.
    pub fn project(&self, traj: &Trajectory) -> Result<ProjectedTrajectory, EmbedError> {
        Ok(ProjectedTrajectory {
            opening: traj.opening.as_ref().map(|o| self.label(&o.text, o.speaker)).transpose()?,
            labels: traj
                .steps
                .iter()
                .map(|s| {
                    let o = s.observation.as_ref().map(|o| self.label(&o.text, o.speaker)).transpose()?;
                    Ok((self.label(&s.action.text, s.action.speaker)?, o))
                })
                .collect::<Result<_, EmbedError>>()?,
            terminal_reward: traj.terminal_reward,
        })
    }

    pub fn context(&self, view: &DialogueView<'_>, window: usize) -> Result<ContextKey, EmbedError> {
        let opening = view.opening.map(|o| self.label(o, Speaker::Environment)).transpose()?;
        let pairs = view
            .history
            .iter()
            .map(|(a, o)| Ok((self.label(a, Speaker::Agent)?, self.label(o, Speaker::Environment)?)))
            .collect::<Result<Vec<_>, EmbedError>>()?;
        Ok(ContextKey::from_labels(opening, &pairs, window))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_keeps_latest_events() {
        let k = ContextKey::from_labels(Some(9), &[(1, 2), (3, 4)], 2);
        assert_eq!(k.0, vec![1, 2, 3, 4]);
        let k = ContextKey::from_labels(Some(9), &[(1, 2)], 2);
        assert_eq!(k.0, vec![OPENING_MARK, 9, 1, 2]);
        assert_eq!(ContextKey::from_labels(None, &[], 2).0, Vec::<u32>::new());
    }
}
