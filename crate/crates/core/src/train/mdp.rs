//! Finite MDPs with clustered actions: exact policy evaluation and the gradient bias of
//! cluster-pooled advantages.

use super::policy::PolicyParams;
use super::TrainError;
use crate::envs::agent::ContextKey;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const ROW_TOL: f64 = 1e-12;

/// States stand for truncated histories; actions are partitioned into clusters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularMdpSpec {
    pub n_states: usize,
    pub n_actions: usize,
    /// `r(s, a)` at `s·|A| + a`.
    pub rewards: Vec<f64>,
    /// `P(s'|s, a)` at `(s·|A| + a)·|S| + s'`.
    pub transitions: Vec<f64>,
    pub initial: Vec<f64>,
    pub gamma: f64,
    /// Cluster id per action.
    pub clusters: Vec<usize>,
    pub epsilon: f64,
}

/// Parameters of a seeded family `r = r_base + ε·u`, `P = (1 − ε)·P_base + ε·Q`, where
/// the base terms are shared within a cluster and `u ∈ [−½, ½]`, `Q` are per action.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdpFamily {
    pub n_states: usize,
    pub n_clusters: usize,
    pub per_cluster: usize,
    pub gamma: f64,
    pub seed: u64,
}

fn random_distribution(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let w: Vec<f64> = (0..n).map(|_| -rng.random::<f64>().max(1e-12).ln()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

fn tv(p: &[f64], q: &[f64]) -> f64 {
    0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>()
}

impl MdpFamily {
    pub fn member(&self, epsilon: f64) -> TabularMdpSpec {
        let (s_n, a_n) = (self.n_states, self.n_clusters * self.per_cluster);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let base_r: Vec<f64> = (0..s_n * self.n_clusters).map(|_| rng.random_range(0.1..0.9)).collect();
        let base_p: Vec<Vec<f64>> = (0..s_n * self.n_clusters).map(|_| random_distribution(s_n, &mut rng)).collect();
        let u: Vec<f64> = (0..s_n * a_n).map(|_| rng.random_range(-0.5..=0.5)).collect();
        let q: Vec<Vec<f64>> = (0..s_n * a_n).map(|_| random_distribution(s_n, &mut rng)).collect();
        let clusters: Vec<usize> = (0..a_n).map(|a| a / self.per_cluster).collect();
        let mut rewards = Vec::with_capacity(s_n * a_n);
        let mut transitions = Vec::with_capacity(s_n * a_n * s_n);
        for s in 0..s_n {
            for a in 0..a_n {
                let c = s * self.n_clusters + clusters[a];
                rewards.push(base_r[c] + epsilon * u[s * a_n + a]);
                transitions.extend(base_p[c].iter().zip(&q[s * a_n + a]).map(|(b, x)| (1.0 - epsilon) * b + epsilon * x));
            }
        }
        TabularMdpSpec {
            n_states: s_n,
            n_actions: a_n,
            rewards,
            transitions,
            initial: vec![1.0 / s_n as f64; s_n],
            gamma: self.gamma,
            clusters,
            epsilon,
        }
    }
}

impl TabularMdpSpec {
    pub fn reward(&self, s: usize, a: usize) -> f64 {
        self.rewards[s * self.n_actions + a]
    }

    pub fn row(&self, s: usize, a: usize) -> &[f64] {
        let i = (s * self.n_actions + a) * self.n_states;
        &self.transitions[i..i + self.n_states]
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let (sn, an) = (self.n_states, self.n_actions);
        if sn == 0 || an == 0 {
            return Err(TrainError::Mdp("empty state or action set".into()));
        }
        if self.rewards.len() != sn * an || self.transitions.len() != sn * an * sn || self.initial.len() != sn || self.clusters.len() != an {
            return Err(TrainError::Mdp("array shapes do not match |S| and |A|".into()));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(TrainError::Mdp(format!("discount {} outside (0, 1)", self.gamma)));
        }
        if self.rewards.iter().any(|r| !r.is_finite()) {
            return Err(TrainError::Mdp("non-finite reward".into()));
        }
        for s in 0..sn {
            for a in 0..an {
                let row = self.row(s, a);
                if row.iter().any(|p| *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
                    return Err(TrainError::Mdp(format!("transition row (s={s}, a={a}) is not a distribution")));
                }
            }
        }
        if (self.initial.iter().sum::<f64>() - 1.0).abs() > ROW_TOL {
            return Err(TrainError::Mdp("initial distribution does not sum to 1".into()));
        }
        for s in 0..sn {
            for a in 0..an {
                for b in a + 1..an {
                    if self.clusters[a] != self.clusters[b] {
                        continue;
                    }
                    let dr = (self.reward(s, a) - self.reward(s, b)).abs();
                    let dp = tv(self.row(s, a), self.row(s, b));
                    if dr > self.epsilon + ROW_TOL || dp > self.epsilon + ROW_TOL {
                        return Err(TrainError::NotBisimilar(format!(
                            "actions {a} and {b} in state {s} (reward gap {dr:.3e}, TV {dp:.3e}, ε = {})",
                            self.epsilon
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Softmax policy with one context per state and seeded logits of the given scale.
    pub fn random_policy(&self, seed: u64, scale: f64) -> PolicyParams {
        let mut p = PolicyParams::new(self.n_actions, 0.0, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for s in 0..self.n_states {
            p.ensure_context(&state_key(s));
        }
        for l in p.logits_mut() {
            *l = rng.random_range(-scale..=scale);
        }
        p
    }
}

pub fn state_key(s: usize) -> ContextKey {
    ContextKey(vec![s as u32])
}

fn policy_matrix(spec: &TabularMdpSpec, p: &PolicyParams) -> Result<Vec<Vec<f64>>, TrainError> {
    if p.num_actions != spec.n_actions {
        return Err(TrainError::Mdp("policy and MDP disagree on |A|".into()));
    }
    (0..spec.n_states)
        .map(|s| p.block(&state_key(s)).map(|b| p.block_probs(b)).ok_or_else(|| TrainError::UnknownContext(state_key(s).0)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEvaluation {
    pub v: Vec<f64>,
    /// `Q(s, a)` at `s·|A| + a`.
    pub q: Vec<f64>,
    /// Normalized discounted state visitation `(1 − γ) Σₜ γᵗ Pr(sₜ = s)`.
    pub visitation: Vec<f64>,
}

/// Exact `V^π`, `Q^π` and visitation by LU solves.
pub fn evaluate_policy(spec: &TabularMdpSpec, p: &PolicyParams) -> Result<PolicyEvaluation, TrainError> {
    spec.validate()?;
    let pi = policy_matrix(spec, p)?;
    let (sn, an, g) = (spec.n_states, spec.n_actions, spec.gamma);
    let mut m = DMatrix::<f64>::identity(sn, sn);
    let mut r = DVector::<f64>::zeros(sn);
    for s in 0..sn {
        for a in 0..an {
            r[s] += pi[s][a] * spec.reward(s, a);
            for (t, pt) in spec.row(s, a).iter().enumerate() {
                m[(s, t)] -= g * pi[s][a] * pt;
            }
        }
    }
    let lu = m.clone().lu();
    let v = lu.solve(&r).ok_or_else(|| TrainError::Mdp("singular evaluation system".into()))?;
    let mu = DVector::from_column_slice(&spec.initial);
    let d = m.transpose().lu().solve(&mu).ok_or_else(|| TrainError::Mdp("singular visitation system".into()))? * (1.0 - g);
    let v: Vec<f64> = v.iter().copied().collect();
    let q = (0..sn)
        .flat_map(|s| (0..an).map(move |a| (s, a)))
        .map(|(s, a)| spec.reward(s, a) + g * spec.row(s, a).iter().zip(&v).map(|(p, x)| p * x).sum::<f64>())
        .collect();
    Ok(PolicyEvaluation { v, q, visitation: d.iter().copied().collect() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BiasReport {
    pub epsilon: f64,
    /// `E_{s∼d, a∼π}[∇log π(a|s)·(A(s,a) − Ã(s,a))]`.
    pub bias: Vec<f64>,
    pub bias_norm: f64,
    /// `2·max‖∇log π‖/(1 − γ)`, so that `‖bias‖ ≤ C·ε`.
    pub c_cert: f64,
    pub max_q_spread: f64,
    /// `2ε/(1 − γ)`.
    pub q_spread_bound: f64,
}

/// Exact gradient bias of replacing `Q(s,a)` by its π-weighted cluster mean.
pub fn measure_gradient_bias(spec: &TabularMdpSpec, p: &PolicyParams) -> Result<BiasReport, TrainError> {
    let ev = evaluate_policy(spec, p)?;
    let pi = policy_matrix(spec, p)?;
    let (sn, an) = (spec.n_states, spec.n_actions);
    let q = |s: usize, a: usize| ev.q[s * an + a];
    let mut bias = vec![0.0; p.num_params()];
    let mut max_score: f64 = 0.0;
    let mut max_spread: f64 = 0.0;
    for s in 0..sn {
        let block = p.block(&state_key(s)).expect("state registered");
        for a in 0..an {
            let members: Vec<usize> = (0..an).filter(|&b| spec.clusters[b] == spec.clusters[a]).collect();
            let mass: f64 = members.iter().map(|&b| pi[s][b]).sum();
            let gap: f64 = members.iter().map(|&b| pi[s][b] / mass * (q(s, a) - q(s, b))).sum();
            for &b in &members {
                max_spread = max_spread.max((q(s, a) - q(s, b)).abs());
            }
            let (_, grad) = p.block_log_prob_and_grad(block, a)?;
            max_score = max_score.max(grad.iter().map(|x| x * x).sum::<f64>().sqrt());
            let w = ev.visitation[s] * pi[s][a] * gap;
            for (x, g) in bias[block * an..(block + 1) * an].iter_mut().zip(&grad) {
                *x += w * g;
            }
        }
    }
    let bias_norm = bias.iter().map(|x| x * x).sum::<f64>().sqrt();
    Ok(BiasReport {
        epsilon: spec.epsilon,
        bias,
        bias_norm,
        c_cert: 2.0 * max_score / (1.0 - spec.gamma),
        max_q_spread: max_spread,
        q_spread_bound: 2.0 * spec.epsilon / (1.0 - spec.gamma),
    })
}
