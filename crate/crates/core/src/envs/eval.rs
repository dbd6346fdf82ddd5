//! Evaluation formulas: average final reward for the guessing game and win rates for
//! the alternating-offer games.

use super::offers::GameOutcome;
use super::EnvError;
use crate::traj::{Player, Task, Trajectory};
use serde::Serialize;
use std::io::Write;

/// Fraction of trajectories with terminal reward exactly 1.
pub fn eval_average_final_reward(trajs: &[Trajectory]) -> Result<f64, EnvError> {
    if trajs.is_empty() {
        return Err(EnvError::Eval("no trajectories".into()));
    }
    let mut wins = 0usize;
    for t in trajs {
        if t.terminal_reward == 1.0 {
            wins += 1;
        } else if t.terminal_reward != 0.0 {
            return Err(EnvError::Eval(format!("game {} has non-binary reward {}", t.game_id, t.terminal_reward)));
        }
    }
    Ok(wins as f64 / trajs.len() as f64)
}

fn win_rate(games: &[GameOutcome], role: Player, task: Task) -> Result<f64, EnvError> {
    if games.is_empty() {
        return Err(EnvError::Eval("no games".into()));
    }
    let mut wins = 0usize;
    for g in games {
        if g.task != task {
            return Err(EnvError::Eval(format!("game {} is a {} game, expected {task}", g.game_id, g.task)));
        }
        let (Some(a), Some(b)) = (g.payoff_a, g.payoff_b) else {
            return Err(EnvError::Eval(format!("game {} is missing a payoff", g.game_id)));
        };
        let won = match role {
            Player::Alice => a > b,
            Player::Bob => b > a,
            Player::Solo => return Err(EnvError::Eval("win rate needs alice or bob".into())),
        };
        wins += won as usize;
    }
    Ok(wins as f64 / games.len() as f64)
}

/// Share of games where `role`'s discounted payoff strictly exceeds the other's.
pub fn eval_win_rate_bargain(games: &[GameOutcome], role: Player) -> Result<f64, EnvError> {
    win_rate(games, role, Task::Bargain)
}

/// Share of games where `role`'s utility strictly exceeds the other's.
pub fn eval_win_rate_negotiation(games: &[GameOutcome], role: Player) -> Result<f64, EnvError> {
    win_rate(games, role, Task::Negotiate)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub task: String,
    pub role: String,
    pub metric: String,
    pub value: f64,
    #[serde(rename = "N")]
    pub n: usize,
}

/// Writes `task,role,metric,value,N` rows.
pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<(), csv::Error> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn traj(r: f64) -> Trajectory {
        Trajectory::from_texts("g", Task::Guess, Player::Solo, None, &[("Is it red?", None)], r)
    }

    fn game(a: f64, b: f64) -> GameOutcome {
        GameOutcome {
            game_id: "g".into(),
            task: Task::Bargain,
            t_ev: Some(1),
            p_ev: Some(0.5),
            price: None,
            payoff_a: Some(a),
            payoff_b: Some(b),
            turns: 2,
        }
    }

    #[test]
    fn counts_successes() {
        let mut ts: Vec<_> = (0..200).map(|i| traj(if i < 57 { 1.0 } else { 0.0 })).collect();
        assert_eq!(eval_average_final_reward(&ts).unwrap(), 0.285);
        ts[100].terminal_reward = 0.5;
        assert!(eval_average_final_reward(&ts).is_err());
    }

    #[test]
    fn ties_are_not_wins() {
        let ties = vec![game(50.0, 50.0); 25];
        assert_eq!(eval_win_rate_bargain(&ties, Player::Alice).unwrap(), 0.0);
        assert_eq!(eval_win_rate_bargain(&ties, Player::Bob).unwrap(), 0.0);
        let mut missing = game(1.0, 0.0);
        missing.payoff_b = None;
        assert!(eval_win_rate_bargain(&[missing], Player::Alice).is_err());
    }

    #[test]
    fn summary_csv_header() {
        let mut buf = Vec::new();
        let row = SummaryRow { task: "guess".into(), role: "solo".into(), metric: "average_final_reward".into(), value: 0.5, n: 4 };
        write_summary_csv(&[row], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "task,role,metric,value,N\nguess,solo,average_final_reward,0.5,4\n");
    }
}
