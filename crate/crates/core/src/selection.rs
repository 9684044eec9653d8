//! Loss/heterogeneity trade-off scores and threshold-based worker selection.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SelectionError {
    #[error("tau must lie in [0, 1], got {0}")]
    TauOutOfRange(f64),
    #[error("no workers to select from")]
    Empty,
}

/// theta = tau * f + (1 - tau) * eta
pub fn tradeoff_score(f: f64, eta: f64, tau: f64) -> Result<f64, SelectionError> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(SelectionError::TauOutOfRange(tau));
    }
    Ok(tau * f + (1.0 - tau) * eta)
}

/// Mean score over all workers, selected or not.
pub fn avg_threshold(theta: &[f64]) -> Result<f64, SelectionError> {
    if theta.is_empty() {
        return Err(SelectionError::Empty);
    }
    Ok(theta.iter().sum::<f64>() / theta.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRound {
    pub round: usize,
    pub theta: Vec<f64>,
    /// Previous round's mean score; `None` in the bootstrap round.
    pub threshold: Option<f64>,
    pub indicator: Vec<bool>,
    /// No score met the threshold and the best single worker was taken.
    pub fallback: bool,
}

impl SelectionRound {
    pub fn num_selected(&self) -> usize {
        self.indicator.iter().filter(|&&s| s).count()
    }

    pub fn selected(&self) -> impl Iterator<Item = usize> + '_ {
        self.indicator
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| s.then_some(i))
    }
}

/// Index of the smallest value; the lowest index wins ties.
pub fn argmin(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] <= v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Largest participation subject to theta_i * s_i <= threshold.
///
/// Round 1 (no threshold yet) selects everyone. Otherwise every worker with
/// `theta_i <= threshold` is selected; if none qualifies the argmin worker
/// is taken and the round is flagged as a fallback.
pub fn select_workers(
    theta: &[f64],
    threshold_prev: Option<f64>,
    round: usize,
) -> Result<SelectionRound, SelectionError> {
    if theta.is_empty() {
        return Err(SelectionError::Empty);
    }
    let (indicator, fallback) = match threshold_prev {
        Some(bar) if round > 1 => {
            let ind: Vec<bool> = theta.iter().map(|&t| t <= bar).collect();
            if ind.iter().any(|&s| s) {
                (ind, false)
            } else {
                let best = argmin(theta).expect("non-empty");
                let mut ind = vec![false; theta.len()];
                ind[best] = true;
                (ind, true)
            }
        }
        _ => (vec![true; theta.len()], false),
    };
    Ok(SelectionRound {
        round,
        theta: theta.to_vec(),
        threshold: threshold_prev,
        indicator,
        fallback,
    })
}

/// Exactly the single lowest-score worker.
pub fn select_single_best(theta: &[f64], round: usize) -> Result<SelectionRound, SelectionError> {
    let best = argmin(theta).ok_or(SelectionError::Empty)?;
    let mut indicator = vec![false; theta.len()];
    indicator[best] = true;
    Ok(SelectionRound {
        round,
        theta: theta.to_vec(),
        threshold: None,
        indicator,
        fallback: false,
    })
}

pub fn select_all(theta: &[f64], round: usize) -> SelectionRound {
    SelectionRound {
        round,
        theta: theta.to_vec(),
        threshold: None,
        indicator: vec![true; theta.len()],
        fallback: false,
    }
}
