//! Wrapper feature selection: sine-cosine population search refined by
//! adaptive β hill climbing.

mod abhc;
mod fitness;
mod sca;

use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

pub use abhc::{abhc_refine, abhc_schedules, AbhcConfig};
pub use fitness::{f1_score, LogisticProxy, MaskFitness, Sphere};
pub use sca::{r1_schedule, sca_run, sca_step, ScaConfig, ScaOutcome, TraceRow};

#[derive(Debug, Error)]
pub enum SelectError {
    #[error("parameter error: {0}")]
    Param(String),
    #[error("fitness error: {0}")]
    Fitness(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SelectError>;

/// Threshold transfer rule from a continuous position to a feature mask.
pub fn transfer(position: &[f64]) -> Vec<bool> {
    position.iter().map(|&p| p >= 0.5).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub position: Vec<f64>,
    pub mask: Vec<bool>,
    pub fitness: Option<f64>,
}

impl Candidate {
    pub fn new(position: Vec<f64>) -> Self {
        let mask = transfer(&position);
        Self { position, mask, fitness: None }
    }

    pub fn selected(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    pub fn evaluate<O: Objective + ?Sized>(&mut self, objective: &mut O) -> Result<f64> {
        let f = objective.evaluate(&self.position, &self.mask)?;
        self.fitness = Some(f);
        Ok(f)
    }
}

/// Quantity the selector maximizes.
pub trait Objective {
    fn dim(&self) -> usize;
    fn evaluate(&mut self, position: &[f64], mask: &[bool]) -> Result<f64>;
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub sca: ScaOutcome,
    /// The SCA best after local refinement.
    pub refined: Candidate,
}

/// SCA followed by AβHC on the SCA incumbent.
pub fn select_features<O: Objective + ?Sized>(objective: &mut O, sca: &ScaConfig, abhc: &AbhcConfig) -> Result<Selection> {
    let outcome = sca_run(objective, sca)?;
    let mut rng = crate::rng::stream(sca.seed, "abhc", 0);
    let refined = abhc_refine(&outcome.best, objective, abhc, &mut rng)?;
    Ok(Selection { sca: outcome, refined })
}

/// `iteration,best_fitness,mean_fitness,selected_count`
pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut s = String::from("iteration,best_fitness,mean_fitness,selected_count\n");
    for r in trace {
        writeln!(s, "{},{:?},{:?},{}", r.iteration, r.best_fitness, r.mean_fitness, r.selected_count).expect("string write");
    }
    std::fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transfer_rule() {
        assert_eq!(transfer(&[0.0, 0.49, 0.5, 1.0]), [false, false, true, true]);
        let c = Candidate::new(vec![0.7, 0.2]);
        assert_eq!(c.selected(), 1);
    }
}
