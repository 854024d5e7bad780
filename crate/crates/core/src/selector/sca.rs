use std::f64::consts::TAU;

use rand::Rng;

use super::{Candidate, Objective, Result, SelectError};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaConfig {
    pub population: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub seed: u64,
}

impl Default for ScaConfig {
    fn default() -> Self {
        Self { population: 10, iterations: 30, alpha: 2.0, seed: 0 }
    }
}

impl ScaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.population < 2 || self.iterations < 1 {
            return Err(SelectError::Param(format!(
                "need population >= 2 and iterations >= 1, got {} and {}",
                self.population, self.iterations
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(SelectError::Param(format!("alpha must be positive, got {}", self.alpha)));
        }
        Ok(())
    }
}

/// `r1 = α − t·α/T`.
pub fn r1_schedule(t: usize, total: usize, alpha: f64) -> Result<f64> {
    if total == 0 {
        return Err(SelectError::Param("total iterations must be positive".into()));
    }
    if t > total {
        return Err(SelectError::Param(format!("iteration {t} beyond {total}")));
    }
    Ok(alpha - t as f64 * alpha / total as f64)
}

/// Moves every candidate around the destination `best`, then clamps to
/// `[0, 1]` and refreshes masks. Candidate `i` draws from its own stream
/// keyed by `(seed, t, i)`.
pub fn sca_step(population: &mut [Candidate], best: &[f64], t: usize, config: &ScaConfig) -> Result<()> {
    let r1 = r1_schedule(t, config.iterations, config.alpha)?;
    for (i, cand) in population.iter_mut().enumerate() {
        let mut r = rng::stream2(config.seed, "sca.step", t as u64, i as u64);
        for (p, &d) in cand.position.iter_mut().zip(best) {
            let r2 = r.gen_range(0.0..=TAU);
            let r3 = r.gen_range(0.0..=2.0);
            let r4: f64 = r.gen();
            let wave = if r4 < 0.5 { r2.sin() } else { r2.cos() };
            *p = (*p + r1 * wave * (r3 * d - *p).abs()).clamp(0.0, 1.0);
        }
        *cand = Candidate::new(std::mem::take(&mut cand.position));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub iteration: usize,
    pub best_fitness: f64,
    pub mean_fitness: f64,
    pub selected_count: usize,
}

#[derive(Debug, Clone)]
pub struct ScaOutcome {
    pub best: Candidate,
    pub trace: Vec<TraceRow>,
}

/// Uniform initial population, then `T` rounds of evaluate, track the
/// incumbent, move. The population is evaluated once more after the last move.
pub fn sca_run<O: Objective + ?Sized>(objective: &mut O, config: &ScaConfig) -> Result<ScaOutcome> {
    config.validate()?;
    let d = objective.dim();
    if d == 0 {
        return Err(SelectError::Param("objective has no dimensions".into()));
    }
    let mut population: Vec<Candidate> = (0..config.population)
        .map(|i| {
            let mut r = rng::stream(config.seed, "sca.init", i as u64);
            Candidate::new((0..d).map(|_| r.gen::<f64>()).collect())
        })
        .collect();
    let mut best: Option<Candidate> = None;
    let mut trace = Vec::with_capacity(config.iterations + 1);
    for t in 0..=config.iterations {
        let mut sum = 0.0;
        for cand in &mut population {
            let f = cand.evaluate(objective)?;
            sum += f;
            if best.as_ref().is_none_or(|b| f > b.fitness.expect("incumbent is evaluated")) {
                best = Some(cand.clone());
            }
        }
        let inc = best.as_ref().expect("population is non-empty");
        trace.push(TraceRow {
            iteration: t,
            best_fitness: inc.fitness.expect("evaluated"),
            mean_fitness: sum / population.len() as f64,
            selected_count: inc.selected(),
        });
        if t < config.iterations {
            let dest = inc.position.clone();
            sca_step(&mut population, &dest, t, config)?;
        }
    }
    Ok(ScaOutcome { best: best.expect("population is non-empty"), trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::selector::Sphere;

    #[test]
    fn schedule_values() {
        assert_eq!(r1_schedule(0, 100, 2.0).unwrap(), 2.0);
        assert_eq!(r1_schedule(100, 100, 2.0).unwrap(), 0.0);
        assert_eq!(r1_schedule(50, 100, 2.0).unwrap(), 1.0);
        assert!(r1_schedule(0, 0, 2.0).is_err());
    }

    #[test]
    fn zero_step_at_the_end() {
        let cfg = ScaConfig { population: 3, iterations: 10, alpha: 2.0, seed: 4 };
        let mut pop: Vec<Candidate> = (0..3).map(|i| Candidate::new(vec![0.1 * i as f64, 0.9, 0.5])).collect();
        let before = pop.clone();
        sca_step(&mut pop, &[0.3, 0.3, 0.3], 10, &cfg).unwrap();
        for (a, b) in pop.iter().zip(&before) {
            assert_eq!(a.position, b.position);
        }
    }

    #[test]
    fn positions_stay_in_box() {
        let cfg = ScaConfig { population: 8, iterations: 20, alpha: 2.0, seed: 9 };
        let mut pop: Vec<Candidate> = (0..8).map(|i| Candidate::new(vec![i as f64 / 8.0; 6])).collect();
        for t in 0..20 {
            sca_step(&mut pop, &[1.0, 0.0, 0.5, 0.9, 0.1, 0.7], t, &cfg).unwrap();
            for c in &pop {
                assert_eq!(c.position.len(), 6);
                assert!(c.position.iter().all(|p| (0.0..=1.0).contains(p)));
                assert_eq!(c.mask, crate::selector::transfer(&c.position));
            }
        }
    }

    #[test]
    fn run_is_monotone_and_deterministic() {
        let cfg = ScaConfig { population: 10, iterations: 40, alpha: 2.0, seed: 1 };
        let a = sca_run(&mut Sphere::new(4), &cfg).unwrap();
        let b = sca_run(&mut Sphere::new(4), &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.best, b.best);
        assert_eq!(a.trace.len(), 41);
        assert!(a.trace.windows(2).all(|w| w[1].best_fitness >= w[0].best_fitness));
    }
}
