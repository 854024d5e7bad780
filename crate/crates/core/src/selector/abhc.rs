use rand::Rng;

use super::{Candidate, Objective, Result, SelectError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AbhcConfig {
    pub iterations: usize,
    /// Shape constant of the N schedule.
    pub p: f64,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for AbhcConfig {
    fn default() -> Self {
        Self { iterations: 30, p: 2.0, beta_min: 0.01, beta_max: 0.1 }
    }
}

impl AbhcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(SelectError::Param("AβHC needs at least one iteration".into()));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return Err(SelectError::Param(format!("P must be positive, got {}", self.p)));
        }
        if !(0.0 <= self.beta_min && self.beta_min <= self.beta_max && self.beta_max <= 1.0) {
            return Err(SelectError::Param(format!(
                "need 0 <= beta_min <= beta_max <= 1, got {} and {}",
                self.beta_min, self.beta_max
            )));
        }
        Ok(())
    }
}

/// `(N_HC, β_HC)` at iteration `t`:
/// `N = 1 − t^(1/P) / T^(1/P)`, `β = β_min + t·(β_max − β_min)/T`.
pub fn abhc_schedules(t: usize, config: &AbhcConfig) -> Result<(f64, f64)> {
    let total = config.iterations;
    if total == 0 {
        return Err(SelectError::Param("T_max must be positive".into()));
    }
    if t > total {
        return Err(SelectError::Param(format!("iteration {t} beyond {total}")));
    }
    let e = 1.0 / config.p;
    let n = 1.0 - (t as f64).powf(e) / (total as f64).powf(e);
    let beta = config.beta_min + t as f64 * (config.beta_max - config.beta_min) / total as f64;
    Ok((n, beta))
}

/// Greedy mask-space hill climbing from an evaluated candidate.
///
/// Each proposal flips one random bit with probability `N_HC`, then resets
/// each bit to a fair coin with probability `β_HC`. Only strict improvements
/// are accepted. Positions of changed bits are mirrored (`p → 1 − p`) so the
/// transfer rule still reproduces the mask.
pub fn abhc_refine<O: Objective + ?Sized, R: Rng + ?Sized>(
    seed: &Candidate,
    objective: &mut O,
    config: &AbhcConfig,
    rng: &mut R,
) -> Result<Candidate> {
    config.validate()?;
    let mut current = seed.clone();
    let mut fit = match current.fitness {
        Some(f) => f,
        None => current.evaluate(objective)?,
    };
    let d = current.mask.len();
    for t in 1..=config.iterations {
        let (n_hc, beta) = abhc_schedules(t, config)?;
        let mut mask = current.mask.clone();
        if rng.gen::<f64>() < n_hc {
            let j = rng.gen_range(0..d);
            mask[j] = !mask[j];
        }
        for m in &mut mask {
            if rng.gen::<f64>() < beta {
                *m = rng.gen_bool(0.5);
            }
        }
        if mask == current.mask {
            continue;
        }
        let position = current
            .position
            .iter()
            .zip(mask.iter().zip(&current.mask))
            .map(|(&p, (&new, &old))| if new == old { p } else { mirror(p, new) })
            .collect();
        let mut proposal = Candidate::new(position);
        debug_assert_eq!(proposal.mask, mask);
        let f = proposal.evaluate(objective)?;
        if f > fit {
            fit = f;
            current = proposal;
        }
    }
    Ok(current)
}

fn mirror(p: f64, selected: bool) -> f64 {
    let q = 1.0 - p;
    match (selected, q >= 0.5) {
        (true, true) | (false, false) => q,
        // p = 0.5 mirrors onto itself
        (false, true) => 0.5 - f64::EPSILON,
        (true, false) => 0.5,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::selector::Sphere;

    #[test]
    fn schedule_endpoints() {
        let cfg = AbhcConfig { iterations: 100, p: 2.0, beta_min: 0.01, beta_max: 0.1 };
        assert_eq!(abhc_schedules(0, &cfg).unwrap(), (1.0, 0.01));
        let (n, b) = abhc_schedules(100, &cfg).unwrap();
        assert_eq!(n, 0.0);
        assert!((b - 0.1).abs() < 1e-15);
        assert_eq!(abhc_schedules(25, &cfg).unwrap().0, 0.5);
        let zero = AbhcConfig { iterations: 0, ..cfg };
        assert!(abhc_schedules(0, &zero).is_err());
    }

    #[test]
    fn mirror_keeps_transfer_rule() {
        for p in [0.0, 0.2, 0.5, 0.7, 1.0] {
            assert!(mirror(p, true) >= 0.5);
            assert!(mirror(p, false) < 0.5);
        }
    }

    /// Mask objective counting agreement with a target.
    struct Target(Vec<bool>);

    impl Objective for Target {
        fn dim(&self) -> usize {
            self.0.len()
        }
        fn evaluate(&mut self, _: &[f64], mask: &[bool]) -> Result<f64> {
            Ok(mask.iter().zip(&self.0).filter(|(a, b)| a == b).count() as f64)
        }
    }

    #[test]
    fn never_worse() {
        let mut obj = Target(vec![true, false, true, true, false, false, true, false]);
        for s in 0..20 {
            let mut r = rng::stream(s, "abhc-test", 0);
            let mut c = Candidate::new((0..8).map(|_| r.gen::<f64>()).collect());
            let f0 = c.evaluate(&mut obj).unwrap();
            let out = abhc_refine(&c, &mut obj, &AbhcConfig::default(), &mut r).unwrap();
            assert!(out.fitness.unwrap() >= f0);
            assert_eq!(out.mask, crate::selector::transfer(&out.position));
        }
    }

    #[test]
    fn no_proposals_returns_seed() {
        // N_HC hits 0 only at T_max; with T_max = 1 the single step has N = 0
        let cfg = AbhcConfig { iterations: 1, p: 1.0, beta_min: 0.0, beta_max: 0.0 };
        let mut obj = Sphere::new(3);
        let mut c = Candidate::new(vec![0.1, 0.6, 0.9]);
        c.evaluate(&mut obj).unwrap();
        let out = abhc_refine(&c, &mut obj, &cfg, &mut rng::stream(0, "x", 0)).unwrap();
        assert_eq!(out, c);
    }
}
