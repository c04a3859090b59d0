//! Decreasing backpropagation: per-layer gradient scales annealed over tasks.
//!
//! Layer depth `l` counts from the head (`l = 0`) toward the input. After
//! `n` tasks a layer's parameter gradients are multiplied by
//! `1 − l·f + l·f·a^{−n}`, which starts at 1 and decays to `1 − l·f`.
//! Only parameter gradients are scaled; the error signal passed between
//! layers is left untouched, so factors never compound through depth.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DbpConfig {
    /// Decrease factor `f`.
    pub f: f64,
    /// Speed factor `a`.
    pub a: f64,
}

impl Default for DbpConfig {
    fn default() -> Self {
        DbpConfig { f: 0.15, a: 1.005 }
    }
}

impl DbpConfig {
    /// Checks `a > 1`, `f ≥ 0` and that the deepest layer keeps a positive asymptote.
    pub fn validate(&self, max_depth: usize) -> Result<()> {
        if !(self.f >= 0.0 && self.f.is_finite()) {
            return Err(Error::Config(format!("dbp.f must be a nonnegative number, got {}", self.f)));
        }
        if !(self.a > 1.0 && self.a.is_finite()) {
            return Err(Error::Config(format!("dbp.a must exceed 1, got {}", self.a)));
        }
        check_depth(max_depth, self.f)
    }
}

fn check_depth(l: usize, f: f64) -> Result<()> {
    if l as f64 * f >= 1.0 {
        return Err(Error::Config(format!(
            "asymptotic factor nonpositive: depth {l} × f {f} ≥ 1"
        )));
    }
    Ok(())
}

/// Gradient factor of a layer at depth `l` after `n` completed tasks.
///
/// Written as `1 − l·f·(1 − a^{−n})` so that `n = 0` gives exactly 1.
pub fn dbp_factor(n: u64, l: usize, f: f64, a: f64) -> Result<f64> {
    check_depth(l, f)?;
    if !(a > 1.0) {
        return Err(Error::Config(format!("dbp.a must exceed 1, got {a}")));
    }
    let decay = a.powf(-(n as f64));
    Ok(1.0 - l as f64 * f * (1.0 - decay))
}

/// Depth of each trainable layer, input side first: the head gets 0 and
/// each step toward the input adds one.
pub fn assign_depths(n_trainable: usize) -> Vec<usize> {
    (0..n_trainable).map(|t| n_trainable - 1 - t).collect()
}

/// Scheduler state: the depth map plus the task counter.
#[derive(Debug, Clone, PartialEq)]
pub struct DbpSchedule {
    config: DbpConfig,
    depths: Vec<usize>,
    task: u64,
}

impl DbpSchedule {
    pub fn new(config: DbpConfig, n_trainable: usize) -> Result<Self> {
        let depths = assign_depths(n_trainable);
        config.validate(depths.first().copied().unwrap_or(0))?;
        Ok(DbpSchedule {
            config,
            depths,
            task: 0,
        })
    }

    pub fn task_index(&self) -> u64 {
        self.task
    }

    pub fn depths(&self) -> &[usize] {
        &self.depths
    }

    /// Called once at each task boundary.
    pub fn advance_task(&mut self) {
        self.task += 1;
    }

    /// Current factor for every trainable layer, input side first.
    pub fn factors(&self) -> Vec<f64> {
        self.factors_at(self.task)
    }

    pub fn factors_at(&self, n: u64) -> Vec<f64> {
        self.depths
            .iter()
            .map(|&l| dbp_factor(n, l, self.config.f, self.config.a).expect("validated at construction"))
            .collect()
    }

    /// Limit of [`Self::factors`] as the task count grows.
    pub fn asymptotic_factors(&self) -> Vec<f64> {
        self.depths.iter().map(|&l| 1.0 - l as f64 * self.config.f).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_task_is_exactly_one() {
        for l in 0..6 {
            assert_eq!(dbp_factor(0, l, 0.15, 1.005).unwrap(), 1.0);
        }
    }

    #[test]
    fn thousandth_task_value() {
        // 1 − 0.75·(1 − 1.005^−1000), evaluated independently in high precision
        let v = dbp_factor(1000, 5, 0.15, 1.005).unwrap();
        assert!((v - 0.255_116_812_545_558_5).abs() < 1e-12, "{v}");
        assert!((v - 0.25512).abs() < 5e-6);
    }

    #[test]
    fn nonpositive_asymptote_rejected() {
        let err = dbp_factor(3, 5, 0.2, 1.005).unwrap_err();
        assert!(err.to_string().contains("asymptotic factor nonpositive"));
        assert!(DbpSchedule::new(DbpConfig { f: 0.2, a: 1.005 }, 6).is_err());
        assert!(DbpSchedule::new(DbpConfig { f: 0.2, a: 1.005 }, 5).is_ok());
    }

    #[test]
    fn depths_and_asymptotes_for_six_layers() {
        let s = DbpSchedule::new(DbpConfig::default(), 6).unwrap();
        assert_eq!(s.depths(), &[5, 4, 3, 2, 1, 0]);
        let want = [0.25, 0.40, 0.55, 0.70, 0.85, 1.0];
        for (got, want) in s.asymptotic_factors().iter().zip(want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn counter_moves_only_on_advance() {
        let mut s = DbpSchedule::new(DbpConfig::default(), 6).unwrap();
        assert!(s.factors().iter().all(|&f| f == 1.0));
        s.advance_task();
        assert_eq!(s.task_index(), 1);
        assert!(s.factors()[0] < 1.0);
        assert_eq!(s.factors()[5], 1.0);
    }

    #[test]
    fn zero_decrease_is_identity() {
        let s = DbpSchedule::new(DbpConfig { f: 0.0, a: 1.005 }, 6).unwrap();
        assert!(s.factors_at(12345).iter().all(|&f| f == 1.0));
    }
}
