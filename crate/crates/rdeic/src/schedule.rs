//! Noise schedule and relay weights.
//!
//! The forward chain adds Gaussian noise with per-step variance `beta_t`;
//! `alpha_bar_t` is the running product of `1 - beta_t`. The relay weight
//! sequence `eta_n` rescales the residual between compressed and target
//! latents so that the noisy mixture at the relay horizon `N` equals the
//! compressed latent plus schedule-level noise (`eta_N = 1`), while the
//! residual contribution vanishes toward `n = 1`.
//!
//! All schedule math is carried out in f64 regardless of tensor precision,
//! so the coefficient identities downstream hold to ~1e-15.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    /// Interpolate sqrt(beta) linearly, then square.
    ScaledLinear,
}

/// Beta/alpha sequences over `t = 1..=T`, stored 0-indexed internally.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

/// Schedule parameters as they appear in the experiment config file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub kind: ScheduleKind,
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Relay horizon N (largest diffusion step actually used).
    pub relay_n: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            kind: ScheduleKind::ScaledLinear,
            steps: 1000,
            beta_start: 0.00085,
            beta_end: 0.012,
            relay_n: 300,
        }
    }
}

impl NoiseSchedule {
    pub fn build(kind: ScheduleKind, t: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidSchedule("step count T must be >= 1".into()));
        }
        if !beta_start.is_finite() || !beta_end.is_finite() {
            return Err(Error::InvalidSchedule("non-finite beta endpoint".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidSchedule(format!(
                "need 0 < beta_start <= beta_end < 1, got [{beta_start}, {beta_end}]"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => linspace(beta_start, beta_end, t),
            ScheduleKind::ScaledLinear => linspace(beta_start.sqrt(), beta_end.sqrt(), t)
                .into_iter()
                .map(|b| b * b)
                .collect(),
        };
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(t);
        let mut prod = 1.0;
        for &a in &alphas {
            prod *= a;
            alpha_bars.push(prod);
        }
        Ok(Self {
            kind,
            betas,
            alphas,
            alpha_bars,
        })
    }

    pub fn from_config(cfg: &ScheduleConfig) -> Result<Self> {
        Self::build(cfg.kind, cfg.steps, cfg.beta_start, cfg.beta_end)
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t(&self) -> usize {
        self.betas.len()
    }

    fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t() {
            return Err(Error::StepOutOfRange(format!(
                "t = {t} outside [1, {}]",
                self.t()
            )));
        }
        Ok(())
    }

    /// `beta_t`, 1-based.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_t = 1 - beta_t`, 1-based.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t - 1]
    }

    /// Cumulative product `alpha_bar_t`, 1-based.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t - 1]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn relay_weights(&self, n: usize) -> Result<RelayWeights> {
        self.check_step(n)?;
        let ab_n = self.alpha_bar(n);
        let lambda = ab_n.sqrt() / (1.0 - ab_n).sqrt();
        let etas: Vec<f64> = (1..=n)
            .map(|i| {
                let ab = self.alpha_bar(i);
                lambda * (1.0 - ab).sqrt() / ab.sqrt()
            })
            .collect();
        Ok(RelayWeights { n, lambda, etas })
    }
}

/// The residual weight sequence `eta_1..eta_N` and its normalizer `lambda`.
#[derive(Debug, Clone)]
pub struct RelayWeights {
    n: usize,
    lambda: f64,
    etas: Vec<f64>,
}

impl RelayWeights {
    pub fn horizon(&self) -> usize {
        self.n
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `eta_n`, 1-based.
    pub fn eta(&self, n: usize) -> f64 {
        self.etas[n - 1]
    }

    pub fn etas(&self) -> &[f64] {
        &self.etas
    }

    /// The smallest weight in the sequence. The sequence is designed to
    /// approach zero at the low-noise end but stays strictly positive for
    /// any finite schedule, so this is reported for diagnostics rather
    /// than asserted against a bound.
    pub fn eta_first(&self) -> f64 {
        self.etas[0]
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![a];
    }
    let step = (b - a) / (n - 1) as f64;
    (0..n).map(|i| a + step * i as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::from_config(&ScheduleConfig::default()).unwrap()
    }

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::build(ScheduleKind::Linear, 1, 0.5, 0.5).unwrap();
        assert_eq!(s.alpha_bar(1), 0.5);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 0, 0.1, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.0, 0.2).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.2, 0.1).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, 0.1, 1.0).is_err());
        assert!(NoiseSchedule::build(ScheduleKind::Linear, 10, f64::NAN, 0.2).is_err());
    }

    #[test]
    fn invariants_hold() {
        for kind in [ScheduleKind::Linear, ScheduleKind::ScaledLinear] {
            let s = NoiseSchedule::build(kind, 1000, 0.00085, 0.012).unwrap();
            for t in 1..=1000 {
                let b = s.beta(t);
                assert!(b > 0.0 && b < 1.0);
                let ab = s.alpha_bar(t);
                assert!(ab > 0.0 && ab < 1.0);
                if t > 1 {
                    assert!(ab < s.alpha_bar(t - 1), "alpha_bar not decreasing at {t}");
                    let ratio = ab / s.alpha_bar(t - 1);
                    assert!(
                        (ratio - s.alpha(t)).abs() / s.alpha(t) < 1e-15,
                        "ratio mismatch at {t}"
                    );
                }
            }
        }
    }

    #[test]
    fn cumulative_product_matches_exact_rational_oracle() {
        // Oracle: the product of the f64 beta values computed in exact
        // rational arithmetic, rounded once at the end.
        use num::BigRational;
        use num::FromPrimitive;
        use num::ToPrimitive;

        let s = default_schedule();
        let mut exact = BigRational::from_f64(1.0).unwrap();
        for t in 1..=1000 {
            exact *= BigRational::from_f64(1.0 - s.beta(t)).unwrap();
        }
        let oracle = exact.to_f64().unwrap();
        let got = s.alpha_bar(1000);
        assert!(
            (got - oracle).abs() / oracle < 5e-13,
            "got {got}, oracle {oracle}"
        );
        // Frozen from the oracle above.
        assert!((got - 4.660098513077238e-3).abs() / got < 1e-10, "got {got:e}");
    }

    #[test]
    fn relay_eta_terminal_is_one() {
        let s = default_schedule();
        for n in [1usize, 7, 300, 1000] {
            let w = s.relay_weights(n).unwrap();
            assert!((w.eta(n) - 1.0).abs() < 1e-14, "eta_N at N={n}");
        }
    }

    #[test]
    fn relay_eta_strictly_increasing_and_formula() {
        let s = default_schedule();
        let w = s.relay_weights(300).unwrap();
        assert_eq!(w.horizon(), 300);
        let lambda = w.lambda();
        assert!(
            (lambda - s.sqrt_alpha_bar(300) / s.sqrt_one_minus_alpha_bar(300)).abs() < 1e-15
        );
        for n in 1..=300usize {
            let expect = lambda * s.sqrt_one_minus_alpha_bar(n) / s.sqrt_alpha_bar(n);
            assert_eq!(w.eta(n), expect, "eta formula at {n}");
            if n > 1 {
                assert!(w.eta(n) > w.eta(n - 1), "eta not increasing at {n}");
                let lhs = w.eta(n) / w.eta(n - 1);
                let rhs = (s.sqrt_one_minus_alpha_bar(n) / s.sqrt_alpha_bar(n))
                    / (s.sqrt_one_minus_alpha_bar(n - 1) / s.sqrt_alpha_bar(n - 1));
                assert!((lhs - rhs).abs() < 1e-12, "consecutive ratio at {n}");
            }
        }
        assert!(w.eta_first() > 0.0);
    }

    #[test]
    fn relay_weights_rejects_out_of_range() {
        let s = default_schedule();
        assert!(s.relay_weights(0).is_err());
        assert!(s.relay_weights(1001).is_err());
    }

    #[test]
    fn relay_weights_deterministic() {
        let s = default_schedule();
        let a = s.relay_weights(300).unwrap();
        let b = s.relay_weights(300).unwrap();
        assert_eq!(a.etas(), b.etas());
        assert!(a.lambda() == b.lambda());
    }
}
