//! Thresholded release over a location stream (TR-PSM).
//!
//! A session perturbs its first fix with the staircase mechanism and draws a
//! noisy threshold δ̃ = δ + η once, with η from the staircase radial law.
//! After that a fresh perturbation is released only when the true location
//! has moved at least δ̃ away from the last release; otherwise the last
//! release is reused at no privacy cost. With k threshold crossings after
//! the first fix the session has spent (k + 2)·ε.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{distance, PlanarPoint};
use crate::mechanisms::{psm_radial_sample, psm_sample, Epsilon, MechanismError, StaircaseParams};

/// Default application threshold δ in meters.
pub const DEFAULT_DELTA_M: f64 = 5.0;

/// Relative slack on budget comparisons so that ε_T = m·ε computed in
/// floating point still admits exactly m − 2 crossings.
const BUDGET_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SessionError {
    #[error("session budget {epsilon_total} is smaller than the 2ε = {needed} needed to start")]
    BudgetTooSmall { epsilon_total: f64, needed: f64 },
    #[error("threshold δ must be finite and non-negative, got {0}")]
    Delta(f64),
    #[error("top-up must be finite and non-negative, got {0}")]
    TopUp(f64),
    #[error("snapshot field {0} is invalid")]
    Snapshot(&'static str),
    #[error(transparent)]
    Mechanism(#[from] MechanismError),
}

/// Raised when a threshold crossing needs more budget than is left.
///
/// Recoverable: the caller may [`TrPsmSession::top_up`] and step again, or
/// end the session. No location is released for the step that raised it.
#[derive(Debug, Error, Clone, Copy, PartialEq)]
#[error("privacy budget exhausted: spent {spend} of {epsilon_total}")]
pub struct BudgetExhausted {
    pub spend: f64,
    pub epsilon_total: f64,
    pub epsilon_left: f64,
    pub z_ref: PlanarPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrPsmConfig {
    /// Per-release budget ε.
    pub epsilon: Epsilon,
    /// Session budget ε_T.
    pub epsilon_total: f64,
    /// Application threshold δ in meters.
    pub delta: f64,
    pub staircase: StaircaseParams,
}

impl TrPsmConfig {
    /// Staircase with Δ = 1 at the per-release ε.
    pub fn new(epsilon: Epsilon, epsilon_total: f64, delta: f64) -> Self {
        TrPsmConfig {
            epsilon,
            epsilon_total,
            delta,
            staircase: StaircaseParams::new(epsilon),
        }
    }

    /// Budget large enough that a stream of `fixes` locations never exhausts it.
    pub fn unlimited_for(epsilon: Epsilon, delta: f64, fixes: usize) -> Self {
        Self::new(epsilon, (fixes as f64 + 2.0) * epsilon.value(), delta)
    }

    pub fn validate(&self) -> Result<(), SessionError> {
        self.staircase.validate()?;
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(SessionError::Delta(self.delta));
        }
        let needed = 2.0 * self.epsilon.value();
        if !(self.epsilon_total.is_finite() && self.epsilon_total >= needed * (1.0 - BUDGET_SLACK)) {
            return Err(SessionError::BudgetTooSmall {
                epsilon_total: self.epsilon_total,
                needed,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReleaseKind {
    Initial,
    Released,
    Reused,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReleaseDecision {
    pub output: PlanarPoint,
    pub kind: ReleaseKind,
    pub budget_spent_this_step: f64,
}

/// Mutable per-session state. Single writer; steps must arrive in order.
#[derive(Debug, Clone, PartialEq)]
pub struct TrPsmSession {
    cfg: TrPsmConfig,
    noisy_threshold: f64,
    z_ref: PlanarPoint,
    /// Kept as its own running value so a top-up adds exactly `additional`.
    epsilon_left: f64,
    releases: u64,
    step_index: u64,
}

impl TrPsmSession {
    /// Starts a session at the first fix `x1`.
    pub fn start<R: Rng + ?Sized>(
        x1: PlanarPoint,
        cfg: TrPsmConfig,
        rng: &mut R,
    ) -> Result<(Self, ReleaseDecision), SessionError> {
        cfg.validate()?;
        let eta = psm_radial_sample(&cfg.staircase, rng).r;
        let z1 = psm_sample(x1, &cfg.staircase, rng);
        let session = TrPsmSession {
            cfg,
            noisy_threshold: cfg.delta + eta,
            z_ref: z1,
            epsilon_left: (cfg.epsilon_total - 2.0 * cfg.epsilon.value()).max(0.0),
            releases: 0,
            step_index: 1,
        };
        let decision = ReleaseDecision {
            output: z1,
            kind: ReleaseKind::Initial,
            budget_spent_this_step: 2.0 * cfg.epsilon.value(),
        };
        Ok((session, decision))
    }

    /// Processes the next fix.
    pub fn step<R: Rng + ?Sized>(
        &mut self,
        x: PlanarPoint,
        rng: &mut R,
    ) -> Result<ReleaseDecision, BudgetExhausted> {
        if distance(x, self.z_ref) < self.noisy_threshold {
            self.step_index += 1;
            return Ok(ReleaseDecision {
                output: self.z_ref,
                kind: ReleaseKind::Reused,
                budget_spent_this_step: 0.0,
            });
        }
        let eps = self.cfg.epsilon.value();
        if self.epsilon_left() < eps * (1.0 - BUDGET_SLACK) {
            return Err(BudgetExhausted {
                spend: self.spend(),
                epsilon_total: self.cfg.epsilon_total,
                epsilon_left: self.epsilon_left(),
                z_ref: self.z_ref,
            });
        }
        let z = psm_sample(x, &self.cfg.staircase, rng);
        self.z_ref = z;
        self.epsilon_left = (self.epsilon_left - eps).max(0.0);
        self.releases += 1;
        self.step_index += 1;
        Ok(ReleaseDecision {
            output: z,
            kind: ReleaseKind::Released,
            budget_spent_this_step: eps,
        })
    }

    /// Budget spent so far, (k + 2)·ε.
    pub fn spend(&self) -> f64 {
        (self.releases as f64 + 2.0) * self.cfg.epsilon.value()
    }

    /// Remaining budget ε_T − (k + 2)·ε, never negative.
    pub fn epsilon_left(&self) -> f64 {
        self.epsilon_left
    }

    /// Adds `additional` to the session budget. δ̃ is kept.
    pub fn top_up(&mut self, additional: f64) -> Result<f64, SessionError> {
        if !(additional >= 0.0 && additional.is_finite()) {
            return Err(SessionError::TopUp(additional));
        }
        self.cfg.epsilon_total += additional;
        self.epsilon_left += additional;
        Ok(self.epsilon_left)
    }

    pub fn config(&self) -> &TrPsmConfig {
        &self.cfg
    }

    pub fn epsilon_total(&self) -> f64 {
        self.cfg.epsilon_total
    }

    pub fn noisy_threshold(&self) -> f64 {
        self.noisy_threshold
    }

    pub fn z_ref(&self) -> PlanarPoint {
        self.z_ref
    }

    /// Threshold crossings after the first fix (k).
    pub fn releases(&self) -> u64 {
        self.releases
    }

    /// Number of fixes consumed so far, including the first (t).
    pub fn step_index(&self) -> u64 {
        self.step_index
    }

    pub fn snapshot(&self) -> SessionSnapshot {
        SessionSnapshot {
            noisy_threshold: self.noisy_threshold,
            z_ref_x: self.z_ref.x,
            z_ref_y: self.z_ref.y,
            epsilon_left: self.epsilon_left(),
            releases: self.releases,
            step_index: self.step_index,
            epsilon: self.cfg.epsilon.value(),
            epsilon_total: self.cfg.epsilon_total,
            delta: self.cfg.delta,
            delta_width: self.cfg.staircase.delta_width,
            n_intervals: self.cfg.staircase.n_intervals,
        }
    }

    pub fn restore(s: &SessionSnapshot) -> Result<Self, SessionError> {
        let epsilon = Epsilon::new(s.epsilon)?;
        let mut staircase = StaircaseParams::new(epsilon).with_width(s.delta_width)?;
        if let Some(n) = s.n_intervals {
            staircase = staircase.bounded(n)?;
        }
        let cfg = TrPsmConfig {
            epsilon,
            epsilon_total: s.epsilon_total,
            delta: s.delta,
            staircase,
        };
        cfg.validate()?;
        if !(s.epsilon_left >= 0.0 && s.epsilon_left.is_finite()) {
            return Err(SessionError::Snapshot("epsilon_left"));
        }
        if !(s.noisy_threshold >= s.delta && s.noisy_threshold.is_finite()) {
            return Err(SessionError::Snapshot("noisy_threshold"));
        }
        Ok(TrPsmSession {
            cfg,
            noisy_threshold: s.noisy_threshold,
            z_ref: PlanarPoint { x: s.z_ref_x, y: s.z_ref_y },
            epsilon_left: s.epsilon_left,
            releases: s.releases,
            step_index: s.step_index,
        })
    }
}

/// Flat, serializable session state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionSnapshot {
    pub noisy_threshold: f64,
    #[serde(rename = "z_ref.x")]
    pub z_ref_x: f64,
    #[serde(rename = "z_ref.y")]
    pub z_ref_y: f64,
    pub epsilon_left: f64,
    pub releases: u64,
    pub step_index: u64,
    pub epsilon: f64,
    pub epsilon_total: f64,
    pub delta: f64,
    pub delta_width: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_intervals: Option<u64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RngSeed;

    fn eps(v: f64) -> Epsilon {
        Epsilon::new(v).unwrap()
    }

    fn line(n: usize, step: f64) -> Vec<PlanarPoint> {
        (0..n).map(|i| PlanarPoint { x: i as f64 * step, y: 0.0 }).collect()
    }

    #[test]
    fn budget_too_small() {
        let e = eps(0.1);
        let mut rng = RngSeed(1).stream();
        let err = TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 0.19, 5.0), &mut rng)
            .unwrap_err();
        assert!(matches!(err, SessionError::BudgetTooSmall { .. }));
        assert!(TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 0.2, 5.0), &mut rng).is_ok());
        assert!(TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 1.0, -1.0), &mut rng).is_err());
    }

    #[test]
    fn exact_minimum_budget_exhausts_on_first_crossing() {
        let e = eps(0.1);
        let mut rng = RngSeed(2).stream();
        let (mut s, first) =
            TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 2.0 * 0.1, 5.0), &mut rng).unwrap();
        assert_eq!(first.kind, ReleaseKind::Initial);
        assert_eq!(s.spend(), 0.2);
        let far = PlanarPoint { x: 10_000.0, y: 0.0 };
        let ex = s.step(far, &mut rng).unwrap_err();
        assert_eq!(ex.spend, 0.2);
        assert_eq!(ex.z_ref, first.output);
        // State is untouched by the refused step.
        assert_eq!(s.releases(), 0);
        assert_eq!(s.step_index(), 1);
    }

    #[test]
    fn stationary_user_always_reuses() {
        let e = eps(0.5);
        let mut rng = RngSeed(3).stream();
        let x = PlanarPoint { x: 3.0, y: 4.0 };
        // δ = 100 m against a noise scale of ~2 m.
        let (mut s, first) = TrPsmSession::start(x, TrPsmConfig::new(e, 1.0, 100.0), &mut rng).unwrap();
        for _ in 0..500 {
            let d = s.step(x, &mut rng).unwrap();
            assert_eq!(d.kind, ReleaseKind::Reused);
            assert_eq!(d.output, first.output);
            assert_eq!(d.budget_spent_this_step, 0.0);
        }
        assert_eq!(s.spend(), 2.0 * 0.5);
        assert_eq!(s.step_index(), 501);
    }

    #[test]
    fn straight_line_crossings_and_exhaustion() {
        // 1 km steps dwarf any plausible δ̃ + noise at ε = 0.1.
        let e = eps(0.1);
        let trace = line(10, 1000.0);
        let mut rng = RngSeed(4).stream();
        let (mut s, _) = TrPsmSession::start(trace[0], TrPsmConfig::new(e, 12.0 * 0.1, 5.0), &mut rng).unwrap();
        for x in &trace[1..] {
            assert_eq!(s.step(*x, &mut rng).unwrap().kind, ReleaseKind::Released);
        }
        assert_eq!(s.releases(), 9);
        assert!((s.spend() - 1.1).abs() < 1e-12);

        let mut rng = RngSeed(4).stream();
        let (mut s, _) = TrPsmSession::start(trace[0], TrPsmConfig::new(e, 10.0 * 0.1, 5.0), &mut rng).unwrap();
        let mut exhausted_at = None;
        for (t, x) in trace.iter().enumerate().skip(1) {
            match s.step(*x, &mut rng) {
                Ok(d) => assert_eq!(d.kind, ReleaseKind::Released),
                Err(_) => {
                    exhausted_at = Some(t);
                    break;
                }
            }
        }
        // 2ε at start plus 8 crossings uses all 10ε; the 9th crossing (t = 9) fails.
        assert_eq!(exhausted_at, Some(9));
        assert_eq!(s.releases(), 8);
        assert!(s.spend() <= s.epsilon_total() + 1e-12);
    }

    #[test]
    fn top_up_resumes_without_resampling_threshold() {
        let e = eps(0.1);
        let mut rng = RngSeed(5).stream();
        let (mut s, _) = TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 0.2, 5.0), &mut rng).unwrap();
        let threshold = s.noisy_threshold();
        let far = PlanarPoint { x: 5000.0, y: 0.0 };
        assert!(s.step(far, &mut rng).is_err());
        let left = s.top_up(0.1).unwrap();
        assert!((left - 0.1).abs() < 1e-12);
        assert_eq!(s.step(far, &mut rng).unwrap().kind, ReleaseKind::Released);
        assert!(s.step(PlanarPoint { x: -5000.0, y: 0.0 }, &mut rng).is_err());
        assert_eq!(s.noisy_threshold(), threshold);
        assert_eq!(s.top_up(0.0).unwrap(), s.epsilon_left());
        let before = s.epsilon_left();
        assert_eq!(s.top_up(0.3).unwrap(), before + 0.3);
        assert!(s.top_up(-1.0).is_err());
    }

    #[test]
    fn noisy_threshold_never_below_delta() {
        let e = eps(0.1);
        let n = 100_000;
        let mut total = 0.0;
        let mut rng = RngSeed(6).stream();
        for _ in 0..n {
            let (s, _) = TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 1.0, 5.0), &mut rng).unwrap();
            assert!(s.noisy_threshold() >= 5.0);
            total += s.noisy_threshold() - 5.0;
        }
        let mean = total / n as f64;
        assert!((mean - 10.0).abs() < 0.3, "mean η = {mean}");
    }

    #[test]
    fn snapshot_round_trip() {
        let e = eps(0.3);
        let mut rng = RngSeed(7).stream();
        let (mut s, _) = TrPsmSession::start(PlanarPoint::ORIGIN, TrPsmConfig::new(e, 3.0, 5.0), &mut rng).unwrap();
        for x in line(20, 30.0) {
            let _ = s.step(x, &mut rng);
        }
        let snap = s.snapshot();
        let json = serde_json::to_string(&snap).unwrap();
        assert!(json.contains("\"z_ref.x\""));
        let back: SessionSnapshot = serde_json::from_str(&json).unwrap();
        assert_eq!(TrPsmSession::restore(&back).unwrap(), s);
    }
}
