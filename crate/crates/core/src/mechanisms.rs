//! Stateless per-location perturbation.
//!
//! Both mechanisms perturb a point by a random radius along a uniform
//! heading. They differ only in the radial law:
//!
//! * the planar Laplace mechanism (PLM) draws `r` from the Gamma(2, 1/ε)
//!   density ε²·r·e^(−εr), inverted through the lower Lambert W branch;
//! * the planar staircase mechanism (PSM) draws `r` from a piecewise-constant
//!   density whose steps of width Δ decay geometrically by e^(−ε), inverted
//!   in closed form.
//!
//! Randomness is consumed in a fixed order per sample: one uniform for the
//! radius, then one for the angle.

use std::f64::consts::E;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::PlanarPoint;
use crate::lambert::lambert_wm1;
use crate::rng::{angle, unit, UNIT_MAX};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MechanismError {
    #[error("epsilon must be a positive finite number, got {0}")]
    Epsilon(f64),
    #[error("interval width must be positive and finite, got {0}")]
    Width(f64),
    #[error("interval count must be at least 1")]
    Intervals,
    #[error("radius must be non-negative, got {0}")]
    NegativeRadius(f64),
    #[error("probability must lie in [0, 1), got {0}")]
    Probability(f64),
}

/// Per-release privacy budget ε, in 1/meters.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Epsilon(f64);

impl Epsilon {
    pub fn new(value: f64) -> Result<Self, MechanismError> {
        if value > 0.0 && value.is_finite() {
            Ok(Epsilon(value))
        } else {
            Err(MechanismError::Epsilon(value))
        }
    }

    #[inline]
    pub fn value(self) -> f64 {
        self.0
    }
}

impl TryFrom<f64> for Epsilon {
    type Error = MechanismError;

    fn try_from(v: f64) -> Result<Self, Self::Error> {
        Epsilon::new(v)
    }
}

impl From<Epsilon> for f64 {
    fn from(e: Epsilon) -> f64 {
        e.0
    }
}

/// A radial offset in polar form.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadialSample {
    /// Meters, ≥ 0.
    pub r: f64,
    /// Radians in [0, 2π).
    pub theta: f64,
}

impl RadialSample {
    #[inline]
    pub fn apply(self, x: PlanarPoint) -> PlanarPoint {
        x.offset_polar(self.r, self.theta)
    }
}

// ---------------------------------------------------------------------------
// Planar Laplace
// ---------------------------------------------------------------------------

/// Radial density ε²·r·e^(−εr).
pub fn plm_radial_pdf(r: f64, eps: Epsilon) -> f64 {
    if r < 0.0 {
        return 0.0;
    }
    let e = eps.value();
    e * e * r * (-e * r).exp()
}

/// Radial CDF 1 − (1 + εr)·e^(−εr).
pub fn plm_radial_cdf(r: f64, eps: Epsilon) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let er = eps.value() * r;
    // 1 - (1 + er) e^{-er} = -expm1(-er) - er e^{-er}
    (-(-er).exp_m1() - er * (-er).exp()).clamp(0.0, 1.0)
}

/// Inverse of [`plm_radial_cdf`]: r = −(W₋₁((u − 1)/e) + 1)/ε.
pub fn plm_radial_inverse_cdf(u: f64, eps: Epsilon) -> Result<f64, MechanismError> {
    if !(0.0..1.0).contains(&u) {
        return Err(MechanismError::Probability(u));
    }
    if u == 0.0 {
        return Ok(0.0);
    }
    let u = u.min(UNIT_MAX);
    let w = lambert_wm1((u - 1.0) / E).unwrap_or(-1.0);
    Ok((-(w + 1.0) / eps.value()).max(0.0))
}

pub fn plm_radial_sample<R: Rng + ?Sized>(eps: Epsilon, rng: &mut R) -> RadialSample {
    let u = unit(rng);
    // u is always in [0, 1), so the inverse cannot fail.
    let r = plm_radial_inverse_cdf(u, eps).unwrap_or(0.0);
    RadialSample { r, theta: angle(rng) }
}

pub fn plm_sample<R: Rng + ?Sized>(x: PlanarPoint, eps: Epsilon, rng: &mut R) -> PlanarPoint {
    plm_radial_sample(eps, rng).apply(x)
}

/// Analytic mean radius of the planar Laplace mechanism, 2/ε.
pub fn plm_mean_radius(eps: Epsilon) -> f64 {
    2.0 / eps.value()
}

// ---------------------------------------------------------------------------
// Planar staircase
// ---------------------------------------------------------------------------

/// Parameters of the staircase radial density.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaircaseParams {
    pub epsilon: Epsilon,
    /// Interval width Δ in meters.
    pub delta_width: f64,
    /// Number of intervals; `None` for the unbounded staircase.
    pub n_intervals: Option<u64>,
}

impl StaircaseParams {
    /// Unbounded staircase with Δ = 1 m.
    pub fn new(epsilon: Epsilon) -> Self {
        StaircaseParams {
            epsilon,
            delta_width: 1.0,
            n_intervals: None,
        }
    }

    pub fn with_width(mut self, delta_width: f64) -> Result<Self, MechanismError> {
        if !(delta_width > 0.0 && delta_width.is_finite()) {
            return Err(MechanismError::Width(delta_width));
        }
        self.delta_width = delta_width;
        Ok(self)
    }

    pub fn bounded(mut self, n: u64) -> Result<Self, MechanismError> {
        if n == 0 {
            return Err(MechanismError::Intervals);
        }
        self.n_intervals = Some(n);
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), MechanismError> {
        Epsilon::new(self.epsilon.value())?;
        if !(self.delta_width > 0.0 && self.delta_width.is_finite()) {
            return Err(MechanismError::Width(self.delta_width));
        }
        if self.n_intervals == Some(0) {
            return Err(MechanismError::Intervals);
        }
        Ok(())
    }

    /// Total mass of the unnormalized staircase, 1 − e^(−nε) (1 when unbounded).
    fn mass(&self) -> f64 {
        match self.n_intervals {
            Some(n) => -(-(n as f64) * self.epsilon.value()).exp_m1(),
            None => 1.0,
        }
    }

    /// Density on the `i`-th interval (1-based): (1 − e^(−ε))·e^(−(i−1)ε) / (mass·Δ).
    pub fn step_density(&self, i: f64) -> f64 {
        let e = self.epsilon.value();
        -(-e).exp_m1() * (-(i - 1.0) * e).exp() / (self.mass() * self.delta_width)
    }

    /// Probability mass in the first `k` intervals, before normalization:
    /// 1 − e^(−kε).
    fn partial_mass(&self, k: f64) -> f64 {
        -(-k * self.epsilon.value()).exp_m1()
    }

    /// 1-based interval containing `r`; boundaries belong to the lower
    /// interval and r = 0 belongs to the first.
    pub fn interval_index(&self, r: f64) -> f64 {
        (r / self.delta_width).ceil().max(1.0)
    }

    /// Analytic mean radius of the unbounded staircase: 1/(1 − e^(−ε)) − Δ/2
    /// for Δ = 1, scaled by Δ in general.
    pub fn mean_radius(&self) -> f64 {
        let d = self.delta_width;
        match self.n_intervals {
            None => d * (1.0 / -(-self.epsilon.value()).exp_m1() - 0.5),
            Some(n) => {
                // Σ p_i · (i - 1/2)Δ over the bounded staircase.
                let mut mean = 0.0;
                for i in 1..=n {
                    let p = self.step_density(i as f64) * d;
                    mean += p * (i as f64 - 0.5) * d;
                }
                mean
            }
        }
    }
}

/// Staircase radial density.
pub fn psm_radial_pdf(r: f64, p: &StaircaseParams) -> Result<f64, MechanismError> {
    if r < 0.0 || r.is_nan() {
        return Err(MechanismError::NegativeRadius(r));
    }
    let i = p.interval_index(r);
    if let Some(n) = p.n_intervals {
        if i > n as f64 {
            return Ok(0.0);
        }
    }
    Ok(p.step_density(i))
}

/// Staircase radial CDF, piecewise linear between interval boundaries.
pub fn psm_radial_cdf(r: f64, p: &StaircaseParams) -> Result<f64, MechanismError> {
    if r < 0.0 || r.is_nan() {
        return Err(MechanismError::NegativeRadius(r));
    }
    if r == f64::INFINITY {
        return Ok(1.0);
    }
    let k = p.interval_index(r);
    if let Some(n) = p.n_intervals {
        if k > n as f64 {
            return Ok(1.0);
        }
    }
    let below = p.partial_mass(k - 1.0) / p.mass();
    let within = p.step_density(k) * (r - (k - 1.0) * p.delta_width);
    Ok((below + within).min(1.0))
}

/// Closed-form inverse of [`psm_radial_cdf`].
pub fn psm_radial_inverse_cdf(u: f64, p: &StaircaseParams) -> Result<f64, MechanismError> {
    if !(0.0..1.0).contains(&u) {
        return Err(MechanismError::Probability(u));
    }
    let u = u.min(UNIT_MAX);
    let e = p.epsilon.value();
    let mass = p.mass();
    // Interval index from ln(1 - u), which stays accurate as u → 1.
    let scaled = u * mass;
    let mut k = (-(-scaled).ln_1p() / e).floor() + 1.0;
    if let Some(n) = p.n_intervals {
        k = k.min(n as f64);
    }
    let lo = (k - 1.0) * p.delta_width;
    let below = p.partial_mass(k - 1.0) / mass;
    let r = lo + (u - below) / p.step_density(k);
    Ok(r.clamp(lo, k * p.delta_width))
}

pub fn psm_radial_sample<R: Rng + ?Sized>(p: &StaircaseParams, rng: &mut R) -> RadialSample {
    let u = unit(rng);
    let r = psm_radial_inverse_cdf(u, p).unwrap_or(0.0);
    RadialSample { r, theta: angle(rng) }
}

pub fn psm_sample<R: Rng + ?Sized>(x: PlanarPoint, p: &StaircaseParams, rng: &mut R) -> PlanarPoint {
    psm_radial_sample(p, rng).apply(x)
}
