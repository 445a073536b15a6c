//! Applying a configured mechanism to a stream of fixes.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geo::PlanarPoint;
use crate::mechanisms::{plm_sample, psm_sample, Epsilon, StaircaseParams};
use crate::session::{ReleaseKind, SessionError, TrPsmConfig, TrPsmSession};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MechanismKind {
    Plm,
    Psm,
    Trpsm,
}

impl MechanismKind {
    pub const ALL: [MechanismKind; 3] = [MechanismKind::Plm, MechanismKind::Psm, MechanismKind::Trpsm];

    pub fn name(self) -> &'static str {
        match self {
            MechanismKind::Plm => "plm",
            MechanismKind::Psm => "psm",
            MechanismKind::Trpsm => "trpsm",
        }
    }
}

impl fmt::Display for MechanismKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MechanismKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "plm" => Ok(MechanismKind::Plm),
            "psm" => Ok(MechanismKind::Psm),
            "trpsm" | "tr-psm" => Ok(MechanismKind::Trpsm),
            other => Err(format!("unknown mechanism '{other}' (expected plm, psm or trpsm)")),
        }
    }
}

/// Which mechanism to run and with what budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mechanism", rename_all = "lowercase")]
pub enum MechanismConfig {
    Plm { epsilon: Epsilon },
    Psm { params: StaircaseParams },
    Trpsm { config: TrPsmConfig },
}

impl MechanismConfig {
    pub fn plm(epsilon: Epsilon) -> Self {
        MechanismConfig::Plm { epsilon }
    }

    pub fn psm(epsilon: Epsilon) -> Self {
        MechanismConfig::Psm {
            params: StaircaseParams::new(epsilon),
        }
    }

    pub fn trpsm(config: TrPsmConfig) -> Self {
        MechanismConfig::Trpsm { config }
    }

    pub fn kind(&self) -> MechanismKind {
        match self {
            MechanismConfig::Plm { .. } => MechanismKind::Plm,
            MechanismConfig::Psm { .. } => MechanismKind::Psm,
            MechanismConfig::Trpsm { .. } => MechanismKind::Trpsm,
        }
    }

    pub fn epsilon(&self) -> Epsilon {
        match self {
            MechanismConfig::Plm { epsilon } => *epsilon,
            MechanismConfig::Psm { params } => params.epsilon,
            MechanismConfig::Trpsm { config } => config.epsilon,
        }
    }

    /// Perturbs a single fix with a stateless mechanism. TR-PSM falls back
    /// to its underlying staircase sampler.
    pub fn perturb_one<R: Rng + ?Sized>(&self, x: PlanarPoint, rng: &mut R) -> PlanarPoint {
        match self {
            MechanismConfig::Plm { epsilon } => plm_sample(x, *epsilon, rng),
            MechanismConfig::Psm { params } => psm_sample(x, params, rng),
            MechanismConfig::Trpsm { config } => psm_sample(x, &config.staircase, rng),
        }
    }
}

/// Released counterpart of a stream of true fixes.
#[derive(Debug, Clone, PartialEq)]
pub struct PerturbedStream {
    /// One released point per consumed fix. Shorter than the input when a
    /// TR-PSM session ran out of budget.
    pub released: Vec<PlanarPoint>,
    pub kinds: Vec<ReleaseKind>,
    /// Index of the fix that hit `BudgetExhausted`, if any.
    pub exhausted_at: Option<usize>,
    /// Total budget spent on the stream.
    pub spend: f64,
}

impl PerturbedStream {
    pub fn is_complete(&self, len: usize) -> bool {
        self.released.len() == len
    }
}

/// Perturbs `points` in order. PLM/PSM perturb each fix independently and
/// spend ε per fix; TR-PSM runs one session over the whole stream and stops
/// at the first `BudgetExhausted`.
pub fn perturb_stream<R: Rng + ?Sized>(
    points: &[PlanarPoint],
    mech: &MechanismConfig,
    rng: &mut R,
) -> Result<PerturbedStream, SessionError> {
    match mech {
        MechanismConfig::Trpsm { config } => {
            let Some((&first, rest)) = points.split_first() else {
                return Ok(PerturbedStream {
                    released: Vec::new(),
                    kinds: Vec::new(),
                    exhausted_at: None,
                    spend: 0.0,
                });
            };
            let (mut session, d) = TrPsmSession::start(first, *config, rng)?;
            let mut released = Vec::with_capacity(points.len());
            let mut kinds = Vec::with_capacity(points.len());
            released.push(d.output);
            kinds.push(d.kind);
            let mut exhausted_at = None;
            for (i, &x) in rest.iter().enumerate() {
                match session.step(x, rng) {
                    Ok(d) => {
                        released.push(d.output);
                        kinds.push(d.kind);
                    }
                    Err(_) => {
                        exhausted_at = Some(i + 1);
                        break;
                    }
                }
            }
            Ok(PerturbedStream {
                released,
                kinds,
                exhausted_at,
                spend: session.spend(),
            })
        }
        _ => {
            let released: Vec<_> = points.iter().map(|&x| mech.perturb_one(x, rng)).collect();
            Ok(PerturbedStream {
                kinds: vec![ReleaseKind::Released; released.len()],
                spend: released.len() as f64 * mech.epsilon().value(),
                released,
                exhausted_at: None,
            })
        }
    }
}
