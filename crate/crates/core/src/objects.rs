//! Virtual-object fields and catchability.
//!
//! The server spawns objects on a square lattice around the released
//! location. An object is catchable when it lies inside both the visibility
//! disk around the true location and the one around the released location.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{distance, PlanarPoint};
use crate::rng::unit;

pub const DENSE_SPACING_M: f64 = 50.0;
pub const SPARSE_SPACING_M: f64 = 100.0;
pub const DEFAULT_FIELD_RADIUS_M: f64 = 150.0;
pub const DEFAULT_VISIBILITY_RADIUS_M: f64 = 100.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectsError {
    #[error("{0} must be positive and finite, got {1}")]
    Config(&'static str, f64),
    #[error("no objects visible from the true location")]
    NothingVisible,
    #[error("step {step}: {caught} catchable objects out of {visible} visible")]
    MalformedStep { step: usize, visible: usize, caught: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Density {
    Sparse,
    Dense,
}

impl Density {
    pub fn spacing(self) -> f64 {
        match self {
            Density::Sparse => SPARSE_SPACING_M,
            Density::Dense => DENSE_SPACING_M,
        }
    }
}

impl std::str::FromStr for Density {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sparse" => Ok(Density::Sparse),
            "dense" => Ok(Density::Dense),
            other => Err(format!("unknown density '{other}' (expected sparse or dense)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VirtualObject {
    pub id: String,
    pub point: PlanarPoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectFieldConfig {
    /// Lattice pitch in meters.
    pub spacing: f64,
    /// Objects are generated within this distance of the released point.
    pub field_radius: f64,
    pub visibility_radius: f64,
}

impl ObjectFieldConfig {
    pub fn new(density: Density) -> Self {
        ObjectFieldConfig {
            spacing: density.spacing(),
            field_radius: DEFAULT_FIELD_RADIUS_M,
            visibility_radius: DEFAULT_VISIBILITY_RADIUS_M,
        }
    }

    pub fn validate(&self) -> Result<(), ObjectsError> {
        for (name, v) in [
            ("spacing", self.spacing),
            ("field_radius", self.field_radius),
            ("visibility_radius", self.visibility_radius),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ObjectsError::Config(name, v));
            }
        }
        Ok(())
    }
}

/// Lattice points of pitch `cfg.spacing` inside the disk of radius
/// `cfg.field_radius` around `z`, with the lattice phase drawn from `rng`.
pub fn generate_field<R: Rng + ?Sized>(
    z: PlanarPoint,
    cfg: &ObjectFieldConfig,
    rng: &mut R,
) -> Result<Vec<VirtualObject>, ObjectsError> {
    cfg.validate()?;
    let phase = (unit(rng) * cfg.spacing, unit(rng) * cfg.spacing);
    Ok(lattice_in_disk(z, cfg.spacing, cfg.field_radius, phase))
}

/// Lattice {(z.x + phase.0 + i·s, z.y + phase.1 + j·s)} restricted to the
/// disk of radius `radius` around `z`.
pub fn lattice_in_disk(z: PlanarPoint, s: f64, radius: f64, phase: (f64, f64)) -> Vec<VirtualObject> {
    let reach = (radius / s).ceil() as i64 + 1;
    let mut out = Vec::new();
    for j in -reach..=reach {
        for i in -reach..=reach {
            let p = PlanarPoint {
                x: z.x + phase.0 + i as f64 * s,
                y: z.y + phase.1 + j as f64 * s,
            };
            if distance(p, z) <= radius {
                out.push(VirtualObject {
                    id: format!("obj_{i}_{j}"),
                    point: p,
                });
            }
        }
    }
    out
}

/// Visible and catchable counts for one step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    /// |V|: objects within the visibility radius of the true location.
    pub visible: usize,
    /// |V ∩ V̂|: of those, the ones also visible from the released location.
    pub catchable: usize,
}

impl Visibility {
    pub fn lost(&self) -> usize {
        self.visible - self.catchable
    }
}

pub fn visibility(
    x_true: PlanarPoint,
    z: PlanarPoint,
    objs: &[VirtualObject],
    cfg: &ObjectFieldConfig,
) -> Visibility {
    let r = cfg.visibility_radius;
    let mut v = Visibility { visible: 0, catchable: 0 };
    for o in objs {
        if distance(o.point, x_true) <= r {
            v.visible += 1;
            if distance(o.point, z) <= r {
                v.catchable += 1;
            }
        }
    }
    v
}

/// 100·|V ∩ V̂|/|V|. Undefined (error) when nothing is visible from the
/// true location; such steps are left out of averages.
pub fn catchable_fraction(
    x_true: PlanarPoint,
    z: PlanarPoint,
    objs: &[VirtualObject],
    cfg: &ObjectFieldConfig,
) -> Result<f64, ObjectsError> {
    let v = visibility(x_true, z, objs, cfg);
    if v.visible == 0 {
        return Err(ObjectsError::NothingVisible);
    }
    Ok(100.0 * v.catchable as f64 / v.visible as f64)
}

/// Σ (|V_t| − |V_t ∩ V̂_t|) over a session.
pub fn accumulated_loss(per_step: &[Visibility]) -> Result<usize, ObjectsError> {
    per_step.iter().enumerate().try_fold(0usize, |acc, (step, v)| {
        if v.catchable > v.visible {
            return Err(ObjectsError::MalformedStep {
                step,
                visible: v.visible,
                caught: v.catchable,
            });
        }
        Ok(acc + v.lost())
    })
}
