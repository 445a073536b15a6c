//! Coordinate frames.
//!
//! Mechanism math happens in a local planar frame measured in meters.
//! Geographic degrees only show up at the edges (file ingestion, the wire
//! protocol), and cross into the planar frame through an equirectangular
//! [`Projection`] anchored at the center of the region of interest.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Mean Earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Maximum angular offset from the projection origin accepted by
/// [`Projection::project`], in degrees.
pub const MAX_OFFSET_DEG: f64 = 1.0;

/// Maximum planar norm accepted by [`Projection::unproject`], in meters.
///
/// One degree of latitude is ~111.2 km, so this sits just above the
/// projection's forward domain.
pub const MAX_PLANAR_NORM_M: f64 = 150_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("non-finite planar coordinate ({0}, {1})")]
    NonFinite(f64, f64),
    #[error("point ({lat}, {lon}) is more than {MAX_OFFSET_DEG} degree from the projection origin")]
    OutsideProjection { lat: f64, lon: f64 },
    #[error("planar point at {0:.1} m exceeds the projection's {MAX_PLANAR_NORM_M} m range")]
    PlanarRange(f64),
    #[error("projection origin latitude {0} too close to a pole")]
    PolarOrigin(f64),
}

/// WGS84 latitude/longitude in decimal degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        let p = GeoPoint { lat, lon };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), GeoError> {
        if !(-90.0..=90.0).contains(&self.lat) {
            return Err(GeoError::Latitude(self.lat));
        }
        if !(-180.0..=180.0).contains(&self.lon) {
            return Err(GeoError::Longitude(self.lon));
        }
        Ok(())
    }
}

/// A point in the local metric frame: meters east (`x`) and north (`y`) of
/// the projection origin.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlanarPoint {
    pub x: f64,
    pub y: f64,
}

impl PlanarPoint {
    pub const ORIGIN: PlanarPoint = PlanarPoint { x: 0.0, y: 0.0 };

    pub fn new(x: f64, y: f64) -> Result<Self, GeoError> {
        if x.is_finite() && y.is_finite() {
            Ok(PlanarPoint { x, y })
        } else {
            Err(GeoError::NonFinite(x, y))
        }
    }

    /// Moves the point `r` meters along heading `theta` (radians,
    /// counter-clockwise from east).
    #[inline]
    pub fn offset_polar(self, r: f64, theta: f64) -> PlanarPoint {
        let (s, c) = theta.sin_cos();
        PlanarPoint {
            x: self.x + r * c,
            y: self.y + r * s,
        }
    }

    #[inline]
    pub fn translate(self, dx: f64, dy: f64) -> PlanarPoint {
        PlanarPoint {
            x: self.x + dx,
            y: self.y + dy,
        }
    }

    #[inline]
    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Euclidean distance in meters.
#[inline]
pub fn distance(a: PlanarPoint, b: PlanarPoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

/// Equirectangular projection around a fixed origin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GeoPoint", into = "GeoPoint")]
pub struct Projection {
    origin: GeoPoint,
    cos_lat: f64,
}

impl Projection {
    pub fn new(origin: GeoPoint) -> Result<Self, GeoError> {
        origin.validate()?;
        if origin.lat.abs() > 89.0 {
            return Err(GeoError::PolarOrigin(origin.lat));
        }
        Ok(Projection {
            origin,
            cos_lat: origin.lat.to_radians().cos(),
        })
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    pub fn project(&self, p: GeoPoint) -> Result<PlanarPoint, GeoError> {
        p.validate()?;
        let dlat = p.lat - self.origin.lat;
        let dlon = wrap_degrees(p.lon - self.origin.lon);
        if dlat.abs() > MAX_OFFSET_DEG || dlon.abs() > MAX_OFFSET_DEG {
            return Err(GeoError::OutsideProjection {
                lat: p.lat,
                lon: p.lon,
            });
        }
        Ok(PlanarPoint {
            x: EARTH_RADIUS_M * self.cos_lat * dlon.to_radians(),
            y: EARTH_RADIUS_M * dlat.to_radians(),
        })
    }

    pub fn unproject(&self, p: PlanarPoint) -> Result<GeoPoint, GeoError> {
        if !(p.x.is_finite() && p.y.is_finite()) {
            return Err(GeoError::NonFinite(p.x, p.y));
        }
        let norm = p.norm();
        if norm > MAX_PLANAR_NORM_M {
            return Err(GeoError::PlanarRange(norm));
        }
        let lat = self.origin.lat + (p.y / EARTH_RADIUS_M).to_degrees();
        let lon = self.origin.lon + (p.x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees();
        Ok(GeoPoint {
            lat,
            lon: wrap_degrees(lon),
        })
    }
}

impl TryFrom<GeoPoint> for Projection {
    type Error = GeoError;

    fn try_from(origin: GeoPoint) -> Result<Self, Self::Error> {
        Projection::new(origin)
    }
}

impl From<Projection> for GeoPoint {
    fn from(p: Projection) -> Self {
        p.origin
    }
}

fn wrap_degrees(d: f64) -> f64 {
    if (-180.0..=180.0).contains(&d) {
        d
    } else {
        (d + 180.0).rem_euclid(360.0) - 180.0
    }
}
