//! Trajectory loading, clipping, synthetic walks and grid discretization.
//!
//! The interchange format is CSV with a `user_id,timestamp,lat,lon` header
//! (ISO-8601 UTC timestamps, decimal degrees). Perturbed output appends
//! `released_lat,released_lon`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use chrono::{DateTime, Duration, SecondsFormat, TimeZone, Utc};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoError, GeoPoint, PlanarPoint, Projection};
use crate::rng::{angle, unit, RngSeed};

/// Side of the default study region, in meters.
pub const DEFAULT_REGION_SIDE_M: f64 = 6000.0;
/// Default grid resolution per side.
pub const DEFAULT_CELLS_PER_SIDE: u32 = 200;

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
    #[error("missing column '{0}' in header")]
    MissingColumn(&'static str),
    #[error("no valid rows in input ({skipped} malformed)")]
    EmptyInput { skipped: usize },
    #[error("trace is empty after clipping")]
    EmptyTrace,
    #[error("point ({x:.2}, {y:.2}) lies outside the region")]
    OutsideRegion { x: f64, y: f64 },
    #[error("invalid parameter: {0}")]
    Invalid(String),
    #[error(transparent)]
    Geo(#[from] GeoError),
}

/// One timestamped true location, optionally with its released counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fix {
    pub t: DateTime<Utc>,
    pub point: GeoPoint,
    pub user: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub released: Option<GeoPoint>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub user: String,
    pub fixes: Vec<Fix>,
    pub projection: Projection,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.fixes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fixes.is_empty()
    }

    /// True locations in the trace's planar frame.
    pub fn planar(&self) -> Result<Vec<PlanarPoint>, GeoError> {
        self.fixes.iter().map(|f| self.projection.project(f.point)).collect()
    }

    /// Released locations in the planar frame, if every fix carries one.
    pub fn released_planar(&self) -> Option<Result<Vec<PlanarPoint>, GeoError>> {
        self.fixes
            .iter()
            .map(|f| f.released)
            .collect::<Option<Vec<_>>>()
            .map(|pts| pts.into_iter().map(|g| self.projection.project(g)).collect())
    }

    /// Same trace expressed in another projection frame.
    pub fn reprojected(mut self, projection: Projection) -> Trace {
        self.projection = projection;
        self
    }
}

/// Square study region of side `side` meters centered on `center`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center: GeoPoint,
    pub side: f64,
}

impl Region {
    pub fn new(center: GeoPoint, side: f64) -> Result<Self, IngestError> {
        center.validate()?;
        if !(side > 0.0 && side.is_finite()) {
            return Err(IngestError::Invalid(format!("region side must be positive, got {side}")));
        }
        Projection::new(center)?;
        Ok(Region { center, side })
    }

    pub fn with_default_side(center: GeoPoint) -> Result<Self, IngestError> {
        Region::new(center, DEFAULT_REGION_SIDE_M)
    }

    /// Projection anchored at the region center. Region-relative planar
    /// coordinates span [−side/2, side/2]².
    pub fn projection(&self) -> Projection {
        Projection::new(self.center).expect("validated at construction")
    }

    pub fn half_side(&self) -> f64 {
        self.side / 2.0
    }

    pub fn contains_planar(&self, p: PlanarPoint) -> bool {
        let h = self.half_side();
        p.x.abs() <= h && p.y.abs() <= h
    }

    pub fn contains(&self, g: GeoPoint) -> bool {
        self.projection()
            .project(g)
            .map(|p| self.contains_planar(p))
            .unwrap_or(false)
    }
}

/// Row-major cell index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CellId(pub u32);

/// Uniform square grid over a [`Region`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub region: Region,
    pub cells_per_side: u32,
}

impl Grid {
    pub fn new(region: Region, cells_per_side: u32) -> Result<Self, IngestError> {
        if cells_per_side == 0 {
            return Err(IngestError::Invalid("grid needs at least one cell per side".into()));
        }
        Ok(Grid {
            region,
            cells_per_side,
        })
    }

    pub fn with_defaults(region: Region) -> Self {
        Grid {
            region,
            cells_per_side: DEFAULT_CELLS_PER_SIDE,
        }
    }

    pub fn cell_width(&self) -> f64 {
        self.region.side / self.cells_per_side as f64
    }

    pub fn n_cells(&self) -> u32 {
        self.cells_per_side * self.cells_per_side
    }

    /// Cell containing a region-relative planar point. Points on a cell's
    /// upper edge fall in the next cell, except on the region's outer edge.
    pub fn to_cell(&self, p: PlanarPoint) -> Result<CellId, IngestError> {
        if !self.region.contains_planar(p) {
            return Err(IngestError::OutsideRegion { x: p.x, y: p.y });
        }
        let h = self.region.half_side();
        let w = self.cell_width();
        let n = self.cells_per_side;
        let col = (((p.x + h) / w).floor() as u32).min(n - 1);
        let row = (((p.y + h) / w).floor() as u32).min(n - 1);
        Ok(CellId(row * n + col))
    }

    pub fn cell_center(&self, id: CellId) -> PlanarPoint {
        let n = self.cells_per_side;
        let (row, col) = (id.0 / n, id.0 % n);
        let h = self.region.half_side();
        let w = self.cell_width();
        PlanarPoint {
            x: -h + (col as f64 + 0.5) * w,
            y: -h + (row as f64 + 0.5) * w,
        }
    }
}

/// Counts of rows dropped while loading.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub rows: usize,
    pub malformed: usize,
    pub duplicate_timestamps: usize,
}

pub fn load_traces(path: impl AsRef<Path>) -> Result<(Vec<Trace>, LoadReport), IngestError> {
    read_traces(File::open(path)?)
}

/// Parses traces from CSV. One trace per user, sorted by timestamp; all
/// traces share a projection centered on the centroid of the valid rows.
pub fn read_traces<R: Read>(reader: R) -> Result<(Vec<Trace>, LoadReport), IngestError> {
    let mut rdr = csv::ReaderBuilder::new()
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let col = |name: &'static str| headers.iter().position(|h| h == name);
    let c_user = col("user_id").ok_or(IngestError::MissingColumn("user_id"))?;
    let c_ts = col("timestamp").ok_or(IngestError::MissingColumn("timestamp"))?;
    let c_lat = col("lat").ok_or(IngestError::MissingColumn("lat"))?;
    let c_lon = col("lon").ok_or(IngestError::MissingColumn("lon"))?;
    let c_rel = col("released_lat").zip(col("released_lon"));

    let mut report = LoadReport::default();
    let mut by_user: BTreeMap<String, Vec<Fix>> = BTreeMap::new();
    for record in rdr.records() {
        report.rows += 1;
        let Ok(record) = record else {
            report.malformed += 1;
            continue;
        };
        let parsed = (|| {
            let user = record.get(c_user)?.to_string();
            if user.is_empty() {
                return None;
            }
            let t = DateTime::parse_from_rfc3339(record.get(c_ts)?).ok()?.with_timezone(&Utc);
            let lat = record.get(c_lat)?.parse().ok()?;
            let lon = record.get(c_lon)?.parse().ok()?;
            let point = GeoPoint::new(lat, lon).ok()?;
            let released = match c_rel {
                Some((a, b)) => match (record.get(a), record.get(b)) {
                    (Some(a), Some(b)) if !a.is_empty() && !b.is_empty() => {
                        Some(GeoPoint::new(a.parse().ok()?, b.parse().ok()?).ok()?)
                    }
                    _ => None,
                },
                None => None,
            };
            Some(Fix {
                t,
                point,
                user,
                released,
            })
        })();
        match parsed {
            Some(fix) => by_user.entry(fix.user.clone()).or_default().push(fix),
            None => report.malformed += 1,
        }
    }

    let n: usize = by_user.values().map(Vec::len).sum();
    if n == 0 {
        return Err(IngestError::EmptyInput {
            skipped: report.malformed,
        });
    }
    let (slat, slon) = by_user
        .values()
        .flatten()
        .fold((0.0, 0.0), |(a, b), f| (a + f.point.lat, b + f.point.lon));
    let projection = Projection::new(GeoPoint::new(slat / n as f64, slon / n as f64)?)?;

    let traces = by_user
        .into_iter()
        .map(|(user, mut fixes)| {
            fixes.sort_by_key(|f| f.t);
            let before = fixes.len();
            fixes.dedup_by_key(|f| f.t);
            report.duplicate_timestamps += before - fixes.len();
            Trace {
                user,
                fixes,
                projection,
            }
        })
        .collect();
    Ok((traces, report))
}

/// Writes traces as CSV; released columns are emitted when any fix has one.
pub fn write_traces<W: Write>(writer: W, traces: &[Trace]) -> Result<(), IngestError> {
    let with_released = traces.iter().flat_map(|t| &t.fixes).any(|f| f.released.is_some());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["user_id", "timestamp", "lat", "lon"];
    if with_released {
        header.extend(["released_lat", "released_lon"]);
    }
    w.write_record(&header)?;
    for fix in traces.iter().flat_map(|t| &t.fixes) {
        let mut row = vec![
            fix.user.clone(),
            fix.t.to_rfc3339_opts(SecondsFormat::AutoSi, true),
            fix.point.lat.to_string(),
            fix.point.lon.to_string(),
        ];
        if with_released {
            match fix.released {
                Some(r) => row.extend([r.lat.to_string(), r.lon.to_string()]),
                None => row.extend([String::new(), String::new()]),
            }
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Keeps the longest contiguous run of in-region fixes, then thins it so
/// consecutive kept fixes are at least `min_interval_s` seconds apart.
pub fn clip_and_subsample(tr: &Trace, region: &Region, min_interval_s: f64) -> Result<Trace, IngestError> {
    if !(min_interval_s >= 0.0 && min_interval_s.is_finite()) {
        return Err(IngestError::Invalid(format!("min_interval must be non-negative, got {min_interval_s}")));
    }
    let mut best = 0..0;
    let mut start = None;
    for (i, fix) in tr.fixes.iter().enumerate() {
        if region.contains(fix.point) {
            let s = *start.get_or_insert(i);
            if i + 1 - s > best.len() {
                best = s..i + 1;
            }
        } else {
            start = None;
        }
    }
    if best.is_empty() {
        return Err(IngestError::EmptyTrace);
    }
    let min_gap = Duration::nanoseconds((min_interval_s * 1e9).round() as i64);
    let mut fixes: Vec<Fix> = Vec::with_capacity(best.len());
    for fix in &tr.fixes[best] {
        match fixes.last() {
            Some(last) if fix.t - last.t < min_gap => {}
            _ => fixes.push(fix.clone()),
        }
    }
    Ok(Trace {
        user: tr.user.clone(),
        fixes,
        projection: tr.projection,
    })
}

/// Shape of a synthetic trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum WalkKind {
    /// Every fix at the region center.
    Stationary,
    /// Constant heading chosen at random.
    Line,
    /// Independent uniform heading at every step.
    RandomWalk,
    /// Back-and-forth travel along one fixed route. The route (a smooth
    /// random path of `route_fixes` steps) depends only on `route_seed`, so
    /// traces generated from different streams revisit the same streets.
    Commute { route_seed: u64, route_fixes: usize },
}

/// Timestamps and placement for synthetic traces.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub region: Region,
    pub start: DateTime<Utc>,
    pub interval_s: f64,
    pub user: String,
}

impl SynthConfig {
    pub fn new(region: Region) -> Self {
        SynthConfig {
            region,
            start: Utc.with_ymd_and_hms(2020, 1, 1, 0, 0, 0).unwrap(),
            interval_s: 2.0,
            user: "synthetic".into(),
        }
    }

    pub fn user(mut self, user: impl Into<String>) -> Self {
        self.user = user.into();
        self
    }
}

/// Default synthetic study region (Beijing city center).
pub fn default_region() -> Region {
    Region::with_default_side(GeoPoint { lat: 39.9042, lon: 116.4074 }).expect("valid constant")
}

/// Generates a synthetic path of `t` fixes in region-relative planar
/// coordinates. Walks reflect off the region boundary.
pub fn synth_path<R: Rng + ?Sized>(
    kind: WalkKind,
    step: f64,
    t: usize,
    region: &Region,
    rng: &mut R,
) -> Result<Vec<PlanarPoint>, IngestError> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(IngestError::Invalid(format!("step must be non-negative, got {step}")));
    }
    if t == 0 {
        return Err(IngestError::Invalid("a trace needs at least one fix".into()));
    }
    let h = region.half_side();
    let mut out = Vec::with_capacity(t);
    match kind {
        WalkKind::Stationary => out.resize(t, PlanarPoint::ORIGIN),
        WalkKind::Line => {
            let mut heading = angle(rng);
            let mut p = PlanarPoint::ORIGIN;
            out.push(p);
            for _ in 1..t {
                (p, heading) = reflect(p.offset_polar(step, heading), heading, h);
                out.push(p);
            }
        }
        WalkKind::RandomWalk => {
            let mut p = PlanarPoint::ORIGIN;
            out.push(p);
            for _ in 1..t {
                (p, _) = reflect(p.offset_polar(step, angle(rng)), 0.0, h);
                out.push(p);
            }
        }
        WalkKind::Commute { route_seed, route_fixes } => {
            let route = commute_route(route_seed, route_fixes.max(2), step.max(1.0), h);
            let length = route.length();
            // Random starting point and direction along the route.
            let mut s = unit(rng) * length;
            let mut dir = if unit(rng) < 0.5 { 1.0 } else { -1.0 };
            for _ in 0..t {
                out.push(route.at(s));
                s += dir * step;
                if s > length {
                    s = 2.0 * length - s;
                    dir = -1.0;
                } else if s < 0.0 {
                    s = -s;
                    dir = 1.0;
                }
                s = s.clamp(0.0, length);
            }
        }
    }
    Ok(out)
}

/// Generates a synthetic [`Trace`] of `t` fixes spaced `cfg.interval_s` apart.
pub fn synth_walk<R: Rng + ?Sized>(
    kind: WalkKind,
    step: f64,
    t: usize,
    cfg: &SynthConfig,
    rng: &mut R,
) -> Result<Trace, IngestError> {
    let path = synth_path(kind, step, t, &cfg.region, rng)?;
    let projection = cfg.region.projection();
    let dt = Duration::nanoseconds((cfg.interval_s * 1e9).round() as i64);
    let fixes = path
        .into_iter()
        .enumerate()
        .map(|(i, p)| {
            Ok(Fix {
                t: cfg.start + dt * i as i32,
                point: projection.unproject(p)?,
                user: cfg.user.clone(),
                released: None,
            })
        })
        .collect::<Result<Vec<_>, GeoError>>()?;
    Ok(Trace {
        user: cfg.user.clone(),
        fixes,
        projection,
    })
}

/// Reflects a point back into [−h, h]² and mirrors the heading accordingly.
fn reflect(mut p: PlanarPoint, mut heading: f64, h: f64) -> (PlanarPoint, f64) {
    for _ in 0..4 {
        let mut changed = false;
        if p.x > h {
            p.x = 2.0 * h - p.x;
            heading = std::f64::consts::PI - heading;
            changed = true;
        } else if p.x < -h {
            p.x = -2.0 * h - p.x;
            heading = std::f64::consts::PI - heading;
            changed = true;
        }
        if p.y > h {
            p.y = 2.0 * h - p.y;
            heading = -heading;
            changed = true;
        } else if p.y < -h {
            p.y = -2.0 * h - p.y;
            heading = -heading;
            changed = true;
        }
        if !changed {
            break;
        }
    }
    p.x = p.x.clamp(-h, h);
    p.y = p.y.clamp(-h, h);
    (p, heading.rem_euclid(std::f64::consts::TAU))
}

struct Route {
    vertices: Vec<PlanarPoint>,
    seg_len: f64,
}

impl Route {
    fn length(&self) -> f64 {
        self.seg_len * (self.vertices.len() - 1) as f64
    }

    fn at(&self, s: f64) -> PlanarPoint {
        let pos = (s / self.seg_len).clamp(0.0, (self.vertices.len() - 1) as f64);
        let i = (pos.floor() as usize).min(self.vertices.len() - 2);
        let f = pos - i as f64;
        let (a, b) = (self.vertices[i], self.vertices[i + 1]);
        PlanarPoint {
            x: a.x + f * (b.x - a.x),
            y: a.y + f * (b.y - a.y),
        }
    }
}

/// A smooth random path: heading drifts by at most ±0.35 rad per segment.
fn commute_route(seed: u64, n: usize, seg_len: f64, h: f64) -> Route {
    let mut rng = RngSeed(seed).stream();
    let mut heading = angle(&mut rng);
    let mut p = PlanarPoint::ORIGIN;
    let mut vertices = Vec::with_capacity(n);
    vertices.push(p);
    for _ in 1..n {
        heading += (unit(&mut rng) - 0.5) * 0.7;
        let next = p.offset_polar(seg_len, heading);
        let (q, hd) = reflect(next, heading, h * 0.95);
        p = q;
        heading = hd;
        vertices.push(p);
    }
    Route { vertices, seg_len }
}
