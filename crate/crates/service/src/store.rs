//! Session store and request handling, independent of the HTTP layer.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use geoind_core::objects::{
    catchable_fraction, generate_field, Density, ObjectFieldConfig, DEFAULT_FIELD_RADIUS_M,
    DEFAULT_VISIBILITY_RADIUS_M,
};
use geoind_core::session::{SessionError, SessionSnapshot, DEFAULT_DELTA_M};
use geoind_core::{
    Epsilon, GeoPoint, MechanismConfig, MechanismKind, PlanarPoint, Projection, ReleaseKind,
    RngSeed, RngStream, TrPsmConfig, TrPsmSession,
};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{
    EndLedger, EndRequest, ErrorBody, PrivArRequest, PrivArResponse, TopUpAck, TopUpRequest,
    WireObject, WIRE_VERSION,
};

pub const DEFAULT_SESSION_TTL: Duration = Duration::from_secs(600);

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceConfig {
    pub default_density: Density,
    pub field_radius: f64,
    pub visibility_radius: f64,
    pub session_ttl: Duration,
    /// Master seed; each session's stream is derived from it and the session id.
    pub seed: RngSeed,
    /// Where sessions are saved on shutdown and loaded from on startup.
    pub snapshot_path: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            default_density: Density::Sparse,
            field_radius: DEFAULT_FIELD_RADIUS_M,
            visibility_radius: DEFAULT_VISIBILITY_RADIUS_M,
            session_ttl: DEFAULT_SESSION_TTL,
            seed: RngSeed(0),
            snapshot_path: None,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServiceError {
    #[error("{0}")]
    BadRequest(String),
    #[error("unknown session '{0}'")]
    NotFound(String),
    #[error("{0}")]
    Conflict(String),
    #[error("privacy budget exhausted: spent {spend} of {epsilon_total}")]
    BudgetExhausted { spend: f64, epsilon_total: f64, budget_left: f64 },
}

impl ServiceError {
    pub fn status(&self) -> u16 {
        match self {
            ServiceError::BadRequest(_) => 400,
            ServiceError::NotFound(_) => 404,
            ServiceError::Conflict(_) | ServiceError::BudgetExhausted { .. } => 409,
        }
    }

    pub fn body(&self) -> ErrorBody {
        let (kind, spend, epsilon_total, budget_left) = match *self {
            ServiceError::BadRequest(_) => ("BadRequest", None, None, None),
            ServiceError::NotFound(_) => ("NotFound", None, None, None),
            ServiceError::Conflict(_) => ("Conflict", None, None, None),
            ServiceError::BudgetExhausted { spend, epsilon_total, budget_left } => {
                ("BudgetExhausted", Some(spend), Some(epsilon_total), Some(budget_left))
            }
        };
        ErrorBody {
            v: WIRE_VERSION,
            error: kind.to_owned(),
            message: self.to_string(),
            spend,
            epsilon_total,
            budget_left,
        }
    }
}

fn bad(e: impl std::fmt::Display) -> ServiceError {
    ServiceError::BadRequest(e.to_string())
}

/// FNV-1a, used to turn a session id into a seed salt.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ b as u64).wrapping_mul(0x0100_0000_01b3))
}

/// Seed of the `incarnation`-th session opened under `session_id`.
/// Incarnation 0 is the first; it increases each time the id is ended or expires.
pub fn session_seed(master: RngSeed, session_id: &str, incarnation: u64) -> RngSeed {
    master.derive(fnv1a(session_id)).derive(incarnation)
}

#[derive(Debug)]
enum State {
    Stateless(MechanismConfig),
    TrPsm(TrPsmSession),
}

#[derive(Debug)]
struct Session {
    mechanism: MechanismKind,
    epsilon: f64,
    /// Anchored at the session's first fix.
    projection: Projection,
    state: State,
    rng: RngStream,
    seed: RngSeed,
    incarnation: u64,
    requests: u64,
    last_seen: Instant,
}

impl Session {
    fn spend(&self) -> f64 {
        match &self.state {
            State::Stateless(_) => self.requests as f64 * self.epsilon,
            State::TrPsm(s) => s.spend(),
        }
    }
}

type Slot = Arc<Mutex<Option<Session>>>;

/// All live sessions. The map lock is held only for lookup and insertion;
/// each session has its own lock so different ids proceed in parallel.
pub struct Service {
    cfg: ServiceConfig,
    sessions: Mutex<HashMap<String, Slot>>,
    incarnations: Mutex<HashMap<String, u64>>,
}

impl Service {
    pub fn new(cfg: ServiceConfig) -> Result<Self, ServiceError> {
        for (name, v) in [("field_radius", cfg.field_radius), ("visibility_radius", cfg.visibility_radius)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(bad(format!("{name} must be positive, got {v}")));
            }
        }
        let svc = Service {
            cfg,
            sessions: Mutex::new(HashMap::new()),
            incarnations: Mutex::new(HashMap::new()),
        };
        if let Some(path) = svc.cfg.snapshot_path.clone() {
            if path.exists() {
                svc.load_snapshot(&path)?;
            }
        }
        Ok(svc)
    }

    pub fn config(&self) -> &ServiceConfig {
        &self.cfg
    }

    /// Number of live sessions.
    pub fn session_count(&self) -> usize {
        let slots: Vec<Slot> = self.sessions.lock().values().cloned().collect();
        slots.iter().filter(|s| s.lock().is_some()).count()
    }

    fn slot(&self, id: &str) -> Slot {
        self.sessions.lock().entry(id.to_owned()).or_default().clone()
    }

    fn existing(&self, id: &str) -> Option<Slot> {
        self.sessions.lock().get(id).cloned()
    }

    fn next_incarnation(&self, id: &str) -> u64 {
        *self.incarnations.lock().get(id).unwrap_or(&0)
    }

    fn retire(&self, id: &str, incarnation: u64) {
        let mut inc = self.incarnations.lock();
        let e = inc.entry(id.to_owned()).or_insert(0);
        *e = (*e).max(incarnation + 1);
    }

    fn is_expired(&self, s: &Session, now: Instant) -> bool {
        now.saturating_duration_since(s.last_seen) > self.cfg.session_ttl
    }

    /// Parses, handles and serializes one `/PrivAR` request. The
    /// `serialize` timing is the cost of encoding the response once; the
    /// reported bytes are a second encoding that includes it.
    pub fn privar_json(&self, body: &[u8]) -> Result<Vec<u8>, ServiceError> {
        let t0 = Instant::now();
        let req: PrivArRequest = serde_json::from_slice(body).map_err(bad)?;
        let parse_ms = ms(t0);
        let mut resp = self.handle_privar(&req)?;
        let t1 = Instant::now();
        serde_json::to_vec(&resp).map_err(bad)?;
        resp.timings.insert("serialize".into(), ms(t1));
        resp.timings.insert("parse".into(), parse_ms);
        resp.timings.insert("total".into(), ms(t0));
        serde_json::to_vec(&resp).map_err(bad)
    }

    pub fn handle_privar(&self, req: &PrivArRequest) -> Result<PrivArResponse, ServiceError> {
        validate_request(req)?;
        let density = req.density.unwrap_or(self.cfg.default_density);
        let field = ObjectFieldConfig {
            spacing: density.spacing(),
            field_radius: self.cfg.field_radius,
            visibility_radius: self.cfg.visibility_radius,
        };
        let slot = self.slot(&req.session_id);
        let mut guard = slot.lock();
        let now = Instant::now();
        if let Some(s) = guard.as_ref() {
            if self.is_expired(s, now) {
                self.retire(&req.session_id, s.incarnation);
                *guard = None;
            }
        }

        let t_perturb = Instant::now();
        let (x, z, kind) = match guard.as_mut() {
            Some(s) => {
                if s.mechanism != req.mechanism || s.epsilon != req.epsilon {
                    return Err(ServiceError::Conflict(format!(
                        "session '{}' runs {} at ε = {}; end it before changing parameters",
                        req.session_id, s.mechanism, s.epsilon
                    )));
                }
                let x = s.projection.project(req.true_location).map_err(bad)?;
                let (z, kind) = match &mut s.state {
                    State::Stateless(m) => (m.perturb_one(x, &mut s.rng), ReleaseKind::Released),
                    State::TrPsm(t) => {
                        let d = t.step(x, &mut s.rng).map_err(|e| ServiceError::BudgetExhausted {
                            spend: e.spend,
                            epsilon_total: e.epsilon_total,
                            budget_left: e.epsilon_left,
                        })?;
                        (d.output, d.kind)
                    }
                };
                s.requests += 1;
                s.last_seen = now;
                (x, z, kind)
            }
            None => {
                let incarnation = self.next_incarnation(&req.session_id);
                let seed = session_seed(self.cfg.seed, &req.session_id, incarnation);
                let mut rng = seed.stream();
                let projection = Projection::new(req.true_location).map_err(bad)?;
                let x = PlanarPoint::ORIGIN;
                let eps = Epsilon::new(req.epsilon).map_err(bad)?;
                let (state, z, kind) = match req.mechanism {
                    MechanismKind::Trpsm => {
                        let cfg = TrPsmConfig::new(
                            eps,
                            req.epsilon_total.unwrap_or_default(),
                            req.delta.unwrap_or(DEFAULT_DELTA_M),
                        );
                        let (t, d) = TrPsmSession::start(x, cfg, &mut rng).map_err(bad)?;
                        (State::TrPsm(t), d.output, d.kind)
                    }
                    MechanismKind::Plm | MechanismKind::Psm => {
                        let m = if req.mechanism == MechanismKind::Plm {
                            MechanismConfig::plm(eps)
                        } else {
                            MechanismConfig::psm(eps)
                        };
                        (State::Stateless(m), m.perturb_one(x, &mut rng), ReleaseKind::Released)
                    }
                };
                *guard = Some(Session {
                    mechanism: req.mechanism,
                    epsilon: req.epsilon,
                    projection,
                    state,
                    rng,
                    seed,
                    incarnation,
                    requests: 1,
                    last_seen: now,
                });
                (x, z, kind)
            }
        };
        let perturb_ms = ms(t_perturb);
        let s = guard.as_mut().expect("session was just set");

        let t_objects = Instant::now();
        let released_location = s.projection.unproject(z).map_err(bad)?;
        let field_objs = generate_field(z, &field, &mut s.rng).map_err(bad)?;
        let catchable_pct = catchable_fraction(x, z, &field_objs, &field).ok();
        let objects = field_objs
            .iter()
            .map(|o| {
                s.projection.unproject(o.point).map(|g| WireObject {
                    id: o.id.clone(),
                    lat: g.lat,
                    lon: g.lon,
                })
            })
            .collect::<Result<Vec<_>, _>>()
            .map_err(bad)?;
        let objects_ms = ms(t_objects);

        let budget_left = match &s.state {
            State::TrPsm(t) => Some(t.epsilon_left()),
            State::Stateless(_) => None,
        };
        Ok(PrivArResponse {
            v: WIRE_VERSION,
            session_id: req.session_id.clone(),
            released_location,
            decision: kind,
            budget_spent: s.spend(),
            budget_left,
            objects,
            catchable_pct,
            timings: BTreeMap::from([("perturb".into(), perturb_ms), ("objects".into(), objects_ms)]),
        })
    }

    fn live(&self, id: &str) -> Result<Slot, ServiceError> {
        let slot = self.existing(id).ok_or_else(|| ServiceError::NotFound(id.to_owned()))?;
        let mut guard = slot.lock();
        match guard.as_ref() {
            None => return Err(ServiceError::NotFound(id.to_owned())),
            Some(s) if self.is_expired(s, Instant::now()) => {
                self.retire(id, s.incarnation);
                *guard = None;
                return Err(ServiceError::NotFound(id.to_owned()));
            }
            Some(_) => {}
        }
        drop(guard);
        Ok(slot)
    }

    pub fn top_up(&self, req: &TopUpRequest) -> Result<TopUpAck, ServiceError> {
        check_version(req.v)?;
        let slot = self.live(&req.session_id)?;
        let mut guard = slot.lock();
        let s = guard.as_mut().ok_or_else(|| ServiceError::NotFound(req.session_id.clone()))?;
        let State::TrPsm(t) = &mut s.state else {
            return Err(ServiceError::Conflict(format!(
                "session '{}' runs {}, which has no session budget",
                req.session_id, s.mechanism
            )));
        };
        let left = t.top_up(req.additional).map_err(|e| match e {
            SessionError::TopUp(_) => bad(e),
            other => bad(other),
        })?;
        s.last_seen = Instant::now();
        Ok(TopUpAck {
            v: WIRE_VERSION,
            session_id: req.session_id.clone(),
            epsilon_total: t.epsilon_total(),
            budget_left: left,
        })
    }

    pub fn end(&self, req: &EndRequest) -> Result<EndLedger, ServiceError> {
        check_version(req.v)?;
        let slot = self.live(&req.session_id)?;
        let mut guard = slot.lock();
        let s = guard.take().ok_or_else(|| ServiceError::NotFound(req.session_id.clone()))?;
        // The empty slot stays in the map so a racing request on the same id
        // starts the next incarnation in it; the reaper drops it later.
        self.retire(&req.session_id, s.incarnation);
        let releases = match &s.state {
            State::TrPsm(t) => t.releases(),
            State::Stateless(_) => s.requests,
        };
        Ok(EndLedger {
            v: WIRE_VERSION,
            session_id: req.session_id.clone(),
            mechanism: s.mechanism,
            releases,
            requests: s.requests,
            spend: s.spend(),
            epsilon: s.epsilon,
        })
    }

    /// Drops sessions idle for longer than the TTL. Returns how many were dropped.
    pub fn purge_expired(&self) -> usize {
        self.purge_idle_since(Instant::now())
    }

    fn purge_idle_since(&self, now: Instant) -> usize {
        let mut map = self.sessions.lock();
        let before = map.len();
        map.retain(|id, slot| {
            // A slot locked by an in-flight request is in use, so keep it.
            let Some(mut guard) = slot.try_lock() else { return true };
            match guard.as_ref() {
                Some(s) if self.is_expired(s, now) => {
                    self.retire(id, s.incarnation);
                    *guard = None;
                    false
                }
                Some(_) => true,
                None => false,
            }
        });
        before - map.len()
    }

    pub fn snapshot(&self) -> StoreSnapshot {
        let slots: Vec<(String, Slot)> =
            self.sessions.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        let mut sessions: Vec<SessionRecord> = slots
            .into_iter()
            .filter_map(|(id, slot)| {
                let guard = slot.lock();
                let s = guard.as_ref()?;
                let (trpsm, stateless) = match &s.state {
                    State::TrPsm(t) => (Some(t.snapshot()), None),
                    State::Stateless(m) => (None, Some(*m)),
                };
                Some(SessionRecord {
                    session_id: id,
                    mechanism: s.mechanism,
                    epsilon: s.epsilon,
                    origin: s.projection.origin(),
                    requests: s.requests,
                    incarnation: s.incarnation,
                    rng_seed: s.seed,
                    rng_word_pos: s.rng.get_word_pos().to_string(),
                    trpsm,
                    stateless,
                })
            })
            .collect();
        sessions.sort_by(|a, b| a.session_id.cmp(&b.session_id));
        let incarnations = self.incarnations.lock().iter().map(|(k, v)| (k.clone(), *v)).collect();
        StoreSnapshot { v: WIRE_VERSION, sessions, incarnations }
    }

    pub fn save_snapshot(&self, path: &Path) -> std::io::Result<()> {
        let json = serde_json::to_vec_pretty(&self.snapshot()).map_err(std::io::Error::other)?;
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, json)?;
        std::fs::rename(tmp, path)
    }

    pub fn load_snapshot(&self, path: &Path) -> Result<usize, ServiceError> {
        let bytes = std::fs::read(path).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        let snap: StoreSnapshot =
            serde_json::from_slice(&bytes).map_err(|e| bad(format!("{}: {e}", path.display())))?;
        self.restore(snap)
    }

    pub fn restore(&self, snap: StoreSnapshot) -> Result<usize, ServiceError> {
        check_version(snap.v)?;
        let now = Instant::now();
        let mut restored = Vec::with_capacity(snap.sessions.len());
        for r in snap.sessions {
            let state = match (r.trpsm, r.stateless) {
                (Some(t), None) => State::TrPsm(TrPsmSession::restore(&t).map_err(bad)?),
                (None, Some(m)) => State::Stateless(m),
                _ => return Err(bad(format!("session '{}': expected exactly one state", r.session_id))),
            };
            let mut rng = r.rng_seed.stream();
            rng.set_word_pos(r.rng_word_pos.parse::<u128>().map_err(bad)?);
            let session = Session {
                mechanism: r.mechanism,
                epsilon: r.epsilon,
                projection: Projection::new(r.origin).map_err(bad)?,
                state,
                rng,
                seed: r.rng_seed,
                incarnation: r.incarnation,
                requests: r.requests,
                last_seen: now,
            };
            restored.push((r.session_id, session));
        }
        let n = restored.len();
        self.incarnations.lock().extend(snap.incarnations);
        let mut map = self.sessions.lock();
        for (id, s) in restored {
            map.insert(id, Arc::new(Mutex::new(Some(s))));
        }
        Ok(n)
    }
}

/// On-disk form of the store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoreSnapshot {
    pub v: u32,
    pub sessions: Vec<SessionRecord>,
    pub incarnations: BTreeMap<String, u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionRecord {
    pub session_id: String,
    pub mechanism: MechanismKind,
    pub epsilon: f64,
    pub origin: GeoPoint,
    pub requests: u64,
    pub incarnation: u64,
    pub rng_seed: RngSeed,
    /// Position in the session's stream, as a decimal string (it is a u128).
    pub rng_word_pos: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trpsm: Option<SessionSnapshot>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stateless: Option<MechanismConfig>,
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

fn check_version(v: u32) -> Result<(), ServiceError> {
    if v != WIRE_VERSION {
        return Err(bad(format!("unsupported schema version {v} (expected {WIRE_VERSION})")));
    }
    Ok(())
}

fn validate_request(req: &PrivArRequest) -> Result<(), ServiceError> {
    check_version(req.v)?;
    if req.session_id.is_empty() {
        return Err(bad("session_id must not be empty"));
    }
    if !(req.epsilon > 0.0 && req.epsilon.is_finite()) {
        return Err(bad(format!("epsilon must be positive and finite, got {}", req.epsilon)));
    }
    req.true_location.validate().map_err(bad)?;
    let is_trpsm = req.mechanism == MechanismKind::Trpsm;
    if is_trpsm && req.epsilon_total.is_none() {
        return Err(bad("trpsm requires epsilon_total"));
    }
    if !is_trpsm && (req.epsilon_total.is_some() || req.delta.is_some()) {
        return Err(bad(format!("epsilon_total and delta apply to trpsm only, not {}", req.mechanism)));
    }
    Ok(())
}
