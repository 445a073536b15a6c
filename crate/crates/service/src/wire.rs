//! JSON payloads for the `/PrivAR` endpoints.
//!
//! Every payload carries a schema version `v`. Requests may omit it; a
//! request with any other version is rejected.

use std::collections::BTreeMap;

use chrono::{DateTime, Utc};
use geoind_core::objects::Density;
use geoind_core::{GeoPoint, MechanismKind, ReleaseKind};
use serde::{Deserialize, Serialize};

pub const WIRE_VERSION: u32 = 1;

fn wire_version() -> u32 {
    WIRE_VERSION
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivArRequest {
    #[serde(default = "wire_version")]
    pub v: u32,
    pub session_id: String,
    pub mechanism: MechanismKind,
    pub epsilon: f64,
    /// Session budget ε_T. TR-PSM only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_total: Option<f64>,
    /// Threshold δ in meters. TR-PSM only; defaults to 5 m when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    /// Falls back to the server's default density when omitted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub density: Option<Density>,
    pub true_location: GeoPoint,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireObject {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivArResponse {
    pub v: u32,
    pub session_id: String,
    pub released_location: GeoPoint,
    pub decision: ReleaseKind,
    /// Total budget spent by the session so far.
    pub budget_spent: f64,
    /// Budget left before the next crossing fails. Null for stateless
    /// mechanisms, which have no session cap.
    pub budget_left: Option<f64>,
    pub objects: Vec<WireObject>,
    /// Null when nothing is visible from the true location.
    pub catchable_pct: Option<f64>,
    /// Stage name to milliseconds.
    pub timings: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TopUpRequest {
    #[serde(default = "wire_version")]
    pub v: u32,
    pub session_id: String,
    pub additional: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopUpAck {
    pub v: u32,
    pub session_id: String,
    pub epsilon_total: f64,
    pub budget_left: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndRequest {
    #[serde(default = "wire_version")]
    pub v: u32,
    pub session_id: String,
}

/// Final ledger of an ended session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndLedger {
    pub v: u32,
    pub session_id: String,
    pub mechanism: MechanismKind,
    /// TR-PSM: threshold crossings k after the first fix. Stateless: fixes served.
    pub releases: u64,
    pub requests: u64,
    pub spend: f64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub v: u32,
    /// Machine-readable kind: `BadRequest`, `NotFound`, `Conflict` or `BudgetExhausted`.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spend: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epsilon_total: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget_left: Option<f64>,
}
