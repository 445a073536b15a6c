//! HTTP backend for the AR demo.
//!
//! Clients post their true fix to `/PrivAR`; the service perturbs it with
//! the session's mechanism, spawns a virtual-object field around the
//! released location and reports how many visible objects remain catchable.
//! TR-PSM sessions keep their budget ledger here and can be topped up or
//! ended through `/PrivAR/topup` and `/PrivAR/end`.

pub mod http;
pub mod store;
pub mod wire;

pub use http::{router, serve};
pub use store::{session_seed, Service, ServiceConfig, ServiceError, StoreSnapshot};
pub use wire::{EndLedger, EndRequest, ErrorBody, PrivArRequest, PrivArResponse, TopUpAck, TopUpRequest};
