//! Core planes of the model hub: a versioned model registry, a weights-only
//! acquisition channel, a container runtime adapter, the inference gateway
//! (batching, autoscaling, blue-green swaps), telemetry, and the clinician
//! evaluation layer with its hash-chained audit log.
//!
//! [`hub::Hub`] wires the planes together; the HTTP service and the CLI sit
//! on top of it.

pub mod acquisition;
pub mod digest;
pub mod error;
pub mod evaluation;
pub mod gateway;
pub mod hub;
pub mod net;
pub mod registry;
pub mod runtime;
pub mod telemetry;
pub mod testkit;
pub mod time;

pub use error::{ErrorClass, HubError};
pub use hub::{Hub, HubConfig};



