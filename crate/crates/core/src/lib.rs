//! Consensus pseudo-labels from black-box detection and classification models.
//!
//! Predictions from several input models over an unlabeled corpus are
//! filtered ([`filtering`]), clustered per object and voted on
//! ([`aggregation`]), and written out as a COCO dataset ([`io`]). Image
//! classification uses plain majority voting ([`classification`]).
//! [`evaluation`] scores the result against ground truth, [`client`] collects
//! predictions from live endpoints, and [`simharness`] provides synthetic
//! scenes and detectors for end-to-end checks.

pub mod aggregation;
pub mod bbox;
pub mod classification;
pub mod client;
pub mod error;
pub mod evaluation;
pub mod filtering;
pub mod io;
pub mod simharness;
pub mod types;

pub use bbox::{area, iou, BBox};
pub use error::{Error, Result};
pub use types::{CategoryId, CategoryTable, Detection, ImageId, ImageRef, ModelId, ModelSpec, Registry};
