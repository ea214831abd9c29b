//! Road-segment safety classification: OpenStreetMap feature extraction,
//! SoftImpute matrix completion, SMOTE rebalancing, second-order gradient
//! boosting and spatially separated cross-validation.

pub mod cv;
pub mod error;
pub mod features;
pub mod gbt;
pub mod impute;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod osm;
pub mod pipeline;
pub mod smote;
pub mod spatial;
pub mod synth;

pub use error::{Error, Result};
pub use model::{derive_label, haversine_m, GeoPoint, RoadSegment, SafetyLabel, StarRating};
