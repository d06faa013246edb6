//! Registration and annotation transfer for multi-magnification microscope
//! slide imagery.
//!
//! The crate is organised bottom-up:
//!
//! - [`imagecore`]: rasters, filtering, resampling and the low-cost-optics
//!   degradation operator.
//! - [`features`]: FAST-12 corners, 256-bit binary descriptors, Hamming matching.
//! - [`geom`]: homographies, normalized DLT, RANSAC and Gauss-Newton polish.
//! - [`scopemodel`]: magnifications, field-of-view accounting, stage calibration.
//! - [`virtualscope`]: a procedural blood-smear world and view renderer used
//!   as ground truth.
//! - [`transfer`]: pairwise registration and the six-view annotation chain.
//! - [`tracking`]: frame-to-frame alignment and operator guidance.
//! - [`dalosses`]: ranking and triplet loss kernels with analytic gradients.
//! - [`datastore`]: the JSON manifest, corrections audit trail and splits.
//! - [`workflow`]: store-level batch operations shared by the CLI and service.

pub mod annotation;
pub mod dalosses;
pub mod datastore;
pub mod features;
pub mod geom;
pub mod imagecore;
pub mod scopemodel;
pub mod tracking;
pub mod transfer;
pub mod virtualscope;
pub mod workflow;

pub use annotation::{Annotation, AnnotationSource, AnnotationStatus, CellClass};
pub use geom::{BBox, Homography, Point2};
pub use imagecore::Raster;
pub use scopemodel::{Magnification, MicroscopeProfile, ProfileSet, Slot};

