//! Shape-aware position descriptors (SPD) for instance segmentation maps.
//!
//! Every pixel inside an object instance is described by a log-polar
//! histogram of the instance's contour points as seen from that pixel.
//! Stacked over an image this gives a dense `H x W x (m * n)` map that
//! encodes where each pixel sits within its object's shape, independent of
//! the object's position and size.
//!
//! Modules:
//!
//! - [`ingest`]: label/instance map loading, instance and contour extraction, one-hot layouts.
//! - [`spd`]: the descriptor of a single point.
//! - [`spdmap`]: dense maps, pooling, and the `SPD1` binary format.
//! - [`safm`]: a reference forward (and verification-only backward) pass of
//!   the semantic-shape adaptive modulation block on [`tensor::Tensor4`].
//! - [`losses`]: adversarial, feature matching, perceptual and
//!   class-weighted semantic alignment losses.
//! - [`oracle`], [`selftest`], [`synth`]: brute-force references, the
//!   embedded property suite and synthetic fixtures.

pub mod gradcheck;
pub mod ingest;
pub mod losses;
pub mod oracle;
pub mod safm;
pub mod selftest;
pub mod spd;
pub mod spdmap;
pub mod synth;
pub mod tensor;

pub use ingest::{InstanceMap, InstanceRegion, LabelMap, MapFormat, Pixel};
pub use spd::{BinSpec, Point, RadialScale, SpdDescriptor};
pub use spdmap::{SpdMap, MapStats};
pub use tensor::Tensor4;
