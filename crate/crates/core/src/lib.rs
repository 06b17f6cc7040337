//! Reference-free, self-supervised enhancement of retinal fundus images.
//!
//! Images are cut into patches, split into low/high quality by a small
//! classifier, and the high-quality patches are grouped into illumination
//! styles. Content, degradation and style factors are then disentangled by a
//! set of encoders and generators trained only with re-fed reconstructions
//! and adversarial alignment; no clean reference for a degraded input is
//! ever needed.

pub mod degrade;
pub mod enhance;
pub mod error;
pub mod imagedata;
pub mod losses;
pub mod networks;
pub mod paramfile;
pub mod pipeline;
pub mod quality;
pub mod stylecluster;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
