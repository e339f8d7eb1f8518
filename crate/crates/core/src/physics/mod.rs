//! Physical layer: scanner geometry, projector pair, FBP, low-dose noise,
//! implants and phantoms.

pub mod fbp;
pub mod geometry;
pub mod metal;
pub mod noise;
pub mod phantom;
pub mod projector;

pub use fbp::{fbp, Apodization};
pub use geometry::FanBeamGeometry;
pub use metal::{ellipse_mask, insert_metal, MetalSpec};
pub use noise::{degrade_low_dose, DoseLevel};
pub use phantom::{make_phantom, to_hu, PhantomKind, MU_METAL, MU_WATER};
pub use projector::{metal_trace, Projector};
