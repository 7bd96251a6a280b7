//! Soft rasterization and compositing.

mod composite;
mod distance;
pub mod jet;
mod occupancy;
mod render;
mod texture;

pub use composite::{
    composite_layered, composite_sr, layered_weights, sr_weights, Layer, LayerStack, SoftRasParams,
};
pub use distance::{query, signed_distance, signed_sq_distance, TriangleQuery, DEGENERATE_AREA};
pub use occupancy::{occupancy, occupancy_grad, occupancy_sr};
pub use render::{hard_silhouette, solid_image, Aggregation, Diagnostics, OccupancyKind, RenderSettings, Rendered, Renderer};
pub use texture::{texel_center_uv, TextureView};
