//! Bit-exact serialization: FIMG float rasters, binary PLY point clouds and
//! meshes, and JSON scene manifests.

pub mod fimg;
pub mod manifest;
pub mod ply;

pub use fimg::{read_fimg, write_fimg, ChannelSemantics, Raster};
pub use manifest::{
    read_manifest, write_manifest, ModelSpec, NoiseSpec, RasterPaths, SceneManifest, ViewEntry,
    MANIFEST_VERSION,
};
pub use ply::{read_ply, write_ply_cloud, write_ply_mesh};
