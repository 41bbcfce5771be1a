//! Model assembly: declarative specs, MBB blocks, downsampling and the
//! complete network.

pub mod blocks;
pub mod model;
pub mod spec;

pub use blocks::{BinaryFc, BlockOptions, Branch, Downsample, FcOptions, MbbBlock, Mixer};
pub use model::{nchw_to_nhwc, BiMlp};
pub use spec::{
    BinarizeSpec, BlockKind, BranchCounts, DownsampleKind, DownsampleSpec, Fusion, LayerKind, LayerSpec, MbbBlockSpec,
    ModelSpec, Orientation, StageSpec, StemSpec, PRESETS, SCHEMA_VERSION,
};
