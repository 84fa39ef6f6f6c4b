//! Hierarchical shifted-window transformer backbone with optional CBAM at
//! model, stage or block level.

pub mod attention;
pub mod backbone;
pub mod block;
pub mod config;
pub mod window;

pub use attention::{relative_position_bias, relative_position_index, window_msa, window_msa_traced, MsaVars};
pub use backbone::{merge_map, patch_partition, PatchMerging, Stage, SwinBackbone};
pub use block::{block_pair_forward, BlockSpec, SwinBlock};
pub use config::{count_cbam_invocations, Placement, SwinConfig, IMAGE_CHANNELS};
pub use window::{build_shift_mask, window_partition, window_reverse, WindowLayout, MASK_LARGE};
