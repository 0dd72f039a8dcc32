//! Samples, splits, dense grids, augmentations and the tensor cache.

mod augment;
mod cache;
mod grid;
mod samples;

pub use augment::{
    cube_mask, mask_flat, mixup, mixup_with, region_mask, slice_dropout, BoxMask, PlaneMask,
    RegionMask, MIN_REGION_VOXELS,
};
pub use cache::{Cache, CacheKey, Tensor, TensorData, CACHE_ENV};
pub use grid::{GridLayout, DENSE_CHANNELS};
pub use samples::{
    assemble, AssembleOptions, Representation, SampleSet, SessionData, SessionKey, Split,
    SplitKind, SplitPlan, SplitSets,
};
