//! Minimal differentiable layers, the four model families and AdamW.

mod graph;
mod layers;
mod model;
mod params;

pub use graph::{
    knn_graph, lattice_graph, sensor_graph, voxel_graph, GraphKind, GraphSpec, MIN_GRAPH_NODES,
};
pub use model::{
    bce_with_logits, Family, InputShape, Mode, Model, ModelSpec, Tape, BUDGET_TOLERANCE, CHUNK,
    EMBEDDING_DIM, SE_REDUCTION, SPATIAL_CHUNK_COLUMNS,
};
pub use params::{AdamW, LayoutBuilder, ParamStore, Slot, TensorInfo};
