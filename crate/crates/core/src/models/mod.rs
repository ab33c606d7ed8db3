//! The two classifier architectures as layer graphs, plus `.bkpt`
//! checkpoints.

mod arch;
mod checkpoint;
mod graph;

pub use arch::{
    build_embedding_mlp, build_melspec_cnn, class_index, Architecture, CLASS_NAMES, N_CLASSES, N_MELS,
};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta,
    CHECKPOINT_VERSION,
};
pub use graph::{ForwardPass, Gradients, GraphBuilder, ModelGraph, Node, Src};
