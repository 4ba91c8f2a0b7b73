mod checkpoint;
mod graph;
mod store;

pub use checkpoint::{load as load_checkpoint, save as save_checkpoint, Manifest, ParamEntry, CKPT_FORMAT};
pub use graph::{cosine, harmonic_lambda_raw, Graph, TensorRef, EPS_NORM};
pub use store::{Bound, Param, ParamStore};
