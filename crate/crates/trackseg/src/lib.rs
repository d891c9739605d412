//! Joint multiple-target tracking and segmentation.
//!
//! Per-target appearance models are learned online with a structured SVM and
//! tracks are selected by per-target min-cost network flow over densely
//! sampled candidate boxes. Segmentation runs a multi-label CRF over a
//! superpixel spatio-temporal graph, with GMM color models providing unaries.
//! The two solvers are coupled per video segment through Lagrangian dual
//! decomposition: a subgradient loop exchanges box-selection penalties until
//! the tracking and segmentation solutions agree.
//!
//! See the `examples/` directory for runnable entry points to each stage and
//! the `trackseg` binary for the file-based pipeline.

pub mod appearance;
pub mod color;
pub mod error;
pub mod features;
pub mod gmm;
pub mod grabcut;
pub mod joint;
pub mod maxflow;
pub mod optflow;
pub mod scene;
pub mod slic;
pub mod stgraph;
pub mod trackflow;

pub use error::{Error, Result};
