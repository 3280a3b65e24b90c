//! Multi-branch fully convolutional face detector.
//!
//! A single backbone pass feeds K detection branches; each branch fuses a
//! branch-specific set of backbone feature maps (fixed bilinear up-sampling,
//! max-pool down-sampling, channel concatenation) and predicts per-anchor
//! face scores and box regressions. Training minimizes the joint
//! classification + smooth-L1 regression loss over OHEM-sampled anchors;
//! inference decodes, optionally sweeps an image pyramid, and merges all
//! branches with one global NMS.

pub mod anchors;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
mod parallel;
pub mod tape;
pub mod tensor;
pub mod training;

pub use anchors::{decode, encode, generate_anchors, iou, match_anchors, AnchorSet, BBox, Label,
    MatchResult};
pub use error::{Error, Result};
pub use eval::{average_precision, detect, detect_pyramid, evaluate, nms, Detection, EvalCurve,
    SubsetRule};
pub use model::{build_model, forward, BackboneConfig, BranchConfig, ModelConfig, ModelParams,
    PassStats, SourceLayer};
pub use tape::{Tape, Var};
pub use tensor::{Element, Tensor};
pub use training::{lr_at, preprocess, train, TrainConfig, TrainLog};
