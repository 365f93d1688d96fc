//! Single-shot detection of panels and characters on comic book pages.
//!
//! The crate covers the full pipeline: anchor clustering, a three-scale
//! residual detection network with its own forward/backward engine, target
//! encoding and loss, Adam training, decoding, non-maximal suppression,
//! ground-truth matching and precision/recall/F-measure evaluation, plus
//! dataset ingestion (VGG Image Annotator JSON), a synthetic page generator
//! and box rendering.

pub mod anchors;
pub mod checkpoint;
pub mod data;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod loss;
pub mod network;
pub mod nn;
pub mod pipeline;
pub mod postprocess;
pub mod train;

pub use anchors::{assign_anchor, cluster_anchors, AnchorSet, Scale};
pub use error::{Error, Result};
pub use eval::{evaluate, match_to_ground_truth, EvalReport, MatchResult};
pub use geometry::{iou, BBox, ImageSpace, Label, LabeledBox, NETWORK_SIZE};
pub use loss::{detection_loss, encode_targets, LossBreakdown, TargetGrids};
pub use network::{class_probabilities, DetectionHeads, HeadMode, Network, NetworkConfig};
pub use postprocess::{decode, filter_objectness, nms, Detection};
pub use train::{train, TrainSchedule};
