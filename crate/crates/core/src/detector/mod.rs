//! Region-proposal gaze-target detector over five-channel enhanced frames.

mod anchors;
mod model;
mod roi;
mod train;

pub use anchors::{decode_box, decode_box_unclipped, encode_box, generate_anchors, nms, Anchor, MAX_LOG_RATIO};
pub use model::{Detections, Detector, DetectorConfig, GazeCandidate, INPUT_CHANNELS, MASK_SIZE};
pub use roi::{roi_align, roi_sampling, RoiSampling, ROI_SAMPLES, ROI_SIZE};
pub use train::{
    assign_anchors, detector_loss, mask_target, plan_anchors, train_detector, AnchorPlan, DetectorLossProbe,
    DetectorSample, DetectorTrainConfig, DetectorTraining, LossParts,
};

use crate::enhance::EnhanceError;
use crate::nn::NnError;

#[derive(Debug, thiserror::Error)]
pub enum DetectorError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid corpus: {0}")]
    InvalidCorpus(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Enhance(#[from] EnhanceError),
}
