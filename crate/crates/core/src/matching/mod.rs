//! Set-prediction supervision: box geometry, Hungarian matching and the
//! focal / L1 / GIoU detection loss.

mod boxes;
mod hungarian;
mod loss;

pub use boxes::{area, giou, iou, to_corners, BoxCxcywh};
pub use hungarian::{hungarian_match, MatchAssignment};
pub use loss::{
    class_cost, detection_loss, focal_loss, focal_term, giou_loss, match_cost, stage_assignment,
    Focal, GroundTruth, LossBreakdown, LossConfig, LossWeights, StageLoss,
};
