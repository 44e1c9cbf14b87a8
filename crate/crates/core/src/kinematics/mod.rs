//! Catheter joint space, constant-curvature shape, forward kinematics and the learned
//! shape regressor.

mod joints;
mod shape;
mod shape_model;

pub use joints::{clamp_joints, Dof, DofLimit, JointLimits, JointState, LimitsError};
pub use shape::{
    bend_shape, forward_kinematics, tip_pose, CatheterShape, Frame, InsertionPort, RigGeometry,
    TipPose, SHAPE_POINTS,
};
pub use shape_model::{
    fit_shape_model, generate_shape_dataset, predict_shape, resample_equal_arc, FitReport,
    ShapeFitConfig, ShapeModel, ShapeModelDoc, ShapeModelError, ShapePrediction, ShapeSample,
};
