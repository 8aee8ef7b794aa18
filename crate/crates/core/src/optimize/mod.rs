//! Loss, optimizer, metric and gradient verification.

mod gradcheck;
mod loss;
mod rmsprop;

pub use gradcheck::{finite_difference_check, GradCheckConfig, GradCheckEntry, GradCheckReport, Objective};
pub use loss::{accuracy, argmax, bce_loss, squared_error, LossResult, PROBABILITY_CLAMP};
pub use rmsprop::{rmsprop_step, RmsProp, RmsPropConfig, RmsPropState};
