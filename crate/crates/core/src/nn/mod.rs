//! Minimal differentiable building blocks: tensors on a tape, convolution and
//! dense layers, and the Adam optimiser.

pub mod adam;
pub mod gradcheck;
pub mod kernels;
pub mod params;
pub mod resample;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{check_input_gradient, check_param_gradients, relative_error, GradCheck};
pub use kernels::ConvGeom;
pub use params::{Conv, Dense, ParamBuilder, ParamSet};
pub use resample::{ResamplePlan, Window};
pub use tape::{Gradients, Tape, Var};
