//! Small dense-network stack: layers, reverse-mode gradients, Adam, losses
//! and metrics.

mod adam;
mod layers;
mod loss;
mod model;

pub use adam::{adam_step, AdamState, GroupFlags, BETA1, BETA2, EPSILON};
pub use layers::{
    ActivationKind, ActivationLayer, ActivationSpec, DenseLayer, DitacSettings, DitacUnit, PRELU_INIT,
};
pub use loss::{
    argmax_rows, cross_entropy_grad, cross_entropy_loss, mse_grad, mse_loss, r2_score, softmax_rows,
    top1_accuracy,
};
pub use model::{Gradients, Head, Layer, MlpModel, ParamInfo, ParamKind, ParameterCount};
