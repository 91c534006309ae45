//! Numerical building blocks for the cooperative tracker: a dense `f64`
//! matrix, linear/MLP/attention layers with hand-derived backward passes,
//! focal and L1 losses, rectangular Hungarian assignment, the 6D rotation
//! codec, AdamW, and a finite-difference gradient checker.

pub mod attention;
pub mod error;
pub mod gradcheck;
pub mod hungarian;
pub mod loss;
pub mod matrix;
pub mod nn;
pub mod optim;
pub mod param;
pub mod pe;
pub mod rotation;

pub use attention::{attend, attend_backward, scaled_dot_attention, KeySets, MultiHeadAttention};
pub use error::{NumericsError, Result};
pub use hungarian::{hungarian, Assignment};
pub use loss::{focal_loss, focal_loss_logit, l1_loss, l1_loss_grad};
pub use matrix::Matrix;
pub use nn::{layer_norm, layer_norm_backward, linear_forward, mlp_forward, sigmoid, Activation, Linear, Mlp};
pub use optim::{adamw_step, clip_grad_norm, cosine_lr, AdamW};
pub use param::{Init, ParamId, ParamStore};
pub use pe::sinusoidal_pe;
pub use rotation::{rot6d_decode, rot6d_encode, Mat3, Vec3};
