//! MLP function approximators, Adam, the squashed-Gaussian actor and
//! checkpoint I/O.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod policy;

pub use adam::AdamState;
pub use mlp::{soft_update, Layer, Mlp, MlpCache, MlpGrads};
pub use policy::{sample_action, GaussianPolicyNet, PolicySample};
