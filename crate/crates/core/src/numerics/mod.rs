//! Dense MLP engine, Adam, and the binary parameter container shared by the
//! behavior model and the critic.

pub mod adam;
pub mod checkpoint;
pub mod mlp;
pub mod standardize;

pub use adam::{AdamConfig, AdamState};
pub use checkpoint::NamedArray;
pub use mlp::{mse_loss, Activation, Dense, Mlp, MlpParams, MlpSpec};
pub use standardize::Standardizer;
