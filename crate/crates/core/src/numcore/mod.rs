//! Dense linear algebra and the hand-written gradient engine used by the VAE.

mod layers;
mod linalg;
mod matrix;
mod optim;
mod rng;
mod stats;

pub use layers::{
    clamp_logvar, clamp_logvar_backward, gaussian_kl, mse_loss, relu, relu_backward,
    reparameterize, reparameterize_backward, reparameterize_with_noise, KlTerm, Linear,
    Reparameterized, LOGVAR_MAX, LOGVAR_MIN,
};
pub use linalg::{cholesky, covariance, solve_lower, solve_lower_in_place};
pub use matrix::{gemm, Matrix};
pub use optim::{Adam, LrSchedule};
pub use rng::RngStream;
pub use stats::{pearson_corr, ranks, spearman_corr};
