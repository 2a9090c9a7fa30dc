//! Numeric substrate for the grounding stack: dense `f64` tensors, a
//! define-by-run reverse-mode tape, AdamW, cosine annealing with warm
//! restarts, top-2 PCA and a binary parameter checkpoint format.

pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod params;
pub mod pca;
pub mod schedule;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{check_gradients, check_gradients_at, GradCheck};
pub use optim::{AdamW, AdamWConfig};
pub use params::{he_uniform, xavier_uniform, ParamId, ParamStore};
pub use pca::{pca_top2, Pca2};
pub use schedule::CosineRestartSchedule;
pub use tape::{log_sum_exp, Gradients, Tape, Var};
pub use tensor::Tensor;
