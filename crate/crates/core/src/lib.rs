pub mod autodiff;
pub mod block;
pub mod check;
pub mod checkpoint;
pub mod error;
pub mod fem_read;
pub mod golden;
pub mod mat;
pub mod oracle;
pub mod priors;
pub mod tasks;
pub mod tdc;
pub mod trainer;

pub use error::{FemError, Result};
pub use mat::Mat;
