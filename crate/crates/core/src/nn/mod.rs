//! From-scratch convolutional network pieces shared by the learned
//! iterative scheme and the post-processing baseline.

pub mod block;
pub mod conv;
pub mod io;
pub mod loss;
pub mod params;
pub mod real;
pub mod train;

pub use params::{Adam, ParamLayout};
pub use real::Real;
