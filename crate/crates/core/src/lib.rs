//! Light-field epipolar structure images (ESI) and a two-frame attention
//! tracker built on them.

pub mod attn;
pub mod autograd;
pub mod error;
pub mod esi;
pub mod gas;
pub mod gradcheck;
pub mod lf;
pub mod params;
pub mod ssl;
pub mod tensor;
pub mod track;

pub use error::{Error, Result};
