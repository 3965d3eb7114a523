//! Reverse-mode automatic differentiation on a Wengert tape.

pub mod gradcheck;
pub mod ops;
pub mod sgd;
pub mod tape;
pub mod tensor;

pub use sgd::{sgd_step, SgdHyper, SgdState};
pub use tape::{Tape, ValueId};
pub use tensor::{check_finite, Element, Tensor};
