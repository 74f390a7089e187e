//! Minimal reverse-mode automatic differentiation over dense real tensors.
//!
//! A [`Tape`] records every operation of a forward evaluation; `backward`
//! replays the records in reverse, accumulating gradients. Tapes are
//! rebuilt from scratch each training step, which makes reuse of the same
//! network with different conditioning (the cyclic pass, the adversarial
//! pass) trivial.
//!
//! The tape is generic over the element type: training runs in `f32`,
//! gradient checks instantiate the same code with `f64`.

mod adam;
mod checkpoint;
mod gradcheck;
mod params;
mod tape;

pub use adam::Adam;
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, grad_check_eps};
pub use params::{ParamStore, TapeBinding, Tensor};
pub use tape::{Tape, Value};

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

/// Element type the tape can operate on.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    fn cast_from(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("finite constant")
    }

    fn cast_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("finite value")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
