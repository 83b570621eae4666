//! Scalar abstraction: every numeric kernel in this crate is generic over a
//! floating-point type so the same code runs in f32 (training) and f64
//! (verification).

use rand::distributions::uniform::SampleUniform;

/// Floating-point scalar usable throughout the crate: f32 or f64.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + SampleUniform
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lossy conversion from f64 literals into the working scalar.
#[inline]
pub fn real<F: Real>(v: f64) -> F {
    F::from(v).expect("f64 -> scalar conversion")
}
