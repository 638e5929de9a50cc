//! Scalar abstraction for the numerical core.
//!
//! All tensor, network, loss and reward arithmetic is generic over [`Real`],
//! so the same code instantiates at `f32` or `f64`. The crate-root aliases
//! pin the default precision to `f64`, which keeps gradient-check tolerances
//! meaningful and platform-stable.

use num_traits::{Float, FromPrimitive, NumAssignOps};
use std::fmt::{Debug, Display};
use std::iter::Sum;

pub trait Real:
    Float + FromPrimitive + NumAssignOps + Sum + Debug + Display + Send + Sync + 'static
{
    /// Conversion from `f64` for constants and config values.
    /// Panics on values that do not fit (never the case for finite config scalars).
    fn real(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("finite f64 must convert")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("Real converts to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}
