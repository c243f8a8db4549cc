//! Scalar abstraction for raster layers.
//!
//! Grid-valued modules (grid maps, elevation fusion, traversability, meshes)
//! are generic over [`GridScalar`], implemented for `f32` and `f64`. Rigid-body
//! math (poses, optimization, PnP) is carried out in `f64` throughout.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point type usable as a grid cell value.
pub trait GridScalar:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar.
    fn of(v: f64) -> Self;

    /// Widens to `f64`.
    fn f64(self) -> f64;
}

macro_rules! impl_grid_scalar {
    ($t:ty) => {
        impl GridScalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn f64(self) -> f64 {
                self as f64
            }
        }
    };
}

impl_grid_scalar!(f32);
impl_grid_scalar!(f64);

/// Rounds to the nearest integer, resolving exact halves toward the lower value.
#[inline]
pub fn round_half_down<T: GridScalar>(v: T) -> T {
    (v - T::of(0.5)).ceil()
}

/// Equality that treats two NaNs (unknown cells) as equal.
#[inline]
pub fn same_value<T: Float>(a: T, b: T) -> bool {
    a == b || (a.is_nan() && b.is_nan())
}

/// Element-wise [`same_value`] over two slices.
pub fn same_values<T: Float>(a: &[T], b: &[T]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| same_value(*x, *y))
}
