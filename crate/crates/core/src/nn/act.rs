//! Leaky-ReLU activation. The backward pass keys off the sign of the
//! output, which matches the input sign for any positive slope.

use super::{El, Feat};

pub fn leaky_relu_forward<T: El>(mut x: Feat<T>, slope: T) -> Feat<T> {
    x.mapv_inplace(|v| if v > T::zero() { v } else { v * slope });
    x
}

/// dx = dy * (1 if y > 0 else slope); y == 0 takes the slope branch.
pub fn leaky_relu_backward<T: El>(y: &Feat<T>, dy: &Feat<T>, slope: T) -> Feat<T> {
    let mut dx = dy.clone();
    dx.zip_mut_with(y, |d, &yv| {
        if yv <= T::zero() {
            *d = *d * slope;
        }
    });
    dx
}
