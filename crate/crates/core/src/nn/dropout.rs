//! Volumetric (channel-wise) dropout: an entire feature channel of a sample
//! is zeroed with probability p, and kept channels are rescaled by 1/(1-p).

use ndarray::{s, Array2};
use rand::Rng;

use super::{El, Feat};

pub struct DropoutCache<T> {
    /// Per (sample, channel): 0 or 1/(1-p).
    pub scale: Array2<T>,
}

pub fn dropout_forward<T: El, R: Rng + ?Sized>(
    mut x: Feat<T>,
    p: f64,
    rng: &mut R,
) -> (Feat<T>, DropoutCache<T>) {
    let (n, c, _, _, _) = x.dim();
    let keep_scale = T::elem(1.0 / (1.0 - p));
    let mut scale = Array2::<T>::zeros((n, c));
    for ni in 0..n {
        for ci in 0..c {
            // draw in a fixed order so results depend only on the rng state
            let drop = rng.gen::<f64>() < p;
            let s = if drop { T::zero() } else { keep_scale };
            scale[[ni, ci]] = s;
            if drop {
                x.slice_mut(s![ni, ci, .., .., ..]).fill(T::zero());
            } else if p > 0.0 {
                x.slice_mut(s![ni, ci, .., .., ..]).mapv_inplace(|v| v * keep_scale);
            }
        }
    }
    (x, DropoutCache { scale })
}

pub fn dropout_backward<T: El>(cache: &DropoutCache<T>, dy: &Feat<T>) -> Feat<T> {
    let (n, c, _, _, _) = dy.dim();
    let mut dx = dy.clone();
    for ni in 0..n {
        for ci in 0..c {
            let s = cache.scale[[ni, ci]];
            dx.slice_mut(ndarray::s![ni, ci, .., .., ..]).mapv_inplace(|v| v * s);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_probability_is_identity() {
        let x = Feat::<f64>::from_elem((1, 3, 2, 2, 2), 2.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (y, _) = dropout_forward(x.clone(), 0.0, &mut rng);
        assert_eq!(y, x);
    }

    #[test]
    fn drops_whole_channels_with_rescale() {
        let x = Feat::<f64>::from_elem((1, 64, 2, 2, 2), 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (y, cache) = dropout_forward(x, 0.5, &mut rng);
        for ci in 0..64 {
            let chan = y.slice(s![0, ci, .., .., ..]);
            let all_zero = chan.iter().all(|v| *v == 0.0);
            let all_scaled = chan.iter().all(|v| (*v - 2.0).abs() < 1e-12);
            assert!(all_zero || all_scaled);
            assert_eq!(all_zero, cache.scale[[0, ci]] == 0.0);
        }
    }
}
