//! 2x2x2 max pooling with stride 2. Ties break toward the first element in
//! (z, y, x) scan order so results are identical across platforms.

use ndarray::Array5;

use super::{El, Feat};

pub struct PoolCache {
    /// Per output voxel, the winning offset within its 2x2x2 window (0..8).
    pub argmax: Array5<u8>,
}

pub fn maxpool_forward<T: El>(x: &Feat<T>) -> (Feat<T>, PoolCache) {
    let (n, c, d, h, w) = x.dim();
    assert!(d % 2 == 0 && h % 2 == 0 && w % 2 == 0, "pool needs even dims");
    let (od, oh, ow) = (d / 2, h / 2, w / 2);
    let mut y = Feat::zeros((n, c, od, oh, ow));
    let mut argmax = Array5::<u8>::zeros((n, c, od, oh, ow));
    let xs = x.as_slice().expect("contiguous");
    {
        let ys = y.as_slice_mut().unwrap();
        let am = argmax.as_slice_mut().unwrap();
        for nc in 0..n * c {
            let base = nc * d * h * w;
            let obase = nc * od * oh * ow;
            for z in 0..od {
                for yy in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_off = 0u8;
                        let mut off = 0u8;
                        for kz in 0..2 {
                            for ky in 0..2 {
                                for kx in 0..2 {
                                    let v = xs[base
                                        + ((2 * z + kz) * h + (2 * yy + ky)) * w
                                        + (2 * xx + kx)];
                                    if v > best {
                                        best = v;
                                        best_off = off;
                                    }
                                    off += 1;
                                }
                            }
                        }
                        ys[obase + (z * oh + yy) * ow + xx] = best;
                        am[obase + (z * oh + yy) * ow + xx] = best_off;
                    }
                }
            }
        }
    }
    (y, PoolCache { argmax })
}

pub fn maxpool_backward<T: El>(cache: &PoolCache, dy: &Feat<T>, in_dim: (usize, usize, usize)) -> Feat<T> {
    let (n, c, od, oh, ow) = dy.dim();
    let (d, h, w) = in_dim;
    let mut dx = Feat::zeros((n, c, d, h, w));
    let dys = dy.as_slice().expect("contiguous");
    let am = cache.argmax.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let base = nc * d * h * w;
        let obase = nc * od * oh * ow;
        for z in 0..od {
            for yy in 0..oh {
                for xx in 0..ow {
                    let oi = obase + (z * oh + yy) * ow + xx;
                    let off = am[oi] as usize;
                    let (kz, ky, kx) = (off / 4, (off / 2) % 2, off % 2);
                    dxs[base + ((2 * z + kz) * h + (2 * yy + ky)) * w + (2 * xx + kx)] =
                        dxs[base + ((2 * z + kz) * h + (2 * yy + ky)) * w + (2 * xx + kx)]
                            + dys[oi];
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_picks_max_and_routes_gradient() {
        let mut x = Feat::<f64>::zeros((1, 1, 2, 2, 2));
        x[[0, 0, 1, 0, 1]] = 5.0;
        x[[0, 0, 0, 0, 0]] = 1.0;
        let (y, cache) = maxpool_forward(&x);
        assert_eq!(y.dim(), (1, 1, 1, 1, 1));
        assert_eq!(y[[0, 0, 0, 0, 0]], 5.0);
        let mut dy = Feat::<f64>::zeros((1, 1, 1, 1, 1));
        dy[[0, 0, 0, 0, 0]] = 2.0;
        let dx = maxpool_backward(&cache, &dy, (2, 2, 2));
        assert_eq!(dx[[0, 0, 1, 0, 1]], 2.0);
        assert_eq!(dx.sum(), 2.0);
    }

    #[test]
    fn ties_break_to_first_in_scan_order() {
        let x = Feat::<f64>::from_elem((1, 1, 2, 2, 2), 3.0);
        let (_, cache) = maxpool_forward(&x);
        assert_eq!(cache.argmax[[0, 0, 0, 0, 0]], 0);
    }
}
