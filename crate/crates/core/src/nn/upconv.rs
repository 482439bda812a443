//! Transposed 3D convolution with a 2x2x2 kernel and stride 2.
//!
//! Every output voxel receives exactly one input voxel per channel, so the
//! operation decomposes into eight plain channel-mixing GEMMs, one per
//! kernel offset, scattered into the strided output positions.

use ndarray::{s, Array1, Array2, Array5};

use super::{El, Feat, UpConvParams};

/// y has shape (n, c_out, 2d, 2h, 2w).
pub fn upconv_forward<T: El>(p: &UpConvParams<T>, x: &Feat<T>) -> Feat<T> {
    let (n, c_in, d, h, w) = x.dim();
    let (wc_in, c_out, _, _, _) = p.weight.dim();
    assert_eq!(c_in, wc_in, "upconv input channels");
    let dhw = d * h * w;
    let mut y = Feat::zeros((n, c_out, 2 * d, 2 * h, 2 * w));
    let mut tmp = Array2::<T>::zeros((c_out, dhw));

    for ni in 0..n {
        let x_ptr = x.slice(s![ni, .., .., .., ..]).as_ptr();
        for oz in 0..2usize {
            for oy in 0..2usize {
                for ox in 0..2usize {
                    // w_off as (c_in x c_out): element (ci, co) at weight[ci, co, oz, oy, ox]
                    let w_off_ptr = unsafe { p.weight.as_ptr().add(((oz * 2) + oy) * 2 + ox) };
                    unsafe {
                        // tmp = w_off^T (c_out x c_in) * x (c_in x dhw)
                        T::gemm(
                            c_out,
                            c_in,
                            dhw,
                            T::one(),
                            w_off_ptr,
                            8,
                            (c_out * 8) as isize,
                            x_ptr,
                            dhw as isize,
                            1,
                            T::zero(),
                            tmp.as_mut_ptr(),
                            dhw as isize,
                            1,
                        );
                    }
                    let tmp5 = tmp.view().into_shape_with_order((1, c_out, d, h, w)).unwrap();
                    y.slice_mut(s![ni..ni + 1, .., oz..;2, oy..;2, ox..;2])
                        .assign(&tmp5);
                }
            }
        }
    }

    for co in 0..c_out {
        let b = p.bias[co];
        if b != T::zero() {
            y.slice_mut(s![.., co, .., .., ..]).mapv_inplace(|v| v + b);
        }
    }
    y
}

pub fn upconv_backward<T: El>(
    p: &UpConvParams<T>,
    x: &Feat<T>,
    dy: &Feat<T>,
    gw: &mut Array5<T>,
    gb: &mut Array1<T>,
) -> Feat<T> {
    let (n, c_in, d, h, w) = x.dim();
    let (_, c_out, _, _, _) = p.weight.dim();
    let dhw = d * h * w;
    let mut dx = Feat::zeros((n, c_in, d, h, w));

    for co in 0..c_out {
        let mut acc = T::zero();
        for ni in 0..n {
            acc = acc + dy.slice(s![ni, co, .., .., ..]).sum();
        }
        gb[co] = gb[co] + acc;
    }

    let mut dy_off = Array2::<T>::zeros((c_out, dhw));
    for ni in 0..n {
        let x_ptr = x.slice(s![ni, .., .., .., ..]).as_ptr();
        let dx_ptr = dx.slice_mut(s![ni, .., .., .., ..]).as_mut_ptr();
        let mut first = true;
        for oz in 0..2usize {
            for oy in 0..2usize {
                for ox in 0..2usize {
                    dy_off
                        .view_mut()
                        .into_shape_with_order((c_out, d, h, w))
                        .unwrap()
                        .assign(&dy.slice(s![ni, .., oz..;2, oy..;2, ox..;2]));
                    let w_off_ptr = unsafe { p.weight.as_ptr().add(((oz * 2) + oy) * 2 + ox) };
                    let gw_off_ptr = unsafe { gw.as_mut_ptr().add(((oz * 2) + oy) * 2 + ox) };
                    unsafe {
                        // dx += w_off (c_in x c_out) * dy_off (c_out x dhw)
                        T::gemm(
                            c_in,
                            c_out,
                            dhw,
                            T::one(),
                            w_off_ptr,
                            (c_out * 8) as isize,
                            8,
                            dy_off.as_ptr(),
                            dhw as isize,
                            1,
                            if first { T::zero() } else { T::one() },
                            dx_ptr,
                            dhw as isize,
                            1,
                        );
                        // gw_off += x (c_in x dhw) * dy_off^T (dhw x c_out)
                        T::gemm(
                            c_in,
                            dhw,
                            c_out,
                            T::one(),
                            x_ptr,
                            dhw as isize,
                            1,
                            dy_off.as_ptr(),
                            1,
                            dhw as isize,
                            T::one(),
                            gw_off_ptr,
                            (c_out * 8) as isize,
                            8,
                        );
                    }
                    first = false;
                }
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Feat::<f64>::from_shape_fn((2, 3, 2, 3, 2), |_| rng.gen_range(-1.0..1.0));
        let p = UpConvParams {
            weight: Array5::from_shape_fn((3, 4, 2, 2, 2), |_| rng.gen_range(-0.5..0.5)),
            bias: Array1::from_shape_fn(4, |_| rng.gen_range(-0.5..0.5)),
        };
        let y = upconv_forward(&p, &x);
        assert_eq!(y.dim(), (2, 4, 4, 6, 4));
        // naive: out[z,y,x] = sum_ci w[ci, co, z%2, y%2, x%2] * x[ci, z/2, y/2, x/2] + b
        for ni in 0..2 {
            for co in 0..4 {
                for z in 0..4 {
                    for yy in 0..6 {
                        for xx in 0..4 {
                            let mut acc = p.bias[co];
                            for ci in 0..3 {
                                acc += p.weight[[ci, co, z % 2, yy % 2, xx % 2]]
                                    * x[[ni, ci, z / 2, yy / 2, xx / 2]];
                            }
                            assert!((y[[ni, co, z, yy, xx]] - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Feat::<f64>::from_shape_fn((1, 2, 2, 2, 3), |_| rng.gen_range(-1.0..1.0));
        let p = UpConvParams {
            weight: Array5::from_shape_fn((2, 3, 2, 2, 2), |_| rng.gen_range(-0.5..0.5)),
            bias: Array1::from_shape_fn(3, |_| rng.gen_range(-0.5..0.5)),
        };
        let dy = Feat::<f64>::from_shape_fn((1, 3, 4, 4, 6), |_| rng.gen_range(-1.0..1.0));

        let mut gw = Array5::zeros(p.weight.raw_dim());
        let mut gb = Array1::zeros(3);
        let dx = upconv_backward(&p, &x, &dy, &mut gw, &mut gb);

        let loss = |p: &UpConvParams<f64>, x: &Feat<f64>| (&upconv_forward(p, x) * &dy).sum();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [1, 2, 1, 0, 1]] {
            let mut pp = p.clone();
            pp.weight[idx] += h;
            let mut pm = p.clone();
            pm.weight[idx] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - gw[idx]).abs() < 1e-6);
        }
        {
            let mut pp = p.clone();
            pp.bias[2] += h;
            let mut pm = p.clone();
            pm.bias[2] -= h;
            let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
            assert!((fd - gb[2]).abs() < 1e-6);
        }
        for idx in [[0, 0, 0, 0, 0], [0, 1, 1, 1, 2]] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xm = x.clone();
            xm[idx] -= h;
            let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
            assert!((fd - dx[idx]).abs() < 1e-6);
        }
    }
}
