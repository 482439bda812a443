//! 3D convolution (stride 1, padding k/2) via chunked im2col + GEMM.
//!
//! The im2col buffer is rebuilt per chunk in both passes, trading a little
//! gather time for bounded memory: a chunk is a run of whole x-rows sized
//! so the column matrix stays under ~16 MB.

use ndarray::{s, Array1, Array2, Array5, ArrayView4, ArrayViewMut4};

use super::{ConvParams, El, Feat};

const CHUNK_TARGET_BYTES: usize = 16 << 20;

fn chunk_rows<T>(k_dim: usize, w: usize) -> usize {
    let bytes_per_row = k_dim * w * std::mem::size_of::<T>();
    (CHUNK_TARGET_BYTES / bytes_per_row.max(1)).max(1)
}

/// Gather the im2col block for output rows [row0, row0+rows) of one sample.
/// Rows are (z, y) pairs in row-major order; the full row of w voxels is
/// always taken. `cols` has shape (c_in * k^3, rows * w).
fn im2col_rows<T: El>(
    x: &ArrayView4<'_, T>,
    k: usize,
    row0: usize,
    rows: usize,
    cols: &mut Array2<T>,
) {
    let (c_in, d, h, w) = x.dim();
    let pad = (k / 2) as isize;
    let cols_slice = cols.as_slice_mut().expect("cols contiguous");
    let row_len = rows * w;
    let x_slice = x.as_slice().expect("input contiguous");
    for ci in 0..c_in {
        let x_chan = &x_slice[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let dst_base = r * row_len;
                    let dx = kx as isize - pad;
                    for ri in 0..rows {
                        let out_row = row0 + ri;
                        let z = out_row / h;
                        let y = out_row % h;
                        let iz = z as isize + kz as isize - pad;
                        let iy = y as isize + ky as isize - pad;
                        let dst = &mut cols_slice[dst_base + ri * w..dst_base + (ri + 1) * w];
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row =
                            &x_chan[(iz as usize * h + iy as usize) * w..(iz as usize * h + iy as usize + 1) * w];
                        // shift by dx with zero fill at the edges
                        if dx == 0 {
                            dst.copy_from_slice(src_row);
                        } else if dx < 0 {
                            let sh = (-dx) as usize;
                            dst[..sh].fill(T::zero());
                            dst[sh..].copy_from_slice(&src_row[..w - sh]);
                        } else {
                            let sh = dx as usize;
                            dst[..w - sh].copy_from_slice(&src_row[sh..]);
                            dst[w - sh..].fill(T::zero());
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the transpose of `im2col_rows` back into the input gradient.
fn col2im_rows<T: El>(
    dx: &mut ArrayViewMut4<'_, T>,
    k: usize,
    row0: usize,
    rows: usize,
    cols: &Array2<T>,
) {
    let (c_in, d, h, w) = dx.dim();
    let pad = (k / 2) as isize;
    let cols_slice = cols.as_slice().expect("cols contiguous");
    let row_len = rows * w;
    let dx_slice = dx.as_slice_mut().expect("grad contiguous");
    for ci in 0..c_in {
        let dx_chan = &mut dx_slice[ci * d * h * w..(ci + 1) * d * h * w];
        for kz in 0..k {
            for ky in 0..k {
                for kx in 0..k {
                    let r = ((ci * k + kz) * k + ky) * k + kx;
                    let src_base = r * row_len;
                    let dxs = kx as isize - pad;
                    for ri in 0..rows {
                        let out_row = row0 + ri;
                        let z = out_row / h;
                        let y = out_row % h;
                        let iz = z as isize + kz as isize - pad;
                        let iy = y as isize + ky as isize - pad;
                        if iz < 0 || iz >= d as isize || iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &cols_slice[src_base + ri * w..src_base + (ri + 1) * w];
                        let dst_off = (iz as usize * h + iy as usize) * w;
                        if dxs == 0 {
                            for x in 0..w {
                                dx_chan[dst_off + x] = dx_chan[dst_off + x] + src[x];
                            }
                        } else if dxs < 0 {
                            let sh = (-dxs) as usize;
                            for x in sh..w {
                                dx_chan[dst_off + x - sh] = dx_chan[dst_off + x - sh] + src[x];
                            }
                        } else {
                            let sh = dxs as usize;
                            for x in 0..w - sh {
                                dx_chan[dst_off + x + sh] = dx_chan[dst_off + x + sh] + src[x];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: y[n,co,v] = sum_{ci,kz,ky,kx} w * x + b.
pub fn conv3d_forward<T: El>(p: &ConvParams<T>, x: &Feat<T>) -> Feat<T> {
    let (n, c_in, d, h, w) = x.dim();
    let (c_out, wc_in, k, _, _) = p.weight.dim();
    assert_eq!(c_in, wc_in, "conv input channels");
    let dhw = d * h * w;
    let mut y = Feat::zeros((n, c_out, d, h, w));
    let k_dim = c_in * k * k * k;
    let w_slice = p.weight.as_slice().expect("weight contiguous");

    if k == 1 {
        // pure channel mixing: one GEMM per sample, no gather needed
        for ni in 0..n {
            let x_ptr = x.slice(s![ni, .., .., .., ..]).as_ptr();
            let y_ptr = y.slice_mut(s![ni, .., .., .., ..]).as_mut_ptr();
            unsafe {
                T::gemm(
                    c_out,
                    c_in,
                    dhw,
                    T::one(),
                    w_slice.as_ptr(),
                    c_in as isize,
                    1,
                    x_ptr,
                    dhw as isize,
                    1,
                    T::zero(),
                    y_ptr,
                    dhw as isize,
                    1,
                );
            }
        }
    } else {
        let max_rows = chunk_rows::<T>(k_dim, w).min(d * h);
        let mut cols = Array2::<T>::zeros((k_dim, max_rows * w));
        for ni in 0..n {
            let xn = x.slice(s![ni, .., .., .., ..]);
            let mut row0 = 0;
            while row0 < d * h {
                let rows = max_rows.min(d * h - row0);
                im2col_rows(&xn, k, row0, rows, &mut cols);
                let l = rows * w;
                let y_ptr = unsafe { y.as_mut_ptr().add(ni * c_out * dhw + row0 * w) };
                unsafe {
                    T::gemm(
                        c_out,
                        k_dim,
                        l,
                        T::one(),
                        w_slice.as_ptr(),
                        k_dim as isize,
                        1,
                        cols.as_ptr(),
                        l as isize,
                        1,
                        T::zero(),
                        y_ptr,
                        dhw as isize,
                        1,
                    );
                }
                row0 += rows;
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

/// Backward convolution. Accumulates weight/bias gradients into `gw`/`gb`
/// and returns the input gradient.
pub fn conv3d_backward<T: El>(
    p: &ConvParams<T>,
    x: &Feat<T>,
    dy: &Feat<T>,
    gw: &mut Array5<T>,
    gb: &mut Array1<T>,
) -> Feat<T> {
    let (n, c_in, d, h, w) = x.dim();
    let (c_out, _, k, _, _) = p.weight.dim();
    let dhw = d * h * w;
    let k_dim = c_in * k * k * k;
    let mut dx = Feat::zeros((n, c_in, d, h, w));
    let w_slice = p.weight.as_slice().expect("weight contiguous");
    let gw_slice_ptr = gw.as_mut_ptr();

    for co in 0..c_out {
        let mut acc = T::zero();
        for ni in 0..n {
            acc = acc + dy.slice(s![ni, co, .., .., ..]).sum();
        }
        gb[co] = gb[co] + acc;
    }

    if k == 1 {
        for ni in 0..n {
            let x_ptr = x.slice(s![ni, .., .., .., ..]).as_ptr();
            let dy_ptr = dy.slice(s![ni, .., .., .., ..]).as_ptr();
            let dx_ptr = dx.slice_mut(s![ni, .., .., .., ..]).as_mut_ptr();
            unsafe {
                // gw += dy (c_out x dhw) * x^T (dhw x c_in)
                T::gemm(
                    c_out,
                    dhw,
                    c_in,
                    T::one(),
                    dy_ptr,
                    dhw as isize,
                    1,
                    x_ptr,
                    1,
                    dhw as isize,
                    T::one(),
                    gw_slice_ptr,
                    c_in as isize,
                    1,
                );
                // dx = w^T (c_in x c_out) * dy (c_out x dhw)
                T::gemm(
                    c_in,
                    c_out,
                    dhw,
                    T::one(),
                    w_slice.as_ptr(),
                    1,
                    c_in as isize,
                    dy_ptr,
                    dhw as isize,
                    1,
                    T::zero(),
                    dx_ptr,
                    dhw as isize,
                    1,
                );
            }
        }
        return dx;
    }

    let max_rows = chunk_rows::<T>(k_dim, w).min(d * h);
    let mut cols = Array2::<T>::zeros((k_dim, max_rows * w));
    let mut dcols = Array2::<T>::zeros((k_dim, max_rows * w));
    for ni in 0..n {
        let xn = x.slice(s![ni, .., .., .., ..]);
        let mut dxn = dx.slice_mut(s![ni, .., .., .., ..]);
        let mut row0 = 0;
        while row0 < d * h {
            let rows = max_rows.min(d * h - row0);
            let l = rows * w;
            im2col_rows(&xn, k, row0, rows, &mut cols);
            let dy_ptr = unsafe { dy.as_ptr().add(ni * c_out * dhw + row0 * w) };
            unsafe {
                // gw += dy_chunk (c_out x l) * cols^T (l x k_dim)
                T::gemm(
                    c_out,
                    l,
                    k_dim,
                    T::one(),
                    dy_ptr,
                    dhw as isize,
                    1,
                    cols.as_ptr(),
                    1,
                    l as isize,
                    T::one(),
                    gw_slice_ptr,
                    k_dim as isize,
                    1,
                );
                // dcols = w^T (k_dim x c_out) * dy_chunk (c_out x l)
                T::gemm(
                    k_dim,
                    c_out,
                    l,
                    T::one(),
                    w_slice.as_ptr(),
                    1,
                    k_dim as isize,
                    dy_ptr,
                    dhw as isize,
                    1,
                    T::zero(),
                    dcols.as_mut_ptr(),
                    l as isize,
                    1,
                );
            }
            col2im_rows(&mut dxn, k, row0, rows, &dcols);
            row0 += rows;
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_feat(rng: &mut ChaCha8Rng, shape: (usize, usize, usize, usize, usize)) -> Feat<f64> {
        Array5::from_shape_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    fn rand_conv(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> ConvParams<f64> {
        ConvParams {
            weight: Array5::from_shape_fn((c_out, c_in, k, k, k), |_| rng.gen_range(-0.5..0.5)),
            bias: Array1::from_shape_fn(c_out, |_| rng.gen_range(-0.5..0.5)),
        }
    }

    /// Naive direct convolution used as an oracle.
    fn conv_naive(p: &ConvParams<f64>, x: &Feat<f64>) -> Feat<f64> {
        let (n, c_in, d, h, w) = x.dim();
        let (c_out, _, k, _, _) = p.weight.dim();
        let pad = (k / 2) as isize;
        let mut y = Feat::zeros((n, c_out, d, h, w));
        for ni in 0..n {
            for co in 0..c_out {
                for z in 0..d as isize {
                    for yy in 0..h as isize {
                        for xx in 0..w as isize {
                            let mut acc = p.bias[co];
                            for ci in 0..c_in {
                                for kz in 0..k as isize {
                                    for ky in 0..k as isize {
                                        for kx in 0..k as isize {
                                            let iz = z + kz - pad;
                                            let iy = yy + ky - pad;
                                            let ix = xx + kx - pad;
                                            if iz >= 0
                                                && iz < d as isize
                                                && iy >= 0
                                                && iy < h as isize
                                                && ix >= 0
                                                && ix < w as isize
                                            {
                                                acc += p.weight[[
                                                    co,
                                                    ci,
                                                    kz as usize,
                                                    ky as usize,
                                                    kx as usize,
                                                ]] * x[[
                                                    ni,
                                                    ci,
                                                    iz as usize,
                                                    iy as usize,
                                                    ix as usize,
                                                ]];
                                            }
                                        }
                                    }
                                }
                            }
                            y[[ni, co, z as usize, yy as usize, xx as usize]] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &k in &[1usize, 3] {
            let x = rand_feat(&mut rng, (2, 3, 4, 5, 6));
            let p = rand_conv(&mut rng, 4, 3, k);
            let y = conv3d_forward(&p, &x);
            let y_ref = conv_naive(&p, &x);
            let max_err = (&y - &y_ref).iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max_err < 1e-10, "k={k} max_err={max_err}");
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &k in &[1usize, 3] {
            let x = rand_feat(&mut rng, (1, 2, 3, 4, 4));
            let p = rand_conv(&mut rng, 3, 2, k);
            let dy = rand_feat(&mut rng, (1, 3, 3, 4, 4));

            let mut gw = Array5::zeros(p.weight.raw_dim());
            let mut gb = Array1::zeros(3);
            let dx = conv3d_backward(&p, &x, &dy, &mut gw, &mut gb);

            let loss = |p: &ConvParams<f64>, x: &Feat<f64>| (&conv3d_forward(p, x) * &dy).sum();
            let h = 1e-6;

            // a few weight coordinates
            for idx in [[0, 0, 0, 0, 0], [2, 1, k - 1, 0, k / 2]] {
                let mut pp = p.clone();
                pp.weight[idx] += h;
                let mut pm = p.clone();
                pm.weight[idx] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((fd - gw[idx]).abs() < 1e-6, "gw k={k} fd={fd} an={}", gw[idx]);
            }
            // a bias coordinate
            {
                let mut pp = p.clone();
                pp.bias[1] += h;
                let mut pm = p.clone();
                pm.bias[1] -= h;
                let fd = (loss(&pp, &x) - loss(&pm, &x)) / (2.0 * h);
                assert!((fd - gb[1]).abs() < 1e-6);
            }
            // a few input coordinates
            for idx in [[0, 0, 0, 0, 0], [0, 1, 2, 3, 1]] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&p, &xp) - loss(&p, &xm)) / (2.0 * h);
                assert!((fd - dx[idx]).abs() < 1e-6, "dx k={k}");
            }
        }
    }
}
