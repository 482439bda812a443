//! Instance normalisation: per-sample, per-channel standardisation over the
//! spatial extent, with learnable affine parameters. Output statistics are
//! independent of batch composition, which is why the network prefers it to
//! batch norm at batch size 2.

use ndarray::{Array1, Array2, Axis};

use super::{El, Feat, NormParams};

pub const NORM_EPS: f64 = 1e-5;

pub struct NormCache<T> {
    /// Normalised input (before affine), needed for the gamma gradient and
    /// the input gradient.
    pub xhat: Feat<T>,
    /// 1 / sqrt(var + eps) per (sample, channel).
    pub inv_std: Array2<T>,
}

pub fn instance_norm_forward<T: El>(p: &NormParams<T>, x: &Feat<T>) -> (Feat<T>, NormCache<T>) {
    let (n, c, d, h, w) = x.dim();
    let m = d * h * w;
    let eps = T::elem(NORM_EPS);
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let mut xhat = x.clone();
    let mut inv_std = Array2::<T>::zeros((n, c));
    let mut y = Feat::zeros((n, c, d, h, w));
    {
        let xh = xhat.as_slice_mut().unwrap();
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let off = (ni * c + ci) * m;
                let chan = &mut xh[off..off + m];
                let mut mean = T::zero();
                for v in chan.iter() {
                    mean = mean + *v;
                }
                mean = mean * inv_m;
                let mut var = T::zero();
                for v in chan.iter() {
                    let dv = *v - mean;
                    var = var + dv * dv;
                }
                var = var * inv_m;
                let is = T::one() / (var + eps).sqrt();
                inv_std[[ni, ci]] = is;
                let (g, b) = (p.gamma[ci], p.beta[ci]);
                for (xv, yv) in chan.iter_mut().zip(ys[off..off + m].iter_mut()) {
                    *xv = (*xv - mean) * is;
                    *yv = g * *xv + b;
                }
            }
        }
    }
    (y, NormCache { xhat, inv_std })
}

/// Forward pass without retaining the normalised tensor (inference path).
pub fn instance_norm_infer<T: El>(p: &NormParams<T>, mut x: Feat<T>) -> Feat<T> {
    let (n, c, d, h, w) = x.dim();
    let m = d * h * w;
    let eps = T::elem(NORM_EPS);
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let xs = x.as_slice_mut().unwrap();
    for ni in 0..n {
        for ci in 0..c {
            let off = (ni * c + ci) * m;
            let chan = &mut xs[off..off + m];
            let mut mean = T::zero();
            for v in chan.iter() {
                mean = mean + *v;
            }
            mean = mean * inv_m;
            let mut var = T::zero();
            for v in chan.iter() {
                let dv = *v - mean;
                var = var + dv * dv;
            }
            var = var * inv_m;
            let is = T::one() / (var + eps).sqrt();
            let (g, b) = (p.gamma[ci], p.beta[ci]);
            for v in chan.iter_mut() {
                *v = g * (*v - mean) * is + b;
            }
        }
    }
    x
}

pub fn instance_norm_backward<T: El>(
    p: &NormParams<T>,
    cache: &NormCache<T>,
    dy: &Feat<T>,
    ggamma: &mut Array1<T>,
    gbeta: &mut Array1<T>,
) -> Feat<T> {
    let (n, c, d, h, w) = dy.dim();
    let m = d * h * w;
    let inv_m = T::one() / T::from_usize(m).unwrap();
    let mut dx = Feat::zeros((n, c, d, h, w));
    let dys = dy.as_slice().unwrap();
    let xh = cache.xhat.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for ci in 0..c {
        let mut gg = T::zero();
        let mut gb = T::zero();
        let gamma = p.gamma[ci];
        for ni in 0..n {
            let off = (ni * c + ci) * m;
            let dyc = &dys[off..off + m];
            let xhc = &xh[off..off + m];
            let mut sum_dy = T::zero();
            let mut sum_dy_xhat = T::zero();
            for i in 0..m {
                sum_dy = sum_dy + dyc[i];
                sum_dy_xhat = sum_dy_xhat + dyc[i] * xhc[i];
            }
            gg = gg + sum_dy_xhat;
            gb = gb + sum_dy;
            let is = cache.inv_std[[ni, ci]];
            let mean_dy = sum_dy * inv_m;
            let mean_dy_xhat = sum_dy_xhat * inv_m;
            let dxc = &mut dxs[off..off + m];
            for i in 0..m {
                dxc[i] = gamma * is * (dyc[i] - mean_dy - xhc[i] * mean_dy_xhat);
            }
        }
        ggamma[ci] = ggamma[ci] + gg;
        gbeta[ci] = gbeta[ci] + gb;
    }
    dx
}

/// Per-channel mean and std of the masked voxels; used by tests.
pub fn channel_stats<T: El>(x: &Feat<T>) -> (Array1<T>, Array1<T>) {
    let c = x.dim().1;
    let mut means = Array1::zeros(c);
    let mut stds = Array1::zeros(c);
    for ci in 0..c {
        let chan = x.index_axis(Axis(1), ci);
        let m = T::from_usize(chan.len()).unwrap();
        let mean = chan.sum() / m;
        let var = chan.iter().map(|v| (*v - mean) * (*v - mean)).fold(T::zero(), |a, b| a + b) / m;
        means[ci] = mean;
        stds[ci] = var.sqrt();
    }
    (means, stds)
}
