//! Parameter containers for the network. Gradients and optimizer moments
//! reuse the same structure, so a single canonical traversal order serves
//! the optimizer, checkpointing, and finite-difference probing.

use ndarray::Array5;

use crate::nn::{ConvParams, El, NormParams, UpConvParams};

use super::NetworkConfig;

/// Two 3x3x3 convolutions with instance normalisation, connected by a
/// residual projection when the channel dimensions change.
#[derive(Debug, Clone)]
pub struct ResBlockParams<T> {
    pub conv1: ConvParams<T>,
    pub norm1: NormParams<T>,
    pub conv2: ConvParams<T>,
    pub norm2: NormParams<T>,
    pub proj: Option<ConvParams<T>>,
}

impl<T: El> ResBlockParams<T> {
    pub fn zeros(c_in: usize, c_out: usize) -> Self {
        Self {
            conv1: ConvParams::zeros(c_out, c_in, 3),
            norm1: NormParams::identity(c_out),
            conv2: ConvParams::zeros(c_out, c_out, 3),
            norm2: NormParams::identity(c_out),
            proj: (c_in != c_out).then(|| ConvParams::zeros(c_out, c_in, 1)),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv1.num_params()
            + self.norm1.num_params()
            + self.conv2.num_params()
            + self.norm2.num_params()
            + self.proj.as_ref().map_or(0, |p| p.num_params())
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.weight.dim().0
    }
}

/// The attention gate: Conv3x3x3 -> IN -> LeakyReLU -> Conv1x1x1, mapping
/// decoder features to one logit map per sub-region.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub conv3: ConvParams<T>,
    pub norm: NormParams<T>,
    pub conv1: ConvParams<T>,
}

impl<T: El> GateParams<T> {
    pub fn zeros(c_in: usize, hidden: usize, c_out: usize) -> Self {
        Self {
            conv3: ConvParams::zeros(hidden, c_in, 3),
            norm: NormParams::identity(hidden),
            conv1: ConvParams::zeros(c_out, hidden, 1),
        }
    }

    pub fn num_params(&self) -> usize {
        self.conv3.num_params() + self.norm.num_params() + self.conv1.num_params()
    }
}

/// All learnable tensors of the network.
#[derive(Debug, Clone)]
pub struct NetParams<T> {
    pub encoders: Vec<ResBlockParams<T>>,
    pub bottleneck: ResBlockParams<T>,
    pub ups: Vec<UpConvParams<T>>,
    pub decoders: Vec<ResBlockParams<T>>,
    pub seg_head: ConvParams<T>,
    pub gate: GateParams<T>,
}

impl<T: El> NetParams<T> {
    pub fn zeros(cfg: &NetworkConfig) -> Self {
        let widths = &cfg.channel_widths;
        let levels = widths.len();
        let encoders = (0..levels)
            .map(|i| {
                let c_in = if i == 0 { cfg.in_channels } else { widths[i - 1] };
                ResBlockParams::zeros(c_in, widths[i])
            })
            .collect();
        let bottleneck = ResBlockParams::zeros(widths[levels - 1], cfg.bottleneck_channels);
        let mut ups = Vec::with_capacity(levels);
        let mut decoders = Vec::with_capacity(levels);
        for j in 0..levels {
            let up_in = if j == 0 { cfg.bottleneck_channels } else { widths[levels - j] };
            let out = widths[levels - 1 - j];
            ups.push(UpConvParams::zeros(up_in, out));
            decoders.push(ResBlockParams::zeros(2 * out, out));
        }
        let seg_head = ConvParams::zeros(cfg.num_classes, widths[0], 1);
        let gate = GateParams::zeros(widths[0], cfg.gate_hidden(), cfg.num_subregions);
        Self { encoders, bottleneck, ups, decoders, seg_head, gate }
    }

    pub fn num_params(&self) -> usize {
        self.encoders.iter().map(|b| b.num_params()).sum::<usize>()
            + self.bottleneck.num_params()
            + self.ups.iter().map(|u| u.num_params()).sum::<usize>()
            + self.decoders.iter().map(|b| b.num_params()).sum::<usize>()
            + self.seg_head.num_params()
            + self.gate.num_params()
    }

    /// Visit every tensor as a flat slice, in the canonical order.
    pub fn visit(&self, f: &mut impl FnMut(&str, &[T])) {
        let conv = |name: &str, c: &ConvParams<T>, f: &mut dyn FnMut(&str, &[T])| {
            f(&format!("{name}.weight"), c.weight.as_slice().unwrap());
            f(&format!("{name}.bias"), c.bias.as_slice().unwrap());
        };
        let norm = |name: &str, p: &NormParams<T>, f: &mut dyn FnMut(&str, &[T])| {
            f(&format!("{name}.gamma"), p.gamma.as_slice().unwrap());
            f(&format!("{name}.beta"), p.beta.as_slice().unwrap());
        };
        let block = |name: &str, b: &ResBlockParams<T>, f: &mut dyn FnMut(&str, &[T])| {
            conv(&format!("{name}.conv1"), &b.conv1, f);
            norm(&format!("{name}.norm1"), &b.norm1, f);
            conv(&format!("{name}.conv2"), &b.conv2, f);
            norm(&format!("{name}.norm2"), &b.norm2, f);
            if let Some(p) = &b.proj {
                conv(&format!("{name}.proj"), p, f);
            }
        };
        for (i, b) in self.encoders.iter().enumerate() {
            block(&format!("enc{}", i + 1), b, f);
        }
        block("bottleneck", &self.bottleneck, f);
        for (j, u) in self.ups.iter().enumerate() {
            f(&format!("up{}.weight", j + 1), u.weight.as_slice().unwrap());
            f(&format!("up{}.bias", j + 1), u.bias.as_slice().unwrap());
        }
        for (j, b) in self.decoders.iter().enumerate() {
            block(&format!("dec{}", j + 1), b, f);
        }
        conv("seg_head", &self.seg_head, f);
        conv("gate.conv3", &self.gate.conv3, f);
        norm("gate.norm", &self.gate.norm, f);
        conv("gate.conv1", &self.gate.conv1, f);
    }

    /// Mutable variant of [`visit`], same order.
    pub fn visit_mut(&mut self, f: &mut impl FnMut(&str, &mut [T])) {
        let conv = |name: &str, c: &mut ConvParams<T>, f: &mut dyn FnMut(&str, &mut [T])| {
            f(&format!("{name}.weight"), c.weight.as_slice_mut().unwrap());
            f(&format!("{name}.bias"), c.bias.as_slice_mut().unwrap());
        };
        let norm = |name: &str, p: &mut NormParams<T>, f: &mut dyn FnMut(&str, &mut [T])| {
            f(&format!("{name}.gamma"), p.gamma.as_slice_mut().unwrap());
            f(&format!("{name}.beta"), p.beta.as_slice_mut().unwrap());
        };
        let block = |name: &str, b: &mut ResBlockParams<T>, f: &mut dyn FnMut(&str, &mut [T])| {
            conv(&format!("{name}.conv1"), &mut b.conv1, f);
            norm(&format!("{name}.norm1"), &mut b.norm1, f);
            conv(&format!("{name}.conv2"), &mut b.conv2, f);
            norm(&format!("{name}.norm2"), &mut b.norm2, f);
            if let Some(p) = &mut b.proj {
                conv(&format!("{name}.proj"), p, f);
            }
        };
        for (i, b) in self.encoders.iter_mut().enumerate() {
            block(&format!("enc{}", i + 1), b, f);
        }
        block("bottleneck", &mut self.bottleneck, f);
        for (j, u) in self.ups.iter_mut().enumerate() {
            f(&format!("up{}.weight", j + 1), u.weight.as_slice_mut().unwrap());
            f(&format!("up{}.bias", j + 1), u.bias.as_slice_mut().unwrap());
        }
        for (j, b) in self.decoders.iter_mut().enumerate() {
            block(&format!("dec{}", j + 1), b, f);
        }
        conv("seg_head", &mut self.seg_head, f);
        conv("gate.conv3", &mut self.gate.conv3, f);
        norm("gate.norm", &mut self.gate.norm, f);
        conv("gate.conv1", &mut self.gate.conv1, f);
    }

    /// Flattened (name, slice) list in canonical order.
    pub fn named_slices_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out: Vec<(String, &mut [T])> = Vec::new();
        self.visit_mut(&mut |name, slice| {
            // SAFETY: each tensor is visited exactly once, so the mutable
            // slices are disjoint; the lifetime is tied to &mut self.
            let slice: &mut [T] = unsafe { std::mem::transmute::<&mut [T], &mut [T]>(slice) };
            out.push((name.to_string(), slice));
        });
        out
    }

    /// Value of the i-th scalar in canonical flat order.
    pub fn get_flat(&self, index: usize) -> T {
        let mut remaining = index;
        let mut found = None;
        self.visit(&mut |_, slice| {
            if found.is_none() {
                if remaining < slice.len() {
                    found = Some(slice[remaining]);
                } else {
                    remaining -= slice.len();
                }
            }
        });
        found.expect("flat index out of range")
    }

    /// Add `delta` to the i-th scalar in canonical flat order.
    pub fn add_flat(&mut self, index: usize, delta: T) {
        let mut remaining = index;
        let mut done = false;
        self.visit_mut(&mut |_, slice| {
            if !done {
                if remaining < slice.len() {
                    slice[remaining] = slice[remaining] + delta;
                    done = true;
                } else {
                    remaining -= slice.len();
                }
            }
        });
        assert!(done, "flat index out of range");
    }

    /// Global L2 norm across all tensors (used by gradient clipping).
    pub fn global_norm(&self) -> f64 {
        let mut acc = 0.0f64;
        self.visit(&mut |_, slice| {
            for v in slice {
                let f = v.as_f64();
                acc += f * f;
            }
        });
        acc.sqrt()
    }

    pub fn scale_all(&mut self, factor: T) {
        self.visit_mut(&mut |_, slice| {
            for v in slice.iter_mut() {
                *v = *v * factor;
            }
        });
    }

    pub fn all_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, slice| {
            if ok && slice.iter().any(|v| !v.is_finite()) {
                ok = false;
            }
        });
        ok
    }

    /// Convert every tensor elementwise (used to build an f64 twin of an
    /// f32 network for verification).
    pub fn map_convert<U: El>(&self, cfg: &NetworkConfig) -> NetParams<U> {
        let mut out = NetParams::<U>::zeros(cfg);
        let mut values: Vec<U> = Vec::with_capacity(self.num_params());
        self.visit(&mut |_, slice| {
            values.extend(slice.iter().map(|v| U::elem(v.as_f64())));
        });
        let mut offset = 0;
        out.visit_mut(&mut |_, slice| {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        });
        out
    }
}

/// Zero-filled weight gradient buffer for a conv layer.
pub fn grad_like<T: El>(p: &ConvParams<T>) -> (Array5<T>, ndarray::Array1<T>) {
    (Array5::zeros(p.weight.raw_dim()), ndarray::Array1::zeros(p.bias.len()))
}
