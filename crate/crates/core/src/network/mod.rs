//! SegGuidedNet: residual encoder-decoder backbone with the parallel
//! attention branch on the final decoder feature map.
//!
//! Encoder levels apply a ResConvBlock followed by 2x2x2 max-pooling and
//! expand channels along `channel_widths`; the bottleneck block runs at the
//! deepest resolution; decoder stages upsample with 2x transposed
//! convolutions, concatenate the matching encoder skip, and apply another
//! ResConvBlock. The segmentation head is a 1x1x1 convolution to the class
//! logits; the attention gate maps the final decoder features to one logit
//! map per tumour sub-region.

pub mod checkpoint;
pub mod params;

use ndarray::s;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::act::{leaky_relu_backward, leaky_relu_forward};
use crate::nn::conv::{conv3d_backward, conv3d_forward};
use crate::nn::dropout::{dropout_backward, dropout_forward, DropoutCache};
use crate::nn::norm::{instance_norm_backward, instance_norm_forward, instance_norm_infer, NormCache};
use crate::nn::pool::{maxpool_backward, maxpool_forward, PoolCache};
use crate::nn::upconv::{upconv_backward, upconv_forward};
use crate::nn::{El, Feat};

pub use params::{GateParams, NetParams, ResBlockParams};

/// Architecture hyperparameters.
///
/// The standard configuration is four encoder levels with widths
/// [32, 64, 128, 256] and a 320-channel bottleneck; shallower variants
/// (fewer widths) exist so that tiny inputs can be used for numerical
/// verification.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub num_subregions: usize,
    pub base_channels: usize,
    pub channel_widths: Vec<usize>,
    pub bottleneck_channels: usize,
    pub dropout_p: f64,
    pub leaky_slope: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            num_classes: 4,
            num_subregions: 3,
            base_channels: 32,
            channel_widths: vec![32, 64, 128, 256],
            bottleneck_channels: 320,
            dropout_p: 0.1,
            leaky_slope: 0.01,
        }
    }
}

impl NetworkConfig {
    /// Standard shape scaled to a different base width: widths double per
    /// level and the bottleneck is 10x base, mirroring 32 -> [32,64,128,256]
    /// with bottleneck 320.
    pub fn with_base(base: usize) -> Self {
        Self {
            base_channels: base,
            channel_widths: vec![base, base * 2, base * 4, base * 8],
            bottleneck_channels: base * 10,
            ..Self::default()
        }
    }

    /// Reduced-depth variant for very small test grids.
    pub fn tiny(base: usize, levels: usize) -> Self {
        let widths: Vec<usize> = (0..levels).map(|i| base << i).collect();
        let bottleneck = base << levels;
        Self {
            base_channels: base,
            channel_widths: widths,
            bottleneck_channels: bottleneck,
            ..Self::default()
        }
    }

    pub fn levels(&self) -> usize {
        self.channel_widths.len()
    }

    /// Spatial dims must be divisible by this (one halving per level).
    pub fn spatial_divisor(&self) -> usize {
        1 << self.levels()
    }

    /// Hidden width of the attention gate (32 -> 16 in the standard shape).
    pub fn gate_hidden(&self) -> usize {
        (self.base_channels / 2).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty() {
            return Err(Error::Config("channel_widths must be non-empty".into()));
        }
        if self.channel_widths.iter().any(|w| *w == 0)
            || self.in_channels == 0
            || self.num_classes == 0
            || self.num_subregions == 0
            || self.bottleneck_channels == 0
        {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!("dropout_p {} outside [0,1)", self.dropout_p)));
        }
        if self.channel_widths[0] != self.base_channels {
            return Err(Error::Config("channel_widths[0] must equal base_channels".into()));
        }
        Ok(())
    }
}

/// Batched network output: segmentation logits (n, classes, d, h, w) and
/// attention logits (n, subregions, d, h, w).
#[derive(Debug, Clone)]
pub struct BatchOutput<T> {
    pub seg_logits: Feat<T>,
    pub attn_logits: Feat<T>,
}

pub struct BlockCache<T> {
    x: Feat<T>,
    n1: NormCache<T>,
    a1: Feat<T>,
    n2: NormCache<T>,
    a2: Feat<T>,
    drop: Option<DropoutCache<T>>,
}

pub struct NetCache<T> {
    enc_blocks: Vec<BlockCache<T>>,
    pools: Vec<(PoolCache, (usize, usize, usize))>,
    bottleneck: BlockCache<T>,
    up_inputs: Vec<Feat<T>>,
    dec_blocks: Vec<BlockCache<T>>,
    d1: Feat<T>,
    gate_act: Feat<T>,
    gate_norm: NormCache<T>,
}

/// The network: configuration plus parameters. Forward passes take `&self`
/// and return explicit caches, so an evaluation-mode model can be shared
/// across threads while training holds the single mutable copy.
#[derive(Debug, Clone)]
pub struct SegGuidedNet<T> {
    cfg: NetworkConfig,
    pub params: NetParams<T>,
}

impl<T: El> SegGuidedNet<T> {
    /// Zero-initialised network (weights come from [`initialize_weights`]).
    pub fn new(cfg: NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let params = NetParams::zeros(&cfg);
        Ok(Self { cfg, params })
    }

    /// Construct and Kaiming-initialise deterministically from a seed.
    pub fn init(cfg: NetworkConfig, seed: u64) -> Result<Self> {
        let mut net = Self::new(cfg)?;
        initialize_weights(&mut net, seed);
        Ok(net)
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.cfg
    }

    pub fn num_params(&self) -> usize {
        self.params.num_params()
    }

    pub fn gate_params(&self) -> usize {
        self.params.gate.num_params()
    }

    fn check_input(&self, x: &Feat<T>) -> Result<()> {
        let (_, c, d, h, w) = x.dim();
        if c != self.cfg.in_channels {
            return Err(Error::Config(format!(
                "expected {} input channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let div = self.cfg.spatial_divisor();
        if d % div != 0 || h % div != 0 || w % div != 0 {
            return Err(Error::Config(format!(
                "spatial dims ({d},{h},{w}) must be divisible by {div} for {} pooling stages",
                self.cfg.levels()
            )));
        }
        #[cfg(debug_assertions)]
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite network input".into()));
        }
        Ok(())
    }

    fn block_forward_train(
        &self,
        p: &ResBlockParams<T>,
        x: Feat<T>,
        rng: &mut ChaCha8Rng,
    ) -> (Feat<T>, BlockCache<T>) {
        let slope = T::elem(self.cfg.leaky_slope);
        let c1 = conv3d_forward(&p.conv1, &x);
        let (y1, n1) = instance_norm_forward(&p.norm1, &c1);
        drop(c1);
        let a1 = leaky_relu_forward(y1, slope);
        let c2 = conv3d_forward(&p.conv2, &a1);
        let (y2, n2) = instance_norm_forward(&p.norm2, &c2);
        drop(c2);
        let a2 = leaky_relu_forward(y2, slope);
        let (dropped, dcache) = if self.cfg.dropout_p > 0.0 {
            let (d, c) = dropout_forward(a2.clone(), self.cfg.dropout_p, rng);
            (d, Some(c))
        } else {
            (a2.clone(), None)
        };
        let mut out = dropped;
        match &p.proj {
            Some(proj) => out += &conv3d_forward(proj, &x),
            None => out += &x,
        }
        (out, BlockCache { x, n1, a1, n2, a2, drop: dcache })
    }

    fn block_infer(&self, p: &ResBlockParams<T>, x: &Feat<T>) -> Feat<T> {
        let slope = T::elem(self.cfg.leaky_slope);
        let a1 = leaky_relu_forward(instance_norm_infer(&p.norm1, conv3d_forward(&p.conv1, x)), slope);
        let mut out =
            leaky_relu_forward(instance_norm_infer(&p.norm2, conv3d_forward(&p.conv2, &a1)), slope);
        drop(a1);
        match &p.proj {
            Some(proj) => out += &conv3d_forward(proj, x),
            None => out += x,
        }
        out
    }

    fn block_backward(
        &self,
        p: &ResBlockParams<T>,
        g: &mut ResBlockParams<T>,
        cache: &BlockCache<T>,
        dy: &Feat<T>,
    ) -> Feat<T> {
        let slope = T::elem(self.cfg.leaky_slope);
        let d_a2 = match &cache.drop {
            Some(dc) => dropout_backward(dc, dy),
            None => dy.clone(),
        };
        let d_y2 = leaky_relu_backward(&cache.a2, &d_a2, slope);
        drop(d_a2);
        let d_c2 = instance_norm_backward(
            &p.norm2,
            &cache.n2,
            &d_y2,
            &mut g.norm2.gamma,
            &mut g.norm2.beta,
        );
        drop(d_y2);
        let d_a1 = conv3d_backward(&p.conv2, &cache.a1, &d_c2, &mut g.conv2.weight, &mut g.conv2.bias);
        drop(d_c2);
        let d_y1 = leaky_relu_backward(&cache.a1, &d_a1, slope);
        drop(d_a1);
        let d_c1 = instance_norm_backward(
            &p.norm1,
            &cache.n1,
            &d_y1,
            &mut g.norm1.gamma,
            &mut g.norm1.beta,
        );
        drop(d_y1);
        let mut dx = conv3d_backward(&p.conv1, &cache.x, &d_c1, &mut g.conv1.weight, &mut g.conv1.bias);
        match (&p.proj, &mut g.proj) {
            (Some(proj), Some(gp)) => {
                dx += &conv3d_backward(proj, &cache.x, dy, &mut gp.weight, &mut gp.bias);
            }
            _ => dx += dy,
        }
        dx
    }

    /// Training-mode forward pass. Dropout masks are drawn from `rng`, so a
    /// fixed rng state reproduces the pass exactly.
    pub fn forward_train(&self, x: Feat<T>, rng: &mut ChaCha8Rng) -> Result<(BatchOutput<T>, NetCache<T>)> {
        self.check_input(&x)?;
        let levels = self.cfg.levels();
        let mut enc_blocks = Vec::with_capacity(levels);
        let mut pools = Vec::with_capacity(levels);
        let mut skips: Vec<Feat<T>> = Vec::with_capacity(levels);

        let mut h = x;
        for i in 0..levels {
            let (b_out, b_cache) = self.block_forward_train(&self.params.encoders[i], h, rng);
            enc_blocks.push(b_cache);
            let dims = {
                let (_, _, d, hh, w) = b_out.dim();
                (d, hh, w)
            };
            let (p_out, p_cache) = maxpool_forward(&b_out);
            skips.push(b_out);
            pools.push((p_cache, dims));
            h = p_out;
        }

        let (b_out, bottleneck) = self.block_forward_train(&self.params.bottleneck, h, rng);
        let mut h = b_out;

        let mut up_inputs = Vec::with_capacity(levels);
        let mut dec_blocks = Vec::with_capacity(levels);
        for j in 0..levels {
            let up = upconv_forward(&self.params.ups[j], &h);
            up_inputs.push(h);
            let skip = skips.pop().expect("skip per level");
            let cat = crate::nn::concat_channels(&up, &skip);
            drop(up);
            drop(skip);
            let (b_out, b_cache) = self.block_forward_train(&self.params.decoders[j], cat, rng);
            dec_blocks.push(b_cache);
            h = b_out;
        }

        let d1 = h;
        let seg_logits = conv3d_forward(&self.params.seg_head, &d1);
        let g1 = conv3d_forward(&self.params.gate.conv3, &d1);
        let (gn, gate_norm) = instance_norm_forward(&self.params.gate.norm, &g1);
        drop(g1);
        let gate_act = leaky_relu_forward(gn, T::elem(self.cfg.leaky_slope));
        let attn_logits = conv3d_forward(&self.params.gate.conv1, &gate_act);

        Ok((
            BatchOutput { seg_logits, attn_logits },
            NetCache {
                enc_blocks,
                pools,
                bottleneck,
                up_inputs,
                dec_blocks,
                d1,
                gate_act,
                gate_norm,
            },
        ))
    }

    /// Evaluation-mode forward pass: no dropout, no caches, deterministic.
    pub fn forward(&self, x: &Feat<T>) -> Result<BatchOutput<T>> {
        self.check_input(x)?;
        let levels = self.cfg.levels();
        let mut skips: Vec<Feat<T>> = Vec::with_capacity(levels);
        let mut h = self.block_infer(&self.params.encoders[0], x);
        for i in 0..levels {
            if i > 0 {
                h = self.block_infer(&self.params.encoders[i], &h);
            }
            let (p_out, _) = maxpool_forward(&h);
            skips.push(h);
            h = p_out;
        }
        h = self.block_infer(&self.params.bottleneck, &h);
        for j in 0..levels {
            let up = upconv_forward(&self.params.ups[j], &h);
            let skip = skips.pop().expect("skip per level");
            let cat = crate::nn::concat_channels(&up, &skip);
            drop(up);
            drop(skip);
            h = self.block_infer(&self.params.decoders[j], &cat);
        }
        let seg_logits = conv3d_forward(&self.params.seg_head, &h);
        let attn_logits = self.attention_gate(&h)?;
        Ok(BatchOutput { seg_logits, attn_logits })
    }

    /// The attention branch on its own: Conv3 -> IN -> LeakyReLU -> Conv1.
    /// Channels of the result are ordered (NCR, ED, ET); sigma is applied by
    /// consumers that need probabilities rather than logits.
    pub fn attention_gate(&self, d1: &Feat<T>) -> Result<Feat<T>> {
        let c = d1.dim().1;
        let expect = self.cfg.channel_widths[0];
        if c != expect {
            return Err(Error::Config(format!(
                "attention gate expects {expect} input channels, got {c}"
            )));
        }
        let g1 = instance_norm_infer(
            &self.params.gate.norm,
            conv3d_forward(&self.params.gate.conv3, d1),
        );
        let ga = leaky_relu_forward(g1, T::elem(self.cfg.leaky_slope));
        Ok(conv3d_forward(&self.params.gate.conv1, &ga))
    }

    /// Backward pass from output gradients to parameter gradients.
    pub fn backward(&self, cache: &NetCache<T>, d_seg: &Feat<T>, d_attn: &Feat<T>) -> NetParams<T> {
        let mut g = NetParams::zeros(&self.cfg);
        let slope = T::elem(self.cfg.leaky_slope);
        let levels = self.cfg.levels();

        // segmentation head
        let mut d_d1 = conv3d_backward(
            &self.params.seg_head,
            &cache.d1,
            d_seg,
            &mut g.seg_head.weight,
            &mut g.seg_head.bias,
        );
        // attention gate
        {
            let d_ga = conv3d_backward(
                &self.params.gate.conv1,
                &cache.gate_act,
                d_attn,
                &mut g.gate.conv1.weight,
                &mut g.gate.conv1.bias,
            );
            let d_gn = leaky_relu_backward(&cache.gate_act, &d_ga, slope);
            drop(d_ga);
            let d_g1 = instance_norm_backward(
                &self.params.gate.norm,
                &cache.gate_norm,
                &d_gn,
                &mut g.gate.norm.gamma,
                &mut g.gate.norm.beta,
            );
            drop(d_gn);
            d_d1 += &conv3d_backward(
                &self.params.gate.conv3,
                &cache.d1,
                &d_g1,
                &mut g.gate.conv3.weight,
                &mut g.gate.conv3.bias,
            );
        }

        // decoder stages, shallowest first
        let mut skip_grads: Vec<Feat<T>> = Vec::with_capacity(levels);
        let mut dh = d_d1;
        for j in (0..levels).rev() {
            let d_cat = self.block_backward(
                &self.params.decoders[j],
                &mut g.decoders[j],
                &cache.dec_blocks[j],
                &dh,
            );
            let up_c = self.params.ups[j].weight.dim().1;
            let d_up = d_cat.slice(s![.., ..up_c, .., .., ..]).to_owned();
            let d_skip = d_cat.slice(s![.., up_c.., .., .., ..]).to_owned();
            drop(d_cat);
            skip_grads.push(d_skip);
            let gu = &mut g.ups[j];
            dh = upconv_backward(&self.params.ups[j], &cache.up_inputs[j], &d_up, &mut gu.weight, &mut gu.bias);
        }
        // skip_grads[0] belongs to the shallowest decoder stage (levels-1),
        // which consumed the encoder-(levels-1)... reorder to encoder index.
        skip_grads.reverse(); // now skip_grads[j] pairs with decoder stage j

        dh = self.block_backward(&self.params.bottleneck, &mut g.bottleneck, &cache.bottleneck, &dh);

        for i in (0..levels).rev() {
            let (pool_cache, dims) = &cache.pools[i];
            let mut d_block_out = maxpool_backward(pool_cache, &dh, *dims);
            // decoder stage j consumes the skip from encoder level (levels-1-j)
            let j = levels - 1 - i;
            d_block_out += &skip_grads[j];
            dh = self.block_backward(
                &self.params.encoders[i],
                &mut g.encoders[i],
                &cache.enc_blocks[i],
                &d_block_out,
            );
        }
        g
    }
}

/// Kaiming-normal initialisation of all convolution kernels (fan-in mode
/// with the leaky-ReLU gain for the configured slope), zero biases, and
/// identity norm affines. Deterministic in the seed.
///
/// Fan-in counts the inputs contributing to one output element: c_in * k^3
/// for convolutions, c_in for the stride-2 transposed convolutions (each
/// output voxel sees exactly one input voxel per channel).
pub fn initialize_weights<T: El>(net: &mut SegGuidedNet<T>, seed: u64) {
    let slope = net.cfg.leaky_slope;
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();

    // fan-in per weight tensor, keyed by the canonical visitor name
    let mut fan: std::collections::HashMap<String, usize> = std::collections::HashMap::new();
    {
        let p = &net.params;
        let mut conv = |name: String, c: &crate::nn::ConvParams<T>| {
            let (_, c_in, k, _, _) = c.weight.dim();
            fan.insert(name, c_in * k * k * k);
        };
        let mut block = |name: &str, b: &ResBlockParams<T>| {
            conv(format!("{name}.conv1.weight"), &b.conv1);
            conv(format!("{name}.conv2.weight"), &b.conv2);
            if let Some(pr) = &b.proj {
                conv(format!("{name}.proj.weight"), pr);
            }
        };
        for (i, b) in p.encoders.iter().enumerate() {
            block(&format!("enc{}", i + 1), b);
        }
        block("bottleneck", &p.bottleneck);
        for (j, b) in p.decoders.iter().enumerate() {
            block(&format!("dec{}", j + 1), b);
        }
        conv("seg_head.weight".into(), &p.seg_head);
        conv("gate.conv3.weight".into(), &p.gate.conv3);
        conv("gate.conv1.weight".into(), &p.gate.conv1);
        for (j, u) in p.ups.iter().enumerate() {
            let (c_in, _, _, _, _) = u.weight.dim();
            fan.insert(format!("up{}.weight", j + 1), c_in);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.params.visit_mut(&mut |name, slice| {
        if name.ends_with(".weight") {
            let fan_in = fan[name];
            let std = T::elem(gain / (fan_in as f64).sqrt());
            for v in slice.iter_mut() {
                *v = T::standard_normal(&mut rng) * std;
            }
        } else if name.ends_with(".gamma") {
            for v in slice.iter_mut() {
                *v = T::one();
            }
        } else {
            for v in slice.iter_mut() {
                *v = T::zero();
            }
        }
    });
}

/// Parameter-count table used in docs and regression tests.
pub fn parameter_breakdown<T: El>(net: &SegGuidedNet<T>) -> Vec<(String, usize)> {
    let mut rows = Vec::new();
    let p = &net.params;
    for (i, b) in p.encoders.iter().enumerate() {
        rows.push((format!("enc{}", i + 1), b.num_params()));
    }
    rows.push(("bottleneck".into(), p.bottleneck.num_params()));
    for (j, u) in p.ups.iter().enumerate() {
        rows.push((format!("up{}", j + 1), u.num_params()));
    }
    for (j, b) in p.decoders.iter().enumerate() {
        rows.push((format!("dec{}", j + 1), b.num_params()));
    }
    rows.push(("seg_head".into(), p.seg_head.num_params()));
    rows.push(("gate".into(), p.gate.num_params()));
    rows
}

/// Closed-form parameter count of a ResConvBlock: two 3x3x3 convolutions
/// with biases, two affine instance norms, and the 1x1x1 projection when
/// channel counts differ.
pub fn res_block_param_count(c_in: usize, c_out: usize) -> usize {
    let conv1 = c_out * c_in * 27 + c_out;
    let conv2 = c_out * c_out * 27 + c_out;
    let norms = 2 * (2 * c_out);
    let proj = if c_in != c_out { c_in * c_out + c_out } else { 0 };
    conv1 + conv2 + norms + proj
}

/// Closed-form parameter count of the attention gate.
pub fn gate_param_count(c_in: usize, hidden: usize, c_out: usize) -> usize {
    (hidden * c_in * 27 + hidden) + 2 * hidden + (c_out * hidden + c_out)
}

#[cfg(test)]
mod tests;
