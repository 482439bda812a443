//! Core value types and the label/region algebra shared by every other
//! module: multi-parametric volumes, label maps, and the sub-region /
//! compound-region mask derivations.
//!
//! All types are immutable values after construction and safe to share
//! across parallel workers.

use ndarray::{Array3, Array4};

use crate::error::{Error, Result};

/// Voxel label codes: background, necrotic core, peritumoral oedema,
/// enhancing tumour.
pub const LABEL_BACKGROUND: u8 = 0;
pub const LABEL_NCR: u8 = 1;
pub const LABEL_ED: u8 = 2;
pub const LABEL_ET: u8 = 3;
pub const NUM_CLASSES: usize = 4;
pub const NUM_SUBREGIONS: usize = 3;

/// Fixed channel order of the stacked modalities.
pub const MODALITY_ORDER: [&str; 4] = ["t1", "t1ce", "t2", "flair"];

/// A 4-channel co-registered volumetric scan (T1, T1ce, T2, FLAIR) with a
/// brain mask. Channel grids share one spatial shape equal to the mask's.
#[derive(Debug, Clone)]
pub struct MpMriVolume {
    channels: Array4<f32>,
    brain_mask: Array3<bool>,
    subject_id: String,
    voxel_spacing_mm: [f64; 3],
}

impl MpMriVolume {
    pub fn new(
        channels: Array4<f32>,
        brain_mask: Array3<bool>,
        subject_id: impl Into<String>,
        voxel_spacing_mm: [f64; 3],
    ) -> Result<Self> {
        let (c, d, h, w) = channels.dim();
        if c != 4 {
            return Err(Error::validation(format!("expected exactly 4 channels, got {c}")));
        }
        if brain_mask.dim() != (d, h, w) {
            return Err(Error::shape(format!(
                "brain mask shape {:?} does not match channel shape {:?}",
                brain_mask.dim(),
                (d, h, w)
            )));
        }
        if voxel_spacing_mm.iter().any(|s| *s <= 0.0) {
            return Err(Error::validation(format!(
                "voxel spacing must be positive, got {voxel_spacing_mm:?}"
            )));
        }
        Ok(Self {
            channels,
            brain_mask,
            subject_id: subject_id.into(),
            voxel_spacing_mm,
        })
    }

    /// Convenience constructor with 1 mm isotropic spacing and a brain mask
    /// equal to the union of nonzero voxels across channels.
    pub fn from_channels(channels: Array4<f32>, subject_id: impl Into<String>) -> Result<Self> {
        let mask = union_nonzero_mask(&channels);
        Self::new(channels, mask, subject_id, [1.0, 1.0, 1.0])
    }

    pub fn channels(&self) -> &Array4<f32> {
        &self.channels
    }

    pub fn into_channels(self) -> Array4<f32> {
        self.channels
    }

    pub fn brain_mask(&self) -> &Array3<bool> {
        &self.brain_mask
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn voxel_spacing_mm(&self) -> [f64; 3] {
        self.voxel_spacing_mm
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        self.brain_mask.dim()
    }

    /// Rebuild with new channel data, keeping identity and spacing.
    pub fn with_channels(&self, channels: Array4<f32>, brain_mask: Array3<bool>) -> Result<Self> {
        Self::new(channels, brain_mask, self.subject_id.clone(), self.voxel_spacing_mm)
    }
}

/// Union of nonzero voxels across channels — the BraTS skull-stripped
/// convention for the brain mask.
pub fn union_nonzero_mask(channels: &Array4<f32>) -> Array3<bool> {
    let (c, d, h, w) = channels.dim();
    let mut mask = Array3::from_elem((d, h, w), false);
    for ci in 0..c {
        let chan = channels.index_axis(ndarray::Axis(0), ci);
        ndarray::Zip::from(&mut mask).and(&chan).for_each(|m, &v| {
            if v != 0.0 {
                *m = true;
            }
        });
    }
    mask
}

/// Voxel-wise labels in {0,1,2,3}.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    labels: Array3<u8>,
}

impl LabelMap {
    pub fn new(labels: Array3<u8>) -> Result<Self> {
        if let Some(bad) = labels.iter().find(|v| **v > LABEL_ET) {
            return Err(Error::validation(format!(
                "label value {bad} outside the valid set {{0,1,2,3}}"
            )));
        }
        Ok(Self { labels })
    }

    pub fn labels(&self) -> &Array3<u8> {
        &self.labels
    }

    pub fn into_inner(self) -> Array3<u8> {
        self.labels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.labels.dim()
    }

    /// Voxel count per class.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        let mut counts = [0usize; NUM_CLASSES];
        for v in self.labels.iter() {
            counts[*v as usize] += 1;
        }
        counts
    }

    pub fn has_foreground(&self) -> bool {
        self.labels.iter().any(|v| *v != LABEL_BACKGROUND)
    }
}

/// Binary masks for the three annotated sub-regions. Pairwise disjoint by
/// construction from a single-valued label map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubRegionMasks {
    pub ncr: Array3<bool>,
    pub ed: Array3<bool>,
    pub et: Array3<bool>,
}

impl SubRegionMasks {
    pub fn by_index(&self, i: usize) -> &Array3<bool> {
        match i {
            0 => &self.ncr,
            1 => &self.ed,
            2 => &self.et,
            _ => panic!("sub-region index {i} out of range"),
        }
    }
}

/// Binary masks for the compound evaluation regions. Nested:
/// et ⊆ tc ⊆ wt, forced by the union definitions
/// TC = NCR ∪ ET and WT = NCR ∪ ED ∪ ET.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompoundRegionMasks {
    pub et: Array3<bool>,
    pub tc: Array3<bool>,
    pub wt: Array3<bool>,
}

impl CompoundRegionMasks {
    pub fn by_index(&self, i: usize) -> &Array3<bool> {
        match i {
            0 => &self.et,
            1 => &self.tc,
            2 => &self.wt,
            _ => panic!("compound region index {i} out of range"),
        }
    }
}

/// Region name tables used by metric/report CSVs.
pub const COMPOUND_REGION_NAMES: [&str; 3] = ["ET", "TC", "WT"];
pub const SUBREGION_NAMES: [&str; 3] = ["NCR", "ED", "ET"];

/// ncr = (labels==1), ed = (labels==2), et = (labels==3).
pub fn derive_subregion_masks(labels: &LabelMap) -> SubRegionMasks {
    let l = labels.labels();
    SubRegionMasks {
        ncr: l.mapv(|v| v == LABEL_NCR),
        ed: l.mapv(|v| v == LABEL_ED),
        et: l.mapv(|v| v == LABEL_ET),
    }
}

/// et = (labels==3), tc = (labels in {1,3}), wt = (labels in {1,2,3}).
pub fn derive_compound_masks(labels: &LabelMap) -> CompoundRegionMasks {
    let l = labels.labels();
    CompoundRegionMasks {
        et: l.mapv(|v| v == LABEL_ET),
        tc: l.mapv(|v| v == LABEL_NCR || v == LABEL_ET),
        wt: l.mapv(|v| v != LABEL_BACKGROUND),
    }
}

/// Pair of (4-class segmentation logits, 3-channel attention logits) over
/// one input grid, shapes (4, D, H, W) and (3, D, H, W).
#[derive(Debug, Clone)]
pub struct NetworkOutput {
    pub seg_logits: Array4<f32>,
    pub attn_logits: Array4<f32>,
}

impl NetworkOutput {
    pub fn new(seg_logits: Array4<f32>, attn_logits: Array4<f32>) -> Result<Self> {
        let (cs, d, h, w) = seg_logits.dim();
        let (ca, da, ha, wa) = attn_logits.dim();
        if cs != NUM_CLASSES || ca != NUM_SUBREGIONS {
            return Err(Error::shape(format!(
                "expected {NUM_CLASSES} segmentation and {NUM_SUBREGIONS} attention channels, got {cs} and {ca}"
            )));
        }
        if (d, h, w) != (da, ha, wa) {
            return Err(Error::shape(format!(
                "segmentation grid {:?} and attention grid {:?} differ",
                (d, h, w),
                (da, ha, wa)
            )));
        }
        if seg_logits.iter().any(|v| !v.is_finite()) || attn_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("network output contains non-finite values".into()));
        }
        Ok(Self { seg_logits, attn_logits })
    }

    pub fn spatial_shape(&self) -> (usize, usize, usize) {
        let (_, d, h, w) = self.seg_logits.dim();
        (d, h, w)
    }
}

/// Per-voxel argmax over the 4 logit channels. Ties break toward the lowest
/// class index, which favours background and is deterministic across
/// platforms.
pub fn labels_from_logits(seg_logits: &Array4<f32>) -> Result<LabelMap> {
    let (c, d, h, w) = seg_logits.dim();
    if c != NUM_CLASSES {
        return Err(Error::shape(format!("expected {NUM_CLASSES} logit channels, got {c}")));
    }
    if seg_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite segmentation logits".into()));
    }
    let mut labels = Array3::zeros((d, h, w));
    let s = seg_logits.as_slice().expect("contiguous logits");
    let dhw = d * h * w;
    let out = labels.as_slice_mut().unwrap();
    for v in 0..dhw {
        let mut best = s[v];
        let mut best_c = 0u8;
        for ci in 1..c {
            let val = s[ci * dhw + v];
            if val > best {
                best = val;
                best_c = ci as u8;
            }
        }
        out[v] = best_c;
    }
    Ok(LabelMap { labels })
}

/// One-hot encoding of a label map as (4, D, H, W) with 0/1 entries.
pub fn one_hot(labels: &LabelMap) -> Array4<f32> {
    let (d, h, w) = labels.shape();
    let mut out = Array4::zeros((NUM_CLASSES, d, h, w));
    let dhw = d * h * w;
    let src = labels.labels().as_slice().unwrap();
    let dst = out.as_slice_mut().unwrap();
    for v in 0..dhw {
        dst[src[v] as usize * dhw + v] = 1.0;
    }
    out
}
