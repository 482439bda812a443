//! Synthetic phantoms: concentric label shells (ET sphere inside an NCR
//! shell inside an ED shell) with channel intensities that make the classes
//! separable but not trivially so — ET is hyperintense and NCR hypointense
//! in the T1ce analogue, ED hyperintense in the FLAIR analogue, everything
//! else zero before noise.

use ndarray::{Array3, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelMap, MpMriVolume, LABEL_ED, LABEL_ET, LABEL_NCR};
use crate::error::{Error, Result};
use crate::nn::El;

/// Shell intensity deltas (channel index, value).
const T1CE_CHANNEL: usize = 1;
const FLAIR_CHANNEL: usize = 3;
const ET_T1CE: f32 = 2.0;
const NCR_T1CE: f32 = -1.0;
const ED_FLAIR: f32 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub grid_size: [usize; 3],
    /// Voxel coordinates of the tumour centre (may be fractional).
    pub tumour_center: [f64; 3],
    /// Strictly increasing radii: ET sphere, NCR outer shell, WT boundary.
    pub radii_vox: [f64; 3],
    pub noise_sigma: f64,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let [r_et, r_ncr, r_wt] = self.radii_vox;
        if !(r_et > 0.0 && r_et < r_ncr && r_ncr < r_wt) {
            return Err(Error::validation(format!(
                "phantom radii must be strictly increasing and positive, got {:?}",
                self.radii_vox
            )));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::validation("noise_sigma must be non-negative".into()));
        }
        for axis in 0..3 {
            let c = self.tumour_center[axis];
            let n = self.grid_size[axis] as f64;
            if c - r_wt < 0.0 || c + r_wt > n - 1.0 {
                return Err(Error::validation(format!(
                    "tumour (centre {c}, radius {r_wt}) does not fit inside axis {axis} of length {n}"
                )));
            }
        }
        Ok(())
    }

    /// A deterministic family of phantoms for desk-scale datasets: member
    /// `index` varies the centre and radii within safe bounds.
    pub fn standard(index: usize, grid: usize, noise_sigma: f64) -> Self {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED_0000 + index as u64);
        let g = grid as f64;
        let r_wt = rng.gen_range(0.22..0.30) * g;
        let r_ncr = r_wt * rng.gen_range(0.55..0.68);
        let r_et = r_ncr * rng.gen_range(0.50..0.70);
        let margin = r_wt + 1.5;
        let c = |rng: &mut ChaCha8Rng| rng.gen_range(margin..(g - 1.0 - margin));
        let center = [c(&mut rng), c(&mut rng), c(&mut rng)];
        Self {
            grid_size: [grid; 3],
            tumour_center: center,
            radii_vox: [r_et, r_ncr, r_wt],
            noise_sigma,
            seed: 0xBEEF_0000 + index as u64,
        }
    }
}

/// Generate the phantom. Deterministic in `spec.seed`.
pub fn generate_phantom(spec: &PhantomSpec) -> Result<(MpMriVolume, LabelMap)> {
    spec.validate()?;
    let [d, h, w] = spec.grid_size;
    let [r_et, r_ncr, r_wt] = spec.radii_vox;
    let (r_et2, r_ncr2, r_wt2) = (r_et * r_et, r_ncr * r_ncr, r_wt * r_wt);
    let [cz, cy, cx] = spec.tumour_center;

    let mut labels = Array3::<u8>::zeros((d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                let dz = z as f64 - cz;
                let dy = y as f64 - cy;
                let dx = x as f64 - cx;
                let r2 = dz * dz + dy * dy + dx * dx;
                labels[[z, y, x]] = if r2 <= r_et2 {
                    LABEL_ET
                } else if r2 <= r_ncr2 {
                    LABEL_NCR
                } else if r2 <= r_wt2 {
                    LABEL_ED
                } else {
                    0
                };
            }
        }
    }

    let mut channels = Array4::<f32>::zeros((4, d, h, w));
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                match labels[[z, y, x]] {
                    LABEL_ET => channels[[T1CE_CHANNEL, z, y, x]] = ET_T1CE,
                    LABEL_NCR => channels[[T1CE_CHANNEL, z, y, x]] = NCR_T1CE,
                    LABEL_ED => channels[[FLAIR_CHANNEL, z, y, x]] = ED_FLAIR,
                    _ => {}
                }
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let sigma = spec.noise_sigma as f32;
        for v in channels.iter_mut() {
            *v += f32::standard_normal(&mut rng) * sigma;
        }
    }

    let labels = LabelMap::new(labels)?;
    let volume = MpMriVolume::from_channels(channels, format!("phantom-{:08x}", spec.seed))?;
    Ok((volume, labels))
}
