//! Dataset ingestion, deterministic splitting, and synthetic phantom
//! generation for desk-scale runs.
//!
//! On-disk layout follows the BraTS convention:
//! `<root>/<subject_id>/<subject_id>_<suffix>.nii.gz` with one file per
//! modality plus the segmentation. Subjects may load in parallel; index
//! construction is single-threaded.

pub mod nifti;
pub mod phantom;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{LabelMap, MpMriVolume};
use crate::error::{Error, Result};

pub use phantom::{generate_phantom, PhantomSpec};

/// File-name suffix tables for the supported BraTS releases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NamingConvention {
    #[default]
    Brats2021,
    Brats2023,
}

impl NamingConvention {
    /// Suffixes in channel order (T1, T1ce, T2, FLAIR) plus the
    /// segmentation suffix last.
    pub fn suffixes(&self) -> [&'static str; 5] {
        match self {
            NamingConvention::Brats2021 => ["t1", "t1ce", "t2", "flair", "seg"],
            NamingConvention::Brats2023 => ["t1n", "t1c", "t2w", "t2f", "seg"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::validation(format!("unknown split '{other}'"))),
        }
    }
}

/// The five files of one subject, in (T1, T1ce, T2, FLAIR, seg) order.
#[derive(Debug, Clone)]
pub struct SubjectEntry {
    pub subject_id: String,
    pub files: [PathBuf; 5],
}

/// Ordered subject list plus (after [`split_dataset`]) the split
/// assignment. Ordering is deterministic by subject id.
#[derive(Debug, Clone, Default)]
pub struct DatasetIndex {
    pub subjects: Vec<SubjectEntry>,
    pub split_assignment: BTreeMap<String, Split>,
}

impl DatasetIndex {
    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn subjects_in(&self, split: Split) -> Vec<&SubjectEntry> {
        self.subjects
            .iter()
            .filter(|s| self.split_assignment.get(&s.subject_id) == Some(&split))
            .collect()
    }

    pub fn split_sizes(&self) -> (usize, usize, usize) {
        let mut sizes = (0, 0, 0);
        for s in self.split_assignment.values() {
            match s {
                Split::Train => sizes.0 += 1,
                Split::Val => sizes.1 += 1,
                Split::Test => sizes.2 += 1,
            }
        }
        sizes
    }
}

/// Scan a dataset root: one entry per subject directory containing all five
/// expected files. Accepts `.nii.gz`, `.nii`, or the `.raw` fallback.
pub fn scan_dataset(root_dir: &Path, naming: NamingConvention) -> Result<DatasetIndex> {
    if !root_dir.is_dir() {
        return Err(Error::Dataset(format!("dataset root {} is not a directory", root_dir.display())));
    }
    let mut subject_dirs: Vec<PathBuf> = std::fs::read_dir(root_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_dir())
        .collect();
    subject_dirs.sort();

    let mut subjects = Vec::new();
    for dir in subject_dirs {
        let subject_id = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Dataset(format!("unreadable directory name under {}", root_dir.display())))?
            .to_string();
        let mut files: Vec<PathBuf> = Vec::with_capacity(5);
        for suffix in naming.suffixes() {
            let stem = format!("{subject_id}_{suffix}");
            let candidates = [
                dir.join(format!("{stem}.nii.gz")),
                dir.join(format!("{stem}.nii")),
                dir.join(format!("{stem}.raw")),
            ];
            match candidates.iter().find(|p| p.is_file()) {
                Some(p) => files.push(p.clone()),
                None => {
                    return Err(Error::MissingFile {
                        subject: subject_id,
                        path: candidates[0].clone(),
                    })
                }
            }
        }
        subjects.push(SubjectEntry {
            subject_id,
            files: files.try_into().expect("exactly five files"),
        });
    }
    if subjects.is_empty() {
        return Err(Error::Dataset(format!("no subjects found under {}", root_dir.display())));
    }
    Ok(DatasetIndex { subjects, split_assignment: BTreeMap::new() })
}

/// Deterministic split: floor-based train/val sizes with the remainder
/// assigned to test. The shuffle is a pure function of the sorted subject
/// ids and the seed (a private Fisher-Yates, immune to library changes).
pub fn split_dataset(mut index: DatasetIndex, fractions: (f64, f64, f64), seed: u64) -> Result<DatasetIndex> {
    let sum = fractions.0 + fractions.1 + fractions.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions sum to {sum}, expected 1")));
    }
    if fractions.0 < 0.0 || fractions.1 < 0.0 || fractions.2 < 0.0 {
        return Err(Error::Config("split fractions must be non-negative".into()));
    }
    let n = index.subjects.len();
    if n < 3 {
        return Err(Error::Dataset(format!("need at least 3 subjects to split, got {n}")));
    }
    let mut ids: Vec<String> = index.subjects.iter().map(|s| s.subject_id.clone()).collect();
    ids.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // Fisher-Yates
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        ids.swap(i, j);
    }
    let n_train = (n as f64 * fractions.0).floor() as usize;
    let n_val = (n as f64 * fractions.1).floor() as usize;
    let mut assignment = BTreeMap::new();
    for (pos, id) in ids.into_iter().enumerate() {
        let split = if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
        assignment.insert(id, split);
    }
    index.split_assignment = assignment;
    Ok(index)
}

const MANIFEST_HEADER: &str = "# segguidednet split manifest v1";

/// Emit the split as an auditable text file, one `subject_id,split` line
/// per subject, sorted by id.
pub fn write_split_manifest(index: &DatasetIndex, path: &Path) -> Result<()> {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (id, split) in &index.split_assignment {
        out.push_str(&format!("{id},{split}\n"));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_split_manifest(path: &Path) -> Result<BTreeMap<String, Split>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == MANIFEST_HEADER => {}
        other => {
            return Err(Error::FileFormat {
                path: path.to_path_buf(),
                message: format!("unexpected manifest header {other:?}"),
            })
        }
    }
    let mut map = BTreeMap::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let (id, split) = line.split_once(',').ok_or_else(|| Error::FileFormat {
            path: path.to_path_buf(),
            message: format!("bad manifest line '{line}'"),
        })?;
        map.insert(id.to_string(), split.parse()?);
    }
    Ok(map)
}

/// Load one subject: the four modalities stacked in fixed order, the brain
/// mask as the union of nonzero voxels across channels, and the labels.
///
/// BraTS distributions encode enhancing tumour as label 4; it is remapped
/// to 3 on load. Any other out-of-range value is an error.
pub fn load_subject(entry: &SubjectEntry) -> Result<(MpMriVolume, LabelMap)> {
    let mut channels: Option<Array4<f32>> = None;
    let mut spacing = [1.0f64; 3];
    for (ci, path) in entry.files[..4].iter().enumerate() {
        let vol = nifti::read_volume(path)?;
        let (d, h, w) = vol.data.dim();
        let store = channels.get_or_insert_with(|| Array4::zeros((4, d, h, w)));
        if store.dim().1 != d || store.dim().2 != h || store.dim().3 != w {
            return Err(Error::shape(format!(
                "subject {}: modality {} has shape {:?}, expected {:?}",
                entry.subject_id,
                path.display(),
                (d, h, w),
                (store.dim().1, store.dim().2, store.dim().3)
            )));
        }
        store.index_axis_mut(ndarray::Axis(0), ci).assign(&vol.data);
        spacing = vol.spacing_mm;
    }
    let channels = channels.expect("four modalities");

    let seg = nifti::read_volume(&entry.files[4])?;
    if seg.data.dim() != (channels.dim().1, channels.dim().2, channels.dim().3) {
        return Err(Error::shape(format!(
            "subject {}: segmentation shape {:?} does not match modalities {:?}",
            entry.subject_id,
            seg.data.dim(),
            (channels.dim().1, channels.dim().2, channels.dim().3)
        )));
    }
    let mut labels = ndarray::Array3::<u8>::zeros(seg.data.dim());
    for (dst, src) in labels.iter_mut().zip(seg.data.iter()) {
        let v = *src;
        if v != v.round() || !(0.0..=4.0).contains(&v) {
            return Err(Error::validation(format!(
                "subject {}: segmentation value {v} is not a valid label",
                entry.subject_id
            )));
        }
        *dst = if v as u8 == 4 { 3 } else { v as u8 };
    }
    let mask = crate::domain::union_nonzero_mask(&channels);
    let volume = MpMriVolume::new(channels, mask, entry.subject_id.clone(), spacing)?;
    let labels = LabelMap::new(labels)?;
    Ok((volume, labels))
}

/// Materialise `count` standard phantoms under `root` in the BraTS layout,
/// so that the scan/load path works against synthetic data too.
pub fn write_phantom_dataset(
    root: &Path,
    count: usize,
    grid: usize,
    noise_sigma: f64,
    naming: NamingConvention,
) -> Result<DatasetIndex> {
    std::fs::create_dir_all(root)?;
    for i in 0..count {
        let spec = PhantomSpec::standard(i, grid, noise_sigma);
        let (vol, labels) = generate_phantom(&spec)?;
        let id = format!("PHANTOM_{i:05}");
        let dir = root.join(&id);
        std::fs::create_dir_all(&dir)?;
        let spacing = vol.voxel_spacing_mm();
        for (ci, suffix) in naming.suffixes()[..4].iter().enumerate() {
            let chan = vol.channels().index_axis(ndarray::Axis(0), ci).to_owned();
            nifti::write_nifti_f32(&dir.join(format!("{id}_{suffix}.nii.gz")), &chan, spacing)?;
        }
        nifti::write_nifti_u8(
            &dir.join(format!("{id}_{}.nii.gz", naming.suffixes()[4])),
            labels.labels(),
            spacing,
        )?;
    }
    scan_dataset(root, naming)
}

/// In-memory subject store used by the trainer: either phantoms generated
/// up front or lazily loaded disk subjects.
pub enum SubjectStore {
    Memory(Vec<(MpMriVolume, LabelMap)>),
    Disk(Vec<SubjectEntry>),
}

impl SubjectStore {
    pub fn from_phantoms(count: usize, grid: usize, noise_sigma: f64) -> Result<Self> {
        let mut subjects = Vec::with_capacity(count);
        for i in 0..count {
            subjects.push(generate_phantom(&PhantomSpec::standard(i, grid, noise_sigma))?);
        }
        Ok(SubjectStore::Memory(subjects))
    }

    pub fn len(&self) -> usize {
        match self {
            SubjectStore::Memory(v) => v.len(),
            SubjectStore::Disk(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn subject_id(&self, idx: usize) -> String {
        match self {
            SubjectStore::Memory(v) => v[idx].0.subject_id().to_string(),
            SubjectStore::Disk(v) => v[idx].subject_id.clone(),
        }
    }

    pub fn load(&self, idx: usize) -> Result<(MpMriVolume, LabelMap)> {
        match self {
            SubjectStore::Memory(v) => Ok(v[idx].clone()),
            SubjectStore::Disk(v) => load_subject(&v[idx]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn index_with_ids(n: usize) -> DatasetIndex {
        let subjects = (0..n)
            .map(|i| SubjectEntry {
                subject_id: format!("SUBJ_{i:05}"),
                files: std::array::from_fn(|k| PathBuf::from(format!("f{k}"))),
            })
            .collect();
        DatasetIndex { subjects, split_assignment: BTreeMap::new() }
    }

    #[test]
    fn split_sizes_match_table_for_full_cohort() {
        let index = split_dataset(index_with_ids(1251), (0.70, 0.10, 0.20), 42).unwrap();
        assert_eq!(index.split_sizes(), (875, 125, 251));
    }

    #[test]
    fn split_sizes_floor_based_for_ten() {
        let index = split_dataset(index_with_ids(10), (0.70, 0.10, 0.20), 42).unwrap();
        assert_eq!(index.split_sizes(), (7, 1, 2));
    }

    #[test]
    fn split_is_deterministic_and_partitioning() {
        let a = split_dataset(index_with_ids(100), (0.70, 0.10, 0.20), 7).unwrap();
        let b = split_dataset(index_with_ids(100), (0.70, 0.10, 0.20), 7).unwrap();
        assert_eq!(a.split_assignment, b.split_assignment);
        assert_eq!(a.split_assignment.len(), 100);
        let c = split_dataset(index_with_ids(100), (0.70, 0.10, 0.20), 8).unwrap();
        assert_ne!(a.split_assignment, c.split_assignment, "different seed, same split");
    }

    #[test]
    fn split_rejects_bad_inputs() {
        assert!(split_dataset(index_with_ids(2), (0.7, 0.1, 0.2), 1).is_err());
        assert!(split_dataset(index_with_ids(10), (0.7, 0.1, 0.1), 1).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let index = split_dataset(index_with_ids(10), (0.70, 0.10, 0.20), 42).unwrap();
        let path = dir.path().join("split_manifest.txt");
        write_split_manifest(&index, &path).unwrap();
        let back = read_split_manifest(&path).unwrap();
        assert_eq!(back, index.split_assignment);
    }

    #[test]
    fn scan_missing_modality_names_subject() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_phantom_dataset(dir.path(), 2, 16, 0.0, NamingConvention::Brats2021).unwrap();
        assert_eq!(index.len(), 2);
        // delete one flair file
        std::fs::remove_file(dir.path().join("PHANTOM_00001/PHANTOM_00001_flair.nii.gz")).unwrap();
        let err = scan_dataset(dir.path(), NamingConvention::Brats2021).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("PHANTOM_00001") && msg.contains("flair"), "{msg}");
    }

    #[test]
    fn scan_empty_root_errors() {
        let dir = tempfile::tempdir().unwrap();
        assert!(scan_dataset(dir.path(), NamingConvention::Brats2021).is_err());
    }

    #[test]
    fn scan_sorts_and_round_trips_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_phantom_dataset(dir.path(), 10, 16, 0.03, NamingConvention::Brats2021).unwrap();
        assert_eq!(index.len(), 10);
        let ids: Vec<_> = index.subjects.iter().map(|s| s.subject_id.clone()).collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);

        // loading reproduces the generated phantom exactly (f32 payloads)
        let (vol, labels) = load_subject(&index.subjects[3]).unwrap();
        let spec = PhantomSpec::standard(3, 16, 0.03);
        let (vol_ref, labels_ref) = generate_phantom(&spec).unwrap();
        assert_eq!(vol.channels(), vol_ref.channels());
        assert_eq!(labels, labels_ref);
        assert_eq!(vol.spatial_shape(), (16, 16, 16));
    }

    #[test]
    fn brats2023_suffixes_scan_too() {
        let dir = tempfile::tempdir().unwrap();
        let index = write_phantom_dataset(dir.path(), 3, 16, 0.0, NamingConvention::Brats2023).unwrap();
        assert_eq!(index.len(), 3);
        assert!(index.subjects[0].files[1].to_string_lossy().contains("_t1c."));
    }

    #[test]
    fn et_label_four_is_remapped() {
        let dir = tempfile::tempdir().unwrap();
        write_phantom_dataset(dir.path(), 1, 16, 0.0, NamingConvention::Brats2021).unwrap();
        // rewrite the seg with 4 in place of 3
        let seg_path = dir.path().join("PHANTOM_00000/PHANTOM_00000_seg.nii.gz");
        let seg = nifti::read_nifti(&seg_path).unwrap();
        let remapped = seg.data.mapv(|v| if v == 3.0 { 4u8 } else { v as u8 });
        nifti::write_nifti_u8(&seg_path, &remapped, seg.spacing_mm).unwrap();
        let index = scan_dataset(dir.path(), NamingConvention::Brats2021).unwrap();
        let (_, labels) = load_subject(&index.subjects[0]).unwrap();
        assert!(labels.class_counts()[3] > 0);
    }

    #[test]
    fn shape_mismatch_across_modalities_errors() {
        let dir = tempfile::tempdir().unwrap();
        write_phantom_dataset(dir.path(), 1, 16, 0.0, NamingConvention::Brats2021).unwrap();
        let t2_path = dir.path().join("PHANTOM_00000/PHANTOM_00000_t2.nii.gz");
        let small = ndarray::Array3::<f32>::zeros((8, 16, 16));
        nifti::write_nifti_f32(&t2_path, &small, [1.0; 3]).unwrap();
        let index = scan_dataset(dir.path(), NamingConvention::Brats2021).unwrap();
        assert!(load_subject(&index.subjects[0]).is_err());
    }
}
