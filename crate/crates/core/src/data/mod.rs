//! Dataset types, manifests, patient-level splitting and loading.
//!
//! The on-disk layout is a directory of lossless 8-bit grayscale files plus
//! delimited-text manifests, one per split. Manifest rows are
//! `path,label,patient_id,domain,mask_path` with paths relative to the
//! manifest file.

pub mod glyphs;
mod synth;

pub use synth::{
    ensure_dataset, generate_synthetic_dataset, synthesize_dataset, GeneratedDataset,
    GeometryRanges, SyntheticSpec, TextureParams,
};

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use thiserror::Error;

use crate::rng::derived_rng;
use crate::sector::{self, SectorMask};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest {path} line {line}: {reason}")]
    Manifest {
        path: PathBuf,
        line: usize,
        reason: String,
    },
    #[error("missing file {path} (referenced by manifest)")]
    MissingFile { path: PathBuf },
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("record {path}: mask dimensions {mask:?} do not match image {image:?}")]
    DimensionMismatch {
        path: PathBuf,
        image: (usize, usize),
        mask: (usize, usize),
    },
    #[error(transparent)]
    Sector(#[from] sector::SectorError),
}

/// Whether a frame comes from the training distribution or the shifted one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Domain {
    InDist,
    OutDist,
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Domain::InDist => write!(f, "id"),
            Domain::OutDist => write!(f, "ood"),
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "id" => Ok(Domain::InDist),
            "ood" => Ok(Domain::OutDist),
            other => Err(format!("unknown domain tag `{other}`")),
        }
    }
}

/// One grayscale image with its label and provenance.
#[derive(Debug, Clone)]
pub struct Frame {
    /// Intensities in [0,1], square.
    pub image: Array2<f32>,
    pub label: usize,
    pub patient_id: String,
    pub domain: Domain,
    pub mask: Option<SectorMask>,
}

/// One manifest row. `glyph_id` is generator metadata kept in memory only;
/// it is never serialized.
#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub path: String,
    pub label: usize,
    pub patient_id: String,
    pub domain: Domain,
    pub mask_path: Option<String>,
    pub glyph_id: Option<usize>,
}

/// Split manifests of one dataset. Patients never span splits.
#[derive(Debug, Clone, Default)]
pub struct DatasetManifest {
    pub train: Vec<ManifestRecord>,
    pub val: Vec<ManifestRecord>,
    pub test: Vec<ManifestRecord>,
    pub test_ood: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn all_records(&self) -> impl Iterator<Item = &ManifestRecord> {
        self.train
            .iter()
            .chain(self.val.iter())
            .chain(self.test.iter())
            .chain(self.test_ood.iter())
    }

    /// Writes `manifest.csv` plus one manifest per split into `dir`.
    pub fn save(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(|source| DataError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        let all: Vec<ManifestRecord> = self.all_records().cloned().collect();
        write_manifest(&dir.join("manifest.csv"), &all)?;
        write_manifest(&dir.join("train.csv"), &self.train)?;
        write_manifest(&dir.join("val.csv"), &self.val)?;
        write_manifest(&dir.join("test.csv"), &self.test)?;
        write_manifest(&dir.join("test_ood.csv"), &self.test_ood)?;
        Ok(())
    }

    /// Reads the per-split manifests written by [`DatasetManifest::save`].
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        Ok(Self {
            train: read_manifest(&dir.join("train.csv"))?,
            val: read_manifest(&dir.join("val.csv"))?,
            test: read_manifest(&dir.join("test.csv"))?,
            test_ood: read_manifest(&dir.join("test_ood.csv"))?,
        })
    }
}

/// Writes records in the fixed five-column format.
pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<(), DataError> {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str("path,label,patient_id,domain,mask_path\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.path,
            r.label,
            r.patient_id,
            r.domain,
            r.mask_path.as_deref().unwrap_or("")
        ));
    }
    let mut file = fs::File::create(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(out.as_bytes()).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a five-column manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header == "path,label,patient_id,domain,mask_path" => {}
        other => {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("bad header {:?}", other.map(|(_, h)| h)),
            })
        }
    }
    let mut records = Vec::new();
    for (idx, line) in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(DataError::Manifest {
                path: path.to_path_buf(),
                line: idx + 1,
                reason: format!("expected 5 fields, found {}", fields.len()),
            });
        }
        let label = fields[1].parse::<usize>().map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: format!("bad label: {e}"),
        })?;
        let domain = fields[3].parse::<Domain>().map_err(|e| DataError::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            reason: e,
        })?;
        records.push(ManifestRecord {
            path: fields[0].to_string(),
            label,
            patient_id: fields[2].to_string(),
            domain,
            mask_path: if fields[4].is_empty() {
                None
            } else {
                Some(fields[4].to_string())
            },
            glyph_id: None,
        });
    }
    Ok(records)
}

const TAG_SPLIT: u64 = 0x53504c49;

/// Assigns every patient to exactly one of train/val/test.
///
/// Counts per split follow the largest-remainder rule so they match the
/// requested ratios within one patient. Deterministic for a fixed seed.
pub fn split_by_patient(
    records: Vec<ManifestRecord>,
    ratios: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest, DataError> {
    let sum: f64 = ratios.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || ratios.iter().any(|&r| r < 0.0) {
        return Err(DataError::Config(format!(
            "split ratios must be non-negative and sum to 1, got {ratios:?}"
        )));
    }
    let mut patients: Vec<String> = Vec::new();
    for r in &records {
        if !patients.contains(&r.patient_id) {
            patients.push(r.patient_id.clone());
        }
    }
    patients.sort();
    let n = patients.len();
    if n < 3 {
        return Err(DataError::Config(format!(
            "need at least one patient per split, got {n} patients"
        )));
    }
    let counts = largest_remainder(n, &ratios);
    if counts.iter().any(|&c| c == 0) {
        return Err(DataError::Config(format!(
            "ratios {ratios:?} leave an empty split for {n} patients"
        )));
    }
    let mut rng = derived_rng(seed, &[TAG_SPLIT]);
    shuffle(&mut patients, &mut rng);
    let mut manifest = DatasetManifest::default();
    let assignment: Vec<(&str, usize)> = patients
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let split = if i < counts[0] {
                0
            } else if i < counts[0] + counts[1] {
                1
            } else {
                2
            };
            (p.as_str(), split)
        })
        .collect();
    for record in records {
        let split = assignment
            .iter()
            .find(|(p, _)| *p == record.patient_id)
            .map(|(_, s)| *s)
            .expect("patient collected above");
        match split {
            0 => manifest.train.push(record),
            1 => manifest.val.push(record),
            _ => manifest.test.push(record),
        }
    }
    Ok(manifest)
}

fn largest_remainder(total: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let raw: Vec<f64> = ratios.iter().map(|r| r * total as f64).collect();
    let mut counts = [0usize; 3];
    let mut assigned = 0usize;
    for (i, r) in raw.iter().enumerate() {
        counts[i] = r.floor() as usize;
        assigned += counts[i];
    }
    let mut order: Vec<usize> = (0..3).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().take(total - assigned) {
        counts[i] += 1;
    }
    counts
}

fn shuffle<T>(items: &mut [T], rng: &mut crate::rng::Rng) {
    use rand::Rng as _;
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Loads all frames referenced by a manifest file, in manifest order.
pub fn load_dataset(manifest_path: &Path) -> Result<Vec<Frame>, DataError> {
    let records = read_manifest(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    load_records(base, &records)
}

/// Loads frames for in-memory records resolved against `base`.
pub fn load_records(base: &Path, records: &[ManifestRecord]) -> Result<Vec<Frame>, DataError> {
    records.iter().map(|r| load_frame(base, r)).collect()
}

fn load_frame(base: &Path, record: &ManifestRecord) -> Result<Frame, DataError> {
    let img_path = base.join(&record.path);
    if !img_path.exists() {
        return Err(DataError::MissingFile { path: img_path });
    }
    let img = image::open(&img_path)
        .map_err(|e| DataError::CorruptImage {
            path: img_path.clone(),
            reason: e.to_string(),
        })?
        .into_luma8();
    let (w, h) = img.dimensions();
    if w != h {
        return Err(DataError::CorruptImage {
            path: img_path.clone(),
            reason: format!("image is {w}x{h}, expected square"),
        });
    }
    let mut image = Array2::<f32>::zeros((h as usize, w as usize));
    for (x, y, p) in img.enumerate_pixels() {
        image[[y as usize, x as usize]] = p.0[0] as f32 / 255.0;
    }
    let mask = match &record.mask_path {
        Some(mp) => {
            let mask_path = base.join(mp);
            if !mask_path.exists() {
                return Err(DataError::MissingFile { path: mask_path });
            }
            let mask = sector::read_mask(&mask_path)?;
            if mask.dim() != image.dim() {
                return Err(DataError::DimensionMismatch {
                    path: img_path.clone(),
                    image: image.dim(),
                    mask: mask.dim(),
                });
            }
            Some(mask)
        }
        None => None,
    };
    Ok(Frame {
        image,
        label: record.label,
        patient_id: record.patient_id.clone(),
        domain: record.domain,
        mask,
    })
}
