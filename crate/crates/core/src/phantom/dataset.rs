//! On-disk phantom datasets: a JSON manifest plus one raw complex file per slice.
//!
//! Slice files hold little-endian `f32` pairs `(re, im)` in row-major order.
//! Their names and shapes are declared in the manifest and must not be
//! inferred from file names.

use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{make_phantom_slice, Contrast};
use crate::error::{config, data, Result};
use crate::image::ComplexImage;
use crate::rng;

pub const DATASET_VERSION: &str = "adadiff-data-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub file: String,
    pub contrast: Contrast,
    pub slice: usize,
    pub position: f64,
    pub shape: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectEntry {
    pub id: usize,
    pub split: Split,
    pub seed: u64,
    pub slices: Vec<SliceEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub version: String,
    pub seed: u64,
    pub shape: [usize; 2],
    pub contrasts: Vec<Contrast>,
    pub slices_per_subject: usize,
    pub subjects: Vec<SubjectEntry>,
}

impl DatasetManifest {
    pub fn slice_count(&self) -> usize {
        self.subjects.iter().map(|s| s.slices.len()).sum()
    }

    /// `(subject, slice)` pairs of one split, in manifest order.
    pub fn split_slices(&self, split: Split) -> Vec<(&SubjectEntry, &SliceEntry)> {
        self.subjects
            .iter()
            .filter(|s| s.split == split)
            .flat_map(|s| s.slices.iter().map(move |e| (s, e)))
            .collect()
    }
}

/// Subject counts for the 70/10/20 split; validation and test get at least one subject.
fn split_sizes(n: usize) -> (usize, usize, usize) {
    let val = ((n as f64 * 0.1).round() as usize).max(1);
    let test = ((n as f64 * 0.2).round() as usize).max(1);
    (n - val - test, val, test)
}

/// Axial position of slice `s` among `count`, spread over the central brain.
fn slice_position(s: usize, count: usize) -> f64 {
    if count == 1 {
        0.0
    } else {
        -0.35 + 0.7 * s as f64 / (count - 1) as f64
    }
}

/// Generates slices in memory without touching the filesystem.
pub fn generate_slices(
    subject_seed: u64,
    contrasts: &[Contrast],
    shape: (usize, usize),
    slices: usize,
) -> Result<Vec<(Contrast, usize, ComplexImage)>> {
    let mut out = Vec::with_capacity(slices * contrasts.len());
    for s in 0..slices {
        for &c in contrasts {
            let p = make_phantom_slice(c, shape, subject_seed, slice_position(s, slices))?;
            out.push((c, s, quantize(&p.image)));
        }
    }
    Ok(out)
}

/// Rounds to the `f32` precision of the slice file format.
pub fn quantize(img: &ComplexImage) -> ComplexImage {
    let data = img
        .data()
        .iter()
        .map(|c| Complex64::new(c.re as f32 as f64, c.im as f32 as f64))
        .collect();
    ComplexImage::from_vec(img.height(), img.width(), data).expect("shape preserved")
}

pub fn write_slice(path: &Path, img: &ComplexImage) -> Result<()> {
    let mut bytes = Vec::with_capacity(img.data().len() * 8);
    for c in img.data() {
        bytes.extend_from_slice(&(c.re as f32).to_le_bytes());
        bytes.extend_from_slice(&(c.im as f32).to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_slice(path: &Path, shape: (usize, usize)) -> Result<ComplexImage> {
    let bytes = fs::read(path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
    let (h, w) = shape;
    if bytes.len() != h * w * 8 {
        return Err(data(format!(
            "{} holds {} bytes, expected {} for {h}x{w}",
            path.display(),
            bytes.len(),
            h * w * 8
        )));
    }
    let values: Vec<Complex64> = bytes
        .chunks_exact(8)
        .map(|c| {
            let re = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
            let im = f32::from_le_bytes([c[4], c[5], c[6], c[7]]);
            Complex64::new(re as f64, im as f64)
        })
        .collect();
    ComplexImage::from_vec(h, w, values)
}

/// Writes `subjects × slices × contrasts` slice files plus the manifest.
pub fn make_dataset(
    subjects: usize,
    contrasts: &[Contrast],
    shape: (usize, usize),
    slices_per_subject: usize,
    seed: u64,
    out: &Path,
) -> Result<DatasetManifest> {
    if subjects < 3 {
        return Err(config(format!("need at least 3 subjects to form train/val/test splits, got {subjects}")));
    }
    if contrasts.is_empty() || slices_per_subject == 0 {
        return Err(config("dataset needs at least one contrast and one slice per subject"));
    }
    let (n_train, n_val, _) = split_sizes(subjects);
    let mut order: Vec<usize> = (0..subjects).collect();
    order.shuffle(&mut rng::stream(seed, &[0x7370_6c69]));
    let mut splits = vec![Split::Test; subjects];
    for (rank, &id) in order.iter().enumerate() {
        splits[id] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    fs::create_dir_all(out)?;
    let mut entries = Vec::with_capacity(subjects);
    for id in 0..subjects {
        let subject_seed = rng::derive_seed(seed, &[0x7375_626a, id as u64]);
        let dir = format!("sub{id:03}");
        fs::create_dir_all(out.join(&dir))?;
        let mut slices = Vec::new();
        for (contrast, s, img) in generate_slices(subject_seed, contrasts, shape, slices_per_subject)? {
            let file = format!("{dir}/{contrast}_{s:02}.cfl");
            write_slice(&out.join(&file), &img)?;
            slices.push(SliceEntry {
                file,
                contrast,
                slice: s,
                position: slice_position(s, slices_per_subject),
                shape: [shape.0, shape.1],
            });
        }
        entries.push(SubjectEntry {
            id,
            split: splits[id],
            seed: subject_seed,
            slices,
        });
    }
    let manifest = DatasetManifest {
        version: DATASET_VERSION.into(),
        seed,
        shape: [shape.0, shape.1],
        contrasts: contrasts.to_vec(),
        slices_per_subject,
        subjects: entries,
    };
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(out.join(MANIFEST_FILE), text + "\n")?;
    Ok(manifest)
}

/// An opened dataset directory with a validated manifest.
#[derive(Clone, Debug)]
pub struct Dataset {
    root: PathBuf,
    manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| data(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| data(format!("malformed manifest {}: {e}", path.display())))?;
        if manifest.version != DATASET_VERSION {
            return Err(data(format!(
                "unsupported dataset version {:?} (expected {DATASET_VERSION:?})",
                manifest.version
            )));
        }
        let mut ids = std::collections::HashSet::new();
        for subject in &manifest.subjects {
            if !ids.insert(subject.id) {
                return Err(data(format!("subject {} listed twice", subject.id)));
            }
            for entry in &subject.slices {
                let file = root.join(&entry.file);
                let meta = fs::metadata(&file).map_err(|_| data(format!("missing slice file {}", file.display())))?;
                let expected = (entry.shape[0] * entry.shape[1] * 8) as u64;
                if meta.len() != expected {
                    return Err(data(format!(
                        "{} has {} bytes, manifest declares {:?}",
                        file.display(),
                        meta.len(),
                        entry.shape
                    )));
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn load(&self, entry: &SliceEntry) -> Result<ComplexImage> {
        read_slice(&self.root.join(&entry.file), (entry.shape[0], entry.shape[1]))
    }

    /// All images of a split, in manifest order.
    pub fn load_split(&self, split: Split) -> Result<Vec<ComplexImage>> {
        self.manifest
            .split_slices(split)
            .into_iter()
            .map(|(_, e)| self.load(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_sizes_cover_every_subject() {
        assert_eq!(split_sizes(10), (7, 1, 2));
        assert_eq!(split_sizes(3), (1, 1, 1));
        for n in 3..60 {
            let (a, b, c) = split_sizes(n);
            assert_eq!(a + b + c, n);
            assert!(a >= 1 && b >= 1 && c >= 1);
        }
    }

    #[test]
    fn writes_expected_slice_count_and_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(10, &Contrast::ALL, (32, 32), 4, 5, dir.path()).unwrap();
        assert_eq!(m.slice_count(), 120);
        let ds = Dataset::open(dir.path()).unwrap();
        let (subject, entry) = ds.manifest().split_slices(Split::Train)[0];
        let loaded = ds.load(entry).unwrap();
        let regenerated = generate_slices(subject.seed, &[entry.contrast], (32, 32), 4).unwrap();
        let expected = &regenerated.iter().find(|(_, s, _)| *s == entry.slice).unwrap().2;
        assert_eq!(&loaded, expected);
        // Writing the loaded slice back yields the same bytes.
        let copy = dir.path().join("copy.cfl");
        write_slice(&copy, &loaded).unwrap();
        assert_eq!(fs::read(&copy).unwrap(), fs::read(dir.path().join(&entry.file)).unwrap());
    }

    #[test]
    fn splits_are_disjoint_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(10, &[Contrast::T1], (32, 32), 1, 8, dir.path()).unwrap();
        let count = |s| m.subjects.iter().filter(|e| e.split == s).count();
        assert_eq!((count(Split::Train), count(Split::Val), count(Split::Test)), (7, 1, 2));
    }

    #[test]
    fn rerun_is_byte_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        make_dataset(4, &[Contrast::T2, Contrast::PD], (32, 32), 2, 77, a.path()).unwrap();
        make_dataset(4, &[Contrast::T2, Contrast::PD], (32, 32), 2, 77, b.path()).unwrap();
        for entry in walk(a.path()) {
            let rel = entry.strip_prefix(a.path()).unwrap();
            assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{rel:?}");
        }
    }

    fn walk(dir: &Path) -> Vec<PathBuf> {
        let mut out = Vec::new();
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                out.extend(walk(&p));
            } else {
                out.push(p);
            }
        }
        out
    }

    #[test]
    fn too_few_subjects_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            make_dataset(2, &Contrast::ALL, (32, 32), 1, 0, dir.path()),
            Err(crate::Error::Config(_))
        ));
    }

    #[test]
    fn detects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let m = make_dataset(3, &[Contrast::T1], (32, 32), 1, 1, dir.path()).unwrap();
        fs::write(dir.path().join(&m.subjects[0].slices[0].file), b"short").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(crate::Error::Data(_))));
        fs::write(dir.path().join(MANIFEST_FILE), "{ not json").unwrap();
        assert!(matches!(Dataset::open(dir.path()), Err(crate::Error::Data(_))));
    }
}
