//! Dataset manifests, loading, and building-level splits.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::io::{read_mask, read_rgb};
use super::synthetic::SyntheticSceneSpec;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;
use crate::models::{DamageState, ViewRole};
use crate::seed::rng_for;
use crate::tensor::Tensor;

pub const MANIFEST_VERSION: &str = "mvdamage-dataset/1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
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

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                Error::invalid(format!("unknown split `{s}` (expected train, val or test)"))
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewEntry {
    pub role: ViewRole,
    /// Paths relative to the dataset root.
    pub image: String,
    pub mask: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "lowercase")]
pub enum Provenance {
    Synthetic(SyntheticSceneSpec),
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleEntry {
    pub building_id: String,
    /// Raw damage level; validated on load.
    pub label: u8,
    pub views: Vec<ViewEntry>,
    pub provenance: Provenance,
}

impl SampleEntry {
    pub fn damage_state(&self) -> Result<DamageState> {
        DamageState::new(self.label)
            .map_err(|_| self.reject(format!("label {} outside 0..=4", self.label)))
    }

    fn reject(&self, reason: impl Into<String>) -> Error {
        Error::Manifest {
            building: self.building_id.clone(),
            reason: reason.into(),
        }
    }

    fn validate(&self) -> Result<()> {
        self.damage_state()?;
        for (i, v) in self.views.iter().enumerate() {
            if self.views[..i].iter().any(|u| u.role == v.role) {
                return Err(self.reject(format!("duplicate view role {}", v.role)));
            }
        }
        if let Some(missing) = ViewRole::ALL
            .iter()
            .find(|r| !self.views.iter().any(|v| v.role == **r))
        {
            return Err(self.reject(format!("missing view {missing}")));
        }
        Ok(())
    }

    pub fn view(&self, role: ViewRole) -> Option<&ViewEntry> {
        self.views.iter().find(|v| v.role == role)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: String,
    pub samples: Vec<SampleEntry>,
    #[serde(default)]
    pub splits: BTreeMap<String, Split>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<SampleEntry>) -> Self {
        Self {
            version: MANIFEST_VERSION.to_string(),
            samples,
            splits: BTreeMap::new(),
        }
    }

    /// Structural checks that need no file access.
    pub fn validate(&self) -> Result<()> {
        if self.version != MANIFEST_VERSION {
            return Err(Error::Dataset(format!(
                "unsupported manifest version `{}` (expected `{MANIFEST_VERSION}`)",
                self.version
            )));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if self.samples[..i]
                .iter()
                .any(|t| t.building_id == s.building_id)
            {
                return Err(s.reject("building id listed twice"));
            }
            s.validate()?;
        }
        for id in self.splits.keys() {
            if !self.samples.iter().any(|s| &s.building_id == id) {
                return Err(Error::Manifest {
                    building: id.clone(),
                    reason: "split assigned to an unknown building".into(),
                });
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_FILE);
        fs::write(&path, self.to_json()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Samples assigned to `split`, in manifest order.
    pub fn split_samples(&self, split: Split) -> Vec<&SampleEntry> {
        self.samples
            .iter()
            .filter(|s| self.splits.get(&s.building_id) == Some(&split))
            .collect()
    }

    pub fn split_counts(&self) -> [usize; 3] {
        let mut n = [0; 3];
        for s in self.splits.values() {
            n[*s as usize] += 1;
        }
        n
    }
}

/// Integer split sizes by largest-remainder rounding of `n·fractions`
/// (ties go to the earlier split).
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 || fractions.iter().any(|&f| !(f >= 0.0)) {
        return Err(Error::invalid(format!(
            "split fractions {fractions:?} must be nonnegative and sum to 1"
        )));
    }
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut sizes = [0usize; 3];
    for i in 0..3 {
        sizes[i] = exact[i].floor() as usize;
    }
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if let Some(i) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Dataset(format!(
            "{n} buildings leave the {} split empty",
            Split::ALL[i]
        )));
    }
    Ok(sizes)
}

/// Shuffles buildings with `seed` and assigns train/val/test by cumulative fraction.
pub fn split_dataset(
    manifest: &DatasetManifest,
    fractions: [f64; 3],
    seed: u64,
) -> Result<DatasetManifest> {
    let sizes = split_sizes(manifest.samples.len(), fractions)?;
    let mut ids: Vec<&str> = manifest
        .samples
        .iter()
        .map(|s| s.building_id.as_str())
        .collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let mut out = manifest.clone();
    out.splits.clear();
    let mut it = ids.into_iter();
    for (split, &size) in Split::ALL.iter().zip(&sizes) {
        for id in it.by_ref().take(size) {
            out.splits.insert(id.to_string(), *split);
        }
    }
    Ok(out)
}

/// In-memory split with the same assignment as [`split_dataset`]:
/// `[train, val, test]`, each in input order.
pub fn split_loaded(
    samples: Vec<LoadedSample>,
    fractions: [f64; 3],
    seed: u64,
) -> Result<[Vec<LoadedSample>; 3]> {
    let sizes = split_sizes(samples.len(), fractions)?;
    let mut ids: Vec<&str> = samples.iter().map(|s| s.building_id.as_str()).collect();
    ids.shuffle(&mut rng_for(seed, "split"));
    let mut assigned = BTreeMap::new();
    let mut it = ids.into_iter();
    for (k, &size) in sizes.iter().enumerate() {
        for id in it.by_ref().take(size) {
            assigned.insert(id.to_string(), k);
        }
    }
    let mut out: [Vec<LoadedSample>; 3] = Default::default();
    for s in samples {
        let k = assigned[&s.building_id];
        out[k].push(s);
    }
    Ok(out)
}

/// One view of a building decoded into memory.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewData {
    pub role: ViewRole,
    /// `3×H×W` in `[0,1]`.
    pub image: Tensor<f32>,
    pub mask: BinaryMask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadedSample {
    pub building_id: String,
    pub label: DamageState,
    /// One entry per role, in `ViewRole::ALL` order.
    pub views: Vec<ViewData>,
}

impl LoadedSample {
    pub fn view(&self, role: ViewRole) -> &ViewData {
        &self.views[role.index()]
    }
}

/// A validated manifest together with the directory its paths resolve against.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

/// Reads and validates `<root>/manifest.json` (or a manifest file path).
/// Every referenced file must exist; images are decoded later on demand.
pub fn load_manifest(path: &Path) -> Result<Dataset> {
    let (root, file) = if path.is_dir() {
        (path.to_path_buf(), path.join(MANIFEST_FILE))
    } else {
        (
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
            path.to_path_buf(),
        )
    };
    let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
    let manifest: DatasetManifest = serde_json::from_str(&text)
        .map_err(|e| Error::Dataset(format!("{}: {e}", file.display())))?;
    manifest.validate()?;
    for s in &manifest.samples {
        for v in &s.views {
            for rel in [&v.image, &v.mask] {
                if !root.join(rel).is_file() {
                    return Err(s.reject(format!("missing file {rel}")));
                }
            }
        }
    }
    Ok(Dataset { root, manifest })
}

impl Dataset {
    pub fn load_sample(&self, entry: &SampleEntry) -> Result<LoadedSample> {
        let label = entry.damage_state()?;
        let mut views = Vec::with_capacity(ViewRole::ALL.len());
        for role in ViewRole::ALL {
            let v = entry
                .view(role)
                .ok_or_else(|| entry.reject(format!("missing view {role}")))?;
            let image = read_rgb(&self.root.join(&v.image))?;
            let mask = read_mask(&self.root.join(&v.mask))?;
            let [_, _, h, w] = image.nchw()?;
            if (h, w) != mask.dims() {
                return Err(entry.reject(format!(
                    "{role} image is {h}×{w} but its mask is {:?}",
                    mask.dims()
                )));
            }
            views.push(ViewData { role, image, mask });
        }
        Ok(LoadedSample {
            building_id: entry.building_id.clone(),
            label,
            views,
        })
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<LoadedSample>> {
        let entries = self.manifest.split_samples(split);
        if entries.is_empty() {
            return Err(Error::Dataset(format!("the {split} split is empty")));
        }
        entries.into_iter().map(|e| self.load_sample(e)).collect()
    }

    pub fn load_all(&self) -> Result<Vec<LoadedSample>> {
        self.manifest
            .samples
            .iter()
            .map(|e| self.load_sample(e))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, label: u8) -> SampleEntry {
        SampleEntry {
            building_id: id.into(),
            label,
            views: ViewRole::ALL
                .iter()
                .map(|r| ViewEntry {
                    role: *r,
                    image: format!("images/{id}/{r}.png"),
                    mask: format!("masks/{id}/{r}.png"),
                })
                .collect(),
            provenance: Provenance::External,
        }
    }

    fn manifest(n: usize) -> DatasetManifest {
        DatasetManifest::new(
            (0..n)
                .map(|i| entry(&format!("b{i:04}"), (i % 5) as u8))
                .collect(),
        )
    }

    #[test]
    fn paper_split_sizes() {
        assert_eq!(split_sizes(400, [0.8, 0.1, 0.1]).unwrap(), [320, 40, 40]);
        assert_eq!(split_sizes(10, [0.8, 0.1, 0.1]).unwrap(), [8, 1, 1]);
        assert_eq!(split_sizes(40, [0.8, 0.1, 0.1]).unwrap(), [32, 4, 4]);
        assert_eq!(
            split_sizes(11, [0.8, 0.1, 0.1])
                .unwrap()
                .iter()
                .sum::<usize>(),
            11
        );
        assert!(split_sizes(2, [0.8, 0.1, 0.1]).is_err());
        assert!(split_sizes(10, [0.8, 0.1, 0.2]).is_err());
    }

    #[test]
    fn split_assigns_every_building_once() {
        let m = split_dataset(&manifest(25), [0.8, 0.1, 0.1], 3).unwrap();
        assert_eq!(m.splits.len(), 25);
        assert_eq!(m.split_counts(), [20, 3, 2]);
        assert_eq!(m, split_dataset(&manifest(25), [0.8, 0.1, 0.1], 3).unwrap());
    }

    #[test]
    fn structural_rejections_name_building() {
        let mut m = manifest(3);
        m.samples[1].views.pop();
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("b0001") && e.contains("missing view"), "{e}");

        let mut m = manifest(3);
        m.samples[2].label = 5;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("b0002") && e.contains("label 5"), "{e}");

        let mut m = manifest(3);
        m.samples[0].views[1].role = ViewRole::Ground1;
        let e = m.validate().unwrap_err().to_string();
        assert!(e.contains("b0000") && e.contains("duplicate"), "{e}");
    }

    #[test]
    fn missing_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        manifest(2).write(dir.path()).unwrap();
        let e = load_manifest(dir.path()).unwrap_err().to_string();
        assert!(e.contains("b0000") && e.contains("missing file"), "{e}");
    }
}
