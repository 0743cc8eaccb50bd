use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::ingest::ingest_patch;
use super::patch::{class_id_from_name, class_name, LabeledPatch, Species, SpeciesProfile};
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path\tclass_id\tspecies\tsplit";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
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
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Dataset(format!("unknown split '{other}'"))),
        }
    }
}

/// Train/val/test fractions; must be non-negative and sum to one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.1,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let r = Self { train, val, test };
        if [train, val, test].iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("split ratios must be non-negative".into()));
        }
        if ((train + val + test) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "split ratios must sum to 1, got {}",
                train + val + test
            )));
        }
        Ok(r)
    }

    /// Per-split counts for `n` items. Cumulative boundaries are rounded, so
    /// each count is within one of `n * ratio`.
    pub fn counts(&self, n: usize) -> [usize; 3] {
        let b1 = ((n as f64) * self.train).round() as usize;
        let b2 = (((n as f64) * (self.train + self.val)).round() as usize).max(b1);
        let b1 = b1.min(n);
        let b2 = b2.min(n);
        [b1, b2 - b1, n - b2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Image path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class_id: usize,
    pub species: Species,
    pub split: Split,
}

impl ManifestEntry {
    pub fn mask_path(&self) -> String {
        mask_path_for(&self.path)
    }
}

pub fn mask_path_for(image_path: &str) -> String {
    match image_path.strip_suffix("_img.png") {
        Some(stem) => format!("{stem}_mask.png"),
        None => format!("{image_path}.mask.png"),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplitManifest {
    pub entries: Vec<ManifestEntry>,
    pub seed: u64,
    pub ratios: SplitRatios,
    pub num_classes: usize,
}

impl SplitManifest {
    pub fn select(&self, split: Split, species: Option<Species>) -> Vec<&ManifestEntry> {
        self.entries
            .iter()
            .filter(|e| e.split == split && species.is_none_or(|s| e.species == s))
            .collect()
    }

    pub fn species(&self) -> Vec<Species> {
        let mut v: Vec<Species> = self.entries.iter().map(|e| e.species).collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("# seed={}\n", self.seed));
        out.push_str(&format!(
            "# ratios={},{},{}\n",
            self.ratios.train, self.ratios.val, self.ratios.test
        ));
        let classes: Vec<String> = (1..=self.num_classes).map(class_name).collect();
        out.push_str(&format!("# classes={}\n", classes.join(",")));
        out.push_str(MANIFEST_HEADER);
        out.push('\n');
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\n",
                e.path, e.class_id, e.species, e.split
            ));
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut seed = 0;
        let mut ratios = SplitRatios::default();
        let mut num_classes = None;
        let mut entries = Vec::new();
        let mut saw_header = false;
        for (lineno, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            if let Some(meta) = line.strip_prefix('#') {
                let meta = meta.trim();
                if let Some(v) = meta.strip_prefix("seed=") {
                    seed = v
                        .parse()
                        .map_err(|_| Error::Dataset(format!("bad seed '{v}'")))?;
                } else if let Some(v) = meta.strip_prefix("ratios=") {
                    let parts: Vec<f64> = v
                        .split(',')
                        .map(|p| p.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|_| Error::Dataset(format!("bad ratios '{v}'")))?;
                    if parts.len() != 3 {
                        return Err(Error::Dataset(format!("bad ratios '{v}'")));
                    }
                    ratios = SplitRatios::new(parts[0], parts[1], parts[2])?;
                } else if let Some(v) = meta.strip_prefix("classes=") {
                    num_classes = Some(v.split(',').count());
                }
                continue;
            }
            if !saw_header {
                if line.trim_end() != MANIFEST_HEADER {
                    return Err(Error::Dataset(format!(
                        "manifest header must be '{MANIFEST_HEADER}'"
                    )));
                }
                saw_header = true;
                continue;
            }
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 4 {
                return Err(Error::Dataset(format!(
                    "manifest line {}: expected 4 columns, got {}",
                    lineno + 1,
                    cols.len()
                )));
            }
            let class_id = cols[1].parse::<usize>().map_err(|_| {
                Error::Dataset(format!("manifest line {}: bad class id", lineno + 1))
            })?;
            entries.push(ManifestEntry {
                path: cols[0].to_string(),
                class_id,
                species: cols[2].parse()?,
                split: cols[3].parse()?,
            });
        }
        if !saw_header {
            return Err(Error::Dataset("manifest has no header row".into()));
        }
        let max_class = entries.iter().map(|e| e.class_id).max().unwrap_or(0);
        Ok(Self {
            entries,
            seed,
            ratios,
            num_classes: num_classes.unwrap_or(max_class).max(max_class),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

/// Scans `<root>/<species>/<class>/<id>_img.png` (+ `_mask.png`) and assigns
/// a split to every pair, stratified by species and class.
pub fn build_manifest(root: &Path, ratios: SplitRatios, seed: u64) -> Result<SplitManifest> {
    let mut groups: BTreeMap<(Species, usize), Vec<String>> = BTreeMap::new();
    for species in Species::ALL {
        let species_dir = root.join(species.as_str());
        if !species_dir.is_dir() {
            continue;
        }
        for class_dir in sorted_dir(&species_dir)? {
            if !class_dir.is_dir() {
                continue;
            }
            let name = file_name(&class_dir);
            let class_id = class_id_from_name(&name).ok_or_else(|| {
                Error::Dataset(format!("unknown class directory '{}'", class_dir.display()))
            })?;
            let mut pairs = Vec::new();
            for file in sorted_dir(&class_dir)? {
                let fname = file_name(&file);
                if let Some(stem) = fname.strip_suffix("_img.png") {
                    if class_dir.join(format!("{stem}_mask.png")).is_file() {
                        pairs.push(format!("{}/{}/{}", species.as_str(), name, fname));
                    }
                }
            }
            if pairs.is_empty() {
                return Err(Error::Dataset(format!(
                    "class {name} ({species}) has no image/mask pairs"
                )));
            }
            groups.insert((species, class_id), pairs);
        }
    }
    if groups.is_empty() {
        return Err(Error::Dataset(format!(
            "no species/class directories under {}",
            root.display()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = Vec::new();
    let mut num_classes = 0;
    for ((species, class_id), mut paths) in groups {
        num_classes = num_classes.max(class_id);
        paths.shuffle(&mut rng);
        let [n_train, n_val, _] = ratios.counts(paths.len());
        for (i, path) in paths.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            entries.push(ManifestEntry {
                path,
                class_id,
                species,
                split,
            });
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(SplitManifest {
        entries,
        seed,
        ratios,
        num_classes,
    })
}

/// Loads manifest entries as working-resolution patches.
pub fn load_entries<'a>(
    root: &Path,
    entries: impl IntoIterator<Item = &'a ManifestEntry>,
    num_classes: usize,
    profiles: &BTreeMap<Species, SpeciesProfile>,
) -> Result<Vec<LabeledPatch>> {
    entries
        .into_iter()
        .map(|e| {
            let profile = profiles.get(&e.species).ok_or_else(|| {
                Error::Config(format!("no species profile for {}", e.species))
            })?;
            ingest_patch(
                &root.join(&e.path),
                &root.join(e.mask_path()),
                e.class_id,
                num_classes,
                e.species,
                profile,
            )
        })
        .collect()
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|r| r.map(|d| d.path()).map_err(|e| Error::io(dir, e)))
        .collect::<Result<_>>()?;
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
