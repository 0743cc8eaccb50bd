//! Procedural lesion patches standing in for real scans.
//!
//! Every class has its own shape family drawn inside a pale glomerulus disc.
//! Mouse and human patches use different stain palettes, blended by
//! `species_shift`, so cross-species transfer has a real appearance gap.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::manifest::{ManifestEntry, Split, SplitManifest, SplitRatios};
use super::patch::{class_name, Species, SpeciesProfile};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn uniform(n: usize) -> Self {
        Self {
            train: n,
            val: n,
            test: n,
        }
    }

    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn split_of(&self, index: usize) -> Split {
        if index < self.train {
            Split::Train
        } else if index < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeFamily {
    Disc,
    Ring,
    Ellipse,
    SmallDisc,
    BlobCluster,
    HalfDisc,
}

impl ShapeFamily {
    /// Shape used for a 1-based class id (cycles past six classes).
    pub fn for_class(class_id: usize) -> Self {
        match (class_id - 1) % 6 {
            0 => ShapeFamily::Disc,
            1 => ShapeFamily::Ring,
            2 => ShapeFamily::Ellipse,
            3 => ShapeFamily::SmallDisc,
            4 => ShapeFamily::BlobCluster,
            _ => ShapeFamily::HalfDisc,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub working_size: usize,
    pub capture_size: usize,
    pub species: Vec<(Species, SplitCounts)>,
    /// Std-dev of additive Gaussian pixel noise (intensity units).
    pub noise: f64,
    /// Lesion radius as a fraction of the patch side.
    pub lesion_radius: f64,
    /// 0 = identical palettes for both species, 1 = fully shifted human stain.
    pub species_shift: f64,
    /// Probability of painting an unannotated lesion of another class.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 6,
            working_size: 64,
            capture_size: 128,
            species: vec![(Species::Mouse, SplitCounts::uniform(5))],
            noise: 0.04,
            lesion_radius: 0.2,
            species_shift: 1.0,
            distractor_prob: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("synthetic num_classes must be ≥ 1".into()));
        }
        if self.working_size < 8 || self.capture_size < 8 {
            return Err(Error::Config("synthetic sizes must be ≥ 8 px".into()));
        }
        if self.species.is_empty() || self.species.iter().all(|(_, c)| c.total() == 0) {
            return Err(Error::Config("synthetic spec generates no patches".into()));
        }
        let mut seen: Vec<Species> = self.species.iter().map(|(s, _)| *s).collect();
        seen.sort();
        seen.dedup();
        if seen.len() != self.species.len() {
            return Err(Error::Config("species listed twice in synthetic spec".into()));
        }
        if !(self.lesion_radius > 0.0 && self.lesion_radius < 0.3) {
            return Err(Error::Config("lesion_radius must be in (0, 0.3)".into()));
        }
        if !(self.noise >= 0.0) || !(0.0..=1.0).contains(&self.species_shift) {
            return Err(Error::Config("noise must be ≥ 0 and species_shift in [0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.distractor_prob) {
            return Err(Error::Config("distractor_prob must be in [0, 1]".into()));
        }
        Ok(())
    }

    /// Profiles matching the generated geometry, with the default spacings.
    pub fn profiles(&self) -> BTreeMap<Species, SpeciesProfile> {
        self.species
            .iter()
            .map(|(s, _)| {
                let base = SpeciesProfile::default_for(*s);
                (
                    *s,
                    SpeciesProfile {
                        capture_size: self.capture_size,
                        working_size: self.working_size,
                        ..base
                    },
                )
            })
            .collect()
    }

    /// Lesion radius in working-resolution pixels.
    pub fn radius_px(&self) -> f64 {
        self.lesion_radius * self.working_size as f64
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticDataset {
    pub root: PathBuf,
    pub manifest_path: PathBuf,
    pub manifest: SplitManifest,
    pub profiles: BTreeMap<Species, SpeciesProfile>,
}

/// Writes the dataset in the canonical layout plus `manifest.tsv`.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec, root: &Path) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut entries = Vec::new();
    for (s_idx, (species, counts)) in spec.species.iter().enumerate() {
        for class_id in 1..=spec.num_classes {
            let dir = root.join(species.as_str()).join(class_name(class_id));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for index in 0..counts.total() {
                let seed = patch_seed(spec.seed, s_idx, class_id, index);
                let (img, mask) = render_patch(spec, *species, class_id, seed);
                let id = format!("{index:05}");
                let img_path = dir.join(format!("{id}_img.png"));
                let mask_path = dir.join(format!("{id}_mask.png"));
                img.save(&img_path).map_err(|e| Error::image(&img_path, e))?;
                mask.save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
                entries.push(ManifestEntry {
                    path: format!("{}/{}/{id}_img.png", species.as_str(), class_name(class_id)),
                    class_id,
                    species: *species,
                    split: counts.split_of(index),
                });
            }
        }
    }
    entries.sort_by(|a, b| a.path.cmp(&b.path));

    let first = spec.species[0].1;
    let total = first.total().max(1) as f64;
    let manifest = SplitManifest {
        entries,
        seed: spec.seed,
        ratios: SplitRatios {
            train: first.train as f64 / total,
            val: first.val as f64 / total,
            test: first.test as f64 / total,
        },
        num_classes: spec.num_classes,
    };
    let manifest_path = root.join("manifest.tsv");
    manifest.save(&manifest_path)?;
    Ok(SyntheticDataset {
        root: root.to_path_buf(),
        manifest_path,
        manifest,
        profiles: spec.profiles(),
    })
}

fn patch_seed(seed: u64, species_idx: usize, class_id: usize, index: usize) -> u64 {
    // splitmix-style mixing so neighbouring patches get unrelated streams
    let mut z = seed
        ^ (species_idx as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
        ^ (class_id as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9)
        ^ (index as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

struct Palette {
    background: [f64; 3],
    glomerulus: [f64; 3],
    lesion: [f64; 3],
}

fn palette(species: Species, shift: f64) -> Palette {
    let mouse = Palette {
        background: [0.94, 0.86, 0.91],
        glomerulus: [0.82, 0.64, 0.78],
        lesion: [0.52, 0.18, 0.46],
    };
    match species {
        Species::Mouse => mouse,
        Species::Human => {
            let human = Palette {
                background: [0.86, 0.84, 0.93],
                glomerulus: [0.62, 0.66, 0.86],
                lesion: [0.42, 0.38, 0.74],
            };
            let mix = |a: [f64; 3], b: [f64; 3]| {
                [0, 1, 2].map(|c| a[c] + (b[c] - a[c]) * shift)
            };
            Palette {
                background: mix(mouse.background, human.background),
                glomerulus: mix(mouse.glomerulus, human.glomerulus),
                lesion: mix(mouse.lesion, human.lesion),
            }
        }
    }
}

/// A lesion shape in normalized patch coordinates (unit square).
#[derive(Clone, Debug)]
struct Lesion {
    family: ShapeFamily,
    cx: f64,
    cy: f64,
    radius: f64,
    angle: f64,
    blobs: Vec<(f64, f64, f64)>,
}

impl Lesion {
    fn sample(family: ShapeFamily, base_radius: f64, cx: f64, cy: f64, rng: &mut ChaCha8Rng) -> Self {
        let jitter = |rng: &mut ChaCha8Rng| 1.0 + rng.gen_range(-0.15..0.15);
        let radius = match family {
            ShapeFamily::Disc => base_radius,
            ShapeFamily::SmallDisc => base_radius * 0.6 * jitter(rng),
            _ => base_radius * jitter(rng),
        };
        let angle = rng.gen_range(0.0..PI);
        let blobs = if family == ShapeFamily::BlobCluster {
            let n = rng.gen_range(3..=4);
            let phase = rng.gen_range(0.0..2.0 * PI);
            (0..n)
                .map(|k| {
                    let a = phase + 2.0 * PI * k as f64 / n as f64;
                    let d = radius * 0.6;
                    (cx + d * a.cos(), cy + d * a.sin(), radius * 0.42)
                })
                .collect()
        } else {
            Vec::new()
        };
        Self {
            family,
            cx,
            cy,
            radius,
            angle,
            blobs,
        }
    }

    fn contains(&self, x: f64, y: f64, ring_width: f64) -> bool {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let r2 = dx * dx + dy * dy;
        let r = self.radius;
        match self.family {
            ShapeFamily::Disc | ShapeFamily::SmallDisc => r2 <= r * r,
            ShapeFamily::Ring => {
                let inner = (r - ring_width).max(0.0);
                r2 <= r * r && r2 >= inner * inner
            }
            ShapeFamily::Ellipse => {
                let (s, c) = self.angle.sin_cos();
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                let a = r * 1.3;
                let b = r * 0.55;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
            ShapeFamily::BlobCluster => self
                .blobs
                .iter()
                .any(|(bx, by, br)| (x - bx).powi(2) + (y - by).powi(2) <= br * br),
            ShapeFamily::HalfDisc => {
                let (s, c) = self.angle.sin_cos();
                r2 <= r * r && dx * c + dy * s >= -0.2 * r
            }
        }
    }
}

/// Renders one image/mask pair at capture resolution.
pub fn render_patch(
    spec: &SyntheticSpec,
    species: Species,
    class_id: usize,
    seed: u64,
) -> (RgbImage, GrayImage) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = spec.capture_size;
    let pal = palette(species, spec.species_shift);

    let glom_r = 0.42;
    let base_r = spec.lesion_radius;
    let max_off = (glom_r - base_r * 1.3).max(0.0) * 0.5;
    let cx = 0.5 + rng.gen_range(-max_off..=max_off);
    let cy = 0.5 + rng.gen_range(-max_off..=max_off);
    let lesion = Lesion::sample(ShapeFamily::for_class(class_id), base_r, cx, cy, &mut rng);

    let distractor = if spec.num_classes > 1 && rng.gen_bool(spec.distractor_prob) {
        let other = 1 + (class_id + rng.gen_range(0..spec.num_classes - 1)) % spec.num_classes;
        let a = rng.gen_range(0.0..2.0 * PI);
        let d = glom_r * 0.75;
        Some(Lesion::sample(
            ShapeFamily::for_class(other),
            base_r * 0.6,
            0.5 + d * a.cos(),
            0.5 + d * a.sin(),
            &mut rng,
        ))
    } else {
        None
    };

    // ring width: ~0.06 of the patch side, but never under two working pixels
    let ring_width = (0.06f64).max(2.0 / spec.working_size as f64);
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("finite std");
    let tint = 0.03 * ((class_id - 1) % 6) as f64;

    let mut img = ImageBuffer::new(n as u32, n as u32);
    let mut mask = ImageBuffer::new(n as u32, n as u32);
    for py in 0..n {
        for px in 0..n {
            let x = (px as f64 + 0.5) / n as f64;
            let y = (py as f64 + 0.5) / n as f64;
            let in_glom = (x - 0.5).powi(2) + (y - 0.5).powi(2) <= glom_r * glom_r;
            let in_lesion = lesion.contains(x, y, ring_width);
            let in_distractor = distractor
                .as_ref()
                .is_some_and(|d| d.contains(x, y, ring_width));
            let mut color = if in_lesion || in_distractor {
                let mut c = pal.lesion;
                c[1] += tint;
                c
            } else if in_glom {
                pal.glomerulus
            } else {
                pal.background
            };
            for c in color.iter_mut() {
                *c += noise.sample(&mut rng);
            }
            img.put_pixel(
                px as u32,
                py as u32,
                Rgb(color.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8)),
            );
            mask.put_pixel(px as u32, py as u32, Luma([if in_lesion { 255 } else { 0 }]));
        }
    }
    (img, mask)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ingest::ingest_buffers;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            working_size: 32,
            capture_size: 64,
            ..Default::default()
        }
    }

    #[test]
    fn ninety_patches_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic_dataset(&tiny_spec(), dir.path()).unwrap();
        assert_eq!(ds.manifest.entries.len(), 90);
        let pngs = walk_pngs(dir.path());
        assert_eq!(pngs, 180);
        for split in Split::ALL {
            assert_eq!(ds.manifest.select(split, None).len(), 30);
        }
    }

    fn walk_pngs(p: &Path) -> usize {
        let mut n = 0;
        for e in std::fs::read_dir(p).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                n += walk_pngs(&path);
            } else if path.extension().map_or(false, |x| x == "png") {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn same_seed_same_pixels() {
        let spec = tiny_spec();
        for class_id in 1..=6 {
            let a = render_patch(&spec, Species::Human, class_id, 42);
            let b = render_patch(&spec, Species::Human, class_id, 42);
            assert_eq!(a, b);
        }
        let c = render_patch(&spec, Species::Human, 1, 43);
        assert_ne!(render_patch(&spec, Species::Human, 1, 42).0, c.0);
    }

    #[test]
    fn every_patch_ingests() {
        let spec = SyntheticSpec {
            distractor_prob: 0.5,
            ..tiny_spec()
        };
        let profile = &spec.profiles()[&Species::Mouse];
        for class_id in 1..=6 {
            for seed in 0..20 {
                let (img, mask) = render_patch(&spec, Species::Mouse, class_id, seed);
                ingest_buffers(&img, &mask, class_id, 6, Species::Mouse, profile).unwrap();
            }
        }
    }

    #[test]
    fn disc_area_matches_radius() {
        let spec = SyntheticSpec {
            working_size: 64,
            capture_size: 128,
            ..Default::default()
        };
        let profile = &spec.profiles()[&Species::Mouse];
        let expected = PI * spec.radius_px().powi(2);
        for seed in 0..10 {
            let (img, mask) = render_patch(&spec, Species::Mouse, 1, seed);
            let patch = ingest_buffers(&img, &mask, 1, 6, Species::Mouse, profile).unwrap();
            let area = patch.foreground() as f64;
            assert!(
                (area - expected).abs() <= 0.1 * expected,
                "area {area} vs {expected}"
            );
        }
    }

    #[test]
    fn inconsistent_specs_rejected() {
        let bad = SyntheticSpec {
            num_classes: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            species: vec![
                (Species::Mouse, SplitCounts::uniform(1)),
                (Species::Mouse, SplitCounts::uniform(1)),
            ],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = SyntheticSpec {
            working_size: 4,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
    }
}
