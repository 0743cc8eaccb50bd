use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Fixed lesion class order; index `i` in this list is class id `i + 1`.
pub const LESION_CLASSES: [&str; 6] = ["GS", "HN", "ML", "MA", "NS", "SS"];

/// Display name for a 1-based class id. Ids past the six lesion types get a
/// generic `C<id>` name.
pub fn class_name(class_id: usize) -> String {
    match class_id {
        1..=6 => LESION_CLASSES[class_id - 1].to_string(),
        _ => format!("C{class_id}"),
    }
}

/// Inverse of [`class_name`].
pub fn class_id_from_name(name: &str) -> Option<usize> {
    if let Some(pos) = LESION_CLASSES.iter().position(|c| *c == name) {
        return Some(pos + 1);
    }
    name.strip_prefix('C')
        .and_then(|rest| rest.parse::<usize>().ok())
        .filter(|&id| id > LESION_CLASSES.len())
}

pub fn class_names(num_classes: usize) -> Vec<String> {
    (1..=num_classes).map(class_name).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Species {
    Mouse,
    Human,
}

impl Species {
    pub const ALL: [Species; 2] = [Species::Mouse, Species::Human];

    pub fn as_str(self) -> &'static str {
        match self {
            Species::Mouse => "mouse",
            Species::Human => "human",
        }
    }
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Species {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "mouse" => Ok(Species::Mouse),
            "human" => Ok(Species::Human),
            other => Err(Error::Config(format!("unknown species '{other}'"))),
        }
    }
}

/// Scanner magnification and resize geometry for one species.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeciesProfile {
    pub magnification: f64,
    /// Microns per pixel at capture resolution.
    pub capture_spacing_um: f64,
    pub capture_size: usize,
    pub working_size: usize,
}

impl SpeciesProfile {
    /// 40× scan, 0.25 µm/px, 1024 → 512.
    pub fn human_default() -> Self {
        Self {
            magnification: 40.0,
            capture_spacing_um: 0.25,
            capture_size: 1024,
            working_size: 512,
        }
    }

    /// 80× scan, 0.125 µm/px, 1024 → 512.
    pub fn mouse_default() -> Self {
        Self {
            magnification: 80.0,
            capture_spacing_um: 0.125,
            capture_size: 1024,
            working_size: 512,
        }
    }

    pub fn default_for(species: Species) -> Self {
        match species {
            Species::Mouse => Self::mouse_default(),
            Species::Human => Self::human_default(),
        }
    }

    /// Microns per pixel after resizing to the working size.
    pub fn spacing_um(&self) -> f64 {
        self.capture_spacing_um * self.capture_size as f64 / self.working_size as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.magnification > 0.0) {
            return Err(Error::Config("magnification must be positive".into()));
        }
        if !(self.capture_spacing_um > 0.0) || !self.capture_spacing_um.is_finite() {
            return Err(Error::Config("capture_spacing_um must be positive".into()));
        }
        if self.capture_size == 0 || self.working_size == 0 {
            return Err(Error::Config("capture_size and working_size must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One image patch annotated for exactly one lesion class.
///
/// `image` is channel-major (3 × size × size) with intensities in `[0, 1]`;
/// `mask` is row-major with values in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledPatch {
    pub size: usize,
    pub image: Vec<f32>,
    pub mask: Vec<u8>,
    pub class_id: usize,
    pub species: Species,
    pub spacing_um: f64,
    pub source: Option<PathBuf>,
}

impl LabeledPatch {
    pub const CHANNELS: usize = 3;

    pub fn new(
        size: usize,
        image: Vec<f32>,
        mask: Vec<u8>,
        class_id: usize,
        species: Species,
        spacing_um: f64,
    ) -> Result<Self> {
        let patch = Self {
            size,
            image,
            mask,
            class_id,
            species,
            spacing_um,
            source: None,
        };
        patch.validate()?;
        Ok(patch)
    }

    pub fn validate(&self) -> Result<()> {
        let px = self.size * self.size;
        if self.size == 0 {
            return Err(Error::InvalidPatch("zero-sized patch".into()));
        }
        if self.image.len() != Self::CHANNELS * px {
            return Err(Error::InvalidPatch(format!(
                "image has {} values, expected {}",
                self.image.len(),
                Self::CHANNELS * px
            )));
        }
        if self.mask.len() != px {
            return Err(Error::InvalidPatch(format!(
                "mask has {} values, expected {px}",
                self.mask.len()
            )));
        }
        if self.mask.iter().any(|&v| v > 1) {
            return Err(Error::InvalidPatch("mask is not binary".into()));
        }
        if !self.mask.contains(&1) {
            return Err(Error::InvalidPatch("mask has no foreground".into()));
        }
        if self.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidPatch("image intensity outside [0, 1]".into()));
        }
        if self.class_id == 0 {
            return Err(Error::InvalidPatch("class id must be ≥ 1".into()));
        }
        if !(self.spacing_um > 0.0) || !self.spacing_um.is_finite() {
            return Err(Error::InvalidPatch("spacing_um must be positive".into()));
        }
        Ok(())
    }

    pub fn foreground(&self) -> usize {
        self.mask.iter().filter(|&&v| v == 1).count()
    }
}
