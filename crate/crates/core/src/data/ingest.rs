use std::path::Path;

use image::imageops::{self, FilterType};
use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use super::patch::{LabeledPatch, Species, SpeciesProfile};
use crate::error::{Error, Result};

/// Loads an image/mask pair from disk and brings it to working resolution.
pub fn ingest_patch(
    image_file: &Path,
    mask_file: &Path,
    class_id: usize,
    num_classes: usize,
    species: Species,
    profile: &SpeciesProfile,
) -> Result<LabeledPatch> {
    let image = image::open(image_file)
        .map_err(|e| Error::image(image_file, e))?
        .to_rgb8();
    let mask = image::open(mask_file)
        .map_err(|e| Error::image(mask_file, e))?
        .to_luma8();
    let mut patch = ingest_buffers(&image, &mask, class_id, num_classes, species, profile)
        .map_err(|e| match e {
            Error::InvalidPatch(msg) => {
                Error::InvalidPatch(format!("{}: {msg}", mask_file.display()))
            }
            other => other,
        })?;
    patch.source = Some(image_file.to_path_buf());
    Ok(patch)
}

/// In-memory half of [`ingest_patch`]: resizes image (bilinear) and mask
/// (nearest) to the profile's working size and validates the result.
pub fn ingest_buffers(
    image: &RgbImage,
    mask: &GrayImage,
    class_id: usize,
    num_classes: usize,
    species: Species,
    profile: &SpeciesProfile,
) -> Result<LabeledPatch> {
    profile.validate()?;
    if class_id == 0 || class_id > num_classes {
        return Err(Error::ClassOutOfRange {
            index: class_id,
            count: num_classes,
        });
    }
    if image.dimensions() != mask.dimensions() {
        return Err(Error::InvalidPatch(format!(
            "image is {:?} but mask is {:?}",
            image.dimensions(),
            mask.dimensions()
        )));
    }
    let (w, h) = image.dimensions();
    if w != h {
        return Err(Error::InvalidPatch(format!("patch must be square, got {w}x{h}")));
    }
    let size = profile.working_size;
    let target = size as u32;

    let mask = if w == target {
        mask.clone()
    } else {
        resize_mask_nearest(mask, target)
    };
    let mask = binarize_mask(&mask)?;
    if !mask.contains(&1) {
        return Err(Error::InvalidPatch("mask is empty".into()));
    }

    let data = image_to_chw(image, size);
    LabeledPatch::new(size, data, mask, class_id, species, profile.spacing_um())
}

/// Resizes a square image to `size` (triangle filter) and returns CHW
/// intensities in [0, 1].
pub fn image_to_chw(image: &RgbImage, size: usize) -> Vec<f32> {
    let target = size as u32;
    let resized;
    let image = if image.dimensions() == (target, target) {
        image
    } else {
        resized = imageops::resize(image, target, target, FilterType::Triangle);
        &resized
    };
    let px = size * size;
    let mut data = vec![0f32; 3 * px];
    for (i, p) in image.pixels().enumerate() {
        for c in 0..3 {
            data[c * px + i] = f32::from(p[c]) / 255.0;
        }
    }
    data
}

pub fn resize_mask_nearest(mask: &GrayImage, target: u32) -> GrayImage {
    imageops::resize(mask, target, target, FilterType::Nearest)
}

/// Maps a two-valued 8-bit mask (0 and 255, or 0 and 1) to `{0, 1}`.
pub fn binarize_mask(mask: &GrayImage) -> Result<Vec<u8>> {
    mask.pixels()
        .enumerate()
        .map(|(i, p)| match p[0] {
            0 => Ok(0),
            1 | 255 => Ok(1),
            v => Err(Error::InvalidPatch(format!(
                "non-binary mask value {v} at pixel {i}"
            ))),
        })
        .collect()
}

pub fn patch_to_buffers(patch: &LabeledPatch) -> (RgbImage, GrayImage) {
    let n = patch.size as u32;
    let px = patch.size * patch.size;
    let img = ImageBuffer::from_fn(n, n, |x, y| {
        let i = y as usize * patch.size + x as usize;
        Rgb([0, 1, 2].map(|c| to_u8(patch.image[c * px + i])))
    });
    let mask = ImageBuffer::from_fn(n, n, |x, y| {
        let i = y as usize * patch.size + x as usize;
        Luma([if patch.mask[i] == 1 { 255 } else { 0 }])
    });
    (img, mask)
}

/// Writes `<dir>/<id>_img.png` and `<dir>/<id>_mask.png`.
pub fn write_patch(patch: &LabeledPatch, dir: &Path, id: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let (img, mask) = patch_to_buffers(patch);
    let img_path = dir.join(format!("{id}_img.png"));
    let mask_path = dir.join(format!("{id}_mask.png"));
    img.save(&img_path).map_err(|e| Error::image(&img_path, e))?;
    mask.save(&mask_path).map_err(|e| Error::image(&mask_path, e))?;
    Ok(())
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}
