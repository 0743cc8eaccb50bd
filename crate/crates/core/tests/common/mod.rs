#![allow(dead_code)]

use std::path::Path;

use lesionseg::data::synth::render_patch;
use lesionseg::data::{ingest_buffers, LabeledPatch, Species, SyntheticSpec};
use lesionseg::network::{NetworkConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn small_net(seed: u64) -> NetworkConfig {
    NetworkConfig {
        base_channels: 8,
        depth: 3,
        decoder_channels: 8,
        head_channels: 8,
        seed,
        ..Default::default()
    }
}

/// In-memory synthetic patches, classes cycling 1..=6.
pub fn rendered_patches(spec: &SyntheticSpec, species: Species, count: usize, seed: u64) -> Vec<LabeledPatch> {
    let profile = lesionseg::data::SpeciesProfile {
        capture_size: spec.capture_size,
        working_size: spec.working_size,
        ..lesionseg::data::SpeciesProfile::default_for(species)
    };
    (0..count)
        .map(|i| {
            let class_id = i % spec.num_classes + 1;
            let (img, mask) = render_patch(spec, species, class_id, seed.wrapping_mul(7919).wrapping_add(i as u64));
            ingest_buffers(&img, &mask, class_id, spec.num_classes, species, &profile).unwrap()
        })
        .collect()
}

pub fn random_image(channels: usize, size: usize, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..channels * size * size).map(|_| rng.gen::<f64>()).collect();
    Tensor::from_vec(channels, size, size, data)
}

pub fn write_config(path: &Path, body: &str) {
    std::fs::write(path, body).unwrap();
}
