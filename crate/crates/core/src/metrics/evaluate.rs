use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::mask::BinaryMask;
use super::overlap::dice;
use super::surface::{hausdorff, mean_surface_distance};
use crate::data::patch::{class_name, LabeledPatch};
use crate::error::{Error, Result};
use crate::network::{forward, ModelParams, Tensor};

pub const AVERAGE_LABEL: &str = "Average";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricTriple {
    pub dice: f64,
    pub hd_um: f64,
    pub msd_um: f64,
}

/// One report row: a class (or the class average) for one scenario/method.
/// `metrics` is `None` when the class had no test patches.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub scenario: String,
    pub method: String,
    pub class: String,
    /// Position in the fixed class order; the average row sorts last.
    pub class_index: usize,
    pub n: usize,
    pub metrics: Option<MetricTriple>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatchMetrics {
    pub class_id: usize,
    pub source: Option<String>,
    pub metrics: MetricTriple,
}

pub fn patch_metrics(pred: &BinaryMask, gt: &BinaryMask) -> Result<MetricTriple> {
    Ok(MetricTriple {
        dice: dice(pred, gt)?,
        hd_um: hausdorff(pred, gt)?,
        msd_um: mean_surface_distance(pred, gt)?,
    })
}

pub fn patch_image(patch: &LabeledPatch) -> Tensor<f32> {
    Tensor::from_vec(LabeledPatch::CHANNELS, patch.size, patch.size, patch.image.clone())
}

/// Thresholded prediction of the patch's annotated class.
pub fn predict_mask(params: &ModelParams<f32>, patch: &LabeledPatch, threshold: f32) -> Result<BinaryMask> {
    let probs = forward(params, &patch_image(patch), patch.class_id)?;
    BinaryMask::threshold(patch.size, patch.size, &probs.data, threshold, patch.spacing_um)
}

pub fn gt_mask(patch: &LabeledPatch) -> Result<BinaryMask> {
    BinaryMask::new(patch.size, patch.size, patch.mask.clone(), patch.spacing_um)
}

/// Per-class arithmetic means over patches, plus the mean of class means.
pub fn aggregate(
    scenario: &str,
    method: &str,
    num_classes: usize,
    per_patch: &[PatchMetrics],
) -> Vec<MetricRecord> {
    let mut by_class: BTreeMap<usize, Vec<MetricTriple>> = BTreeMap::new();
    for p in per_patch {
        by_class.entry(p.class_id).or_default().push(p.metrics);
    }
    let mean = |v: &[MetricTriple]| {
        let n = v.len() as f64;
        MetricTriple {
            dice: v.iter().map(|m| m.dice).sum::<f64>() / n,
            hd_um: v.iter().map(|m| m.hd_um).sum::<f64>() / n,
            msd_um: v.iter().map(|m| m.msd_um).sum::<f64>() / n,
        }
    };
    let mut records = Vec::with_capacity(num_classes + 1);
    let mut class_means = Vec::new();
    for class_id in 1..=num_classes {
        let rows = by_class.get(&class_id).map(Vec::as_slice).unwrap_or(&[]);
        let metrics = (!rows.is_empty()).then(|| mean(rows));
        if let Some(m) = metrics {
            class_means.push(m);
        }
        records.push(MetricRecord {
            scenario: scenario.to_string(),
            method: method.to_string(),
            class: class_name(class_id),
            class_index: class_id,
            n: rows.len(),
            metrics,
        });
    }
    records.push(MetricRecord {
        scenario: scenario.to_string(),
        method: method.to_string(),
        class: AVERAGE_LABEL.to_string(),
        class_index: num_classes + 1,
        n: per_patch.len(),
        metrics: (!class_means.is_empty()).then(|| mean(&class_means)),
    });
    records
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub per_patch: Vec<PatchMetrics>,
    pub records: Vec<MetricRecord>,
}

impl Evaluation {
    pub fn average(&self) -> Option<MetricTriple> {
        self.records.last().and_then(|r| r.metrics)
    }
}

/// Runs every test patch through the network with its annotated class,
/// binarizes at `threshold` and scores it against its mask.
pub fn evaluate_model(
    params: &ModelParams<f32>,
    test_set: &[LabeledPatch],
    threshold: f32,
    scenario: &str,
    method: &str,
) -> Result<Evaluation> {
    if test_set.is_empty() {
        return Err(Error::Dataset("evaluation set is empty".into()));
    }
    let per_patch = test_set
        .iter()
        .map(|patch| {
            let pred = predict_mask(params, patch, threshold)?;
            Ok(PatchMetrics {
                class_id: patch.class_id,
                source: patch.source.as_ref().map(|p| p.display().to_string()),
                metrics: patch_metrics(&pred, &gt_mask(patch)?)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let records = aggregate(scenario, method, params.config.num_classes, &per_patch);
    Ok(Evaluation { per_patch, records })
}
