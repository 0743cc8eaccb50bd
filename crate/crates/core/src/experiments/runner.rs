use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use image::{GrayImage, Luma};

use super::config::RunConfig;
use super::report::{write_report, Report, RunMetadata, ScenarioMeta};
use super::scenario::Scenario;
use crate::data::ingest::image_to_chw;
use crate::data::{load_entries, LabeledPatch, Split, SplitManifest, Species, SpeciesProfile};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_model, BinaryMask, Evaluation, MetricRecord};
use crate::network::{forward, load_checkpoint, ModelParams, Tensor};
use crate::training::trainer::{checkpoint_dir, HISTORY_FILE};
use crate::training::{select_checkpoint, train, TrainingHistory};

pub(crate) fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

/// Every file a scenario read, tagged with the role it was read for.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LoadAudit {
    pub entries: Vec<(Split, Species, PathBuf)>,
}

impl LoadAudit {
    pub fn paths(&self, split: Split, species: Species) -> impl Iterator<Item = &Path> {
        self.entries
            .iter()
            .filter(move |(sp, s, _)| *sp == split && *s == species)
            .map(|(_, _, p)| p.as_path())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("split\tspecies\tpath\n");
        for (split, species, path) in &self.entries {
            let _ = writeln!(out, "{}\t{species}\t{}", split.as_str(), path.display());
        }
        out
    }
}

pub struct ScenarioData {
    pub train: Vec<LabeledPatch>,
    pub val: BTreeMap<Species, Vec<LabeledPatch>>,
    pub test: Vec<LabeledPatch>,
    pub audit: LoadAudit,
}

struct Manifests {
    loaded: BTreeMap<PathBuf, SplitManifest>,
}

impl Manifests {
    fn get(&mut self, cfg: &RunConfig, species: Species) -> Result<(&SplitManifest, PathBuf)> {
        let path = cfg
            .manifest_for(species)
            .ok_or_else(|| Error::Scenario(format!("no manifest configured for {species}")))?
            .to_path_buf();
        if !self.loaded.contains_key(&path) {
            if !path.is_file() {
                return Err(Error::Scenario(format!("manifest {} does not exist", path.display())));
            }
            self.loaded.insert(path.clone(), SplitManifest::load(&path)?);
        }
        let root = match &cfg.data_root {
            Some(r) => r.clone(),
            None => path.parent().unwrap_or(Path::new(".")).to_path_buf(),
        };
        Ok((&self.loaded[&path], root))
    }
}

/// Checks that every split the scenario needs is non-empty and that the
/// manifests fit the network, without loading any image.
pub fn check_scenario(cfg: &RunConfig, scenario: Scenario) -> Result<()> {
    let mut manifests = Manifests {
        loaded: BTreeMap::new(),
    };
    check_with(cfg, scenario, &mut manifests)
}

fn check_with(cfg: &RunConfig, scenario: Scenario, manifests: &mut Manifests) -> Result<()> {
    let needs = |species: Species| {
        let mut v = Vec::new();
        if scenario.train_species().contains(&species) {
            v.push(Split::Train);
        }
        if scenario.tracked_species().contains(&species) {
            v.push(Split::Val);
        }
        if scenario.test_species() == species {
            v.push(Split::Test);
        }
        v
    };
    for species in scenario.required_species() {
        let (manifest, _) = manifests.get(cfg, species)?;
        if manifest.num_classes > cfg.network.num_classes {
            return Err(Error::Scenario(format!(
                "manifest has {} classes but the network is configured for {}",
                manifest.num_classes, cfg.network.num_classes
            )));
        }
        for split in needs(species) {
            if manifest.select(split, Some(species)).is_empty() {
                return Err(Error::Scenario(format!(
                    "{scenario} needs {species} {} patches, manifest has none",
                    split.as_str()
                )));
            }
        }
        let profile = &cfg.profiles[&species];
        if !profile.working_size.is_multiple_of(cfg.network.divisor()) {
            return Err(Error::Scenario(format!(
                "{species} working size {} is not a multiple of {}",
                profile.working_size,
                cfg.network.divisor()
            )));
        }
    }
    Ok(())
}

fn load_split(
    cfg: &RunConfig,
    manifests: &mut Manifests,
    species: Species,
    split: Split,
    audit: &mut LoadAudit,
) -> Result<Vec<LabeledPatch>> {
    let (manifest, root) = manifests.get(cfg, species)?;
    let entries = manifest.select(split, Some(species));
    for e in &entries {
        audit.entries.push((split, species, root.join(&e.path)));
        audit.entries.push((split, species, root.join(e.mask_path())));
    }
    load_entries(&root, entries, cfg.network.num_classes, &cfg.profiles)
}

/// Loads exactly the manifest subsets the scenario is allowed to see.
pub fn load_scenario_data(cfg: &RunConfig, scenario: Scenario) -> Result<ScenarioData> {
    let mut manifests = Manifests {
        loaded: BTreeMap::new(),
    };
    check_with(cfg, scenario, &mut manifests)?;
    let mut audit = LoadAudit::default();
    let mut train = Vec::new();
    for &species in scenario.train_species() {
        train.extend(load_split(cfg, &mut manifests, species, Split::Train, &mut audit)?);
    }
    let mut val = BTreeMap::new();
    for &species in scenario.tracked_species() {
        val.insert(species, load_split(cfg, &mut manifests, species, Split::Val, &mut audit)?);
    }
    let test = load_split(cfg, &mut manifests, scenario.test_species(), Split::Test, &mut audit)?;
    Ok(ScenarioData {
        train,
        val,
        test,
        audit,
    })
}

pub fn training_dir(cfg: &RunConfig, scenario: Scenario) -> PathBuf {
    cfg.out_dir.join("train").join(scenario.training_key())
}

/// Trains the scenario's model; returns the history and the run directory.
pub fn train_scenario(cfg: &RunConfig, scenario: Scenario, data: &ScenarioData) -> Result<(TrainingHistory, PathBuf)> {
    let dir = training_dir(cfg, scenario);
    let history = train(&cfg.network, &cfg.training, &data.train, &data.val, &dir)?;
    Ok((history, dir))
}

pub fn evaluate_checkpoint(cfg: &RunConfig, scenario: Scenario, params: &ModelParams<f32>, data: &ScenarioData) -> Result<Evaluation> {
    evaluate_model(params, &data.test, cfg.training.threshold, scenario.id(), &cfg.method)
}

#[derive(Clone, Debug)]
pub struct ScenarioOutcome {
    pub scenario: Scenario,
    pub evaluation: Evaluation,
    pub audit: LoadAudit,
    pub meta: ScenarioMeta,
}

/// Runs the configured scenarios in order, training each distinct
/// training set once, and writes the combined report under `cfg.out_dir`.
pub fn run_suite(cfg: &RunConfig) -> Result<(Report, Vec<ScenarioOutcome>)> {
    if cfg.scenarios.is_empty() {
        return Err(Error::Config("no scenarios to run".into()));
    }
    // fail on inconsistent data before any training starts
    for &sc in &cfg.scenarios {
        check_scenario(cfg, sc)?;
    }
    let started = unix_now();
    let mut trained: BTreeMap<&'static str, (TrainingHistory, PathBuf)> = BTreeMap::new();
    let mut outcomes = Vec::new();
    let mut records: Vec<MetricRecord> = Vec::new();
    for &sc in &cfg.scenarios {
        outcomes.push(run_one(cfg, sc, &mut trained)?);
    }
    let mut ordered = outcomes.clone();
    ordered.sort_by_key(|o| o.scenario);
    for o in &ordered {
        records.extend(o.evaluation.records.iter().cloned());
    }
    let audit_dir = cfg.out_dir.join("audit");
    fs::create_dir_all(&audit_dir).map_err(|e| Error::io(&audit_dir, e))?;
    for o in &outcomes {
        let p = audit_dir.join(format!("{}.tsv", o.scenario.id()));
        fs::write(&p, o.audit.to_tsv()).map_err(|e| Error::io(&p, e))?;
    }
    let metadata = RunMetadata {
        config_path: cfg.source_path.clone(),
        config_sha256: cfg.config_hash(),
        method: cfg.method.clone(),
        scenarios: ordered.iter().map(|o| o.meta.clone()).collect(),
        started_unix: started,
        finished_unix: unix_now(),
    };
    let report = write_report(&cfg.out_dir, records, metadata)?;
    Ok((report, outcomes))
}

/// Convenience wrapper for a single scenario.
pub fn run_scenario(cfg: &RunConfig, scenario: Scenario) -> Result<(Report, ScenarioOutcome)> {
    let single = RunConfig {
        scenarios: vec![scenario],
        ..cfg.clone()
    };
    let (report, mut outcomes) = run_suite(&single)?;
    Ok((report, outcomes.remove(0)))
}

fn run_one(
    cfg: &RunConfig,
    scenario: Scenario,
    trained: &mut BTreeMap<&'static str, (TrainingHistory, PathBuf)>,
) -> Result<ScenarioOutcome> {
    let started = unix_now();
    let data = load_scenario_data(cfg, scenario)?;
    let (params, checkpoint, epoch, criterion, history) = match &cfg.checkpoint {
        Some(dir) => {
            let (params, _) = load_checkpoint(dir)?;
            (params, dir.display().to_string(), None, None, None)
        }
        None => {
            if !trained.contains_key(scenario.training_key()) {
                let run = train_scenario(cfg, scenario, &data)?;
                trained.insert(scenario.training_key(), run);
            }
            let (history, dir) = &trained[scenario.training_key()];
            let epoch = select_checkpoint(history, scenario.criterion())?;
            let ckpt = checkpoint_dir(dir, epoch);
            let (params, _) = load_checkpoint(&ckpt)?;
            (
                params,
                ckpt.display().to_string(),
                Some(epoch),
                Some(scenario.criterion().to_string()),
                Some(dir.join(HISTORY_FILE)),
            )
        }
    };
    if params.config.num_classes != cfg.network.num_classes {
        return Err(Error::Checkpoint(format!(
            "checkpoint has {} classes, config expects {}",
            params.config.num_classes, cfg.network.num_classes
        )));
    }
    let evaluation = evaluate_checkpoint(cfg, scenario, &params, &data)?;
    Ok(ScenarioOutcome {
        scenario,
        evaluation,
        audit: data.audit,
        meta: ScenarioMeta {
            scenario: scenario.id().to_string(),
            criterion,
            selected_epoch: epoch,
            checkpoint,
            history,
            started_unix: started,
            finished_unix: unix_now(),
        },
    })
}

/// Thresholded prediction for one image file, written as a 0/255 PNG at
/// the profile's working size.
pub fn predict_file(
    checkpoint: &Path,
    image_file: &Path,
    class_id: usize,
    profile: &SpeciesProfile,
    threshold: f32,
    out_file: &Path,
) -> Result<BinaryMask> {
    let (params, _) = load_checkpoint(checkpoint)?;
    predict_with(&params, image_file, class_id, profile, threshold, out_file)
}

pub fn predict_with(
    params: &ModelParams<f32>,
    image_file: &Path,
    class_id: usize,
    profile: &SpeciesProfile,
    threshold: f32,
    out_file: &Path,
) -> Result<BinaryMask> {
    profile.validate()?;
    if class_id == 0 || class_id > params.config.num_classes {
        return Err(Error::ClassOutOfRange {
            index: class_id,
            count: params.config.num_classes,
        });
    }
    let img = image::open(image_file)
        .map_err(|e| Error::image(image_file, e))?
        .to_rgb8();
    if img.width() != img.height() {
        return Err(Error::InvalidPatch(format!(
            "{}: image must be square, got {}x{}",
            image_file.display(),
            img.width(),
            img.height()
        )));
    }
    let n = profile.working_size;
    let tensor = Tensor::from_vec(3, n, n, image_to_chw(&img, n));
    let probs = forward(params, &tensor, class_id)?;
    let mask = BinaryMask::threshold(n, n, &probs.data, threshold, profile.spacing_um())?;
    let png = GrayImage::from_fn(n as u32, n as u32, |x, y| {
        Luma([if mask.get(y as usize, x as usize) { 255 } else { 0 }])
    });
    if let Some(parent) = out_file.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    png.save(out_file).map_err(|e| Error::image(out_file, e))?;
    Ok(mask)
}
