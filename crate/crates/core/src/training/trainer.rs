//! Epoch loop, validation, history bookkeeping and checkpoint selection.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::loss::loss_from_logits;
use super::optim::{Adam, AdamConfig};
use super::pool::{ImagePool, PoolConfig, PoolStats};
use crate::data::patch::{class_name, LabeledPatch, Species};
use crate::error::{Error, Result};
use crate::metrics::evaluate::{gt_mask, predict_mask};
use crate::metrics::overlap::dice;
use crate::network::checkpoint::save_checkpoint;
use crate::network::{backward_pass, forward_pass, init_params, ModelParams, NetworkConfig, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Augmentation {
    #[default]
    None,
    /// Random horizontal/vertical flips applied to image and mask together.
    Flips,
}

/// How many checkpoints to keep on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum KeepPolicy {
    #[default]
    All,
    /// Union of the top-k epochs of every tracked validation set.
    Best(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub adam: AdamConfig,
    pub pool: PoolConfig,
    pub seed: u64,
    /// Probability at or above which a pixel counts as foreground.
    pub threshold: f32,
    pub keep: KeepPolicy,
    pub augmentation: Augmentation,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            adam: AdamConfig::default(),
            pool: PoolConfig::default(),
            seed: 0,
            threshold: 0.5,
            keep: KeepPolicy::All,
            augmentation: Augmentation::None,
        }
    }
}

pub struct TrainState {
    pub params: ModelParams<f32>,
    pub optimizer: Adam<f32>,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub running_loss: Option<f64>,
    pub pool: ImagePool<usize>,
    augmentation: Augmentation,
}

impl TrainState {
    pub fn new(net: &NetworkConfig, cfg: &TrainingConfig) -> Result<Self> {
        let params = init_params::<f32>(net)?;
        Self::from_params(params, cfg)
    }

    pub fn from_params(params: ModelParams<f32>, cfg: &TrainingConfig) -> Result<Self> {
        let optimizer = Adam::new(cfg.adam, &params.arrays);
        Ok(Self {
            params,
            optimizer,
            epoch: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            running_loss: None,
            pool: ImagePool::new(cfg.pool)?,
            augmentation: cfg.augmentation,
        })
    }
}

/// Mean loss and parameter gradients for one single-class batch.
pub fn batch_gradients<T: Real>(
    params: &ModelParams<T>,
    images: &[Tensor<T>],
    masks: &[&[u8]],
    class_id: usize,
) -> Result<(T, Vec<Vec<T>>)> {
    if images.is_empty() || images.len() != masks.len() {
        return Err(Error::Shape("batch needs matching non-empty images and masks".into()));
    }
    let mut grads = params.zeros_like();
    let mut total = T::zero();
    let scale = T::one() / T::from_usize(images.len()).expect("batch size");
    for (img, mask) in images.iter().zip(masks) {
        let pass = forward_pass(params, img, class_id)?;
        let (loss, mut dlogits) = loss_from_logits(&pass.logits.data, mask)?;
        for g in dlogits.iter_mut() {
            *g *= scale;
        }
        backward_pass(params, &pass, &dlogits, &mut grads);
        total += loss * scale;
    }
    Ok((total, grads))
}

fn flip(size: usize, channels: usize, data: &mut [impl Copy], horizontal: bool) {
    for c in 0..channels {
        let plane = &mut data[c * size * size..(c + 1) * size * size];
        if horizontal {
            for row in plane.chunks_mut(size) {
                row.reverse();
            }
        } else {
            for r in 0..size / 2 {
                for x in 0..size {
                    plane.swap(r * size + x, (size - 1 - r) * size + x);
                }
            }
        }
    }
}

fn train_step(state: &mut TrainState, train_set: &[LabeledPatch], batch: &[usize]) -> Result<f64> {
    let class_id = train_set[batch[0]].class_id;
    let mut images = Vec::with_capacity(batch.len());
    let mut masks = Vec::with_capacity(batch.len());
    for &i in batch {
        let p = &train_set[i];
        debug_assert_eq!(p.class_id, class_id, "pool batches are single-class");
        let mut img = p.image.clone();
        let mut mask = p.mask.clone();
        if state.augmentation == Augmentation::Flips {
            for horizontal in [true, false] {
                if state.rng.gen_bool(0.5) {
                    flip(p.size, LabeledPatch::CHANNELS, &mut img, horizontal);
                    flip(p.size, 1, &mut mask, horizontal);
                }
            }
        }
        images.push(Tensor::from_vec(LabeledPatch::CHANNELS, p.size, p.size, img));
        masks.push(mask);
    }
    let mask_refs: Vec<&[u8]> = masks.iter().map(Vec::as_slice).collect();
    let (loss, grads) = batch_gradients(&state.params, &images, &mask_refs, class_id)?;
    let loss = f64::from(loss);
    if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
        return Err(Error::Divergence(format!(
            "non-finite loss/gradient at epoch {} (class {})",
            state.epoch + 1,
            class_name(class_id)
        )));
    }
    state.optimizer.update(&mut state.params.arrays, &grads);
    // rectifiers can hide a poisoned weight from the loss, so check directly
    if !state.params.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite parameters after a step at epoch {}",
            state.epoch + 1
        )));
    }
    Ok(loss)
}

/// Shuffled round-robin over classes: every round visits each class that
/// still has patches once, in a freshly shuffled class order.
pub fn class_balanced_order(train_set: &[LabeledPatch], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, p) in train_set.iter().enumerate() {
        by_class.entry(p.class_id).or_default().push(i);
    }
    let mut lists: Vec<Vec<usize>> = by_class.into_values().collect();
    for l in lists.iter_mut() {
        l.shuffle(rng);
    }
    let mut order = Vec::with_capacity(train_set.len());
    let mut cursor = vec![0usize; lists.len()];
    loop {
        let mut live: Vec<usize> = (0..lists.len()).filter(|&k| cursor[k] < lists[k].len()).collect();
        if live.is_empty() {
            break;
        }
        live.shuffle(rng);
        for k in live {
            order.push(lists[k][cursor[k]]);
            cursor[k] += 1;
        }
    }
    order
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub mean_loss: Option<f64>,
    pub steps: usize,
    pub pool: PoolStats,
}

/// One pass over the training set through the image pool, one optimizer
/// step per emitted batch.
pub fn train_epoch(state: &mut TrainState, train_set: &[LabeledPatch]) -> Result<EpochStats> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    let order = class_balanced_order(train_set, &mut state.rng);
    let mut losses = Vec::new();
    for idx in order {
        if let Some(batch) = state.pool.offer(train_set[idx].class_id, idx) {
            losses.push(train_step(state, train_set, &batch)?);
        }
    }
    for (_, batch) in state.pool.flush() {
        losses.push(train_step(state, train_set, &batch)?);
    }
    state.epoch += 1;
    let mean_loss = (!losses.is_empty()).then(|| losses.iter().sum::<f64>() / losses.len() as f64);
    state.running_loss = mean_loss.or(state.running_loss);
    Ok(EpochStats {
        mean_loss,
        steps: losses.len(),
        pool: state.pool.stats(),
    })
}

/// Per-class mean Dice and the mean over classes present.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidationScores {
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

pub fn validate(params: &ModelParams<f32>, val_set: &[LabeledPatch], threshold: f32) -> Result<ValidationScores> {
    if val_set.is_empty() {
        return Err(Error::Dataset("validation set is empty".into()));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for patch in val_set {
        let d = dice(&predict_mask(params, patch, threshold)?, &gt_mask(patch)?)?;
        let e = sums.entry(patch.class_id).or_default();
        e.0 += d;
        e.1 += 1;
    }
    Ok(scores_from_sums(sums))
}

fn scores_from_sums(sums: BTreeMap<usize, (f64, usize)>) -> ValidationScores {
    let per_class: BTreeMap<usize, f64> = sums
        .into_iter()
        .map(|(c, (s, n))| (c, s / n as f64))
        .collect();
    let mean = per_class.values().sum::<f64>() / per_class.len() as f64;
    ValidationScores { per_class, mean }
}

/// Mean Dice of `predictions` against their patches' masks, grouped as in
/// [`validate`]; used where predictions come from somewhere other than a model.
pub fn validate_predictions(val_set: &[LabeledPatch], predictions: &[Vec<u8>]) -> Result<ValidationScores> {
    if val_set.is_empty() || val_set.len() != predictions.len() {
        return Err(Error::Dataset("need one prediction per validation patch".into()));
    }
    let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (patch, pred) in val_set.iter().zip(predictions) {
        let pm = crate::metrics::BinaryMask::new(patch.size, patch.size, pred.clone(), patch.spacing_um)?;
        let d = dice(&pm, &gt_mask(patch)?)?;
        let e = sums.entry(patch.class_id).or_default();
        e.0 += d;
        e.1 += 1;
    }
    Ok(scores_from_sums(sums))
}

/// Mean Dice on the training set itself (used for the capacity check).
pub fn train_dice(params: &ModelParams<f32>, train_set: &[LabeledPatch], threshold: f32) -> Result<f64> {
    let total: f64 = train_set
        .iter()
        .map(|p| dice(&predict_mask(params, p, threshold)?, &gt_mask(p)?))
        .sum::<Result<f64>>()?;
    Ok(total / train_set.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum SelectionCriterion {
    /// Mouse validation Dice.
    Vm,
    /// Human validation Dice.
    Vh,
    /// The only tracked validation set.
    Plain,
}

impl fmt::Display for SelectionCriterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SelectionCriterion::Vm => "VM",
            SelectionCriterion::Vh => "VH",
            SelectionCriterion::Plain => "plain",
        })
    }
}

impl FromStr for SelectionCriterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "vm" => Ok(Self::Vm),
            "vh" => Ok(Self::Vh),
            "plain" => Ok(Self::Plain),
            other => Err(Error::Config(format!("unknown selection criterion '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub steps: usize,
    pub dropped: usize,
    pub validation: BTreeMap<Species, ValidationScores>,
    pub checkpoint: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct TrainingHistory {
    pub num_classes: usize,
    pub records: Vec<EpochRecord>,
}

impl TrainingHistory {
    pub fn tracked(&self) -> Vec<Species> {
        let mut v: Vec<Species> = self
            .records
            .iter()
            .flat_map(|r| r.validation.keys().copied())
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.records.iter().find(|r| r.epoch == epoch)
    }

    pub fn to_tsv(&self) -> String {
        let tracked = self.tracked();
        let mut header = vec![
            "epoch".to_string(),
            "train_loss".into(),
            "steps".into(),
            "dropped".into(),
        ];
        for s in &tracked {
            header.push(format!("val_{s}_mean"));
            for c in 1..=self.num_classes {
                header.push(format!("val_{s}_{}", class_name(c)));
            }
        }
        header.push("checkpoint".into());
        let mut out = header.join("\t");
        out.push('\n');
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                fmt_opt(r.train_loss),
                r.steps.to_string(),
                r.dropped.to_string(),
            ];
            for s in &tracked {
                let v = r.validation.get(s);
                row.push(fmt_opt(v.map(|v| v.mean)));
                for c in 1..=self.num_classes {
                    row.push(fmt_opt(v.and_then(|v| v.per_class.get(&c).copied())));
                }
            }
            row.push(r.checkpoint.clone().unwrap_or_else(|| "NA".into()));
            out.push_str(&row.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn parse_tsv(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::Dataset("empty history file".into()))?
            .split('\t')
            .collect();
        if header.len() < 5 || header[0] != "epoch" || header[header.len() - 1] != "checkpoint" {
            return Err(Error::Dataset("malformed history header".into()));
        }
        let mut tracked: Vec<Species> = Vec::new();
        let mut num_classes = 0;
        for col in &header[4..header.len() - 1] {
            let rest = col
                .strip_prefix("val_")
                .ok_or_else(|| Error::Dataset(format!("bad history column '{col}'")))?;
            let (sp, what) = rest
                .split_once('_')
                .ok_or_else(|| Error::Dataset(format!("bad history column '{col}'")))?;
            let sp: Species = sp.parse()?;
            if what == "mean" {
                tracked.push(sp);
            } else if tracked.len() == 1 {
                num_classes += 1;
            }
        }
        let mut records = Vec::new();
        for line in lines {
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != header.len() {
                return Err(Error::Dataset("history row width differs from header".into()));
            }
            let num = |s: &str| -> Result<usize> {
                s.parse().map_err(|_| Error::Dataset(format!("bad integer '{s}' in history")))
            };
            let mut validation = BTreeMap::new();
            let mut k = 4;
            for s in &tracked {
                let mean = parse_opt(cols[k])?;
                k += 1;
                let mut per_class = BTreeMap::new();
                for c in 1..=num_classes {
                    if let Some(v) = parse_opt(cols[k])? {
                        per_class.insert(c, v);
                    }
                    k += 1;
                }
                if let Some(mean) = mean {
                    validation.insert(*s, ValidationScores { per_class, mean });
                }
            }
            let ckpt = cols[header.len() - 1];
            records.push(EpochRecord {
                epoch: num(cols[0])?,
                train_loss: parse_opt(cols[1])?,
                steps: num(cols[2])?,
                dropped: num(cols[3])?,
                validation,
                checkpoint: (ckpt != "NA").then(|| ckpt.to_string()),
            });
        }
        Ok(Self {
            num_classes,
            records,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tsv(&text)
    }
}

// round-trips f64 exactly
fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |v| format!("{v:?}"))
}

fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s == "NA" {
        return Ok(None);
    }
    s.parse()
        .map(Some)
        .map_err(|_| Error::Dataset(format!("bad number '{s}' in history")))
}

fn criterion_species(history: &TrainingHistory, criterion: SelectionCriterion) -> Result<Species> {
    let tracked = history.tracked();
    let want = match criterion {
        SelectionCriterion::Vm => Species::Mouse,
        SelectionCriterion::Vh => Species::Human,
        SelectionCriterion::Plain => match tracked.as_slice() {
            [only] => *only,
            [] => return Err(Error::Selection("history tracks no validation set".into())),
            _ => {
                return Err(Error::Selection(
                    "plain selection is ambiguous with several validation sets".into(),
                ))
            }
        },
    };
    if !tracked.contains(&want) {
        return Err(Error::Selection(format!(
            "{criterion} selection needs {want} validation results, history has {tracked:?}"
        )));
    }
    Ok(want)
}

/// Epoch with the highest mean validation Dice on the criterion's set;
/// ties go to the earliest epoch.
pub fn select_checkpoint(history: &TrainingHistory, criterion: SelectionCriterion) -> Result<usize> {
    if history.records.is_empty() {
        return Err(Error::Selection("history is empty".into()));
    }
    let species = criterion_species(history, criterion)?;
    let mut best: Option<(usize, f64)> = None;
    for r in &history.records {
        if let Some(v) = r.validation.get(&species) {
            if best.is_none_or(|(_, b)| v.mean > b) {
                best = Some((r.epoch, v.mean));
            }
        }
    }
    best.map(|(e, _)| e)
        .ok_or_else(|| Error::Selection(format!("no {species} validation scores recorded")))
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}

pub const HISTORY_FILE: &str = "history.tsv";

/// Trains for `cfg.epochs` epochs, validating on every set in `val_sets`
/// after each epoch, writing checkpoints under `<out_dir>/checkpoints/` and
/// the history to `<out_dir>/history.tsv` after every epoch.
pub fn train(
    net: &NetworkConfig,
    cfg: &TrainingConfig,
    train_set: &[LabeledPatch],
    val_sets: &BTreeMap<Species, Vec<LabeledPatch>>,
    out_dir: &Path,
) -> Result<TrainingHistory> {
    if train_set.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if let Some(p) = train_set.iter().find(|p| p.class_id > net.num_classes) {
        return Err(Error::ClassOutOfRange {
            index: p.class_id,
            count: net.num_classes,
        });
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut state = TrainState::new(net, cfg)?;
    let mut history = TrainingHistory {
        num_classes: net.num_classes,
        records: Vec::new(),
    };
    let history_path = out_dir.join(HISTORY_FILE);
    for _ in 0..cfg.epochs {
        let stats = match train_epoch(&mut state, train_set) {
            Ok(s) => s,
            Err(e) => {
                history.save(&history_path)?;
                return Err(e);
            }
        };
        let mut validation = BTreeMap::new();
        for (species, set) in val_sets {
            if !set.is_empty() {
                validation.insert(*species, validate(&state.params, set, cfg.threshold)?);
            }
        }
        let epoch = state.epoch;
        let dir = checkpoint_dir(out_dir, epoch);
        save_checkpoint(&state.params, &dir, epoch, manifest_scores(&validation))?;
        history.records.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss,
            steps: stats.steps,
            dropped: stats.pool.dropped,
            validation,
            checkpoint: Some(relative_checkpoint(epoch)),
        });
        if let KeepPolicy::Best(k) = cfg.keep {
            prune_checkpoints(&mut history, out_dir, k)?;
        }
        history.save(&history_path)?;
    }
    Ok(history)
}

fn relative_checkpoint(epoch: usize) -> String {
    format!("checkpoints/epoch_{epoch:04}")
}

fn manifest_scores(v: &BTreeMap<Species, ValidationScores>) -> BTreeMap<String, BTreeMap<String, Option<f64>>> {
    v.iter()
        .map(|(s, scores)| {
            let mut m: BTreeMap<String, Option<f64>> = scores
                .per_class
                .iter()
                .map(|(c, d)| (class_name(*c), Some(*d)))
                .collect();
            m.insert("mean".into(), Some(scores.mean));
            (s.to_string(), m)
        })
        .collect()
}

fn prune_checkpoints(history: &mut TrainingHistory, out_dir: &Path, k: usize) -> Result<()> {
    let mut keep = std::collections::BTreeSet::new();
    for species in history.tracked() {
        let mut ranked: Vec<(usize, f64)> = history
            .records
            .iter()
            .filter_map(|r| r.validation.get(&species).map(|v| (r.epoch, v.mean)))
            .collect();
        // descending score, earliest epoch first among ties
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        keep.extend(ranked.iter().take(k).map(|(e, _)| *e));
    }
    if history.tracked().is_empty() {
        if let Some(last) = history.records.last() {
            keep.insert(last.epoch);
        }
    }
    for r in history.records.iter_mut() {
        if r.checkpoint.is_some() && !keep.contains(&r.epoch) {
            let dir = checkpoint_dir(out_dir, r.epoch);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            r.checkpoint = None;
        }
    }
    Ok(())
}
