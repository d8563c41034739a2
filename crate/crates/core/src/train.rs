//! Training loop for the three variants: naive (independent patches, B = A), augm
//! (augmented positive pairs, lambda = 0) and equiv (positive pairs with the equivariance
//! penalty).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState};
use crate::error::{Error, Result};
use crate::loss::{loss_and_grad, target_distances, LossTerms};
use crate::model::{ApeModel, ModelConfig, TrainForward};
use crate::nn::Feature;
use crate::optim::{clip_global_norm, AdamW};
use crate::sampler::{
    normalize_coords, normalize_coords_with, patch_voxel_moments, sample_independent_patches, sample_patch_pair, sample_positive_pairs, sample_voxels,
    NormalizedCoords, SamplerConfig,
};
use crate::seed::derive_seed;
use crate::volume::{foreground_crop, Volume, DEFAULT_FOREGROUND_HU};

pub const CHECKPOINT_FILE: &str = "checkpoint.apec";
pub const METRICS_FILE: &str = "metrics.csv";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Naive,
    Augm,
    Equiv,
}

impl Variant {
    pub fn uses_pairs(self) -> bool {
        self != Variant::Naive
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Naive => "naive",
            Variant::Augm => "augm",
            Variant::Equiv => "equiv",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Variant::Naive),
            "augm" => Ok(Variant::Augm),
            "equiv" => Ok(Variant::Equiv),
            _ => Err(Error::InvalidConfig(format!("unknown variant {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Equivariance weight; defaults to 1 for equiv and must be 0 (or unset) otherwise.
    pub lambda: Option<f64>,
    pub steps: u64,
    /// Patch pairs per step (patches per step for naive).
    pub n: usize,
    /// Voxels per pair (per patch for naive).
    pub k: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub checkpoint_every: u64,
    pub seed: u64,
    /// Steps of training-distribution batches used to set exact normalization statistics
    /// after training; 0 keeps the momentum-averaged statistics.
    pub calibrate_steps: u64,
    pub log_every: u64,
    pub coord_stats: CoordStats,
}

/// Population whose moments standardize the target coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CoordStats {
    /// The sampled points themselves.
    Points,
    /// Every voxel of the batch's patches, the population the embedding normalization sees.
    #[default]
    PatchVoxels,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Equiv,
            lambda: None,
            steps: 2000,
            n: 4,
            k: 250,
            lr: 3e-4,
            weight_decay: 1e-6,
            clip_norm: 1.0,
            checkpoint_every: 500,
            seed: 0,
            calibrate_steps: 0,
            log_every: 100,
            coord_stats: CoordStats::default(),
        }
    }
}

impl TrainConfig {
    pub fn effective_lambda(&self) -> f64 {
        match self.variant {
            Variant::Equiv => self.lambda.unwrap_or(1.0),
            _ => 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("train: {m}")));
        if self.steps == 0 {
            return bad("steps must be >= 1".into());
        }
        if self.n == 0 || self.k == 0 || self.n * self.k < 2 {
            return bad("n * k must be at least 2".into());
        }
        if self.variant == Variant::Naive && self.n < 2 {
            return bad("naive batches need n >= 2 patches for batch normalization".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.clip_norm > 0.0) {
            return bad("weight_decay must be >= 0 and clip_norm > 0".into());
        }
        if self.checkpoint_every == 0 || self.log_every == 0 {
            return bad("checkpoint_every and log_every must be >= 1".into());
        }
        match (self.variant, self.lambda) {
            (Variant::Equiv, Some(l)) if !(l >= 0.0 && l.is_finite()) => bad(format!("lambda must be >= 0, got {l}")),
            (Variant::Naive | Variant::Augm, Some(l)) if l != 0.0 => {
                bad(format!("variant {} forces lambda = 0, got {l}", self.variant.name()))
            }
            _ => Ok(()),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSetup {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub sampler: SamplerConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.model.validate()?;
        self.sampler.validate()?;
        if self.sampler.min_patch_size < self.model.min_patch_size() {
            return Err(Error::InvalidConfig(format!(
                "sampler.min_patch_size must be >= {} for this model",
                self.model.min_patch_size()
            )));
        }
        Ok(())
    }
}

/// One row of embeddings: (patch number, voxel index).
pub type VoxelRef = (usize, [usize; 3]);

#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub patches: Vec<Array3<f32>>,
    pub rows_a: Vec<VoxelRef>,
    /// Partner voxels for positive-pair variants; `None` for naive.
    pub rows_b: Option<Vec<VoxelRef>>,
    pub coords: NormalizedCoords,
    pub target: Array2<f64>,
    /// Number of patches that received any augmentation.
    pub augmented_patches: usize,
}

/// Samples one step's batch from `volume` (already foreground-cropped).
pub fn make_batch(volume: &Volume, setup: &TrainSetup, rng: &mut ChaCha8Rng) -> Result<TrainBatch> {
    let t = &setup.train;
    let mut patches = Vec::new();
    let mut rows_a = Vec::new();
    let mut rows_b = Vec::new();
    let mut points = Vec::new();
    let mut augmented = 0;
    if t.variant.uses_pairs() {
        for p in 0..t.n {
            let pair = sample_patch_pair(volume, rng, &setup.sampler)?;
            let vp = sample_positive_pairs(&pair, t.k, rng)?;
            augmented += usize::from(!pair.patch_a.record.is_identity());
            augmented += usize::from(!pair.patch_b.record.is_identity());
            rows_a.extend(vp.index_a.iter().map(|&i| (2 * p, i)));
            rows_b.extend(vp.index_b.iter().map(|&i| (2 * p + 1, i)));
            points.extend(vp.points_mm);
            patches.push(pair.patch_a);
            patches.push(pair.patch_b);
        }
    } else {
        for (p, patch) in sample_independent_patches(volume, t.n, rng, &setup.sampler)?.into_iter().enumerate() {
            augmented += usize::from(!patch.record.is_identity());
            let (idx, pts) = sample_voxels(&patch, t.k, rng)?;
            rows_a.extend(idx.into_iter().map(|i| (p, i)));
            points.extend(pts);
            patches.push(patch);
        }
    }
    let coords = match t.coord_stats {
        CoordStats::Points => normalize_coords(&points)?,
        CoordStats::PatchVoxels => {
            let (mean, var) = patch_voxel_moments(&patches.iter().collect::<Vec<_>>())?;
            normalize_coords_with(&points, mean, var)?
        }
    };
    let p_hat = Array2::from_shape_fn((points.len(), 3), |(i, a)| coords.points[i][a]);
    let target = target_distances(p_hat.view());
    Ok(TrainBatch {
        patches: patches.into_iter().map(|p| p.data).collect(),
        rows_a,
        rows_b: t.variant.uses_pairs().then_some(rows_b),
        coords,
        target,
        augmented_patches: augmented,
    })
}

fn gather(fwd: &TrainForward<f32>, rows: &[VoxelRef]) -> Array2<f64> {
    let mut out = Array2::zeros((rows.len(), 3));
    for (r, &(p, [i, j, k])) in rows.iter().enumerate() {
        let m = &fwd.maps[p];
        let v = m.voxels();
        let flat = (i * m.dims[1] + j) * m.dims[2] + k;
        for c in 0..3 {
            out[[r, c]] = m.data[c * v + flat] as f64;
        }
    }
    out
}

fn scatter(grads: &mut [Feature<f32>], rows: &[VoxelRef], g: &Array2<f64>) {
    for (r, &(p, [i, j, k])) in rows.iter().enumerate() {
        let m = &mut grads[p];
        let v = m.voxels();
        let flat = (i * m.dims[1] + j) * m.dims[2] + k;
        for c in 0..3 {
            m.data[c * v + flat] += g[[r, c]] as f32;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub terms: LossTerms,
    /// Global gradient norm after clipping.
    pub grad_norm: f64,
    pub grad_norm_raw: f64,
}

/// Forward, loss, backward, clip and one optimizer update.
pub fn train_step(
    model: &mut ApeModel<f32>,
    opt: &mut AdamW,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    batch_seed: u64,
) -> Result<StepReport> {
    let views: Vec<_> = batch.patches.iter().map(|p| p.view()).collect();
    let fwd = model.forward_train(&views)?;
    let a = gather(&fwd, &batch.rows_a);
    let b = batch.rows_b.as_ref().map(|rows| gather(&fwd, rows));
    let lg = loss_and_grad(a.view(), b.as_ref().map(|b| b.view()), &batch.target, cfg.effective_lambda())?;
    if !lg.terms.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.step,
            seed: cfg.seed,
            batch_seed,
        });
    }
    let mut gmaps: Vec<Feature<f32>> = fwd.maps.iter().map(|m| Feature::zeros(3, m.dims)).collect();
    scatter(&mut gmaps, &batch.rows_a, &lg.grad_a);
    if let (Some(rows), Some(gb)) = (&batch.rows_b, &lg.grad_b) {
        scatter(&mut gmaps, rows, gb);
    }
    let mut grads = model.backward(&fwd, &gmaps);
    let (raw, clipped) = clip_global_norm(&mut grads, cfg.clip_norm);
    if !raw.is_finite() {
        return Err(Error::NonFiniteLoss {
            step: model.step,
            seed: cfg.seed,
            batch_seed,
        });
    }
    opt.step(&mut model.params, &grads);
    model.step += 1;
    Ok(StepReport {
        terms: lg.terms,
        grad_norm: clipped,
        grad_norm_raw: raw,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: u64,
    pub loss: f64,
    pub loss_dist: f64,
    pub loss_equiv: Option<f64>,
    pub mean_dpred_ii: Option<f64>,
    pub grad_norm: f64,
    pub wallclock_s: f64,
}

pub const METRICS_HEADER: [&str; 7] = [
    "step",
    "loss",
    "loss_dist",
    "loss_equiv",
    "mean_dpred_ii",
    "grad_norm",
    "wallclock_s",
];

impl MetricsRow {
    fn record(&self) -> [String; 7] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.step.to_string(),
            self.loss.to_string(),
            self.loss_dist.to_string(),
            opt(self.loss_equiv),
            opt(self.mean_dpred_ii),
            self.grad_norm.to_string(),
            format!("{:.3}", self.wallclock_s),
        ]
    }

    fn parse(rec: &csv::StringRecord) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("malformed metrics row {rec:?}"));
        let num = |i: usize| rec.get(i).ok_or_else(bad)?.parse::<f64>().map_err(|_| bad());
        let opt = |i: usize| -> Result<Option<f64>> {
            match rec.get(i) {
                Some("") => Ok(None),
                Some(s) => s.parse().map(Some).map_err(|_| bad()),
                None => Err(bad()),
            }
        };
        Ok(Self {
            step: rec.get(0).ok_or_else(bad)?.parse().map_err(|_| bad())?,
            loss: num(1)?,
            loss_dist: num(2)?,
            loss_equiv: opt(3)?,
            mean_dpred_ii: opt(4)?,
            grad_norm: num(5)?,
            wallclock_s: num(6)?,
        })
    }
}

pub fn write_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_HEADER)?;
    for r in rows {
        w.write_record(r.record())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    r.records().map(|rec| MetricsRow::parse(&rec?)).collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub model: ApeModel<f32>,
    pub rows: Vec<MetricsRow>,
}

/// Per-step batch seed; depends only on the run seed and the step number.
pub fn batch_seed(seed: u64, step: u64) -> u64 {
    derive_seed(seed, "batch", step)
}

fn checkpoint_of(model: &ApeModel<f32>, opt: &AdamW, setup: &TrainSetup) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        optimizer: Some(OptimizerState {
            t: opt.t,
            m: opt.m.clone(),
            v: opt.v.clone(),
        }),
        extra: serde_json::to_value(setup).expect("setup serializes"),
    }
}

/// Runs (or resumes) training on a pool of raw volumes, cycling through them one per step.
///
/// With `resume`, an existing checkpoint in `out_dir` is continued: its setup must match
/// `setup` except for the step count, and metrics rows past the checkpoint are dropped.
pub fn train(setup: &TrainSetup, pool: &[Volume], out_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    setup.validate()?;
    if pool.is_empty() {
        return Err(Error::EmptyInput("training pool"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let ckpt_path = out_dir.join(CHECKPOINT_FILE);
    let metrics_path = out_dir.join(METRICS_FILE);
    let cfg = &setup.train;

    let cropped: Vec<Volume> = pool
        .iter()
        .map(|v| foreground_crop(v, DEFAULT_FOREGROUND_HU).volume)
        .collect();

    let (mut model, mut opt, mut rows) = if resume && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let mut stored: TrainSetup = serde_json::from_value(ckpt.extra.clone())
            .map_err(|e| Error::Checkpoint(format!("stored training setup: {e}")))?;
        stored.train.steps = cfg.steps;
        if &stored != setup {
            return Err(Error::Checkpoint("resume setup differs from the checkpoint's".into()));
        }
        let state = ckpt
            .optimizer
            .ok_or_else(|| Error::Checkpoint("checkpoint has no optimizer state".into()))?;
        let mut opt = AdamW::new(ckpt.model.num_params(), cfg.lr, cfg.weight_decay);
        (opt.t, opt.m, opt.v) = (state.t, state.m, state.v);
        let step = ckpt.model.step;
        let rows = if metrics_path.exists() {
            read_metrics(&metrics_path)?.into_iter().filter(|r| r.step <= step).collect()
        } else {
            Vec::new()
        };
        log::info!("resuming {} from step {step}", cfg.variant.name());
        (ckpt.model, opt, rows)
    } else {
        let model = ApeModel::<f32>::new(setup.model.clone(), derive_seed(cfg.seed, "model", 0))?;
        let opt = AdamW::new(model.num_params(), cfg.lr, cfg.weight_decay);
        (model, opt, Vec::new())
    };

    let start = Instant::now();
    let offset = rows.last().map_or(0.0, |r| r.wallclock_s);
    while model.step < cfg.steps {
        let step = model.step;
        let bseed = batch_seed(cfg.seed, step);
        let mut rng = ChaCha8Rng::seed_from_u64(bseed);
        let volume = &cropped[(step % cropped.len() as u64) as usize];
        let batch = make_batch(volume, setup, &mut rng)?;
        debug_assert!(cfg.variant.uses_pairs() || batch.augmented_patches == 0);
        let rep = train_step(&mut model, &mut opt, &batch, cfg, bseed)?;
        let pairs = cfg.variant.uses_pairs();
        rows.push(MetricsRow {
            step: model.step,
            loss: rep.terms.total,
            loss_dist: rep.terms.dist,
            loss_equiv: pairs.then_some(rep.terms.equiv),
            mean_dpred_ii: rep.terms.mean_dpred_ii,
            grad_norm: rep.grad_norm,
            wallclock_s: offset + start.elapsed().as_secs_f64(),
        });
        if model.step % cfg.log_every == 0 {
            log::info!(
                "{} step {} loss {:.4} dist {:.4} grad {:.3}",
                cfg.variant.name(),
                model.step,
                rep.terms.total,
                rep.terms.dist,
                rep.grad_norm_raw
            );
        }
        if model.step % cfg.checkpoint_every == 0 && model.step < cfg.steps {
            save_checkpoint(&checkpoint_of(&model, &opt, setup), &ckpt_path)?;
            write_metrics(&rows, &metrics_path)?;
        }
    }
    if cfg.calibrate_steps > 0 {
        calibrate_on_training_batches(&mut model, setup, &cropped)?;
    }
    save_checkpoint(&checkpoint_of(&model, &opt, setup), &ckpt_path)?;
    write_metrics(&rows, &metrics_path)?;
    Ok(TrainOutcome {
        checkpoint: ckpt_path,
        metrics: metrics_path,
        model,
        rows,
    })
}

fn calibrate_on_training_batches(model: &mut ApeModel<f32>, setup: &TrainSetup, pool: &[Volume]) -> Result<()> {
    let mut patches = Vec::new();
    for i in 0..setup.train.calibrate_steps {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(setup.train.seed, "calibrate", i));
        let volume = &pool[(i % pool.len() as u64) as usize];
        patches.extend(make_batch(volume, setup, &mut rng)?.patches);
    }
    let views: Vec<_> = patches.iter().map(|p| p.view()).collect();
    model.calibrate(&views)
}
