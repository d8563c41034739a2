//! Few-shot organ localization: edge-point retrieval, box averaging, IoU, box enlargement,
//! recall and the volume ratio at 0.99 recall.

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{nearest_voxel, query_embedding};
use crate::volume::{Box3, EmbeddingMap, Point3};

/// Edge-point order: x-, x+, y-, y+, z-, z+.
pub type Shot = [[f32; 3]; 6];

pub const EDGE_NAMES: [&str; 6] = ["x-", "x+", "y-", "y+", "z-", "z+"];

/// Bounding box of the six retrieved voxels.
pub fn predict_box(shot: &Shot, map: &EmbeddingMap) -> Box3 {
    let pts: Vec<Point3> = shot.iter().map(|q| nearest_voxel(map, *q).mm).collect();
    Box3::bounding(&pts).expect("six points")
}

/// Corner-wise mean of the per-shot boxes.
pub fn few_shot_box(shots: &[Shot], map: &EmbeddingMap) -> Result<Box3> {
    if shots.is_empty() {
        return Err(Error::EmptyInput("shot set"));
    }
    let boxes: Vec<Box3> = shots.iter().map(|s| predict_box(s, map)).collect();
    Ok(mean_box(&boxes))
}

pub fn mean_box(boxes: &[Box3]) -> Box3 {
    let n = boxes.len() as f64;
    Box3::new(
        std::array::from_fn(|a| boxes.iter().map(|b| b.min[a]).sum::<f64>() / n),
        std::array::from_fn(|a| boxes.iter().map(|b| b.max[a]).sum::<f64>() / n),
    )
}

pub fn iou(a: &Box3, b: &Box3) -> f64 {
    let (va, vb) = (a.volume(), b.volume());
    if va == 0.0 && vb == 0.0 {
        return if a == b { 1.0 } else { 0.0 };
    }
    let inter = a.intersection(b).map_or(0.0, |i| i.volume());
    inter / (va + vb - inter)
}

/// Scales every side by `alpha` about the center, then clips to `bounds`.
pub fn enlarge_box(b: &Box3, alpha: f64, bounds: &Box3) -> Result<Box3> {
    if !(alpha >= 1.0) {
        return Err(Error::InvalidArgument(format!("enlargement factor must be >= 1, got {alpha}")));
    }
    let c = b.center();
    let mut min = [0.0; 3];
    let mut max = [0.0; 3];
    for a in 0..3 {
        let half = 0.5 * (b.max[a] - b.min[a]) * alpha;
        min[a] = (c[a] - half).clamp(bounds.min[a], bounds.max[a]);
        max[a] = (c[a] + half).clamp(bounds.min[a], bounds.max[a]);
    }
    Ok(Box3::new(min, max))
}

/// A binary mask with its voxel grid geometry.
#[derive(Debug, Clone, Copy)]
pub struct MaskRef<'a> {
    pub mask: &'a Array3<bool>,
    pub spacing: Point3,
    pub origin: Point3,
}

impl MaskRef<'_> {
    fn centers(&self) -> impl Iterator<Item = Point3> + '_ {
        self.mask
            .indexed_iter()
            .filter(|(_, &m)| m)
            .map(|((i, j, k), _)| crate::volume::position_mm(self.origin, self.spacing, [i, j, k]))
    }
}

/// Fraction of mask voxel centers inside `b` (inclusive).
pub fn recall(b: &Box3, mask: MaskRef) -> Result<f64> {
    let (mut inside, mut total) = (0usize, 0usize);
    for p in mask.centers() {
        total += 1;
        inside += usize::from(b.contains(p));
    }
    if total == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(inside as f64 / total as f64)
}

/// Bounding box of the mask's voxel centers.
pub fn mask_box(mask: MaskRef) -> Result<Box3> {
    let pts: Vec<Point3> = mask.centers().collect();
    Box3::bounding(&pts).ok_or(Error::EmptyMask)
}

pub const RECALL_TARGET: f64 = 0.99;

/// Enlargement factors 1.00, 1.05, ..., 3.00.
pub fn alpha_grid() -> Vec<f64> {
    (0..=40).map(|i| (100 + 5 * i) as f64 / 100.0).collect()
}

#[derive(Debug, Clone, Copy)]
pub struct VrCase<'a> {
    pub prediction: Box3,
    pub mask: MaskRef<'a>,
    /// Physical extent of the raw image.
    pub raw_bounds: Box3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VrReport {
    /// Smallest grid factor reaching the mean-recall target, if any.
    pub alpha: Option<f64>,
    /// Factor the VR statistics refer to: `alpha`, or the best-recall factor otherwise.
    pub alpha_used: f64,
    pub mean_recall: f64,
    pub vr_mean: f64,
    pub vr_std: f64,
}

pub fn vr_at_99(cases: &[VrCase]) -> Result<VrReport> {
    if cases.is_empty() {
        return Err(Error::EmptyInput("test images"));
    }
    let mut best: Option<(f64, f64)> = None;
    let mut chosen = None;
    for alpha in alpha_grid() {
        let mut total = 0.0;
        for c in cases {
            total += recall(&enlarge_box(&c.prediction, alpha, &c.raw_bounds)?, c.mask)?;
        }
        let mean = total / cases.len() as f64;
        if mean >= RECALL_TARGET {
            chosen = Some((alpha, mean));
            break;
        }
        if best.is_none_or(|(_, r)| mean > r) {
            best = Some((alpha, mean));
        }
    }
    let (alpha_used, mean_recall) = chosen.or(best).expect("grid is nonempty");
    let ratios: Vec<f64> = cases
        .iter()
        .map(|c| {
            let e = enlarge_box(&c.prediction, alpha_used, &c.raw_bounds)?;
            Ok(c.raw_bounds.volume() / e.volume())
        })
        .collect::<Result<_>>()?;
    let n = ratios.len() as f64;
    let vr_mean = ratios.iter().sum::<f64>() / n;
    let vr_std = (ratios.iter().map(|r| (r - vr_mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(VrReport {
        alpha: chosen.map(|c| c.0),
        alpha_used,
        mean_recall,
        vr_mean,
        vr_std,
    })
}

/// Ground truth for one organ in one volume.
#[derive(Debug, Clone)]
pub struct OrganTruth<'a> {
    pub label: String,
    /// Edge points in [`EDGE_NAMES`] order.
    pub edges_mm: [Point3; 6],
    pub mask: MaskRef<'a>,
}

#[derive(Debug, Clone)]
pub struct LocalizationItem<'a> {
    pub id: String,
    pub map: &'a EmbeddingMap,
    pub organs: Vec<OrganTruth<'a>>,
    pub raw_bounds: Box3,
}

/// Shuffles `0..k` and cuts it into folds of `s`; volumes left over are test-only.
pub fn make_folds(k: usize, s: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if s == 0 || s >= k {
        return Err(Error::InvalidConfig(format!(
            "shot count {s} must lie in [1, {k}) for {k} volumes"
        )));
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.chunks_exact(s).map(|c| c.to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationDetail {
    pub fold: usize,
    pub organ: String,
    pub test_id: String,
    pub predicted: Box3,
    pub truth: Box3,
    pub iou: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrganReport {
    pub organ: String,
    pub cases: usize,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub vr: VrReport,
}

/// Cross-validation: each fold of `s` volumes provides the shots, every other volume is a
/// test image. VR@99 pools all (fold, test image) predictions per organ.
pub fn localization_protocol(
    items: &[LocalizationItem],
    s: usize,
    seed: u64,
) -> Result<(Vec<LocalizationDetail>, Vec<OrganReport>)> {
    let folds = make_folds(items.len(), s, seed)?;
    let labels: Vec<String> = items[0].organs.iter().map(|o| o.label.clone()).collect();
    let find = |item: &LocalizationItem, label: &str| -> Result<usize> {
        item.organs
            .iter()
            .position(|o| o.label == label)
            .ok_or_else(|| Error::InvalidArgument(format!("{} has no organ {label}", item.id)))
    };
    let mut details = Vec::new();
    let mut reports = Vec::new();
    for label in &labels {
        let mut vr_cases = Vec::new();
        let mut ious = Vec::new();
        for (f, fold) in folds.iter().enumerate() {
            let shots: Vec<Shot> = fold
                .iter()
                .map(|&i| {
                    let item = &items[i];
                    let organ = &item.organs[find(item, label)?];
                    let mut shot = [[0.0f32; 3]; 6];
                    for (q, p) in shot.iter_mut().zip(&organ.edges_mm) {
                        *q = query_embedding(item.map, *p)?;
                    }
                    Ok(shot)
                })
                .collect::<Result<_>>()?;
            for (t, item) in items.iter().enumerate() {
                if fold.contains(&t) {
                    continue;
                }
                let organ = &item.organs[find(item, label)?];
                let predicted = few_shot_box(&shots, item.map)?;
                let truth = mask_box(organ.mask)?;
                let v = iou(&predicted, &truth);
                ious.push(v);
                details.push(LocalizationDetail {
                    fold: f,
                    organ: label.clone(),
                    test_id: item.id.clone(),
                    predicted,
                    truth,
                    iou: v,
                    recall: recall(&predicted, organ.mask)?,
                });
                vr_cases.push(VrCase {
                    prediction: predicted,
                    mask: organ.mask,
                    raw_bounds: item.raw_bounds,
                });
            }
        }
        let (iou_mean, iou_std) = crate::retrieval::mre(&ious)?;
        reports.push(OrganReport {
            organ: label.clone(),
            cases: ious.len(),
            iou_mean,
            iou_std,
            vr: vr_at_99(&vr_cases)?,
        });
    }
    Ok((details, reports))
}
