//! Training batch construction: overlapping augmented patch pairs with positive voxel
//! pairs, independent patches for the naive procedure, and coordinate normalization.
//!
//! Every patch keeps an exact affine map from its voxel indices to the physical mm frame
//! of the raw image, so target distances are always measured in that frame.

use ndarray::{s, Array3};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{Box3, Point3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_rescale: f64,
    pub p_mask: f64,
    /// Range of the masked box side as a fraction of the patch side.
    pub mask_fraction: [f64; 2],
    pub p_blur: f64,
    pub blur_sigma_vox: [f64; 2],
    pub p_sharpen: f64,
    pub sharpen_amount: [f64; 2],
    pub sharpen_sigma_vox: f64,
    pub p_noise: f64,
    pub noise_std_hu: [f64; 2],
    pub p_window: f64,
    pub window_lo_hu: [f64; 2],
    pub window_hi_hu: [f64; 2],
    pub background_hu: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            p_rescale: 1.0,
            p_mask: 0.3,
            mask_fraction: [0.1, 0.4],
            p_blur: 0.2,
            blur_sigma_vox: [0.5, 1.5],
            p_sharpen: 0.2,
            sharpen_amount: [0.5, 1.5],
            sharpen_sigma_vox: 1.0,
            p_noise: 0.3,
            noise_std_hu: [5.0, 30.0],
            p_window: 0.3,
            window_lo_hu: [-1000.0, -200.0],
            window_hi_hu: [200.0, 1000.0],
            background_hu: -1000.0,
        }
    }
}

impl AugmentConfig {
    /// Every augmentation disabled.
    pub fn none() -> Self {
        Self {
            p_rescale: 0.0,
            p_mask: 0.0,
            p_blur: 0.0,
            p_sharpen: 0.0,
            p_noise: 0.0,
            p_window: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_rescale", self.p_rescale),
            ("p_mask", self.p_mask),
            ("p_blur", self.p_blur),
            ("p_sharpen", self.p_sharpen),
            ("p_noise", self.p_noise),
            ("p_window", self.p_window),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("aug.{name} must lie in [0, 1]")));
            }
        }
        if self.p_blur + self.p_sharpen > 1.0 {
            return Err(Error::InvalidConfig("aug.p_blur + aug.p_sharpen must not exceed 1".into()));
        }
        let ranges = [
            ("mask_fraction", self.mask_fraction),
            ("blur_sigma_vox", self.blur_sigma_vox),
            ("sharpen_amount", self.sharpen_amount),
            ("noise_std_hu", self.noise_std_hu),
            ("window_lo_hu", self.window_lo_hu),
            ("window_hi_hu", self.window_hi_hu),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(Error::InvalidConfig(format!("aug.{name} must be an ordered [lo, hi] range")));
            }
        }
        if !(self.mask_fraction[0] > 0.0 && self.mask_fraction[1] <= 1.0) {
            return Err(Error::InvalidConfig("aug.mask_fraction must lie in (0, 1]".into()));
        }
        if self.blur_sigma_vox[0] <= 0.0 || self.sharpen_sigma_vox <= 0.0 || self.noise_std_hu[0] < 0.0 {
            return Err(Error::InvalidConfig("aug sigmas must be positive".into()));
        }
        if self.window_lo_hu[1] >= self.window_hi_hu[0] {
            return Err(Error::InvalidConfig("aug window ranges must not overlap".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    /// Reference patch shape; drawn shapes keep roughly this voxel count.
    pub patch_budget: [usize; 3],
    pub aspect_ratio_max: f64,
    /// Lower bound on every patch axis (the model's minimum input size).
    pub min_patch_size: usize,
    pub spacing_min_mm: Point3,
    pub spacing_max_mm: Point3,
    pub min_overlap_fraction: f64,
    pub placement_tries: usize,
    pub aug: AugmentConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            patch_budget: [32, 32, 24],
            aspect_ratio_max: 2.0,
            min_patch_size: 16,
            spacing_min_mm: [2.0, 2.0, 3.0],
            spacing_max_mm: [4.0, 4.0, 6.0],
            min_overlap_fraction: 0.25,
            placement_tries: 200,
            aug: AugmentConfig::default(),
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("sampler: {m}")));
        if self.min_patch_size == 0 || self.patch_budget.iter().any(|&n| n < self.min_patch_size) {
            return bad("patch_budget must be at least min_patch_size along every axis");
        }
        let (lo, hi) = (
            *self.patch_budget.iter().min().unwrap() as f64,
            *self.patch_budget.iter().max().unwrap() as f64,
        );
        if !(self.aspect_ratio_max >= 1.0) || hi / lo > self.aspect_ratio_max {
            return bad("aspect_ratio_max must be >= 1 and admit the budget shape");
        }
        for a in 0..3 {
            if !(self.spacing_min_mm[a] > 0.0 && self.spacing_min_mm[a] <= self.spacing_max_mm[a]) {
                return bad("spacing range must be positive and ordered");
            }
        }
        if !(self.min_overlap_fraction > 0.0 && self.min_overlap_fraction <= 1.0) {
            return bad("min_overlap_fraction must lie in (0, 1]");
        }
        if self.placement_tries == 0 {
            return bad("placement_tries must be positive");
        }
        self.aug.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Filter {
    Blur { sigma_vox: f64 },
    Sharpen { amount: f64, sigma_vox: f64 },
}

/// Augmentation parameters; also serves as the record of what was applied to a patch.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AugmentPlan {
    /// Target voxel spacing of the trilinear rescale.
    pub spacing_mm: Option<Point3>,
    /// Masked box as (start, size) fractions of the patch extent per axis.
    pub mask: Option<[[f64; 2]; 3]>,
    pub filter: Option<Filter>,
    pub noise_std_hu: Option<f64>,
    /// Noise stream seed, so the plan alone reproduces the patch.
    pub noise_seed: u64,
    pub window_hu: Option<[f64; 2]>,
}

pub type AugmentRecord = AugmentPlan;

impl AugmentPlan {
    pub fn is_identity(&self) -> bool {
        self.spacing_mm.is_none()
            && self.mask.is_none()
            && self.filter.is_none()
            && self.noise_std_hu.is_none()
            && self.window_hu.is_none()
    }

    /// Draws a plan; the rescale spacing is uniform per axis in the configured range.
    pub fn draw<R: Rng + ?Sized>(rng: &mut R, cfg: &SamplerConfig) -> Self {
        let aug = &cfg.aug;
        let uniform = |r: [f64; 2], rng: &mut R| {
            if r[0] < r[1] {
                rng.random_range(r[0]..=r[1])
            } else {
                r[0]
            }
        };
        let mut plan = AugmentPlan::default();
        if rng.random_bool(aug.p_rescale) {
            plan.spacing_mm = Some(std::array::from_fn(|a| {
                uniform([cfg.spacing_min_mm[a], cfg.spacing_max_mm[a]], rng)
            }));
        }
        if rng.random_bool(aug.p_mask) {
            plan.mask = Some(std::array::from_fn(|_| {
                let size = uniform(aug.mask_fraction, rng);
                [rng.random_range(0.0..=1.0 - size), size]
            }));
        }
        let u: f64 = rng.random();
        if u < aug.p_blur {
            plan.filter = Some(Filter::Blur {
                sigma_vox: uniform(aug.blur_sigma_vox, rng),
            });
        } else if u < aug.p_blur + aug.p_sharpen {
            plan.filter = Some(Filter::Sharpen {
                amount: uniform(aug.sharpen_amount, rng),
                sigma_vox: aug.sharpen_sigma_vox,
            });
        }
        if rng.random_bool(aug.p_noise) {
            plan.noise_std_hu = Some(uniform(aug.noise_std_hu, rng));
            plan.noise_seed = rng.random();
        }
        if rng.random_bool(aug.p_window) {
            plan.window_hu = Some([uniform(aug.window_lo_hu, rng), uniform(aug.window_hi_hu, rng)]);
        }
        plan
    }
}

/// A crop of a volume together with its index -> mm map.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub data: Array3<f32>,
    /// Physical position of voxel (0, 0, 0) in the raw image frame.
    pub origin_mm: Point3,
    pub spacing_mm: Point3,
    pub record: AugmentRecord,
}

impl Patch {
    pub fn shape(&self) -> [usize; 3] {
        self.data.dim().into()
    }

    pub fn index_to_mm(&self, index: [f64; 3]) -> Point3 {
        std::array::from_fn(|a| self.origin_mm[a] + index[a] * self.spacing_mm[a])
    }

    pub fn mm_to_index(&self, p: Point3) -> [f64; 3] {
        std::array::from_fn(|a| (p[a] - self.origin_mm[a]) / self.spacing_mm[a])
    }

    pub fn voxel_mm(&self, index: [usize; 3]) -> Point3 {
        self.index_to_mm(index.map(|i| i as f64))
    }

    /// Box spanned by the first and last voxel centers.
    pub fn footprint(&self) -> Box3 {
        let sh = self.shape();
        Box3::new(self.origin_mm, self.index_to_mm(sh.map(|n| (n - 1) as f64)))
    }
}

/// Plain crop at native spacing.
pub fn crop_patch(volume: &Volume, start: [usize; 3], shape: [usize; 3]) -> Result<Patch> {
    let vs = volume.shape();
    if (0..3).any(|a| shape[a] == 0 || start[a] + shape[a] > vs[a]) {
        return Err(Error::InvalidArgument(format!(
            "crop {start:?}+{shape:?} exceeds volume {vs:?}"
        )));
    }
    let data = volume
        .data
        .slice(s![
            start[0]..start[0] + shape[0],
            start[1]..start[1] + shape[1],
            start[2]..start[2] + shape[2]
        ])
        .mapv(f32::from);
    Ok(Patch {
        data,
        origin_mm: volume.position_mm(start),
        spacing_mm: volume.spacing,
        record: AugmentRecord::default(),
    })
}

/// Number of voxels at `new` spacing covering `n` voxels at `old` spacing.
fn rescaled_len(n: usize, old: f64, new: f64) -> usize {
    // Small tolerance so exact ratios (e.g. 2x) are not lost to rounding.
    (((n - 1) as f64 * old / new) + 1e-9).floor() as usize + 1
}

/// Trilinear resample to `spacing`, keeping voxel 0 in place.
fn rescale(p: &Patch, spacing: Point3) -> Patch {
    let sh = p.shape();
    let out: [usize; 3] = std::array::from_fn(|a| rescaled_len(sh[a], p.spacing_mm[a], spacing[a]));
    let taps: [Vec<(usize, usize, f32)>; 3] = std::array::from_fn(|a| {
        (0..out[a])
            .map(|i| {
                let x = (i as f64 * spacing[a] / p.spacing_mm[a]).min((sh[a] - 1) as f64);
                let i0 = x.floor() as usize;
                let i1 = (i0 + 1).min(sh[a] - 1);
                (i0, i1, (x - i0 as f64) as f32)
            })
            .collect()
    });
    let src = &p.data;
    let data = Array3::from_shape_fn((out[0], out[1], out[2]), |(i, j, k)| {
        let (a0, a1, wa) = taps[0][i];
        let (b0, b1, wb) = taps[1][j];
        let (c0, c1, wc) = taps[2][k];
        let lerp = |x: f32, y: f32, w: f32| x + (y - x) * w;
        let plane = |a: usize| {
            lerp(
                lerp(src[[a, b0, c0]], src[[a, b0, c1]], wc),
                lerp(src[[a, b1, c0]], src[[a, b1, c1]], wc),
                wb,
            )
        };
        lerp(plane(a0), plane(a1), wa)
    });
    Patch {
        data,
        origin_mm: p.origin_mm,
        spacing_mm: spacing,
        record: p.record.clone(),
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let r = (3.0 * sigma).ceil().max(1.0) as isize;
    let w: Vec<f64> = (-r..=r).map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|v| (v / total) as f32).collect()
}

/// Separable Gaussian filter with replicate borders.
fn gaussian_blur(data: &Array3<f32>, sigma: f64) -> Array3<f32> {
    let kernel = gaussian_kernel(sigma);
    let r = (kernel.len() / 2) as isize;
    let mut cur = data.clone();
    for axis in 0..3 {
        let n = cur.shape()[axis] as isize;
        let mut next = Array3::<f32>::zeros(cur.raw_dim());
        for ((i, j, k), out) in next.indexed_iter_mut() {
            let idx = [i, j, k];
            let mut acc = 0.0;
            for (t, &w) in kernel.iter().enumerate() {
                let mut src = idx;
                src[axis] = (idx[axis] as isize + t as isize - r).clamp(0, n - 1) as usize;
                acc += w * cur[src];
            }
            *out = acc;
        }
        cur = next;
    }
    cur
}

fn apply_intensity(p: &mut Patch, plan: &AugmentPlan, background_hu: f64) {
    let sh = p.shape();
    if let Some(mask) = plan.mask {
        let r: [(usize, usize); 3] = std::array::from_fn(|a| {
            let n = sh[a] as f64;
            let lo = (mask[a][0] * n).floor() as usize;
            let len = ((mask[a][1] * n).round() as usize).max(1);
            (lo.min(sh[a] - 1), (lo + len).min(sh[a]))
        });
        p.data
            .slice_mut(s![r[0].0..r[0].1, r[1].0..r[1].1, r[2].0..r[2].1])
            .fill(background_hu as f32);
    }
    match plan.filter {
        Some(Filter::Blur { sigma_vox }) => p.data = gaussian_blur(&p.data, sigma_vox),
        Some(Filter::Sharpen { amount, sigma_vox }) => {
            let blurred = gaussian_blur(&p.data, sigma_vox);
            let a = amount as f32;
            p.data.zip_mut_with(&blurred, |x, &b| *x += a * (*x - b));
        }
        None => {}
    }
    if let Some(std) = plan.noise_std_hu {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(plan.noise_seed);
        let normal = Normal::new(0.0f32, std as f32).expect("finite noise std");
        p.data.iter_mut().for_each(|v| *v += normal.sample(&mut rng));
    }
    if let Some([lo, hi]) = plan.window_hu {
        p.data.mapv_inplace(|v| v.clamp(lo as f32, hi as f32));
    }
}

/// Applies a plan: rescale first (the only step that changes the index -> mm map), then
/// masking, blur or sharpening, noise, and window clipping.
pub fn apply_augment(p: &Patch, plan: &AugmentPlan, cfg: &AugmentConfig) -> Patch {
    let mut out = match plan.spacing_mm {
        Some(sp) => rescale(p, sp),
        None => p.clone(),
    };
    apply_intensity(&mut out, plan, cfg.background_hu);
    out.record = plan.clone();
    out
}

pub fn augment_patch<R: Rng + ?Sized>(p: &Patch, rng: &mut R, cfg: &SamplerConfig) -> Patch {
    let plan = AugmentPlan::draw(rng, cfg);
    apply_augment(p, &plan, &cfg.aug)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchPair {
    pub patch_a: Patch,
    pub patch_b: Patch,
    /// Intersection of the two footprints in raw-image mm.
    pub overlap_region: Box3,
}

/// Overlap volume divided by the smaller footprint volume.
pub fn overlap_fraction(a: &Box3, b: &Box3) -> f64 {
    let smaller = a.volume().min(b.volume());
    match a.intersection(b) {
        Some(i) if smaller > 0.0 => i.volume() / smaller,
        Some(_) => 1.0,
        None => 0.0,
    }
}

/// Patch shape near the budget with a bounded aspect ratio.
fn draw_shape<R: Rng + ?Sized>(rng: &mut R, cfg: &SamplerConfig) -> [usize; 3] {
    let budget = cfg.patch_budget;
    for _ in 0..100 {
        let u: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.3..=0.3));
        let mean = (u[0] + u[1] + u[2]) / 3.0;
        let shape: [usize; 3] =
            std::array::from_fn(|a| (budget[a] as f64 * (u[a] - mean).exp()).round() as usize);
        let lo = *shape.iter().min().unwrap() as f64;
        let hi = *shape.iter().max().unwrap() as f64;
        if lo >= cfg.min_patch_size as f64 && hi / lo <= cfg.aspect_ratio_max {
            return shape;
        }
    }
    budget
}

/// Crop geometry of one patch before augmentation.
struct CropPlan {
    /// Raw voxels covered along each axis.
    raw_len: [usize; 3],
    /// Voxel spacing after rescaling.
    spacing: Point3,
    /// Final voxel count per axis.
    shape: [usize; 3],
}

fn plan_crop(volume: &Volume, shape: [usize; 3], spacing: Option<Point3>, min_size: usize) -> CropPlan {
    let vs = volume.shape();
    let raw = volume.spacing;
    let mut sp = spacing.unwrap_or(raw);
    let mut out = [0; 3];
    let mut raw_len = [0; 3];
    for a in 0..3 {
        // Coarser than the volume allows: shrink the spacing so min_size voxels still fit.
        let coarsest = (vs[a] - 1) as f64 * raw[a] / (min_size.max(2) - 1) as f64;
        if sp[a] > coarsest {
            sp[a] = coarsest.max(raw[a].min(sp[a]));
        }
        out[a] = shape[a].min(rescaled_len(vs[a], raw[a], sp[a]));
        raw_len[a] = (((out[a] - 1) as f64 * sp[a] / raw[a]) - 1e-9).ceil().max(0.0) as usize + 1;
        raw_len[a] = raw_len[a].min(vs[a]);
    }
    CropPlan {
        raw_len,
        spacing: sp,
        shape: out,
    }
}

fn crop_footprint(volume: &Volume, start: [usize; 3], plan: &CropPlan) -> Box3 {
    let lo = volume.position_mm(start);
    let hi = std::array::from_fn(|a| lo[a] + (plan.shape[a] - 1) as f64 * plan.spacing[a]);
    Box3::new(lo, hi)
}

fn check_volume(volume: &Volume, cfg: &SamplerConfig) -> Result<()> {
    let min = cfg.min_patch_size;
    if volume.shape().iter().any(|&n| n < min) {
        return Err(Error::VolumeTooSmall {
            min: [min; 3],
            got: volume.shape(),
        });
    }
    Ok(())
}

fn build_patch(volume: &Volume, start: [usize; 3], plan: &CropPlan, aug: &AugmentPlan, cfg: &AugmentConfig) -> Result<Patch> {
    let raw = crop_patch(volume, start, plan.raw_len)?;
    let mut aug = aug.clone();
    aug.spacing_mm = (plan.spacing != volume.spacing).then_some(plan.spacing);
    let mut p = apply_augment(&raw, &aug, cfg);
    // Rescale may yield one more voxel than planned; trim to the planned shape.
    if p.shape() != plan.shape {
        p.data = p.data.slice(s![..plan.shape[0], ..plan.shape[1], ..plan.shape[2]]).to_owned();
    }
    Ok(p)
}

/// Two overlapping, independently augmented crops of `volume`.
pub fn sample_patch_pair<R: Rng + ?Sized>(volume: &Volume, rng: &mut R, cfg: &SamplerConfig) -> Result<PatchPair> {
    check_volume(volume, cfg)?;
    let vs = volume.shape();
    let shape = draw_shape(rng, cfg);
    let aug_a = AugmentPlan::draw(rng, cfg);
    let aug_b = AugmentPlan::draw(rng, cfg);
    let plan_a = plan_crop(volume, shape, aug_a.spacing_mm, cfg.min_patch_size);
    let plan_b = plan_crop(volume, shape, aug_b.spacing_mm, cfg.min_patch_size);

    let start_a: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=vs[a] - plan_a.raw_len[a]));
    let fa = crop_footprint(volume, start_a, &plan_a);
    let required = cfg.min_overlap_fraction;

    // Candidate starts for B whose footprint touches A's along every axis.
    let ranges: [(usize, usize); 3] = std::array::from_fn(|a| {
        let ext_b = (plan_b.shape[a] - 1) as f64 * plan_b.spacing[a];
        let lo_mm = fa.min[a] - ext_b;
        let to_idx = |mm: f64| (mm - volume.origin[a]) / volume.spacing[a];
        let max_start = vs[a] - plan_b.raw_len[a];
        let lo = to_idx(lo_mm).ceil().clamp(0.0, max_start as f64) as usize;
        let hi = to_idx(fa.max[a]).floor().clamp(lo as f64, max_start as f64) as usize;
        (lo, hi)
    });
    let mut best: Option<(f64, [usize; 3])> = None;
    let mut chosen = None;
    for _ in 0..cfg.placement_tries {
        let start: [usize; 3] = std::array::from_fn(|a| rng.random_range(ranges[a].0..=ranges[a].1));
        let f = overlap_fraction(&fa, &crop_footprint(volume, start, &plan_b));
        if f >= required {
            chosen = Some(start);
            break;
        }
        if best.is_none_or(|(bf, _)| f > bf) {
            best = Some((f, start));
        }
    }
    if chosen.is_none() {
        // Concentric placement maximizes the overlap for boxes of fixed size.
        let center = fa.center();
        let start: [usize; 3] = std::array::from_fn(|a| {
            let half = 0.5 * (plan_b.shape[a] - 1) as f64 * plan_b.spacing[a];
            let idx = ((center[a] - half - volume.origin[a]) / volume.spacing[a]).round();
            idx.clamp(0.0, (vs[a] - plan_b.raw_len[a]) as f64) as usize
        });
        let f = overlap_fraction(&fa, &crop_footprint(volume, start, &plan_b));
        if f >= required {
            chosen = Some(start);
        } else if best.is_none_or(|(bf, _)| f > bf) {
            best = Some((f, start));
        }
    }
    let Some(start_b) = chosen else {
        return Err(Error::OverlapUnsatisfiable {
            required,
            best: best.map_or(0.0, |b| b.0),
        });
    };

    let patch_a = build_patch(volume, start_a, &plan_a, &aug_a, &cfg.aug)?;
    let patch_b = build_patch(volume, start_b, &plan_b, &aug_b, &cfg.aug)?;
    let overlap_region = patch_a
        .footprint()
        .intersection(&patch_b.footprint())
        .expect("placement guarantees an overlap");
    Ok(PatchPair {
        patch_a,
        patch_b,
        overlap_region,
    })
}

/// Positive voxel pairs: matched indices in both patches and the shared physical point.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelPairs {
    pub index_a: Vec<[usize; 3]>,
    pub index_b: Vec<[usize; 3]>,
    /// Physical coordinate of each pair (the center of the voxel in patch A).
    pub points_mm: Vec<Point3>,
}

fn nearest_index(p: &Patch, axis: usize, mm: f64) -> usize {
    let x = (mm - p.origin_mm[axis]) / p.spacing_mm[axis];
    x.round().clamp(0.0, (p.shape()[axis] - 1) as f64) as usize
}

/// Number of distinct voxels of `p` along `axis` whose centers lie in `[lo, hi]`,
/// widened by half a voxel (the values rounding can reach).
fn reachable(p: &Patch, axis: usize, lo: f64, hi: f64) -> usize {
    nearest_index(p, axis, hi) - nearest_index(p, axis, lo) + 1
}

/// Draws `k` points uniformly in the overlap region and snaps them to voxel centers:
/// first in the finer patch, then that center in the coarser patch, per axis.
pub fn sample_positive_pairs<R: Rng + ?Sized>(pair: &PatchPair, k: usize, rng: &mut R) -> Result<VoxelPairs> {
    let region = pair.overlap_region;
    let (pa, pb) = (&pair.patch_a, &pair.patch_b);
    let capacity: usize = (0..3).map(|a| reachable(pa, a, region.min[a], region.max[a])).product();
    if capacity < k {
        return Err(Error::OverlapTooSmall {
            capacity,
            requested: k,
        });
    }
    let mut seen = std::collections::HashSet::with_capacity(k);
    let mut out = VoxelPairs {
        index_a: Vec::with_capacity(k),
        index_b: Vec::with_capacity(k),
        points_mm: Vec::with_capacity(k),
    };
    let max_draws = 100 * k.max(1);
    for _ in 0..max_draws {
        if out.index_a.len() == k {
            break;
        }
        let mut ia = [0; 3];
        let mut ib = [0; 3];
        for a in 0..3 {
            let x = if region.max[a] > region.min[a] {
                rng.random_range(region.min[a]..=region.max[a])
            } else {
                region.min[a]
            };
            let a_finer = pa.spacing_mm[a] <= pb.spacing_mm[a];
            let (fine, coarse) = if a_finer { (pa, pb) } else { (pb, pa) };
            let i_f = nearest_index(fine, a, x);
            let center = fine.origin_mm[a] + i_f as f64 * fine.spacing_mm[a];
            let i_c = nearest_index(coarse, a, center);
            (ia[a], ib[a]) = if a_finer { (i_f, i_c) } else { (i_c, i_f) };
        }
        if seen.insert(ia) {
            out.index_a.push(ia);
            out.index_b.push(ib);
            out.points_mm.push(pa.voxel_mm(ia));
        }
    }
    if out.index_a.len() < k {
        return Err(Error::OverlapTooSmall {
            capacity: out.index_a.len(),
            requested: k,
        });
    }
    Ok(out)
}

/// `n` crops at native spacing without augmentation, each with its own drawn shape.
pub fn sample_independent_patches<R: Rng + ?Sized>(
    volume: &Volume,
    n: usize,
    rng: &mut R,
    cfg: &SamplerConfig,
) -> Result<Vec<Patch>> {
    check_volume(volume, cfg)?;
    let vs = volume.shape();
    (0..n)
        .map(|_| {
            let shape = draw_shape(rng, cfg);
            let shape: [usize; 3] = std::array::from_fn(|a| shape[a].min(vs[a]));
            let start: [usize; 3] = std::array::from_fn(|a| rng.random_range(0..=vs[a] - shape[a]));
            crop_patch(volume, start, shape)
        })
        .collect()
}

/// `k` distinct voxels drawn uniformly over the patch grid, with their mm coordinates.
pub fn sample_voxels<R: Rng + ?Sized>(p: &Patch, k: usize, rng: &mut R) -> Result<(Vec<[usize; 3]>, Vec<Point3>)> {
    let sh = p.shape();
    let total: usize = sh.iter().product();
    if k > total {
        return Err(Error::OverlapTooSmall {
            capacity: total,
            requested: k,
        });
    }
    let flat = rand::seq::index::sample(rng, total, k);
    let idx: Vec<[usize; 3]> = flat
        .iter()
        .map(|f| [f / (sh[1] * sh[2]), (f / sh[2]) % sh[1], f % sh[2]])
        .collect();
    let pts = idx.iter().map(|&i| p.voxel_mm(i)).collect();
    Ok((idx, pts))
}

/// Per-axis standardization of a point batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedCoords {
    pub points: Vec<Point3>,
    pub mean: Point3,
    pub std: Point3,
    /// Axes whose spread was below the floor and got `std = 1e-6`.
    pub degenerate: [bool; 3],
}

pub const COORD_STD_FLOOR: f64 = 1e-6;

pub fn normalize_coords(points: &[Point3]) -> Result<NormalizedCoords> {
    if points.len() < 2 {
        return Err(Error::InvalidArgument("normalization needs at least 2 points".into()));
    }
    let n = points.len() as f64;
    let mean: Point3 = std::array::from_fn(|a| points.iter().map(|p| p[a]).sum::<f64>() / n);
    let var: Point3 = std::array::from_fn(|a| points.iter().map(|p| (p[a] - mean[a]).powi(2)).sum::<f64>() / n);
    Ok(standardize(points, mean, var))
}

/// Per-axis mean and population variance of the voxel-center coordinates of all `patches`,
/// every voxel weighted equally.
pub fn patch_voxel_moments(patches: &[&Patch]) -> Result<(Point3, Point3)> {
    let total: f64 = patches.iter().map(|p| p.shape().iter().product::<usize>() as f64).sum();
    if total < 2.0 {
        return Err(Error::InvalidArgument("moments need at least 2 voxels".into()));
    }
    let mut mean = [0.0; 3];
    let mut second = [0.0; 3];
    for p in patches {
        let sh = p.shape();
        let w = sh.iter().product::<usize>() as f64 / total;
        for a in 0..3 {
            let n = sh[a] as f64;
            let m = p.origin_mm[a] + 0.5 * (n - 1.0) * p.spacing_mm[a];
            let v = p.spacing_mm[a].powi(2) * (n * n - 1.0) / 12.0;
            mean[a] += w * m;
            second[a] += w * (v + m * m);
        }
    }
    let var = std::array::from_fn(|a| (second[a] - mean[a] * mean[a]).max(0.0));
    Ok((mean, var))
}

/// Per-axis standardization of `points` with externally supplied moments.
pub fn normalize_coords_with(points: &[Point3], mean: Point3, var: Point3) -> Result<NormalizedCoords> {
    if points.is_empty() {
        return Err(Error::EmptyInput("points"));
    }
    Ok(standardize(points, mean, var))
}

fn standardize(points: &[Point3], mean: Point3, var: Point3) -> NormalizedCoords {
    let mut std = [0.0; 3];
    let mut degenerate = [false; 3];
    for a in 0..3 {
        std[a] = var[a].sqrt();
        if std[a] < COORD_STD_FLOOR {
            std[a] = COORD_STD_FLOOR;
            degenerate[a] = true;
        }
    }
    let normalized = points
        .iter()
        .map(|p| std::array::from_fn(|a| (p[a] - mean[a]) / std[a]))
        .collect();
    NormalizedCoords {
        points: normalized,
        mean,
        std,
        degenerate,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_phantom, PhantomSpec};
    use crate::volume::foreground_crop;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn phantom_volume(seed: u64) -> Volume {
        let s = generate_phantom(&PhantomSpec::default(), seed).unwrap();
        foreground_crop(&s.volume, crate::volume::DEFAULT_FOREGROUND_HU).volume
    }

    fn ramp_volume() -> Volume {
        let data = Array3::from_shape_fn((40, 36, 30), |(i, j, k)| (i * 7 + j * 3 + k) as i16);
        Volume::new(data, [1.0, 1.0, 1.5], [10.0, -5.0, 3.0]).unwrap()
    }

    #[test]
    fn pair_sampling_is_deterministic() {
        let v = phantom_volume(1);
        let cfg = SamplerConfig::default();
        let a = sample_patch_pair(&v, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        let b = sample_patch_pair(&v, &mut ChaCha8Rng::seed_from_u64(5), &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_overlap_without_augmentation_gives_identical_crops() {
        let v = ramp_volume();
        let cfg = SamplerConfig {
            min_overlap_fraction: 1.0,
            aug: AugmentConfig::none(),
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let pp = sample_patch_pair(&v, &mut rng, &cfg).unwrap();
            assert_eq!(pp.patch_a, pp.patch_b);
            let pairs = sample_positive_pairs(&pp, 50, &mut rng).unwrap();
            assert_eq!(pairs.index_a, pairs.index_b);
        }
    }

    #[test]
    fn sampled_pairs_respect_the_overlap_floor() {
        let v = phantom_volume(3);
        let cfg = SamplerConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..1000 {
            let pp = sample_patch_pair(&v, &mut rng, &cfg).unwrap();
            // Recompute footprints from the index maps alone.
            let fp = |p: &Patch| Box3::new(p.index_to_mm([0.0; 3]), p.index_to_mm(p.shape().map(|n| (n - 1) as f64)));
            let f = overlap_fraction(&fp(&pp.patch_a), &fp(&pp.patch_b));
            assert!(f >= 0.25 - 1e-12, "overlap {f}");
            for p in [&pp.patch_a, &pp.patch_b] {
                assert!(p.shape().iter().all(|&n| n >= cfg.min_patch_size));
            }
        }
    }

    #[test]
    fn too_small_volume_is_reported() {
        let v = Volume::new(Array3::zeros((10, 40, 40)), [1.0; 3], [0.0; 3]).unwrap();
        let cfg = SamplerConfig::default();
        let err = sample_patch_pair(&v, &mut ChaCha8Rng::seed_from_u64(0), &cfg).unwrap_err();
        assert!(matches!(err, Error::VolumeTooSmall { min: [16, 16, 16], .. }));
    }

    #[test]
    fn identity_augmentation() {
        let v = ramp_volume();
        let p = crop_patch(&v, [1, 2, 3], [20, 20, 20]).unwrap();
        let cfg = SamplerConfig {
            aug: AugmentConfig::none(),
            ..SamplerConfig::default()
        };
        let q = augment_patch(&p, &mut ChaCha8Rng::seed_from_u64(0), &cfg);
        assert_eq!(p, q);
        assert!(q.record.is_identity());
    }

    #[test]
    fn doubling_spacing_halves_voxels() {
        let v = ramp_volume();
        let p = crop_patch(&v, [0, 0, 0], [21, 21, 21]).unwrap();
        let plan = AugmentPlan {
            spacing_mm: Some([2.0, 2.0, 3.0]),
            ..AugmentPlan::default()
        };
        let q = apply_augment(&p, &plan, &AugmentConfig::none());
        assert_eq!(q.shape(), [11, 11, 11]);
        assert_eq!(q.spacing_mm, [2.0, 2.0, 3.0]);
        // Voxel i of the coarse patch samples raw voxel 2i exactly.
        for i in 0..11 {
            assert_eq!(q.data[[i, i, i]], p.data[[2 * i, 2 * i, 2 * i]]);
            assert_eq!(q.voxel_mm([i, i, i]), p.voxel_mm([2 * i, 2 * i, 2 * i]));
        }
    }

    #[test]
    fn window_clip_bounds_intensities() {
        let v = phantom_volume(0);
        let p = crop_patch(&v, [0, 0, 0], [20, 20, 20]).unwrap();
        let plan = AugmentPlan {
            window_hu: Some([-100.0, 200.0]),
            noise_std_hu: Some(50.0),
            ..AugmentPlan::default()
        };
        let q = apply_augment(&p, &plan, &AugmentConfig::default());
        assert!(q.data.iter().all(|&x| (-100.0..=200.0).contains(&x)));
        assert_eq!(q.origin_mm, p.origin_mm);
        assert_eq!(q.spacing_mm, p.spacing_mm);
    }

    #[test]
    fn intensity_ops_keep_the_index_map() {
        let v = ramp_volume();
        let p = crop_patch(&v, [2, 2, 2], [24, 24, 20]).unwrap();
        let plan = AugmentPlan {
            mask: Some([[0.1, 0.3]; 3]),
            filter: Some(Filter::Sharpen { amount: 1.0, sigma_vox: 1.0 }),
            noise_std_hu: Some(10.0),
            noise_seed: 3,
            ..AugmentPlan::default()
        };
        let q = apply_augment(&p, &plan, &AugmentConfig::default());
        assert_eq!(q.shape(), p.shape());
        assert_eq!((q.origin_mm, q.spacing_mm), (p.origin_mm, p.spacing_mm));
        assert_ne!(q.data, p.data);
    }

    #[test]
    fn blur_preserves_constants() {
        let data = Array3::from_elem((6, 7, 8), 12.5f32);
        let b = gaussian_blur(&data, 1.3);
        assert!(b.iter().all(|&v| (v - 12.5).abs() < 1e-4));
    }

    #[test]
    fn positive_pairs_agree_within_half_a_coarse_voxel() {
        let v = ramp_volume();
        let fine = crop_patch(&v, [0, 0, 0], [30, 30, 20]).unwrap();
        let coarse = apply_augment(
            &crop_patch(&v, [6, 4, 2], [33, 31, 27]).unwrap(),
            &AugmentPlan {
                spacing_mm: Some([2.0, 2.0, 3.0]),
                ..AugmentPlan::default()
            },
            &AugmentConfig::none(),
        );
        for (pa, pb) in [(&fine, &coarse), (&coarse, &fine)] {
            let region = pa.footprint().intersection(&pb.footprint()).unwrap();
            let pair = PatchPair {
                patch_a: pa.clone(),
                patch_b: pb.clone(),
                overlap_region: region,
            };
            let pairs = sample_positive_pairs(&pair, 200, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
            for i in 0..200 {
                let ma = pa.voxel_mm(pairs.index_a[i]);
                let mb = pb.voxel_mm(pairs.index_b[i]);
                assert_eq!(ma, pairs.points_mm[i]);
                for a in 0..3 {
                    let half = 0.5 * pa.spacing_mm[a].max(pb.spacing_mm[a]);
                    assert!((ma[a] - mb[a]).abs() <= half + 1e-9);
                }
            }
        }
    }

    #[test]
    fn positive_points_lie_in_the_overlap_box() {
        let v = phantom_volume(2);
        let cfg = SamplerConfig {
            aug: AugmentConfig {
                p_rescale: 0.0,
                ..AugmentConfig::default()
            },
            ..SamplerConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pp = sample_patch_pair(&v, &mut rng, &cfg).unwrap();
        let pairs = sample_positive_pairs(&pp, 100, &mut rng).unwrap();
        // Same spacing: snapped centers stay inside the (voxel-center) overlap box.
        for p in &pairs.points_mm {
            assert!(pp.overlap_region.contains(*p));
        }
        let distinct: std::collections::HashSet<_> = pairs.index_a.iter().collect();
        assert_eq!(distinct.len(), 100);
    }

    #[test]
    fn tiny_overlap_is_rejected() {
        let v = ramp_volume();
        let a = crop_patch(&v, [0, 0, 0], [20, 20, 20]).unwrap();
        let b = crop_patch(&v, [19, 19, 18], [20, 17, 12]).unwrap();
        let region = a.footprint().intersection(&b.footprint()).unwrap();
        let pair = PatchPair {
            patch_a: a,
            patch_b: b,
            overlap_region: region,
        };
        let err = sample_positive_pairs(&pair, 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(matches!(err, Error::OverlapTooSmall { requested: 5, .. }));
    }

    #[test]
    fn single_voxel_sample() {
        let v = ramp_volume();
        let p = crop_patch(&v, [3, 4, 5], [16, 16, 16]).unwrap();
        let (idx, pts) = sample_voxels(&p, 1, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(pts[0], p.index_to_mm(idx[0].map(|i| i as f64)));
    }

    #[test]
    fn disjoint_halves_only_have_long_cross_distances() {
        let v = ramp_volume();
        let left = crop_patch(&v, [0, 0, 0], [16, 36, 30]).unwrap();
        let right = crop_patch(&v, [24, 0, 0], [16, 36, 30]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (_, pl) = sample_voxels(&left, 50, &mut rng).unwrap();
        let (_, pr) = sample_voxels(&right, 50, &mut rng).unwrap();
        let gap = right.origin_mm[0] - left.index_to_mm([15.0, 0.0, 0.0])[0];
        for a in &pl {
            for b in &pr {
                let d = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt();
                assert!(d >= gap);
            }
        }
    }

    #[test]
    fn naive_batch_stays_inside_the_volume() {
        let v = phantom_volume(4);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let patches = sample_independent_patches(&v, 4, &mut rng, &SamplerConfig::default()).unwrap();
        let bounds = Box3::new(v.position_mm([0; 3]), v.position_mm(v.shape().map(|n| n - 1)));
        let mut count = 0;
        for p in &patches {
            assert!(p.record.is_identity());
            let (_, pts) = sample_voxels(p, 250, &mut rng).unwrap();
            count += pts.len();
            assert!(pts.iter().all(|&q| bounds.contains(q)));
        }
        assert_eq!(count, 1000);
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_coords(&[[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]]).unwrap();
        assert_eq!(n.points[0][0], -1.0);
        assert_eq!(n.points[1][0], 1.0);
        assert_eq!(n.degenerate, [false, true, true]);

        let pts: Vec<Point3> = (0..4).map(|i| [i as f64; 3]).collect();
        let n = normalize_coords(&pts).unwrap();
        let want = [-1.3416407864998738, -0.4472135954999579, 0.4472135954999579, 1.3416407864998738];
        for (p, w) in n.points.iter().zip(want) {
            for a in 0..3 {
                assert!((p[a] - w).abs() < 1e-12);
            }
        }
        assert!(normalize_coords(&pts[..1]).is_err());
    }

    #[test]
    fn patch_moments_match_enumerated_voxels() {
        let v = ramp_volume();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pp = sample_patch_pair(&v, &mut rng, &SamplerConfig::default()).unwrap();
        let patches = [&pp.patch_a, &pp.patch_b];
        let mut all = Vec::new();
        for p in patches {
            for idx in ndarray::indices(p.data.dim()) {
                all.push(p.voxel_mm(idx.into()));
            }
        }
        let direct = normalize_coords(&all).unwrap();
        let (mean, var) = patch_voxel_moments(&patches).unwrap();
        for a in 0..3 {
            assert!((mean[a] - direct.mean[a]).abs() < 1e-9);
            assert!((var[a].sqrt() - direct.std[a]).abs() < 1e-9);
        }
        let again = normalize_coords_with(&all, mean, var).unwrap();
        for (p, q) in again.points.iter().zip(&direct.points) {
            for a in 0..3 {
                assert!((p[a] - q[a]).abs() < 1e-9);
            }
        }
    }

    proptest::proptest! {
        #[test]
        fn normalized_batches_are_centered(seed in 0u64..500, n in 2usize..40) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pts: Vec<Point3> = (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-100.0..100.0))).collect();
            let out = normalize_coords(&pts).unwrap();
            for a in 0..3 {
                let m: f64 = out.points.iter().map(|p| p[a]).sum::<f64>() / n as f64;
                proptest::prop_assert!(m.abs() < 1e-6);
            }
        }
    }
}
