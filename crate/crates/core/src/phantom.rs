//! Synthetic anatomies with exact ground truth.
//!
//! A phantom is an ellipsoidal soft-tissue body on an air background holding a set of
//! ellipsoidal organs. Every sample draws a global scale, a body shift, per-organ
//! center jitter and a smooth displacement field, so the anatomy varies between
//! samples while the relative order of organs along each axis stays fixed.

use std::fs;
use std::path::Path;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{self, Point3, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrganTemplate {
    pub label: String,
    /// Center in body-normalized coordinates: offset from the body center divided by the
    /// body radii.
    pub center: Point3,
    pub radii_mm: Point3,
    pub intensity_hu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomSpec {
    pub shape: [usize; 3],
    pub spacing_mm: Point3,
    pub body_radii_mm: Point3,
    pub body_hu: f64,
    pub background_hu: f64,
    pub organs: Vec<OrganTemplate>,
    /// Global anatomy scale drawn uniformly from `[lo, hi]`.
    pub scale_range: [f64; 2],
    /// Body center shift, uniform in `[-x, x]` per axis.
    pub body_shift_mm: f64,
    /// Organ center jitter, uniform in `[-x, x]` per axis.
    pub organ_jitter_mm: f64,
    /// Per-component bound of the smooth displacement field.
    pub deformation_mm: f64,
    /// Spacing of the displacement control grid.
    pub smoothness_mm: f64,
    pub noise_std_hu: f64,
}

const DEFAULT_ORGANS: [(&str, Point3, Point3, f64); 8] = [
    ("liver", [-0.525, 0.075, -0.075], [8.5, 8.0, 8.5], 60.0),
    ("spleen", [-0.375, 0.375, 0.375], [7.0, 7.5, 8.0], 45.0),
    ("kidney_left", [-0.225, -0.525, 0.225], [6.0, 6.5, 8.0], 150.0),
    ("kidney_right", [-0.075, -0.375, -0.525], [6.5, 6.0, 8.0], 110.0),
    ("pancreas", [0.075, 0.225, -0.375], [8.0, 6.0, 6.5], 30.0),
    ("stomach", [0.225, -0.075, 0.525], [8.0, 8.0, 7.0], -60.0),
    ("aorta", [0.375, 0.525, 0.075], [5.5, 5.5, 8.5], 200.0),
    ("gallbladder", [0.525, -0.225, -0.225], [6.0, 6.0, 6.0], 90.0),
];

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            shape: [64, 64, 48],
            spacing_mm: [2.0, 2.0, 3.0],
            body_radii_mm: [56.0, 50.0, 62.0],
            body_hu: 0.0,
            background_hu: -800.0,
            organs: DEFAULT_ORGANS
                .iter()
                .map(|&(label, center, radii_mm, intensity_hu)| OrganTemplate {
                    label: label.to_string(),
                    center,
                    radii_mm,
                    intensity_hu,
                })
                .collect(),
            scale_range: [0.95, 1.05],
            body_shift_mm: 2.0,
            organ_jitter_mm: 1.0,
            deformation_mm: 1.5,
            smoothness_mm: 40.0,
            noise_std_hu: 15.0,
        }
    }
}

fn max3(v: Point3) -> f64 {
    v[0].max(v[1]).max(v[2])
}

impl PhantomSpec {
    /// Checks the spec with interval arithmetic over the worst-case draws: organs stay
    /// disjoint, inside the body, inside the grid, and ordered identically along every axis.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.shape.iter().any(|&n| n == 0) {
            return bad(format!("grid shape {:?} has an empty axis", self.shape));
        }
        if self.spacing_mm.iter().any(|&s| !(s > 0.0)) {
            return bad(format!("spacing {:?} must be positive", self.spacing_mm));
        }
        if self.body_radii_mm.iter().any(|&r| !(r > 0.0)) {
            return bad("body radii must be positive".into());
        }
        let [s_min, s_max] = self.scale_range;
        if !(s_min > 0.0 && s_min <= s_max) {
            return bad(format!("scale range {:?} is not a positive interval", self.scale_range));
        }
        for (name, v) in [
            ("body_shift_mm", self.body_shift_mm),
            ("organ_jitter_mm", self.organ_jitter_mm),
            ("deformation_mm", self.deformation_mm),
            ("noise_std_hu", self.noise_std_hu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and >= 0"));
            }
        }
        if !(self.smoothness_mm > 0.0) {
            return bad("smoothness_mm must be positive".into());
        }
        if self.organs.is_empty() {
            return bad("at least one organ template is required".into());
        }
        for o in &self.organs {
            if o.radii_mm.iter().any(|&r| !(r > 0.0)) {
                return bad(format!("organ {} has a non-positive radius", o.label));
            }
            if self.organs.iter().filter(|p| p.label == o.label).count() > 1 {
                return bad(format!("duplicate organ label {}", o.label));
            }
        }

        let sqrt3 = 3f64.sqrt();
        let jitter = self.organ_jitter_mm * sqrt3;
        let deform = self.deformation_mm * sqrt3;

        // Body inside the grid.
        for a in 0..3 {
            let half = 0.5 * (self.shape[a] as f64 - 1.0) * self.spacing_mm[a];
            if self.body_radii_mm[a] * s_max + self.body_shift_mm + self.deformation_mm > half {
                return bad(format!("body does not fit the grid along axis {a}"));
            }
        }

        for o in &self.organs {
            let r = max3(o.radii_mm);
            for s in [s_min, s_max] {
                let q: f64 = (0..3)
                    .map(|a| {
                        let reach = o.center[a].abs() * self.body_radii_mm[a] * s
                            + self.organ_jitter_mm
                            + self.deformation_mm
                            + r * s;
                        (reach / (self.body_radii_mm[a] * s)).powi(2)
                    })
                    .sum();
                if q >= 1.0 {
                    return bad(format!("organ {} can leave the body", o.label));
                }
            }
        }

        for (i, a) in self.organs.iter().enumerate() {
            for b in &self.organs[i + 1..] {
                let dist = (0..3)
                    .map(|ax| ((a.center[ax] - b.center[ax]) * self.body_radii_mm[ax]).powi(2))
                    .sum::<f64>()
                    .sqrt();
                let needed = (max3(a.radii_mm) + max3(b.radii_mm)) * s_max + 2.0 * deform;
                if dist * s_min - 2.0 * jitter <= needed {
                    return bad(format!("organs {} and {} can overlap", a.label, b.label));
                }
                for ax in 0..3 {
                    let gap = (a.center[ax] - b.center[ax]).abs() * self.body_radii_mm[ax] * s_min;
                    let slack = 2.0 * (self.organ_jitter_mm + self.deformation_mm) + self.spacing_mm[ax];
                    if gap <= slack {
                        return bad(format!(
                            "organs {} and {} can swap order along axis {ax}",
                            a.label, b.label
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Ground-truth landmarks of one organ, in mm.
#[derive(Debug, Clone, PartialEq)]
pub struct OrganLandmarks {
    pub center: Point3,
    /// Ordered `(x-, x+, y-, y+, z-, z+)`.
    pub edges: [Point3; 6],
}

#[derive(Debug, Clone, PartialEq)]
pub struct OrganSample {
    pub label: String,
    pub mask: Array3<bool>,
    pub landmarks: OrganLandmarks,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub volume: Volume,
    pub organs: Vec<OrganSample>,
    pub seed: u64,
}

impl PhantomSample {
    pub fn organ(&self, label: &str) -> Option<&OrganSample> {
        self.organs.iter().find(|o| o.label == label)
    }
}

/// Smooth random displacement: control vectors on a coarse grid, trilinearly interpolated.
struct DisplacementField {
    nodes: [usize; 3],
    step: f64,
    values: Vec<[f64; 3]>,
}

impl DisplacementField {
    fn sample(extent: Point3, step: f64, amplitude: f64, rng: &mut impl Rng) -> Self {
        let nodes = extent.map(|e| (e / step).ceil() as usize + 2);
        let count = nodes.iter().product();
        let values = (0..count)
            .map(|_| {
                if amplitude > 0.0 {
                    [0; 3].map(|_| rng.random_range(-amplitude..=amplitude))
                } else {
                    [0.0; 3]
                }
            })
            .collect();
        Self { nodes, step, values }
    }

    /// `local` is the offset from the grid origin in mm.
    fn at(&self, local: Point3) -> Point3 {
        let mut base = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let u = (local[a] / self.step).clamp(0.0, (self.nodes[a] - 2) as f64);
            base[a] = (u.floor() as usize).min(self.nodes[a] - 2);
            frac[a] = u - base[a] as f64;
        }
        let mut out = [0.0; 3];
        for corner in 0..8 {
            let off = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
            let mut w = 1.0;
            for a in 0..3 {
                w *= if off[a] == 1 { frac[a] } else { 1.0 - frac[a] };
            }
            if w == 0.0 {
                continue;
            }
            let idx = ((base[0] + off[0]) * self.nodes[1] + base[1] + off[1]) * self.nodes[2]
                + base[2]
                + off[2];
            let v = self.values[idx];
            for a in 0..3 {
                out[a] += w * v[a];
            }
        }
        out
    }
}

pub fn generate_phantom(spec: &PhantomSpec, seed: u64) -> Result<PhantomSample> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [s_lo, s_hi] = spec.scale_range;
    let scale = if s_hi > s_lo { rng.random_range(s_lo..=s_hi) } else { s_lo };

    let origin = [0.0; 3];
    let extent: Point3 = [0, 1, 2].map(|a| (spec.shape[a] as f64 - 1.0) * spec.spacing_mm[a]);
    let shift = |rng: &mut ChaCha8Rng, x: f64| if x > 0.0 { rng.random_range(-x..=x) } else { 0.0 };

    let mut body_center = [0.0; 3];
    for a in 0..3 {
        body_center[a] = origin[a] + 0.5 * extent[a] + shift(&mut rng, spec.body_shift_mm);
    }
    let body_radii = spec.body_radii_mm.map(|r| r * scale);

    let organ_geom: Vec<(Point3, Point3)> = spec
        .organs
        .iter()
        .map(|o| {
            let mut c = [0.0; 3];
            for a in 0..3 {
                c[a] = body_center[a]
                    + o.center[a] * body_radii[a]
                    + shift(&mut rng, spec.organ_jitter_mm);
            }
            (c, o.radii_mm.map(|r| r * scale))
        })
        .collect();

    let field = DisplacementField::sample(extent, spec.smoothness_mm, spec.deformation_mm, &mut rng);
    let noise = Normal::new(0.0, spec.noise_std_hu).map_err(|e| Error::InvalidSpec(e.to_string()))?;

    let inside = |p: Point3, c: Point3, r: Point3| -> bool {
        (0..3).map(|a| ((p[a] - c[a]) / r[a]).powi(2)).sum::<f64>() <= 1.0
    };

    let shape = spec.shape;
    let mut labels = Array3::<u8>::zeros(shape);
    let mut data = Array3::<i16>::zeros(shape);
    for ((i, j, k), out) in data.indexed_iter_mut() {
        let x = volume::position_mm(origin, spec.spacing_mm, [i, j, k]);
        let local = [x[0] - origin[0], x[1] - origin[1], x[2] - origin[2]];
        let d = field.at(local);
        let y = [x[0] - d[0], x[1] - d[1], x[2] - d[2]];

        let mut hu = spec.background_hu;
        if inside(y, body_center, body_radii) {
            hu = spec.body_hu;
            if let Some(o) = organ_geom.iter().position(|&(c, r)| inside(y, c, r)) {
                labels[[i, j, k]] = o as u8 + 1;
                hu = spec.organs[o].intensity_hu;
            }
        }
        if spec.noise_std_hu > 0.0 {
            hu += noise.sample(&mut rng);
        }
        *out = hu.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16;
    }

    let volume = Volume::new(data, spec.spacing_mm, origin)?;
    let mut organs = Vec::with_capacity(spec.organs.len());
    for (o, template) in spec.organs.iter().enumerate() {
        let mask = labels.mapv(|l| l as usize == o + 1);
        let landmarks = organ_landmarks(&mask, spec.spacing_mm, origin).map_err(|_| {
            Error::InvalidSpec(format!("organ {} is empty for seed {seed}", template.label))
        })?;
        organs.push(OrganSample {
            label: template.label.clone(),
            mask,
            landmarks,
        });
    }
    Ok(PhantomSample {
        volume,
        organs,
        seed,
    })
}

pub fn organ_landmarks(mask: &Array3<bool>, spacing: Point3, origin: Point3) -> Result<OrganLandmarks> {
    Ok(OrganLandmarks {
        center: organ_center(mask, spacing, origin)?,
        edges: organ_edge_points(mask, spacing, origin)?,
    })
}

/// Mean physical coordinate of the mask voxels.
pub fn organ_center(mask: &Array3<bool>, spacing: Point3, origin: Point3) -> Result<Point3> {
    let mut sum = [0.0; 3];
    let mut count = 0usize;
    for ((i, j, k), &m) in mask.indexed_iter() {
        if m {
            for (a, idx) in [i, j, k].into_iter().enumerate() {
                sum[a] += idx as f64;
            }
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyMask);
    }
    Ok([0, 1, 2].map(|a| origin[a] + sum[a] / count as f64 * spacing[a]))
}

/// The six extreme voxels of a mask, two per axis.
///
/// Among the voxels attaining an extreme index along an axis, the one closest (in mm) to
/// the mask centroid in the remaining two axes wins; remaining ties go to the first voxel
/// in C order.
pub fn organ_edge_points(mask: &Array3<bool>, spacing: Point3, origin: Point3) -> Result<[Point3; 6]> {
    let centroid = organ_center(mask, spacing, origin)?;
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    for ((i, j, k), &m) in mask.indexed_iter() {
        if m {
            for (a, idx) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(idx);
                hi[a] = hi[a].max(idx);
            }
        }
    }

    let mut best = [(f64::INFINITY, [0usize; 3]); 6];
    for ((i, j, k), &m) in mask.indexed_iter() {
        if !m {
            continue;
        }
        let idx = [i, j, k];
        let p = volume::position_mm(origin, spacing, idx);
        for a in 0..3 {
            let off: f64 = (0..3)
                .filter(|&b| b != a)
                .map(|b| (p[b] - centroid[b]).powi(2))
                .sum();
            for (slot, extreme) in [(2 * a, lo[a]), (2 * a + 1, hi[a])] {
                if idx[a] == extreme && off < best[slot].0 {
                    best[slot] = (off, idx);
                }
            }
        }
    }
    Ok(best.map(|(_, idx)| volume::position_mm(origin, spacing, idx)))
}

const LANDMARK_HEADER: [&str; 22] = [
    "label", "center_x", "center_y", "center_z", "xmin_x", "xmin_y", "xmin_z", "xmax_x",
    "xmax_y", "xmax_z", "ymin_x", "ymin_y", "ymin_z", "ymax_x", "ymax_y", "ymax_z", "zmin_x",
    "zmin_y", "zmin_z", "zmax_x", "zmax_y", "zmax_z",
];

/// Writes `volume.{raw,meta}`, one `mask_<label>.{raw,meta}` per organ and `landmarks.csv`.
pub fn save_phantom(sample: &PhantomSample, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let v = &sample.volume;
    volume::save_volume(v, dir.join("volume"))?;
    for o in &sample.organs {
        volume::save_mask(&o.mask, v.spacing, v.origin, dir.join(format!("mask_{}", o.label)))?;
    }
    let mut w = csv::Writer::from_path(dir.join("landmarks.csv"))?;
    w.write_record(LANDMARK_HEADER)?;
    for o in &sample.organs {
        let mut row = vec![o.label.clone()];
        for p in std::iter::once(&o.landmarks.center).chain(o.landmarks.edges.iter()) {
            row.extend(p.iter().map(|x| x.to_string()));
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(dir.join("landmarks.csv"), e))?;
    Ok(())
}

pub fn load_phantom(dir: impl AsRef<Path>, seed: u64) -> Result<PhantomSample> {
    let dir = dir.as_ref();
    let volume = volume::load_volume(dir.join("volume"))?;
    let path = dir.join("landmarks.csv");
    let mut r = csv::Reader::from_path(&path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(&path, io),
        other => Error::MalformedHeader {
            path: path.clone(),
            reason: format!("{other:?}"),
        },
    })?;
    let mut organs = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let malformed = |reason: String| Error::MalformedHeader {
            path: path.clone(),
            reason,
        };
        if rec.len() != LANDMARK_HEADER.len() {
            return Err(malformed(format!("expected 22 fields, got {}", rec.len())));
        }
        let mut nums = [0.0; 21];
        for (n, field) in nums.iter_mut().zip(rec.iter().skip(1)) {
            *n = field
                .parse()
                .map_err(|_| malformed(format!("bad number {field:?}")))?;
        }
        let pt = |i: usize| [nums[3 * i], nums[3 * i + 1], nums[3 * i + 2]];
        let label = rec[0].to_string();
        let (mask, _, _) = volume::load_mask(dir.join(format!("mask_{label}")))?;
        if mask.dim() != volume.data.dim() {
            return Err(malformed(format!("mask {label} does not match the volume grid")));
        }
        organs.push(OrganSample {
            label,
            mask,
            landmarks: OrganLandmarks {
                center: pt(0),
                edges: [pt(1), pt(2), pt(3), pt(4), pt(5), pt(6)],
            },
        });
    }
    Ok(PhantomSample {
        volume,
        organs,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet_spec() -> PhantomSpec {
        PhantomSpec {
            shape: [33, 33, 33],
            spacing_mm: [1.0; 3],
            body_radii_mm: [14.0; 3],
            organs: vec![OrganTemplate {
                label: "blob".into(),
                center: [0.5, 0.0, -0.25],
                radii_mm: [3.0, 2.0, 2.5],
                intensity_hu: 80.0,
            }],
            scale_range: [1.0, 1.0],
            body_shift_mm: 0.0,
            organ_jitter_mm: 0.0,
            deformation_mm: 0.0,
            noise_std_hu: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn default_spec_is_valid() {
        PhantomSpec::default().validate().unwrap();
    }

    #[test]
    fn same_seed_same_sample() {
        let spec = PhantomSpec::default();
        let a = generate_phantom(&spec, 7).unwrap();
        let b = generate_phantom(&spec, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_phantom(&spec, 8).unwrap();
        assert_ne!(a.volume.data, c.volume.data);
    }

    #[test]
    fn undisturbed_center_matches_template() {
        let spec = quiet_spec();
        let s = generate_phantom(&spec, 3).unwrap();
        // Body center is the grid center (16 mm); organ at 16 + 0.5 * 14 etc.
        let c = s.organs[0].landmarks.center;
        let want = [23.0, 16.0, 12.5];
        for a in 0..3 {
            assert!((c[a] - want[a]).abs() < 1e-9, "{c:?}");
        }
        assert_eq!(s.volume.data[[23, 16, 12]], 80);
        assert_eq!(s.volume.data[[0, 0, 0]], -800);
        assert_eq!(s.volume.data[[16, 16, 16]], 0);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = quiet_spec();
        spec.organs[0].radii_mm[1] = 0.0;
        assert!(matches!(spec.validate(), Err(Error::InvalidSpec(_))));

        let mut spec = quiet_spec();
        let mut twin = spec.organs[0].clone();
        twin.label = "twin".into();
        twin.center[0] -= 0.1;
        spec.organs.push(twin);
        assert!(matches!(generate_phantom(&spec, 0), Err(Error::InvalidSpec(_))));

        let mut spec = PhantomSpec::default();
        spec.organ_jitter_mm = 4.0;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn center_of_single_and_paired_voxels() {
        let mut m = Array3::from_elem((4, 4, 4), false);
        m[[1, 2, 3]] = true;
        assert_eq!(organ_center(&m, [1.0; 3], [0.0; 3]).unwrap(), [1.0, 2.0, 3.0]);

        let mut m = Array3::from_elem((3, 1, 1), false);
        m[[0, 0, 0]] = true;
        m[[2, 0, 0]] = true;
        assert_eq!(organ_center(&m, [1.0; 3], [0.0; 3]).unwrap(), [1.0, 0.0, 0.0]);

        let empty = Array3::from_elem((2, 2, 2), false);
        assert!(matches!(organ_center(&empty, [1.0; 3], [0.0; 3]), Err(Error::EmptyMask)));
        assert!(matches!(organ_edge_points(&empty, [1.0; 3], [0.0; 3]), Err(Error::EmptyMask)));
    }

    #[test]
    fn center_of_cube_by_brute_force() {
        let mut m = Array3::from_elem((10, 10, 10), false);
        let mut sum = [0.0; 3];
        let mut n = 0.0;
        for i in 4..7 {
            for j in 4..7 {
                for k in 4..7 {
                    m[[i, j, k]] = true;
                    sum[0] += i as f64 * 2.0;
                    sum[1] += j as f64 * 2.0;
                    sum[2] += k as f64 * 3.0;
                    n += 1.0;
                }
            }
        }
        let oracle = sum.map(|s| s / n);
        assert_eq!(oracle, [10.0, 10.0, 15.0]);
        let c = organ_center(&m, [2.0, 2.0, 3.0], [0.0; 3]).unwrap();
        for a in 0..3 {
            assert!((c[a] - oracle[a]).abs() < 1e-12);
        }
    }

    #[test]
    fn edge_points_of_single_voxel_and_box() {
        let mut m = Array3::from_elem((5, 5, 5), false);
        m[[2, 1, 4]] = true;
        let e = organ_edge_points(&m, [1.0, 2.0, 3.0], [1.0, 0.0, 0.0]).unwrap();
        assert!(e.iter().all(|p| *p == [3.0, 2.0, 12.0]));

        let mut m = Array3::from_elem((9, 9, 9), false);
        for i in 1..6 {
            for j in 2..5 {
                for k in 3..8 {
                    m[[i, j, k]] = true;
                }
            }
        }
        let e = organ_edge_points(&m, [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(
            e,
            [
                [1.0, 3.0, 5.0],
                [5.0, 3.0, 5.0],
                [3.0, 2.0, 5.0],
                [3.0, 4.0, 5.0],
                [3.0, 3.0, 3.0],
                [3.0, 3.0, 7.0]
            ]
        );
    }

    #[test]
    fn edge_points_match_exhaustive_argmin() {
        let spec = PhantomSpec::default();
        let s = generate_phantom(&spec, 11).unwrap();
        for o in &s.organs {
            let v = &s.volume;
            let pts: Vec<Point3> = o
                .mask
                .indexed_iter()
                .filter(|(_, &m)| m)
                .map(|((i, j, k), _)| v.position_mm([i, j, k]))
                .collect();
            let n = pts.len() as f64;
            let c = [0, 1, 2].map(|a| pts.iter().map(|p| p[a]).sum::<f64>() / n);
            for a in 0..3 {
                for (slot, take_max) in [(2 * a, false), (2 * a + 1, true)] {
                    let extreme = pts
                        .iter()
                        .map(|p| p[a])
                        .fold(if take_max { f64::MIN } else { f64::MAX }, |m, x| {
                            if take_max { m.max(x) } else { m.min(x) }
                        });
                    let cost = |p: &Point3| -> f64 {
                        (0..3).filter(|&b| b != a).map(|b| (p[b] - c[b]).powi(2)).sum()
                    };
                    let best = pts
                        .iter()
                        .filter(|p| p[a] == extreme)
                        .map(cost)
                        .fold(f64::INFINITY, f64::min);
                    let got = o.landmarks.edges[slot];
                    assert_eq!(got[a], extreme);
                    assert!((cost(&got) - best).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn default_spec_masks_nonempty_disjoint_and_ordered() {
        let spec = PhantomSpec::default();
        let mut reference_order: Option<[Vec<usize>; 3]> = None;
        for seed in 0..100 {
            let s = generate_phantom(&spec, seed).unwrap();
            let mut owner = Array3::<u8>::zeros(s.volume.data.dim());
            for o in &s.organs {
                assert!(o.mask.iter().any(|&m| m), "empty organ {} seed {seed}", o.label);
                for (idx, &m) in o.mask.indexed_iter() {
                    if m {
                        assert_eq!(owner[idx], 0, "overlap at {idx:?} seed {seed}");
                        owner[idx] = 1;
                    }
                }
                // Landmarks inside the mask bounding box, edge voxels on the surface.
                let edges = o.landmarks.edges;
                for a in 0..3 {
                    let (lo, hi) = (edges[2 * a][a], edges[2 * a + 1][a]);
                    assert!(o.landmarks.center[a] >= lo && o.landmarks.center[a] <= hi);
                }
                for p in edges {
                    let idx = [0, 1, 2].map(|a| (p[a] / spec.spacing_mm[a]).round() as usize);
                    assert!(o.mask[idx]);
                    let dims: [usize; 3] = o.mask.dim().into();
                    let on_surface = (0..3).any(|a| {
                        [-1i64, 1].iter().any(|&d| {
                            let n = idx[a] as i64 + d;
                            if n < 0 || n >= dims[a] as i64 {
                                return true;
                            }
                            let mut q = idx;
                            q[a] = n as usize;
                            !o.mask[q]
                        })
                    });
                    assert!(on_surface);
                }
            }
            let order = [0, 1, 2].map(|a| {
                let mut ids: Vec<usize> = (0..s.organs.len()).collect();
                ids.sort_by(|&x, &y| {
                    s.organs[x].landmarks.center[a].total_cmp(&s.organs[y].landmarks.center[a])
                });
                ids
            });
            match &reference_order {
                None => reference_order = Some(order),
                Some(r) => assert_eq!(r, &order, "organ order changed at seed {seed}"),
            }
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let s = generate_phantom(&PhantomSpec::default(), 5).unwrap();
        save_phantom(&s, dir.path()).unwrap();
        assert!(dir.path().join("mask_liver.raw").exists());
        let back = load_phantom(dir.path(), 5).unwrap();
        assert_eq!(back, s);
    }
}
