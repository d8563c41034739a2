//! Volumes, embedding maps and their on-disk formats.
//!
//! Volumes and masks use a sidecar pair: `<name>.raw` holds the C-order little-endian
//! payload and `<name>.meta` a small JSON document with `shape`, `spacing_mm`,
//! `origin_mm` and `dtype`. Embedding maps use a single binary file:
//!
//! ```text
//! "APEM" | version: u8 = 1 | H, W, D: u32 | spacing: 3 x f32 | origin: 3 x f32 | 3*H*W*D x f32
//! ```
//!
//! with the payload in channel-major C order. All integers and floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{s, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Point3 = [f64; 3];

/// A 3D scalar image in Hounsfield-like units.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub data: Array3<i16>,
    /// Voxel size in mm along each axis.
    pub spacing: Point3,
    /// Physical position of voxel (0, 0, 0) in mm.
    pub origin: Point3,
}

impl Volume {
    pub fn new(data: Array3<i16>, spacing: Point3, origin: Point3) -> Result<Self> {
        validate_grid(data.dim().into(), spacing)?;
        Ok(Self {
            data,
            spacing,
            origin,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.data.dim().into()
    }

    /// Physical coordinate of voxel `index`: `origin + index * spacing`.
    pub fn position_mm(&self, index: [usize; 3]) -> Point3 {
        position_mm(self.origin, self.spacing, index)
    }

    /// Axis-aligned box covering the full voxel extents, in mm.
    pub fn bounds_mm(&self) -> (Point3, Point3) {
        voxel_extent_bounds(self.shape(), self.spacing, self.origin)
    }
}

pub(crate) fn position_mm(origin: Point3, spacing: Point3, index: [usize; 3]) -> Point3 {
    [
        origin[0] + index[0] as f64 * spacing[0],
        origin[1] + index[1] as f64 * spacing[1],
        origin[2] + index[2] as f64 * spacing[2],
    ]
}

/// Box from the outer face of the first voxel to the outer face of the last one.
pub fn voxel_extent_bounds(shape: [usize; 3], spacing: Point3, origin: Point3) -> (Point3, Point3) {
    let mut lo = [0.0; 3];
    let mut hi = [0.0; 3];
    for a in 0..3 {
        lo[a] = origin[a] - 0.5 * spacing[a];
        hi[a] = origin[a] + (shape[a] as f64 - 0.5) * spacing[a];
    }
    (lo, hi)
}

fn validate_grid(shape: [usize; 3], spacing: Point3) -> Result<()> {
    if shape.iter().any(|&n| n == 0) {
        return Err(Error::InvalidArgument(format!(
            "volume axes must be non-empty, got {shape:?}"
        )));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!(
            "spacing must be positive, got {spacing:?}"
        )));
    }
    Ok(())
}

/// Per-voxel 3D embeddings aligned with a volume grid, shaped `(3, H, W, D)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub data: Array4<f32>,
    pub spacing: [f32; 3],
    pub origin: [f32; 3],
}

impl EmbeddingMap {
    pub fn new(data: Array4<f32>, spacing: [f32; 3], origin: [f32; 3]) -> Result<Self> {
        let (c, h, w, d) = data.dim();
        if c != 3 {
            return Err(Error::InvalidChannels(c));
        }
        validate_grid([h, w, d], spacing.map(f64::from))?;
        Ok(Self {
            data,
            spacing,
            origin,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        let (_, h, w, d) = self.data.dim();
        [h, w, d]
    }

    pub fn spacing_f64(&self) -> Point3 {
        self.spacing.map(f64::from)
    }

    pub fn origin_f64(&self) -> Point3 {
        self.origin.map(f64::from)
    }

    pub fn position_mm(&self, index: [usize; 3]) -> Point3 {
        position_mm(self.origin_f64(), self.spacing_f64(), index)
    }

    pub fn embedding(&self, index: [usize; 3]) -> [f32; 3] {
        let [i, j, k] = index;
        [
            self.data[[0, i, j, k]],
            self.data[[1, i, j, k]],
            self.data[[2, i, j, k]],
        ]
    }

    pub fn bounds_mm(&self) -> (Point3, Point3) {
        voxel_extent_bounds(self.shape(), self.spacing_f64(), self.origin_f64())
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SidecarMeta {
    shape: [usize; 3],
    spacing_mm: Point3,
    origin_mm: Point3,
    dtype: String,
}

fn sidecar_paths(path: &Path) -> (PathBuf, PathBuf) {
    (path.with_extension("raw"), path.with_extension("meta"))
}

fn write_sidecar(
    path: &Path,
    shape: [usize; 3],
    spacing: Point3,
    origin: Point3,
    dtype: &str,
    payload: &[u8],
) -> Result<()> {
    let (raw, meta) = sidecar_paths(path);
    let header = SidecarMeta {
        shape,
        spacing_mm: spacing,
        origin_mm: origin,
        dtype: dtype.to_string(),
    };
    let mut text = serde_json::to_string_pretty(&header).expect("sidecar metadata serializes");
    text.push('\n');
    fs::write(&meta, text).map_err(|e| Error::io(&meta, e))?;
    fs::write(&raw, payload).map_err(|e| Error::io(&raw, e))?;
    Ok(())
}

fn read_sidecar(path: &Path, dtype: &str, bytes_per_voxel: usize) -> Result<(SidecarMeta, Vec<u8>)> {
    let (raw, meta) = sidecar_paths(path);
    let text = fs::read_to_string(&meta).map_err(|e| Error::io(&meta, e))?;
    let header: SidecarMeta = serde_json::from_str(&text).map_err(|e| Error::MalformedHeader {
        path: meta.clone(),
        reason: e.to_string(),
    })?;
    if header.dtype != dtype {
        return Err(Error::MalformedHeader {
            path: meta,
            reason: format!("expected dtype {dtype:?}, found {:?}", header.dtype),
        });
    }
    if let Err(e) = validate_grid(header.shape, header.spacing_mm) {
        return Err(Error::MalformedHeader {
            path: meta,
            reason: e.to_string(),
        });
    }
    let payload = fs::read(&raw).map_err(|e| Error::io(&raw, e))?;
    let expected = header.shape.iter().product::<usize>() * bytes_per_voxel;
    if payload.len() != expected {
        return Err(Error::ShapeMismatch {
            path: raw,
            expected,
            found: payload.len(),
        });
    }
    Ok((header, payload))
}

pub fn save_volume(volume: &Volume, path: impl AsRef<Path>) -> Result<()> {
    let mut payload = Vec::with_capacity(volume.data.len() * 2);
    for v in volume.data.iter() {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    write_sidecar(
        path.as_ref(),
        volume.shape(),
        volume.spacing,
        volume.origin,
        "int16",
        &payload,
    )
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let (meta, payload) = read_sidecar(path.as_ref(), "int16", 2)?;
    let values = payload
        .chunks_exact(2)
        .map(|c| i16::from_le_bytes([c[0], c[1]]))
        .collect();
    let data = Array3::from_shape_vec(meta.shape, values).expect("payload length checked");
    Volume::new(data, meta.spacing_mm, meta.origin_mm)
}

pub fn save_mask(
    mask: &Array3<bool>,
    spacing: Point3,
    origin: Point3,
    path: impl AsRef<Path>,
) -> Result<()> {
    let payload: Vec<u8> = mask.iter().map(|&b| u8::from(b)).collect();
    write_sidecar(path.as_ref(), mask.dim().into(), spacing, origin, "uint8", &payload)
}

/// Loads a uint8 sidecar file; any nonzero voxel is in the mask.
pub fn load_mask(path: impl AsRef<Path>) -> Result<(Array3<bool>, Point3, Point3)> {
    let (meta, payload) = read_sidecar(path.as_ref(), "uint8", 1)?;
    let values = payload.into_iter().map(|b| b != 0).collect();
    let data = Array3::from_shape_vec(meta.shape, values).expect("payload length checked");
    Ok((data, meta.spacing_mm, meta.origin_mm))
}

const MAP_MAGIC: &[u8; 4] = b"APEM";
const MAP_VERSION: u8 = 1;
const MAP_HEADER_LEN: usize = 4 + 1 + 3 * 4 + 3 * 4 + 3 * 4;

pub fn save_embedding_map(map: &EmbeddingMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let [h, w, d] = map.shape();
    let mut buf = Vec::with_capacity(MAP_HEADER_LEN + map.data.len() * 4);
    buf.extend_from_slice(MAP_MAGIC);
    buf.push(MAP_VERSION);
    for n in [h, w, d] {
        let n = u32::try_from(n)
            .map_err(|_| Error::InvalidArgument(format!("axis length {n} exceeds u32")))?;
        buf.extend_from_slice(&n.to_le_bytes());
    }
    for v in map.spacing.iter().chain(map.origin.iter()) {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    // Standard layout iteration is channel-major C order.
    for v in map.data.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load_embedding_map(path: impl AsRef<Path>) -> Result<EmbeddingMap> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let malformed = |reason: String| Error::MalformedHeader {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < MAP_HEADER_LEN {
        return Err(malformed(format!("file is only {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAP_MAGIC {
        return Err(malformed("bad magic".into()));
    }
    if bytes[4] != MAP_VERSION {
        return Err(malformed(format!("unsupported version {}", bytes[4])));
    }
    let word = |i: usize| {
        let o = 5 + 4 * i;
        [bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]
    };
    let dims = [0, 1, 2].map(|i| u32::from_le_bytes(word(i)) as usize);
    let spacing = [3, 4, 5].map(|i| f32::from_le_bytes(word(i)));
    let origin = [6, 7, 8].map(|i| f32::from_le_bytes(word(i)));
    let voxels: usize = dims.iter().product();
    if voxels == 0 {
        return Err(malformed(format!("empty grid {dims:?}")));
    }

    // The header carries no channel count; it is implied by the payload length.
    let payload = &bytes[MAP_HEADER_LEN..];
    let per_channel = voxels * 4;
    if payload.len() % per_channel != 0 {
        return Err(Error::ShapeMismatch {
            path: path.to_path_buf(),
            expected: 3 * per_channel,
            found: payload.len(),
        });
    }
    let channels = payload.len() / per_channel;
    if channels != 3 {
        return Err(Error::InvalidChannels(channels));
    }
    let values = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let data = Array4::from_shape_vec((3, dims[0], dims[1], dims[2]), values)
        .expect("payload length checked");
    EmbeddingMap::new(data, spacing, origin)
}

/// Result of [`foreground_crop`].
#[derive(Debug, Clone)]
pub struct ForegroundCrop {
    pub volume: Volume,
    /// Index of the crop's first voxel in the input grid.
    pub offset: [usize; 3],
    /// Set when no voxel exceeded the threshold and the input was returned as is.
    pub empty_foreground: bool,
}

pub const DEFAULT_FOREGROUND_HU: i16 = -500;

/// Crops to the bounding box of voxels strictly brighter than `threshold`.
pub fn foreground_crop(volume: &Volume, threshold: i16) -> ForegroundCrop {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut any = false;
    for ((i, j, k), &v) in volume.data.indexed_iter() {
        if v > threshold {
            any = true;
            for (a, x) in [i, j, k].into_iter().enumerate() {
                lo[a] = lo[a].min(x);
                hi[a] = hi[a].max(x);
            }
        }
    }
    if !any {
        log::warn!("foreground crop: no voxel above {threshold} HU, leaving volume uncropped");
        return ForegroundCrop {
            volume: volume.clone(),
            offset: [0; 3],
            empty_foreground: true,
        };
    }
    let data = volume
        .data
        .slice(s![lo[0]..=hi[0], lo[1]..=hi[1], lo[2]..=hi[2]])
        .to_owned();
    let origin = volume.position_mm(lo);
    ForegroundCrop {
        volume: Volume {
            data,
            spacing: volume.spacing,
            origin,
        },
        offset: lo,
        empty_foreground: false,
    }
}

/// Axis-aligned box in mm.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box3 {
    pub min: Point3,
    pub max: Point3,
}

impl Box3 {
    pub fn new(min: Point3, max: Point3) -> Self {
        debug_assert!((0..3).all(|a| min[a] <= max[a]), "inverted box {min:?} {max:?}");
        Self { min, max }
    }

    /// Smallest box holding every point; `None` for an empty set.
    pub fn bounding(points: &[Point3]) -> Option<Self> {
        let first = *points.first()?;
        let mut b = Self::new(first, first);
        for p in &points[1..] {
            for a in 0..3 {
                b.min[a] = b.min[a].min(p[a]);
                b.max[a] = b.max[a].max(p[a]);
            }
        }
        Some(b)
    }

    pub fn volume(&self) -> f64 {
        (0..3).map(|a| (self.max[a] - self.min[a]).max(0.0)).product()
    }

    pub fn center(&self) -> Point3 {
        std::array::from_fn(|a| 0.5 * (self.min[a] + self.max[a]))
    }

    /// Intersection, or `None` when the boxes do not touch.
    pub fn intersection(&self, other: &Box3) -> Option<Box3> {
        let min: Point3 = std::array::from_fn(|a| self.min[a].max(other.min[a]));
        let max: Point3 = std::array::from_fn(|a| self.max[a].min(other.max[a]));
        (0..3).all(|a| min[a] <= max[a]).then_some(Box3 { min, max })
    }

    /// Inclusive containment.
    pub fn contains(&self, p: Point3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}
