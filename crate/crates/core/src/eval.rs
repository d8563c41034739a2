//! Evaluation drivers shared by the CLI and the acceptance suite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::localization::{LocalizationItem, MaskRef, OrganTruth};
use crate::model::{feature_to_array, ApeModel};
use crate::phantom::PhantomSample;
use crate::retrieval::{export_center_embeddings, CenterEmbedding, LandmarkSet, RetrievalCase};
use crate::sampler::{sample_patch_pair, sample_positive_pairs, SamplerConfig};
use crate::seed::derive_seed;
use crate::volume::{foreground_crop, voxel_extent_bounds, Box3, EmbeddingMap, Volume, DEFAULT_FOREGROUND_HU};

/// Mean embedding distance between the two members of positive pairs drawn from
/// augmented patch pairs of `volumes`, in eval mode.
pub fn equivariance_gap(
    model: &ApeModel<f32>,
    volumes: &[Volume],
    sampler: &SamplerConfig,
    pairs_per_volume: usize,
    k: usize,
    seed: u64,
) -> Result<f64> {
    if volumes.is_empty() || pairs_per_volume == 0 || k == 0 {
        return Err(Error::EmptyInput("equivariance sample"));
    }
    let (mut sum, mut count) = (0.0, 0usize);
    for (v, volume) in volumes.iter().enumerate() {
        let cropped = foreground_crop(volume, DEFAULT_FOREGROUND_HU).volume;
        for p in 0..pairs_per_volume {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "gap", (v * pairs_per_volume + p) as u64));
            let pair = sample_patch_pair(&cropped, &mut rng, sampler)?;
            let vp = sample_positive_pairs(&pair, k, &mut rng)?;
            let ea = feature_to_array(&model.forward_eval(pair.patch_a.data.view())?);
            let eb = feature_to_array(&model.forward_eval(pair.patch_b.data.view())?);
            for (ia, ib) in vp.index_a.iter().zip(&vp.index_b) {
                let d2: f64 = (0..3)
                    .map(|c| (ea[[c, ia[0], ia[1], ia[2]]] as f64 - eb[[c, ib[0], ib[1], ib[2]]] as f64).powi(2))
                    .sum();
                sum += d2.sqrt();
                count += 1;
            }
        }
    }
    Ok(sum / count as f64)
}

/// A phantom with its embedding map.
pub struct EmbeddedPhantom<'a> {
    pub id: String,
    pub sample: &'a PhantomSample,
    pub map: &'a EmbeddingMap,
}

/// Organ-center retrieval over all ordered pairs of phantoms.
pub fn center_retrieval(items: &[EmbeddedPhantom]) -> Result<Vec<RetrievalCase>> {
    let sets: Vec<LandmarkSet> = items
        .iter()
        .map(|e| LandmarkSet {
            id: e.id.clone(),
            map: e.map,
            landmarks: e
                .sample
                .organs
                .iter()
                .map(|o| (o.label.clone(), o.landmarks.center))
                .collect(),
        })
        .collect();
    crate::retrieval::retrieval_protocol(&sets)
}

pub fn localization_items<'a>(items: &'a [EmbeddedPhantom<'a>]) -> Vec<LocalizationItem<'a>> {
    items
        .iter()
        .map(|e| {
            let v = &e.sample.volume;
            let (min, max) = voxel_extent_bounds(v.shape(), v.spacing, v.origin);
            LocalizationItem {
                id: e.id.clone(),
                map: e.map,
                organs: e
                    .sample
                    .organs
                    .iter()
                    .map(|o| OrganTruth {
                        label: o.label.clone(),
                        edges_mm: o.landmarks.edges,
                        mask: MaskRef {
                            mask: &o.mask,
                            spacing: v.spacing,
                            origin: v.origin,
                        },
                    })
                    .collect(),
                raw_bounds: Box3::new(min, max),
            }
        })
        .collect()
}

pub fn center_embeddings(items: &[EmbeddedPhantom]) -> Vec<CenterEmbedding> {
    let rows: Vec<_> = items
        .iter()
        .map(|e| {
            let centers = e
                .sample
                .organs
                .iter()
                .map(|o| (o.label.clone(), Some(o.landmarks.center)))
                .collect();
            (e.id.clone(), e.map, centers)
        })
        .collect();
    export_center_embeddings(&rows)
}

/// Seam planes of a tiling along one axis: every tile start and end strictly inside the
/// axis, keeping two voxels of context on each side.
pub fn tile_seams(n: usize, window: usize, overlap: f64) -> Vec<usize> {
    let mut seams: Vec<usize> = crate::model::window_starts(n, window, overlap)
        .into_iter()
        .flat_map(|s| [s, s + window])
        .filter(|&b| b >= 2 && b + 2 <= n)
        .collect();
    seams.sort_unstable();
    seams.dedup();
    seams
}

/// Per-channel median of |e(b) - e(b - 1)| over all voxel pairs straddling the planes
/// `b` along each axis, in units of that channel's standard deviation over the map.
pub fn seam_discontinuity(map: &EmbeddingMap, seams: &[Vec<usize>; 3]) -> Result<[f64; 3]> {
    let data = &map.data;
    let shape = map.shape();
    let mut out = [0.0; 3];
    for (c, slot) in out.iter_mut().enumerate() {
        let ch = data.index_axis(ndarray::Axis(0), c);
        let n = ch.len() as f64;
        let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        if std == 0.0 {
            return Err(Error::InvalidArgument("constant embedding channel".into()));
        }
        let mut jumps = Vec::new();
        for (axis, planes) in seams.iter().enumerate() {
            for &b in planes {
                if b == 0 || b >= shape[axis] {
                    return Err(Error::InvalidArgument(format!("seam plane {b} outside axis {axis}")));
                }
                let hi = ch.index_axis(ndarray::Axis(axis), b);
                let lo = ch.index_axis(ndarray::Axis(axis), b - 1);
                jumps.extend(hi.iter().zip(lo.iter()).map(|(&a, &b)| (a as f64 - b as f64).abs() / std));
            }
        }
        if jumps.is_empty() {
            return Err(Error::EmptyInput("seam planes"));
        }
        jumps.sort_by(f64::total_cmp);
        *slot = jumps[jumps.len() / 2];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    #[test]
    fn seams_of_a_tiling() {
        assert_eq!(tile_seams(64, 32, 0.0), vec![32]);
        assert_eq!(tile_seams(70, 32, 0.0), vec![32, 38, 64]);
        assert_eq!(tile_seams(64, 32, 0.5), vec![16, 32, 48]);
    }

    #[test]
    fn step_across_a_plane_is_measured_in_channel_stds() {
        // channel 0 is a ramp along x, channels 1 and 2 a 0/1 step at x = 5
        let data = Array4::from_shape_fn((3, 10, 4, 4), |(c, i, _, _)| match c {
            0 => i as f32,
            _ => (i >= 5) as u8 as f32,
        });
        let map = EmbeddingMap::new(data, [1.0; 3], [0.0; 3]).unwrap();
        let ramp_std = (99.0f64 / 12.0).sqrt();
        let d = seam_discontinuity(&map, &[vec![5], vec![], vec![]]).unwrap();
        assert!((d[0] - 1.0 / ramp_std).abs() < 1e-12);
        assert!((d[1] - 2.0).abs() < 1e-12);
        let d = seam_discontinuity(&map, &[vec![3], vec![], vec![]]).unwrap();
        assert_eq!(d[1], 0.0);
        assert!(seam_discontinuity(&map, &[vec![10], vec![], vec![]]).is_err());
        assert!(seam_discontinuity(&map, &[vec![], vec![], vec![]]).is_err());
    }
}
