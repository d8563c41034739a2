//! Landmark retrieval by exhaustive nearest-embedding search, radial-error metrics, and
//! organ-center embedding export.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{EmbeddingMap, Point3};

/// A query embedding with where it came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub embedding: [f32; 3],
    pub volume_id: String,
    pub landmark: String,
    pub source_mm: Point3,
}

/// Voxel index nearest to `point_mm`; errors outside the voxel-extent footprint.
pub fn nearest_voxel_index(map: &EmbeddingMap, point_mm: Point3) -> Result<[usize; 3]> {
    let shape = map.shape();
    let (sp, or) = (map.spacing_f64(), map.origin_f64());
    let mut idx = [0; 3];
    for a in 0..3 {
        let x = (point_mm[a] - or[a]) / sp[a];
        if !(x >= -0.5 && x <= shape[a] as f64 - 0.5) {
            return Err(Error::OutOfBounds(point_mm));
        }
        idx[a] = (x.round().max(0.0) as usize).min(shape[a] - 1);
    }
    Ok(idx)
}

pub fn query_embedding(map: &EmbeddingMap, point_mm: Point3) -> Result<[f32; 3]> {
    Ok(map.embedding(nearest_voxel_index(map, point_mm)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub index: [usize; 3],
    pub mm: Point3,
    /// Euclidean distance between the voxel embedding and the query.
    pub distance: f64,
}

/// Exhaustive argmin of the embedding distance; ties go to the lexicographically smallest
/// index (the first one in scan order).
pub fn nearest_voxel(map: &EmbeddingMap, q: [f32; 3]) -> RetrievalResult {
    let [h, w, d] = map.shape();
    let n = h * w * d;
    let data = map.data.as_slice().expect("embedding maps are contiguous");
    let (c0, rest) = data.split_at(n);
    let (c1, c2) = rest.split_at(n);
    let q = q.map(|v| v as f64);
    let mut best = (f64::INFINITY, 0usize);
    for i in 0..n {
        let dx = c0[i] as f64 - q[0];
        let dy = c1[i] as f64 - q[1];
        let dz = c2[i] as f64 - q[2];
        let sq = dx * dx + dy * dy + dz * dz;
        if sq < best.0 {
            best = (sq, i);
        }
    }
    let flat = best.1;
    let index = [flat / (w * d), (flat / d) % w, flat % d];
    RetrievalResult {
        index,
        mm: map.position_mm(index),
        distance: best.0.sqrt(),
    }
}

pub fn radial_error(a: Point3, b: Point3) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

/// Population mean and standard deviation.
pub fn mre(errors: &[f64]) -> Result<(f64, f64)> {
    if errors.is_empty() {
        return Err(Error::EmptyInput("radial errors"));
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// One evaluated volume: its map and named ground-truth landmarks.
#[derive(Debug, Clone)]
pub struct LandmarkSet<'a> {
    pub id: String,
    pub map: &'a EmbeddingMap,
    pub landmarks: Vec<(String, Point3)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalCase {
    pub train_id: String,
    pub test_id: String,
    pub landmark: String,
    pub query_mm: Point3,
    pub truth_mm: Point3,
    pub retrieved_index: [usize; 3],
    pub retrieved_mm: Point3,
    pub embedding_distance: f64,
    pub radial_error: f64,
}

/// Every ordered (train, test) pair of distinct volumes, for every landmark both carry.
pub fn retrieval_protocol(sets: &[LandmarkSet]) -> Result<Vec<RetrievalCase>> {
    if sets.len() < 2 {
        return Err(Error::InvalidArgument("retrieval needs at least 2 volumes".into()));
    }
    let mut cases = Vec::new();
    for train in sets {
        for (name, src) in &train.landmarks {
            let q = query_embedding(train.map, *src)?;
            for test in sets {
                if std::ptr::eq(train, test) {
                    continue;
                }
                let Some((_, truth)) = test.landmarks.iter().find(|(n, _)| n == name) else {
                    continue;
                };
                let r = nearest_voxel(test.map, q);
                cases.push(RetrievalCase {
                    train_id: train.id.clone(),
                    test_id: test.id.clone(),
                    landmark: name.clone(),
                    query_mm: *src,
                    truth_mm: *truth,
                    retrieved_index: r.index,
                    retrieved_mm: r.mm,
                    embedding_distance: r.distance,
                    radial_error: radial_error(r.mm, *truth),
                });
            }
        }
    }
    Ok(cases)
}

/// Mean/std radial error grouped by a key derived from each case.
pub fn summarize_by<F: Fn(&RetrievalCase) -> String>(cases: &[RetrievalCase], key: F) -> Result<Vec<(String, usize, f64, f64)>> {
    let mut groups: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for c in cases {
        groups.entry(key(c)).or_default().push(c.radial_error);
    }
    groups
        .into_iter()
        .map(|(k, errs)| {
            let (m, s) = mre(&errs)?;
            Ok((k, errs.len(), m, s))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterEmbedding {
    pub volume_id: String,
    pub organ: String,
    pub embedding: [f32; 3],
}

/// One row per (volume, organ) with a known center; missing centers are skipped.
pub fn export_center_embeddings(items: &[(String, &EmbeddingMap, Vec<(String, Option<Point3>)>)]) -> Vec<CenterEmbedding> {
    let mut rows = Vec::new();
    for (id, map, centers) in items {
        for (organ, center) in centers {
            let Some(c) = center else {
                log::warn!("{id}: no center landmark for {organ}, skipped");
                continue;
            };
            match query_embedding(map, *c) {
                Ok(e) => rows.push(CenterEmbedding {
                    volume_id: id.clone(),
                    organ: organ.clone(),
                    embedding: e,
                }),
                Err(err) => log::warn!("{id}: {organ} center unusable: {err}"),
            }
        }
    }
    rows
}

/// Cluster statistics of embeddings grouped by organ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClusterStats {
    /// Mean distance between distinct organ centroids.
    pub inter_centroid: f64,
    /// Mean over organs of the mean member-to-centroid distance.
    pub intra_spread: f64,
}

pub fn cluster_stats(rows: &[CenterEmbedding]) -> Result<ClusterStats> {
    let mut groups: BTreeMap<&str, Vec<[f64; 3]>> = BTreeMap::new();
    for r in rows {
        groups.entry(&r.organ).or_default().push(r.embedding.map(|v| v as f64));
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("cluster statistics need at least 2 organs".into()));
    }
    let centroids: Vec<[f64; 3]> = groups
        .values()
        .map(|m| std::array::from_fn(|a| m.iter().map(|p| p[a]).sum::<f64>() / m.len() as f64))
        .collect();
    let intra = groups
        .values()
        .zip(&centroids)
        .map(|(m, c)| m.iter().map(|p| radial_error(*p, *c)).sum::<f64>() / m.len() as f64)
        .sum::<f64>()
        / groups.len() as f64;
    let mut inter = 0.0;
    let mut count = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += radial_error(centroids[i], centroids[j]);
            count += 1;
        }
    }
    Ok(ClusterStats {
        inter_centroid: inter / count as f64,
        intra_spread: intra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, dims: [usize; 3], levels: Option<i32>) -> EmbeddingMap {
        let data = Array4::from_shape_fn((3, dims[0], dims[1], dims[2]), |_| match levels {
            // Few distinct values force ties.
            Some(l) => rng.random_range(0..l) as f32,
            None => rng.random_range(-1.0..1.0),
        });
        EmbeddingMap::new(data, [1.5, 2.0, 2.5], [-3.0, 4.0, 1.0]).unwrap()
    }

    fn brute_force(map: &EmbeddingMap, q: [f32; 3]) -> [usize; 3] {
        let [h, w, d] = map.shape();
        let mut best = (f64::INFINITY, [0; 3]);
        for i in 0..h {
            for j in 0..w {
                for k in 0..d {
                    let e = map.embedding([i, j, k]);
                    let s: f64 = (0..3).map(|c| (e[c] as f64 - q[c] as f64).powi(2)).sum();
                    if s < best.0 {
                        best = (s, [i, j, k]);
                    }
                }
            }
        }
        best.1
    }

    #[test]
    fn nearest_voxel_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 0..50 {
            let map = random_map(&mut rng, [8, 8, 8], (t % 2 == 0).then_some(3));
            let q: [f32; 3] = std::array::from_fn(|_| rng.random_range(-1.0..3.0));
            assert_eq!(nearest_voxel(&map, q).index, brute_force(&map, q));
        }
    }

    #[test]
    fn self_query_and_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let map = random_map(&mut rng, [5, 6, 7], None);
        let idx = [3, 1, 4];
        let r = nearest_voxel(&map, map.embedding(idx));
        assert_eq!((r.index, r.distance), (idx, 0.0));
        assert_eq!(r.mm, map.position_mm(idx));

        let flat = EmbeddingMap::new(Array4::from_elem((3, 4, 4, 4), 0.5), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(nearest_voxel(&flat, [9.0, 9.0, 9.0]).index, [0, 0, 0]);
    }

    #[test]
    fn query_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let map = random_map(&mut rng, [6, 6, 6], None);
        assert_eq!(query_embedding(&map, map.position_mm([2, 3, 4])).unwrap(), map.embedding([2, 3, 4]));
        let zero = EmbeddingMap::new(map.data.clone(), [1.0; 3], [0.0; 3]).unwrap();
        assert_eq!(query_embedding(&zero, [0.0; 3]).unwrap(), zero.embedding([0, 0, 0]));
        assert!(matches!(query_embedding(&map, [1e3, 0.0, 0.0]), Err(Error::OutOfBounds(_))));

        // Nearest voxel by index rounding equals the argmin of mm distance.
        let (lo, hi) = map.bounds_mm();
        for _ in 0..100 {
            let p: Point3 = std::array::from_fn(|a| rng.random_range(lo[a]..hi[a]));
            let got = nearest_voxel_index(&map, p).unwrap();
            let mut best = (f64::INFINITY, [0; 3]);
            for i in 0..6 {
                for j in 0..6 {
                    for k in 0..6 {
                        let d = radial_error(map.position_mm([i, j, k]), p);
                        if d < best.0 {
                            best = (d, [i, j, k]);
                        }
                    }
                }
            }
            assert_eq!(got, best.1);
        }
    }

    #[test]
    fn error_metrics() {
        assert_eq!(radial_error([1.0; 3], [1.0; 3]), 0.0);
        assert_eq!(radial_error([0.0; 3], [3.0, 4.0, 0.0]), 5.0);
        let (m, s) = mre(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(m, 2.0);
        assert!((s - (2.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert!(mre(&[]).is_err());
    }

    #[test]
    fn protocol_cardinality_and_perfect_retriever() {
        // Embedding = physical position: a perfect retriever across volumes on one grid.
        let data = Array4::from_shape_fn((3, 6, 6, 6), |(c, i, j, k)| [i, j, k][c] as f32);
        let map = EmbeddingMap::new(data, [1.0; 3], [0.0; 3]).unwrap();
        let lm = vec![("a".to_string(), [1.0, 2.0, 3.0]), ("b".to_string(), [4.0, 0.0, 5.0])];
        let sets: Vec<LandmarkSet> = (0..3)
            .map(|i| LandmarkSet {
                id: format!("v{i}"),
                map: &map,
                landmarks: lm.clone(),
            })
            .collect();
        let cases = retrieval_protocol(&sets).unwrap();
        assert_eq!(cases.len(), 3 * 2 * 2);
        assert!(cases.iter().all(|c| c.radial_error == 0.0));
        assert!(retrieval_protocol(&sets[..1]).is_err());
    }

    #[test]
    fn center_export() {
        let map = EmbeddingMap::new(Array4::from_elem((3, 4, 4, 4), 2.0), [1.0; 3], [0.0; 3]).unwrap();
        let organs: Vec<(String, Option<Point3>)> =
            (0..8).map(|o| (format!("organ{o}"), Some([o as f64 * 0.4; 3]))).collect();
        let items = vec![("a".to_string(), &map, organs.clone()), ("b".to_string(), &map, organs)];
        let rows = export_center_embeddings(&items);
        assert_eq!(rows.len(), 16);
        assert!(rows.iter().all(|r| r.embedding == [2.0; 3]));

        let missing = vec![("c".to_string(), &map, vec![("x".to_string(), None)])];
        assert!(export_center_embeddings(&missing).is_empty());
    }

    #[test]
    fn cluster_stats_on_separated_groups() {
        let rows: Vec<CenterEmbedding> = [("a", [0.0, 0.0, 0.0]), ("a", [0.2, 0.0, 0.0]), ("b", [10.0, 0.0, 0.0]), ("b", [10.0, 0.2, 0.0])]
            .into_iter()
            .map(|(o, e)| CenterEmbedding {
                volume_id: String::new(),
                organ: o.into(),
                embedding: e,
            })
            .collect();
        let s = cluster_stats(&rows).unwrap();
        assert!((s.intra_spread - 0.1).abs() < 1e-6);
        assert!((s.inter_centroid - (9.9f64.powi(2) + 0.01).sqrt()).abs() < 1e-5);
    }
}
