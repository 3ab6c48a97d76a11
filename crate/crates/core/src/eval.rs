//! Retrieval evaluation: gallery ranking, accuracy@K, mean average
//! precision, multi-query descriptors, and activation-map export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::{forward_features, BackboneConfig, NetworkParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_frozen, FusionSpec};
use crate::synth::{Domain, Manifest, Split};
use crate::tensor::{Real, Tensor};

/// Euclidean distance between two feature vectors, accumulated in f64.
pub fn feature_distance(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            "feature_distance",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        .sqrt())
}

/// Gallery indices sorted by ascending distance to the query. Ties keep
/// gallery order, so the ranking is a deterministic permutation.
pub fn rank_gallery(query: &Tensor, gallery: &[Tensor]) -> Result<Vec<usize>> {
    Ok(rank_with_distances(query, gallery)?.0)
}

/// As [`rank_gallery`], plus the distances in ranked order.
pub fn rank_with_distances(
    query: &Tensor,
    gallery: &[Tensor],
) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut distances = Vec::with_capacity(gallery.len());
    for item in gallery {
        distances.push(feature_distance(query, item)?);
    }
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&i, &j| distances[i].partial_cmp(&distances[j]).unwrap());
    let ranked = order.iter().map(|&i| distances[i]).collect();
    Ok((order, ranked))
}

/// Non-interpolated average precision over a relevance list in rank
/// order. `None` when nothing is relevant.
pub fn average_precision(ranked_relevance: &[bool]) -> Option<f64> {
    let total: usize = ranked_relevance.iter().filter(|&&r| r).count();
    if total == 0 {
        return None;
    }
    let mut hits = 0usize;
    let mut sum = 0.0f64;
    for (i, &rel) in ranked_relevance.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    Some(sum / total as f64)
}

/// Fraction of queries whose top `k` ranks contain a relevant item.
pub fn accuracy_at_k(ranked_relevance: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::config("accuracy@K needs K >= 1"));
    }
    if ranked_relevance.is_empty() {
        return Err(Error::config("accuracy@K needs at least one query"));
    }
    let hits = ranked_relevance
        .iter()
        .filter(|ranks| ranks.iter().take(k).any(|&r| r))
        .count();
    Ok(hits as f64 / ranked_relevance.len() as f64)
}

/// Mean AP over queries with at least one relevant item; also returns
/// how many queries were excluded for having none.
pub fn mean_average_precision(ranked_relevance: &[Vec<bool>]) -> (Option<f64>, usize) {
    let mut sum = 0.0f64;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    for ranks in ranked_relevance {
        match average_precision(ranks) {
            Some(ap) => {
                sum += ap;
                counted += 1;
            }
            None => skipped += 1,
        }
    }
    if counted == 0 {
        (None, skipped)
    } else {
        (Some(sum / counted as f64), skipped)
    }
}

/// Combine several query descriptors into one: element mean, then L2
/// normalization.
pub fn multi_query_feature(features: &[&Tensor]) -> Result<Tensor> {
    let first = features
        .first()
        .ok_or_else(|| Error::config("multi-query needs at least one feature"))?;
    let n = first.numel();
    let mut mean = vec![0.0f64; n];
    for f in features {
        if f.shape() != first.shape() {
            return Err(Error::shape(
                "multi_query_feature",
                format!("{:?} vs {:?}", f.shape(), first.shape()),
            ));
        }
        for (acc, &v) in mean.iter_mut().zip(f.data()) {
            *acc += v as f64;
        }
    }
    let scale = 1.0 / features.len() as f64;
    for v in mean.iter_mut() {
        *v *= scale;
    }
    let norm = mean.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let data: Vec<Real> = mean.iter().map(|&v| (v / norm) as Real).collect();
    Tensor::new(vec![n], data)
}

// ---------------------------------------------------------------------
// Protocol orchestration

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalProtocol {
    pub query_domain: Domain,
    pub gallery_domain: Domain,
    /// Pool all views of a query instance into one descriptor.
    #[serde(default)]
    pub multi_query: bool,
    #[serde(default = "default_ks")]
    pub ks: Vec<usize>,
}

fn default_ks() -> Vec<usize> {
    vec![1, 5, 10]
}

impl RetrievalProtocol {
    /// Query with contour renderings against a filled gallery — the
    /// sketch-queries-photos direction.
    pub fn contour_to_filled() -> Self {
        RetrievalProtocol {
            query_domain: Domain::Contour,
            gallery_domain: Domain::Filled,
            multi_query: false,
            ks: default_ks(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerQuery {
    /// Human-readable query identity, e.g. `"instance 3 view 0"`.
    pub query: String,
    pub instance: usize,
    /// View index of the query item; absent for pooled multi-query
    /// descriptors.
    pub view: Option<usize>,
    /// Gallery items as manifest indices, best match first.
    pub ranks: Vec<usize>,
    /// Distances aligned with `ranks`; kept in memory, not serialized.
    #[serde(skip)]
    pub distances: Vec<f64>,
    /// 1-based rank of the first relevant gallery item.
    pub first_hit_rank: Option<usize>,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub queries: usize,
    pub gallery_size: usize,
    /// Queries dropped because no gallery item shared their instance.
    pub skipped_queries: usize,
    pub acc: BTreeMap<usize, f64>,
    pub map: f64,
    pub per_query: Vec<PerQuery>,
}

impl RetrievalReport {
    pub fn accuracy_at(&self, k: usize) -> Option<f64> {
        self.acc.get(&k).copied()
    }
}

/// Run a retrieval protocol over per-item features index-aligned with
/// the manifest. A gallery item is relevant to a query when it carries
/// the same instance id; the query item itself never appears in its own
/// gallery.
pub fn evaluate(
    features: &[Tensor],
    manifest: &Manifest,
    split: Split,
    protocol: &RetrievalProtocol,
) -> Result<RetrievalReport> {
    if features.len() != manifest.items.len() {
        return Err(Error::config(format!(
            "{} features for {} manifest items",
            features.len(),
            manifest.items.len()
        )));
    }
    if protocol.ks.is_empty() {
        return Err(Error::config("protocol lists no K values"));
    }
    let query_indices = manifest.select(split, protocol.query_domain);
    let gallery_indices = manifest.select(split, protocol.gallery_domain);
    if query_indices.is_empty() || gallery_indices.is_empty() {
        return Err(Error::config(format!(
            "empty query or gallery set for {:?}/{:?} in {:?} split",
            protocol.query_domain, protocol.gallery_domain, split
        )));
    }

    // (instance, view, descriptor, manifest index to exclude from the gallery)
    let mut queries: Vec<(usize, Option<usize>, Tensor, Option<usize>)> = Vec::new();
    if protocol.multi_query {
        let mut by_instance: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &qi in &query_indices {
            by_instance
                .entry(manifest.items[qi].instance)
                .or_default()
                .push(qi);
        }
        for (instance, idxs) in by_instance {
            let group: Vec<&Tensor> = idxs.iter().map(|&i| &features[i]).collect();
            queries.push((instance, None, multi_query_feature(&group)?, None));
        }
    } else {
        for &qi in &query_indices {
            let item = &manifest.items[qi];
            queries.push((item.instance, Some(item.view), features[qi].clone(), Some(qi)));
        }
    }

    let mut per_query = Vec::new();
    let mut ranked_relevance: Vec<Vec<bool>> = Vec::new();
    let mut skipped = 0usize;
    let mut gallery_size = 0usize;
    for (instance, view, descriptor, exclude) in &queries {
        let gallery: Vec<usize> = gallery_indices
            .iter()
            .copied()
            .filter(|gi| Some(*gi) != *exclude)
            .collect();
        gallery_size = gallery.len();
        let any_relevant = gallery
            .iter()
            .any(|&gi| manifest.items[gi].instance == *instance);
        if !any_relevant {
            skipped += 1;
            continue;
        }
        let gallery_features: Vec<Tensor> =
            gallery.iter().map(|&gi| features[gi].clone()).collect();
        let (order, distances) = rank_with_distances(descriptor, &gallery_features)?;
        let ranks: Vec<usize> = order.iter().map(|&pos| gallery[pos]).collect();
        let relevance: Vec<bool> = ranks
            .iter()
            .map(|&mi| manifest.items[mi].instance == *instance)
            .collect();
        let first_hit_rank = relevance.iter().position(|&r| r).map(|p| p + 1);
        let ap = average_precision(&relevance).expect("relevance checked above");
        let query = match view {
            Some(v) => format!("instance {instance} view {v}"),
            None => format!("instance {instance} multi"),
        };
        per_query.push(PerQuery {
            query,
            instance: *instance,
            view: *view,
            ranks,
            distances,
            first_hit_rank,
            ap,
        });
        ranked_relevance.push(relevance);
    }
    if ranked_relevance.is_empty() {
        return Err(Error::config(
            "no query has a relevant gallery item under this protocol",
        ));
    }

    let mut acc = BTreeMap::new();
    for &k in &protocol.ks {
        acc.insert(k, accuracy_at_k(&ranked_relevance, k)?);
    }
    let (map, _) = mean_average_precision(&ranked_relevance);
    Ok(RetrievalReport {
        queries: ranked_relevance.len(),
        gallery_size,
        skipped_queries: skipped,
        acc,
        map: map.expect("at least one valid query"),
        per_query,
    })
}

/// Descriptors for every manifest item under a trained network.
pub fn extract_features(
    params: &NetworkParams,
    cfg: &BackboneConfig,
    spec: &FusionSpec,
    images: &[Tensor],
) -> Result<Vec<Tensor>> {
    images
        .iter()
        .map(|image| fuse_frozen(params, cfg, spec, image))
        .collect()
}

// ---------------------------------------------------------------------
// Activation maps

/// One mid-layer channel as a heat map: min-max normalized to [0, 1] and
/// bilinearly upsampled to the input resolution. A constant channel maps
/// to all zeros.
pub fn activation_heatmap(
    params: &NetworkParams,
    cfg: &BackboneConfig,
    image: &Tensor,
    tap_layer: &str,
    channel: usize,
) -> Result<Tensor> {
    let (_, taps) = forward_features(params, cfg, image)?;
    let tap = taps.get(tap_layer).ok_or_else(|| {
        Error::config(format!(
            "layer {tap_layer:?} is not a tap point; available: {:?}",
            taps.keys().collect::<Vec<_>>()
        ))
    })?;
    if tap.rank() != 3 {
        return Err(Error::shape(
            "activation_heatmap",
            format!("tap {tap_layer:?} has shape {:?}, need rank 3", tap.shape()),
        ));
    }
    let (h, w, c) = (tap.shape()[0], tap.shape()[1], tap.shape()[2]);
    if channel >= c {
        return Err(Error::config(format!(
            "channel {channel} out of range for {c} channels"
        )));
    }
    let mut plane = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            plane[y * w + x] = tap.at3(y, x, channel) as f64;
        }
    }
    let lo = plane.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = plane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi > lo {
        for v in plane.iter_mut() {
            *v = (*v - lo) / (hi - lo);
        }
    } else {
        plane.iter_mut().for_each(|v| *v = 0.0);
    }
    let (out_h, out_w) = (image.shape()[0], image.shape()[1]);
    Ok(bilinear_upsample(&plane, h, w, out_h, out_w))
}

/// Corner-aligned bilinear resampling of a single-channel plane.
fn bilinear_upsample(plane: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Tensor {
    let scale = |out: usize, inp: usize, i: usize| -> f64 {
        if out <= 1 || inp <= 1 {
            0.0
        } else {
            i as f64 * (inp - 1) as f64 / (out - 1) as f64
        }
    };
    let mut data = vec![0.0 as Real; out_h * out_w];
    for y in 0..out_h {
        let fy = scale(out_h, h, y);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for x in 0..out_w {
            let fx = scale(out_w, w, x);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = plane[y0 * w + x0] * (1.0 - tx) + plane[y0 * w + x1] * tx;
            let bottom = plane[y1 * w + x0] * (1.0 - tx) + plane[y1 * w + x1] * tx;
            data[y * out_w + x] = (top * (1.0 - ty) + bottom * ty) as Real;
        }
    }
    Tensor::new(vec![out_h, out_w, 1], data).expect("positive dims")
}

/// Write a `[h, w, 1]` tensor with values in [0, 1] as a binary PGM
/// (`P5`, maxval 255).
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    if image.rank() != 3 || image.shape()[2] != 1 {
        return Err(Error::shape(
            "write_pgm",
            format!("need [h, w, 1], got {:?}", image.shape()),
        ));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(
        image
            .data()
            .iter()
            .map(|&v| (v as f64 * 255.0).round().clamp(0.0, 255.0) as u8),
    );
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vec_tensor(data: &[Real]) -> Tensor {
        Tensor::new(vec![data.len()], data.to_vec()).unwrap()
    }

    #[test]
    fn ranking_is_ascending_and_tie_stable() {
        let query = vec_tensor(&[0.0, 0.0]);
        let gallery = vec![
            vec_tensor(&[3.0, 0.0]),
            vec_tensor(&[1.0, 0.0]),
            vec_tensor(&[0.0, 1.0]), // tie with index 1, must stay after it
            vec_tensor(&[0.5, 0.0]),
        ];
        assert_eq!(rank_gallery(&query, &gallery).unwrap(), vec![3, 1, 2, 0]);
    }

    #[test]
    fn average_precision_closed_forms() {
        assert_eq!(average_precision(&[true]), Some(1.0));
        assert_eq!(average_precision(&[false, true]), Some(0.5));
        let ap = average_precision(&[true, false, true]).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert_eq!(average_precision(&[false, false]), None);
        assert_eq!(average_precision(&[]), None);
    }

    #[test]
    fn accuracy_at_k_counts_first_hits() {
        let lists = vec![
            vec![true, false],
            vec![false, true],
            vec![false, false],
        ];
        assert!((accuracy_at_k(&lists, 1).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert!((accuracy_at_k(&lists, 2).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!(accuracy_at_k(&lists, 0).is_err());
        assert!(accuracy_at_k(&[], 1).is_err());
    }

    #[test]
    fn map_skips_queries_without_relevant_items() {
        let lists = vec![vec![true], vec![false], vec![false, true]];
        let (map, skipped) = mean_average_precision(&lists);
        assert_eq!(skipped, 1);
        assert!((map.unwrap() - 0.75).abs() < 1e-12);
        let (none, skipped) = mean_average_precision(&[vec![false]]);
        assert!(none.is_none());
        assert_eq!(skipped, 1);
    }

    #[test]
    fn multi_query_is_a_unit_vector_mean() {
        let a = vec_tensor(&[1.0, 0.0]);
        let b = vec_tensor(&[0.0, 1.0]);
        let pooled = multi_query_feature(&[&a, &b]).unwrap();
        let expect = (0.5f64 / 0.5f64.hypot(0.5)) as Real;
        assert!((pooled.data()[0] - expect).abs() < 1e-6);
        assert!((pooled.data()[1] - expect).abs() < 1e-6);
        let norm: f64 = pooled.data().iter().map(|&v| (v as f64).powi(2)).sum();
        assert!((norm - 1.0).abs() < 1e-6);
        assert!(multi_query_feature(&[]).is_err());
    }

    fn toy_manifest() -> Manifest {
        // Two test instances, two domains, one view each.
        let mut items = Vec::new();
        for instance in 0..2 {
            for domain in Domain::BOTH {
                items.push(crate::synth::ManifestItem {
                    path: String::new(),
                    instance,
                    domain,
                    view: 0,
                    split: Split::Test,
                });
            }
        }
        Manifest {
            items,
            mode: crate::synth::AlignMode::Aligned,
            seed: 0,
        }
    }

    #[test]
    fn evaluate_reports_perfect_retrieval_for_separable_features() {
        let manifest = toy_manifest();
        // Instance 0 near the x-axis, instance 1 near the y-axis, with a
        // small domain offset.
        let features = vec![
            vec_tensor(&[1.0, 0.0]),
            vec_tensor(&[0.9, 0.1]),
            vec_tensor(&[0.0, 1.0]),
            vec_tensor(&[0.1, 0.9]),
        ];
        let mut protocol = RetrievalProtocol::contour_to_filled();
        protocol.ks = vec![1, 2];
        let report = evaluate(&features, &manifest, Split::Test, &protocol).unwrap();
        assert_eq!(report.queries, 2);
        assert_eq!(report.gallery_size, 2);
        assert_eq!(report.accuracy_at(1), Some(1.0));
        assert!((report.map - 1.0).abs() < 1e-12);
        assert_eq!(report.per_query[0].first_hit_rank, Some(1));
    }

    #[test]
    fn evaluate_excludes_the_query_from_its_own_gallery() {
        let manifest = toy_manifest();
        let features = vec![
            vec_tensor(&[1.0, 0.0]),
            vec_tensor(&[0.9, 0.1]),
            vec_tensor(&[0.0, 1.0]),
            vec_tensor(&[0.1, 0.9]),
        ];
        let protocol = RetrievalProtocol {
            query_domain: Domain::Filled,
            gallery_domain: Domain::Filled,
            multi_query: false,
            ks: vec![1],
        };
        // Same-domain gallery has no other view of the same instance, so
        // every query is skipped and evaluation must fail loudly.
        let err = evaluate(&features, &manifest, Split::Test, &protocol).unwrap_err();
        assert!(err.to_string().contains("no query"), "{err}");
    }

    #[test]
    fn evaluate_multi_query_pools_views() {
        // One instance, two filled views, contour gallery.
        let mut items = Vec::new();
        for view in 0..2 {
            items.push(crate::synth::ManifestItem {
                path: String::new(),
                instance: 0,
                domain: Domain::Filled,
                view,
                split: Split::Test,
            });
        }
        for instance in 0..2 {
            items.push(crate::synth::ManifestItem {
                path: String::new(),
                instance,
                domain: Domain::Contour,
                view: 0,
                split: Split::Test,
            });
        }
        let manifest = Manifest {
            items,
            mode: crate::synth::AlignMode::Perturbed,
            seed: 0,
        };
        let features = vec![
            vec_tensor(&[1.0, 0.0]),
            vec_tensor(&[0.8, 0.2]),
            vec_tensor(&[0.9, 0.1]),
            vec_tensor(&[0.0, 1.0]),
        ];
        let protocol = RetrievalProtocol {
            query_domain: Domain::Filled,
            gallery_domain: Domain::Contour,
            multi_query: true,
            ks: vec![1],
        };
        let report = evaluate(&features, &manifest, Split::Test, &protocol).unwrap();
        assert_eq!(report.queries, 1);
        assert_eq!(report.per_query[0].view, None);
        assert_eq!(report.accuracy_at(1), Some(1.0));
    }

    #[test]
    fn heatmap_normalizes_and_upsamples() {
        use crate::backbone::{build_backbone, mini_aligned_net};
        let cfg = mini_aligned_net();
        let params = build_backbone(&cfg, 0).unwrap();
        let image = Tensor::filled(vec![32, 32, 1], 0.5);
        let map = activation_heatmap(&params, &cfg, &image, "conv3", 0).unwrap();
        assert_eq!(map.shape(), &[32, 32, 1]);
        let lo = map.data().iter().cloned().fold(Real::INFINITY, Real::min);
        let hi = map
            .data()
            .iter()
            .cloned()
            .fold(Real::NEG_INFINITY, Real::max);
        assert!(lo >= 0.0 && hi <= 1.0 + 1e-6);
        assert!(activation_heatmap(&params, &cfg, &image, "pool1", 0).is_err());
        assert!(activation_heatmap(&params, &cfg, &image, "conv3", 999).is_err());
    }

    #[test]
    fn bilinear_upsample_keeps_corners() {
        let plane = vec![0.0, 1.0, 2.0, 3.0];
        let up = bilinear_upsample(&plane, 2, 2, 4, 4);
        assert_eq!(up.at3(0, 0, 0), 0.0);
        assert_eq!(up.at3(0, 3, 0), 1.0);
        assert_eq!(up.at3(3, 0, 0), 2.0);
        assert_eq!(up.at3(3, 3, 0), 3.0);
        // Center interpolates between all four.
        let mid = up.at3(1, 1, 0) as f64;
        assert!(mid > 0.0 && mid < 3.0);
    }

    #[test]
    fn pgm_header_and_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.pgm");
        let image = Tensor::new(vec![2, 3, 1], vec![0.0, 0.5, 1.0, 0.25, 0.75, 1.0]).unwrap();
        write_pgm(&path, &image).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(bytes[b"P5\n3 2\n255\n".len()], 0);
        assert_eq!(*bytes.last().unwrap(), 255);
    }
}
