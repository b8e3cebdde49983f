//! Retrieval evaluation: pairwise distances, average precision, CMC curves,
//! the cross-camera junk-filtering protocol, seen-domain averages, and the
//! activation heat-map emitter.

use std::path::Path;

use ndarray::{Array2, Array3, ArrayView2, Axis};
use serde::Serialize;

use crate::backbone::BackboneGraph;
use crate::bank::{Bank, SnapshotQuery};
use crate::data::{record_to_tensor, stack_batch, DatasetSpec, ImageRecord};
use crate::error::{Error, Result};
use crate::nn::bilinear_resize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    Euclidean,
}

impl std::str::FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cosine" => Ok(Metric::Cosine),
            "euclidean" => Ok(Metric::Euclidean),
            other => Err(Error::InvalidConfig(format!("unknown metric `{other}`"))),
        }
    }
}

/// Query-by-gallery distance matrix in f64. Cosine distance is
/// 1 - cosine similarity and rejects zero-norm rows.
pub fn pairwise_distance(
    q: &ArrayView2<f32>,
    g: &ArrayView2<f32>,
    metric: Metric,
) -> Result<Array2<f64>> {
    let (nq, dq) = q.dim();
    let (ng, dg) = g.dim();
    if dq != dg {
        return Err(Error::ChannelMismatch {
            expected: dq,
            got: dg,
        });
    }
    let mut out = Array2::<f64>::zeros((nq, ng));
    match metric {
        Metric::Cosine => {
            let normalize = |m: &ArrayView2<f32>, label: &str| -> Result<Array2<f64>> {
                let mut out = Array2::<f64>::zeros(m.dim());
                for (i, row) in m.axis_iter(Axis(0)).enumerate() {
                    let norm = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt();
                    if norm == 0.0 {
                        let _ = label;
                        return Err(Error::ZeroNormVector(i));
                    }
                    for (j, &v) in row.iter().enumerate() {
                        out[[i, j]] = v as f64 / norm;
                    }
                }
                Ok(out)
            };
            let qn = normalize(q, "query")?;
            let gn = normalize(g, "gallery")?;
            let sim = qn.dot(&gn.t());
            for i in 0..nq {
                for j in 0..ng {
                    out[[i, j]] = 1.0 - sim[[i, j]];
                }
            }
        }
        Metric::Euclidean => {
            for i in 0..nq {
                for j in 0..ng {
                    let mut acc = 0.0f64;
                    for k in 0..dq {
                        let d = q[[i, k]] as f64 - g[[j, k]] as f64;
                        acc += d * d;
                    }
                    out[[i, j]] = acc.sqrt();
                }
            }
        }
    }
    Ok(out)
}

/// Average precision of one ranked relevance list: the mean, over relevant
/// hits, of the precision at that hit's rank. `None` when nothing in the
/// ranking is relevant (the query is skipped by convention).
pub fn average_precision(ranking: &[bool]) -> Option<f64> {
    let mut hits = 0usize;
    let mut acc = 0.0f64;
    for (i, &relevant) in ranking.iter().enumerate() {
        if relevant {
            hits += 1;
            acc += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        None
    } else {
        Some(acc / hits as f64)
    }
}

/// CMC over per-query ranked relevance lists: CMC(k) is the fraction of
/// queries whose first relevant item appears within the top k. Queries with
/// no relevant item are ignored (callers skip them beforehand).
pub fn cmc_curve(rankings: &[Vec<bool>], max_rank: usize) -> Vec<f64> {
    let mut curve = vec![0.0f64; max_rank];
    let mut counted = 0usize;
    for ranking in rankings {
        let first_hit = ranking.iter().position(|&r| r);
        let Some(first) = first_hit else { continue };
        counted += 1;
        for k in first.min(max_rank)..max_rank {
            curve[k] += 1.0;
        }
    }
    if counted > 0 {
        for v in curve.iter_mut() {
            *v /= counted as f64;
        }
    }
    curve
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainEval {
    pub dataset: String,
    pub domain_ordinal: Option<u32>,
    pub map: f64,
    pub rank1: f64,
    pub cmc: Vec<f64>,
    pub n_queries: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub metric: Metric,
    pub input_height: usize,
    pub input_width: usize,
    pub feature_batch: usize,
    pub max_rank: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            metric: Metric::Cosine,
            input_height: 64,
            input_width: 32,
            feature_batch: 32,
            max_rank: 20,
        }
    }
}

pub fn features_for_records(
    graph: &BackboneGraph,
    records: &[ImageRecord],
    opts: &EvalOptions,
) -> Result<Array2<f32>> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut out = Array2::<f32>::zeros((records.len(), graph.feature_dim()));
    let mut start = 0usize;
    while start < records.len() {
        let end = (start + opts.feature_batch.max(1)).min(records.len());
        let tensors: Vec<Array3<f32>> = records[start..end]
            .iter()
            .map(|r| record_to_tensor(r, opts.input_height, opts.input_width))
            .collect::<Result<_>>()?;
        let x = stack_batch(&tensors);
        let f = graph.forward_eval(&x.view())?;
        out.slice_mut(ndarray::s![start..end, ..]).assign(&f);
        start = end;
    }
    Ok(out)
}

/// The cross-camera protocol over precomputed features: gallery entries
/// sharing both identity and camera with the query are junk and removed
/// before ranking; queries without any valid cross-camera match are skipped
/// and counted. Ties break by gallery index (stable).
#[allow(clippy::too_many_arguments)]
pub fn evaluate_features(
    query: &ArrayView2<f32>,
    query_ids: &[u32],
    query_cams: &[String],
    gallery: &ArrayView2<f32>,
    gallery_ids: &[u32],
    gallery_cams: &[String],
    metric: Metric,
    max_rank: usize,
) -> Result<(f64, Vec<f64>, usize, usize)> {
    let dist = pairwise_distance(query, gallery, metric)?;
    let nq = query_ids.len();
    let ng = gallery_ids.len();
    let mut ap_sum = 0.0f64;
    let mut counted = 0usize;
    let mut skipped = 0usize;
    let mut rankings: Vec<Vec<bool>> = Vec::with_capacity(nq);
    for qi in 0..nq {
        let qid = query_ids[qi];
        let qcam = &query_cams[qi];
        let mut order: Vec<usize> = (0..ng)
            .filter(|&gi| !(gallery_ids[gi] == qid && &gallery_cams[gi] == qcam))
            .collect();
        let has_valid = order.iter().any(|&gi| gallery_ids[gi] == qid);
        if !has_valid {
            skipped += 1;
            continue;
        }
        order.sort_by(|&a, &b| {
            dist[[qi, a]]
                .total_cmp(&dist[[qi, b]])
                .then(a.cmp(&b))
        });
        let flags: Vec<bool> = order.iter().map(|&gi| gallery_ids[gi] == qid).collect();
        let ap = average_precision(&flags).expect("valid match exists");
        ap_sum += ap;
        counted += 1;
        rankings.push(flags);
    }
    if counted == 0 {
        return Err(Error::Other("no query had a valid gallery match".into()));
    }
    let cmc = cmc_curve(&rankings, max_rank.max(1));
    Ok((ap_sum / counted as f64, cmc, counted, skipped))
}

/// Evaluate a dataset with the graph exactly as it stands (the single-model
/// baselines, or a graph with a snapshot already applied).
pub fn evaluate_domain_live(
    graph: &BackboneGraph,
    dataset: &DatasetSpec,
    opts: &EvalOptions,
) -> Result<DomainEval> {
    let qf = features_for_records(graph, &dataset.query, opts)?;
    let gf = features_for_records(graph, &dataset.gallery, opts)?;
    let q_ids: Vec<u32> = dataset.query.iter().map(|r| r.identity).collect();
    let q_cams: Vec<String> = dataset.query.iter().map(|r| r.camera.clone()).collect();
    let g_ids: Vec<u32> = dataset.gallery.iter().map(|r| r.identity).collect();
    let g_cams: Vec<String> = dataset.gallery.iter().map(|r| r.camera.clone()).collect();
    let (map, cmc, counted, skipped) = evaluate_features(
        &qf.view(),
        &q_ids,
        &q_cams,
        &gf.view(),
        &g_ids,
        &g_cams,
        opts.metric,
        opts.max_rank,
    )?;
    Ok(DomainEval {
        dataset: dataset.name.clone(),
        domain_ordinal: None,
        map,
        rank1: cmc.first().copied().unwrap_or(0.0),
        cmc,
        n_queries: counted,
        n_skipped: skipped,
    })
}

/// Snapshot-selecting evaluation: an explicit domain wins, then the bank's
/// dataset registry, then the camera registry (which itself falls back to
/// the latest snapshot for unseen domains).
pub fn evaluate_domain(
    graph: &mut BackboneGraph,
    bank: &Bank,
    dataset: &DatasetSpec,
    opts: &EvalOptions,
    domain_override: Option<u32>,
) -> Result<DomainEval> {
    let snapshot = match domain_override {
        Some(ordinal) => bank.select_snapshot(SnapshotQuery::Domain(ordinal))?,
        None => {
            if bank.domain_of_dataset(&dataset.name).is_some() {
                bank.select_snapshot(SnapshotQuery::Dataset(&dataset.name))?
            } else if let Some(record) = dataset.query.first() {
                bank.select_snapshot(SnapshotQuery::Camera(&record.camera))?
            } else {
                bank.select_snapshot(SnapshotQuery::Latest)?
            }
        }
    };
    let ordinal = snapshot.ordinal;
    graph.apply_snapshot(snapshot)?;
    let mut eval = evaluate_domain_live(graph, dataset, opts)?;
    eval.domain_ordinal = Some(ordinal);
    Ok(eval)
}

/// Unweighted mean of mAP and Rank-1 over all seen domains.
pub fn average_seen(reports: &[DomainEval]) -> (f64, f64) {
    if reports.is_empty() {
        return (0.0, 0.0);
    }
    let n = reports.len() as f64;
    (
        reports.iter().map(|r| r.map).sum::<f64>() / n,
        reports.iter().map(|r| r.rank1).sum::<f64>() / n,
    )
}

/// Channel-wise L2 norm of the final conv-stage activation, bilinearly
/// upsampled to the input size and min-max normalized to [0, 1]. A flat map
/// (e.g. an all-zero input) normalizes to zeros.
pub fn attention_map(
    graph: &mut BackboneGraph,
    snapshot: &crate::bank::DomainSnapshot,
    image: &Array3<f32>,
) -> Result<Array2<f32>> {
    graph.apply_snapshot(snapshot)?;
    attention_map_live(graph, image)
}

pub fn attention_map_live(graph: &BackboneGraph, image: &Array3<f32>) -> Result<Array2<f32>> {
    let (_, h, w) = image.dim();
    let x = stack_batch(std::slice::from_ref(image));
    let (_, map4) = graph.forward_eval_capture(&x.view())?;
    let (_, c, mh, mw) = map4.dim();
    let mut norm = Array2::<f32>::zeros((mh, mw));
    for y in 0..mh {
        for xx in 0..mw {
            let mut acc = 0.0f64;
            for ci in 0..c {
                let v = map4[[0, ci, y, xx]] as f64;
                acc += v * v;
            }
            norm[[y, xx]] = acc.sqrt() as f32;
        }
    }
    let up = bilinear_resize(&norm.view(), h, w);
    let min = up.iter().cloned().fold(f32::INFINITY, f32::min);
    let max = up.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    if !(max - min).is_normal() {
        return Ok(Array2::zeros((h, w)));
    }
    Ok(up.mapv(|v| (v - min) / (max - min)))
}

pub fn heatmap_to_png(map: &ArrayView2<f32>, path: &Path) -> Result<()> {
    let (h, w) = map.dim();
    let mut img = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = (map[[y, x]].clamp(0.0, 1.0) * 255.0).round() as u8;
            img.put_pixel(x as u32, y as u32, image::Luma([v]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// One record per domain plus an aggregate block, as line-delimited JSON.
pub fn write_eval_report(path: &Path, evals: &[DomainEval]) -> Result<()> {
    let (s_map, s_r1) = average_seen(evals);
    let mut text = String::new();
    for eval in evals {
        text.push_str(
            &serde_json::to_string(eval).map_err(|e| Error::Other(e.to_string()))?,
        );
        text.push('\n');
    }
    text.push_str(&format!(
        "{{\"aggregate\":true,\"domains\":{},\"s_map\":{s_map},\"s_r1\":{s_r1}}}\n",
        evals.len()
    ));
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn render_eval_report(evals: &[DomainEval]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<12} {:>7} {:>8} {:>8} {:>9} {:>8}\n",
        "dataset", "domain", "mAP", "R-1", "queries", "skipped"
    ));
    for e in evals {
        out.push_str(&format!(
            "{:<12} {:>7} {:>8.4} {:>8.4} {:>9} {:>8}\n",
            e.dataset,
            e.domain_ordinal.map(|o| o.to_string()).unwrap_or_else(|| "-".into()),
            e.map,
            e.rank1,
            e.n_queries,
            e.n_skipped
        ));
    }
    let (s_map, s_r1) = average_seen(evals);
    out.push_str(&format!(
        "average over {} seen domain(s): s_mAP {:.4}, s_R-1 {:.4}\n",
        evals.len(),
        s_map,
        s_r1
    ));
    out
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct CurvePoint {
    pub step: u32,
    pub domain_count: u32,
    pub s_map: f64,
    pub s_r1: f64,
}

pub fn write_curve_csv(path: &Path, points: &[CurvePoint]) -> Result<()> {
    let mut text = String::from("step,domain_count,s_map,s_r1\n");
    for p in points {
        text.push_str(&format!(
            "{},{},{},{}\n",
            p.step, p.domain_count, p.s_map, p.s_r1
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Minimal line plot of the averaged-metric curve; entirely optional, and
/// callers treat failures as warnings.
pub fn render_curve_png(points: &[CurvePoint], path: &Path) -> Result<()> {
    let (w, h) = (480u32, 320u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let margin = 40i64;
    let plot_w = w as i64 - 2 * margin;
    let plot_h = h as i64 - 2 * margin;
    for x in 0..=plot_w {
        img.put_pixel((margin + x) as u32, (h as i64 - margin) as u32, image::Rgb([0, 0, 0]));
    }
    for y in 0..=plot_h {
        img.put_pixel(margin as u32, (margin + y) as u32, image::Rgb([0, 0, 0]));
    }
    if points.is_empty() {
        img.save(path)?;
        return Ok(());
    }
    let max_step = points.iter().map(|p| p.step).max().unwrap_or(1).max(1);
    let mut draw_series = |values: Vec<f64>, color: [u8; 3]| {
        let mut prev: Option<(i64, i64)> = None;
        for (p, v) in points.iter().zip(values) {
            let x = margin + (p.step as i64 - 1) * plot_w / max_step.max(1) as i64;
            let y = h as i64 - margin - (v.clamp(0.0, 1.0) * plot_h as f64) as i64;
            if let Some((px, py)) = prev {
                let steps = (x - px).abs().max((y - py).abs()).max(1);
                for s in 0..=steps {
                    let ix = px + (x - px) * s / steps;
                    let iy = py + (y - py) * s / steps;
                    if ix >= 0 && iy >= 0 && (ix as u32) < w && (iy as u32) < h {
                        img.put_pixel(ix as u32, iy as u32, image::Rgb(color));
                    }
                }
            }
            prev = Some((x, y));
        }
    };
    draw_series(points.iter().map(|p| p.s_map).collect(), [200, 40, 40]);
    draw_series(points.iter().map(|p| p.s_r1).collect(), [40, 40, 200]);
    img.save(path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn cosine_distance_basics() {
        let q = array![[1.0f32, 0.0], [0.0, 1.0]];
        let g = array![[1.0f32, 0.0], [-1.0, 0.0]];
        let d = pairwise_distance(&q.view(), &g.view(), Metric::Cosine).unwrap();
        assert!(d[[0, 0]].abs() < 1e-12, "identical vectors");
        assert!((d[[1, 0]] - 1.0).abs() < 1e-12, "orthogonal vectors");
        assert!((d[[0, 1]] - 2.0).abs() < 1e-12, "antipodal vectors");
    }

    #[test]
    fn zero_norm_rejected_under_cosine() {
        let q = array![[0.0f32, 0.0]];
        let g = array![[1.0f32, 0.0]];
        assert!(matches!(
            pairwise_distance(&q.view(), &g.view(), Metric::Cosine),
            Err(Error::ZeroNormVector(0))
        ));
        assert!(pairwise_distance(&q.view(), &g.view(), Metric::Euclidean).is_ok());
    }

    #[test]
    fn ap_worked_example() {
        // relevant at ranks 1 and 3 of 2 total relevant
        let flags = [true, false, true, false];
        let ap = average_precision(&flags).unwrap();
        assert!((ap - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((ap - 0.8333).abs() < 1e-4);
    }

    #[test]
    fn ap_edge_cases() {
        assert!((average_precision(&[true, true, true]).unwrap() - 1.0).abs() < 1e-12);
        // single relevant at rank r -> 1/r
        for r in 1..6usize {
            let mut flags = vec![false; 6];
            flags[r - 1] = true;
            assert!((average_precision(&flags).unwrap() - 1.0 / r as f64).abs() < 1e-12);
        }
        assert!(average_precision(&[false, false]).is_none());
    }

    #[test]
    fn cmc_worked_example() {
        // 2 queries with first hits at ranks 1 and 2
        let rankings = vec![vec![true, false, false], vec![false, true, false]];
        let cmc = cmc_curve(&rankings, 3);
        assert!((cmc[0] - 0.5).abs() < 1e-12);
        assert!((cmc[1] - 1.0).abs() < 1e-12);
        assert!((cmc[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cmc_is_nondecreasing() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let rankings: Vec<Vec<bool>> = (0..5)
                .map(|_| (0..10).map(|_| rng.random::<f32>() < 0.3).collect())
                .collect();
            let cmc = cmc_curve(&rankings, 10);
            for k in 1..10 {
                assert!(cmc[k] >= cmc[k - 1]);
            }
            assert!(cmc[9] <= 1.0 + 1e-12);
        }
    }

    #[test]
    fn average_seen_examples() {
        let mk = |map: f64, r1: f64| DomainEval {
            dataset: "d".into(),
            domain_ordinal: None,
            map,
            rank1: r1,
            cmc: vec![r1],
            n_queries: 1,
            n_skipped: 0,
        };
        let single = [mk(0.8, 0.9)];
        assert_eq!(average_seen(&single), (0.8, 0.9));
        let two = [mk(0.8, 1.0), mk(0.6, 0.5)];
        let (m, r) = average_seen(&two);
        assert!((m - 0.7).abs() < 1e-12 && (r - 0.75).abs() < 1e-12);
        let swapped = [mk(0.6, 0.5), mk(0.8, 1.0)];
        assert_eq!(average_seen(&two), average_seen(&swapped));
    }

    #[test]
    fn junk_filtering_and_skip() {
        // one query; gallery has a same-id-same-cam junk item and a valid
        // cross-camera match
        let q = array![[1.0f32, 0.0]];
        let g = array![[1.0f32, 0.0], [0.9, 0.1], [0.0, 1.0]];
        let (map, cmc, counted, skipped) = evaluate_features(
            &q.view(),
            &[1],
            &["c1".into()],
            &g.view(),
            &[1, 1, 2],
            &["c1".into(), "c2".into(), "c2".into()],
            Metric::Cosine,
            3,
        )
        .unwrap();
        assert_eq!(counted, 1);
        assert_eq!(skipped, 0);
        assert!((map - 1.0).abs() < 1e-12);
        assert!((cmc[0] - 1.0).abs() < 1e-12);

        // only same-camera matches -> query skipped, which is an error when
        // it was the only query
        let result = evaluate_features(
            &q.view(),
            &[1],
            &["c1".into()],
            &g.view(),
            &[1, 3, 2],
            &["c1".into(), "c2".into(), "c2".into()],
            Metric::Cosine,
            3,
        );
        assert!(result.is_err());
    }

    #[test]
    fn ranking_invariance_under_monotone_transform() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(37);
        let q = Array2::from_shape_fn((4, 8), |_| rng.random_range(-1.0..1.0f32));
        let g = Array2::from_shape_fn((12, 8), |_| rng.random_range(-1.0..1.0f32));
        let ids_q: Vec<u32> = (0..4).map(|i| i % 3 + 1).collect();
        let cams_q: Vec<String> = (0..4).map(|_| "q".to_string()).collect();
        let ids_g: Vec<u32> = (0..12).map(|i| i % 3 + 1).collect();
        let cams_g: Vec<String> = (0..12).map(|_| "g".to_string()).collect();

        let base = pairwise_distance(&q.view(), &g.view(), Metric::Cosine).unwrap();
        let rank_from = |d: &Array2<f64>| -> Vec<Vec<usize>> {
            (0..4)
                .map(|qi| {
                    let mut order: Vec<usize> = (0..12).collect();
                    order.sort_by(|&a, &b| d[[qi, a]].total_cmp(&d[[qi, b]]).then(a.cmp(&b)));
                    order
                })
                .collect()
        };
        let transformed = base.mapv(|v| (2.0 * v + 1.0).powi(3));
        assert_eq!(rank_from(&base), rank_from(&transformed));
        let _ = (ids_q, cams_q, ids_g, cams_g);
    }

    #[test]
    fn heatmap_normalization_guard() {
        let flat = Array2::<f32>::zeros((4, 4));
        let min = flat.iter().cloned().fold(f32::INFINITY, f32::min);
        let max = flat.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        assert!(!(max - min).is_normal());
    }
}
