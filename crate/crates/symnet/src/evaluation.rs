//! Evaluation harness: closed-world top-k accuracy, independent component
//! (attribute/object) accuracy, the generalized protocol with a
//! calibration-bias sweep (seen/unseen curves, AUC, best harmonic mean),
//! and nearest-neighbor retrieval after attribute manipulation.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::data::{
    build_pair_mask, check_features_against_meta, DatasetMeta, EmbeddingTable, FeatureMatrix,
    PairMask, Protocol, Split,
};
use crate::error::{Result, SymNetError};
use crate::model::{ModelForward, Net};
use crate::rmd::{attr_probs, rmd_scores_batch};
use crate::tensor::Mat;
use crate::trainer::Checkpoint;

/// Closed-world report: top-k pair accuracy plus independent component
/// accuracies.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CzslReport {
    pub topk: BTreeMap<usize, f64>,
    pub attr_acc: f64,
    pub obj_acc: f64,
    pub n_samples: usize,
}

/// Generalized report: the bias grid, top-1 seen/unseen curves, AUC per
/// requested k, and the best harmonic mean with its operating point.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeneralizedReport {
    pub bias_grid: Vec<f64>,
    pub seen_curve: Vec<f64>,
    pub unseen_curve: Vec<f64>,
    pub auc_topk: BTreeMap<usize, f64>,
    pub best_hm: f64,
    pub seen_at_best: f64,
    pub unseen_at_best: f64,
    pub n_seen_samples: usize,
    pub n_unseen_samples: usize,
}

/// Per-sample evaluation state: pair scores plus component argmax inputs.
pub struct SampleScores {
    pub sample_idx: usize,
    pub attr_label: usize,
    pub obj_label: usize,
    pub p_attr: Vec<f32>,
    pub p_obj: Vec<f32>,
}

impl SampleScores {
    pub fn pair_score(&self, a: usize, o: usize) -> f64 {
        self.p_attr[a] as f64 * self.p_obj[o] as f64
    }
}

fn eval_threads(n_samples: usize) -> usize {
    let auto = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = match std::env::var("SYMNET_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(0) | Err(_) => auto,
            Ok(n) => n,
        },
        Err(_) => auto,
    };
    cap.max(1).min(n_samples.max(1))
}

/// Projects features and computes attribute/object probabilities for the
/// given samples. Work is chunked across threads (capped by
/// SYMNET_THREADS) and reassembled in sample order, so the output is
/// independent of the parallelism.
pub fn score_samples(
    ckpt: &Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    sample_indices: &[usize],
) -> Result<Vec<SampleScores>> {
    check_features_against_meta(features, meta)?;
    let model = &ckpt.model;
    let opts = ckpt.config.net_opts(crate::net::Mode::Eval);
    let kind = ckpt.config.dist;
    let gamma = ckpt.config.gamma as f32;

    let n_threads = eval_threads(sample_indices.len());
    let chunk_size = sample_indices.len().div_ceil(n_threads);
    let chunks: Vec<&[usize]> = if sample_indices.is_empty() {
        Vec::new()
    } else {
        sample_indices.chunks(chunk_size).collect()
    };

    let score_chunk = |indices: &[usize]| -> Result<Vec<SampleScores>> {
        let raw = features.gather_mat::<f32>(indices);
        let mut fw = ModelForward::new(model, opts);
        let raw_id = fw.leaf(raw);
        let latent_id = fw.project(raw_id)?;
        let obj_logit_id = fw.obj_logits(latent_id);
        let latent = fw.ctx.graph.value(latent_id).clone();
        let obj_logits = fw.ctx.graph.value(obj_logit_id).clone();
        let rmd = rmd_scores_batch(&latent, embeds, model, &opts, kind)?;
        let mut out = Vec::with_capacity(indices.len());
        for (row, &idx) in indices.iter().enumerate() {
            let s = &meta.samples[idx];
            let p_attr = attr_probs(rmd.d.row(row), gamma)?;
            let p_obj = crate::net::softmax(obj_logits.row(row));
            out.push(SampleScores {
                sample_idx: idx,
                attr_label: s.attr,
                obj_label: s.obj,
                p_attr,
                p_obj,
            });
        }
        Ok(out)
    };

    let mut results: Vec<Vec<SampleScores>> = Vec::with_capacity(chunks.len());
    if chunks.len() <= 1 {
        for chunk in &chunks {
            results.push(score_chunk(chunk)?);
        }
    } else {
        let collected: Vec<Result<Vec<SampleScores>>> = std::thread::scope(|scope| {
            let handles: Vec<_> = chunks
                .iter()
                .map(|chunk| scope.spawn(move || score_chunk(chunk)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("scoring thread panicked"))
                .collect()
        });
        for r in collected {
            results.push(r?);
        }
    }
    Ok(results.into_iter().flatten().collect())
}

/// Candidates admitted by the mask, ranked by descending score with
/// deterministic (attr, obj) tie-breaking; returns the rank (1-based) of
/// the true pair.
fn rank_of_truth(
    scores: &SampleScores,
    candidates: &[(usize, usize)],
    bias: f64,
    unseen: &HashSet<(usize, usize)>,
) -> usize {
    let truth = (scores.attr_label, scores.obj_label);
    let biased = |p: (usize, usize)| {
        let mut s = scores.pair_score(p.0, p.1);
        if unseen.contains(&p) {
            s += bias;
        }
        s
    };
    let truth_score = biased(truth);
    let mut rank = 1usize;
    for &p in candidates {
        if p == truth {
            continue;
        }
        let s = biased(p);
        if s > truth_score || (s == truth_score && p < truth) {
            rank += 1;
        }
    }
    rank
}

/// Closed-world protocol: candidates are exactly the unseen test pairs; a
/// prediction is correct only when both components are right. Component
/// accuracies come from independent argmaxes over the full vocabularies.
pub fn evaluate_closed(
    ckpt: &Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    ks: &[usize],
) -> Result<CzslReport> {
    let mask = build_pair_mask(meta, Protocol::ClosedWorld, false);
    let indices = meta.split_indices(Split::Test);
    let scores = score_samples(ckpt, meta, features, embeds, &indices)?;
    report_from_scores(&scores, &mask, ks)
}

/// Builds a closed-world style report from per-sample scores.
pub fn report_from_scores(
    scores: &[SampleScores],
    mask: &PairMask,
    ks: &[usize],
) -> Result<CzslReport> {
    let candidates = mask.admitted_pairs();
    if candidates.is_empty() {
        return Err(SymNetError::EmptyCandidateSet);
    }
    let no_bias: HashSet<(usize, usize)> = HashSet::new();
    let mut topk_hits: BTreeMap<usize, usize> = ks.iter().map(|&k| (k, 0)).collect();
    let mut attr_hits = 0usize;
    let mut obj_hits = 0usize;
    for s in scores {
        let rank = rank_of_truth(s, &candidates, 0.0, &no_bias);
        for (&k, hits) in topk_hits.iter_mut() {
            if rank <= k {
                *hits += 1;
            }
        }
        if argmax_f32(&s.p_attr) == s.attr_label {
            attr_hits += 1;
        }
        if argmax_f32(&s.p_obj) == s.obj_label {
            obj_hits += 1;
        }
    }
    let n = scores.len();
    let frac = |hits: usize| if n == 0 { 0.0 } else { hits as f64 / n as f64 };
    Ok(CzslReport {
        topk: topk_hits.into_iter().map(|(k, h)| (k, frac(h))).collect(),
        attr_acc: frac(attr_hits),
        obj_acc: frac(obj_hits),
        n_samples: n,
    })
}

fn argmax_f32(v: &[f32]) -> usize {
    let mut best = 0usize;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// How the calibration-bias grid is chosen.
#[derive(Debug, Clone)]
pub enum GridSpec {
    /// Midpoints of adjacent distinct per-sample score margins, plus
    /// endpoints beyond both extremes: traces every switch point of the
    /// top-1 decision exactly.
    ExactMidpoints,
    Explicit(Vec<f64>),
}

/// Trapezoid area under (seen, unseen) points sorted by seen accuracy.
pub fn trapezoid_auc(points: &[(f64, f64)]) -> f64 {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite accuracies"));
    let mut auc = 0.0;
    for w in pts.windows(2) {
        auc += (w[1].0 - w[0].0) * (w[0].1 + w[1].1) / 2.0;
    }
    auc
}

pub fn harmonic_mean(s: f64, u: f64) -> f64 {
    if s + u == 0.0 {
        0.0
    } else {
        2.0 * s * u / (s + u)
    }
}

/// Generalized protocol: candidates are seen and unseen pairs together; a
/// scalar bias added to every unseen-pair score sweeps the seen/unseen
/// trade-off. Evaluates the given split (test, or val with its own unseen
/// pair set).
pub fn evaluate_generalized(
    ckpt: &Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    ks: &[usize],
    grid: &GridSpec,
    split: Split,
) -> Result<GeneralizedReport> {
    let include_val = split == Split::Val;
    let mask = build_pair_mask(meta, Protocol::Generalized, include_val);
    let unseen_pairs: Vec<(usize, usize)> = if split == Split::Val {
        match &meta.val_pairs {
            Some(vp) => vp.clone(),
            None => {
                eprintln!(
                    "warning: no val_pairs in metadata; treating test pairs as the unseen set"
                );
                meta.test_pairs.clone()
            }
        }
    } else {
        meta.test_pairs.clone()
    };
    let indices = meta.split_indices(split);
    let scores = score_samples(ckpt, meta, features, embeds, &indices)?;
    generalized_from_scores(&scores, &mask, &unseen_pairs, ks, grid)
}

/// Core of the generalized protocol, reusable against raw score sets.
pub fn generalized_from_scores(
    scores: &[SampleScores],
    mask: &PairMask,
    unseen_pairs: &[(usize, usize)],
    ks: &[usize],
    grid: &GridSpec,
) -> Result<GeneralizedReport> {
    let candidates = mask.admitted_pairs();
    if candidates.is_empty() {
        return Err(SymNetError::EmptyCandidateSet);
    }
    let unseen: HashSet<(usize, usize)> = unseen_pairs.iter().cloned().collect();
    let (seen_samples, unseen_samples): (Vec<&SampleScores>, Vec<&SampleScores>) = scores
        .iter()
        .partition(|s| !unseen.contains(&(s.attr_label, s.obj_label)));
    if seen_samples.is_empty() || unseen_samples.is_empty() {
        eprintln!(
            "warning: generalized evaluation is degenerate ({} seen, {} unseen samples)",
            seen_samples.len(),
            unseen_samples.len()
        );
    }

    let bias_grid = match grid {
        GridSpec::Explicit(g) => {
            if g.is_empty() {
                return Err(SymNetError::EmptyGrid);
            }
            g.clone()
        }
        GridSpec::ExactMidpoints => {
            // Per-sample margin between the best seen and best unseen
            // candidate; the top-1 decision flips exactly at these values.
            let mut margins: Vec<f64> = Vec::with_capacity(scores.len());
            for s in scores {
                let mut best_seen = f64::NEG_INFINITY;
                let mut best_unseen = f64::NEG_INFINITY;
                for &p in &candidates {
                    let v = s.pair_score(p.0, p.1);
                    if unseen.contains(&p) {
                        best_unseen = best_unseen.max(v);
                    } else {
                        best_seen = best_seen.max(v);
                    }
                }
                if best_seen.is_finite() && best_unseen.is_finite() {
                    margins.push(best_seen - best_unseen);
                }
            }
            margins.sort_by(|a, b| a.partial_cmp(b).unwrap());
            margins.dedup();
            let mut g = Vec::with_capacity(margins.len() + 1);
            match (margins.first(), margins.last()) {
                (Some(&lo), Some(&hi)) => {
                    g.push(lo - 1.0);
                    for w in margins.windows(2) {
                        g.push((w[0] + w[1]) / 2.0);
                    }
                    g.push(hi + 1.0);
                }
                _ => {
                    g.push(0.0);
                }
            }
            g
        }
    };

    let acc_at = |group: &[&SampleScores], bias: f64, k: usize| -> f64 {
        if group.is_empty() {
            return 0.0;
        }
        let hits = group
            .iter()
            .filter(|s| rank_of_truth(s, &candidates, bias, &unseen) <= k)
            .count();
        hits as f64 / group.len() as f64
    };

    let mut auc_topk = BTreeMap::new();
    let mut top1_points: Vec<(f64, f64)> = Vec::new();
    for &k in ks {
        let points: Vec<(f64, f64)> = bias_grid
            .iter()
            .map(|&b| (acc_at(&seen_samples, b, k), acc_at(&unseen_samples, b, k)))
            .collect();
        auc_topk.insert(k, trapezoid_auc(&points));
        if k == 1 {
            top1_points = points;
        }
    }
    if top1_points.is_empty() {
        top1_points = bias_grid
            .iter()
            .map(|&b| (acc_at(&seen_samples, b, 1), acc_at(&unseen_samples, b, 1)))
            .collect();
    }

    let mut best_hm = 0.0;
    let mut seen_at_best = 0.0;
    let mut unseen_at_best = 0.0;
    for &(s, u) in &top1_points {
        let hm = harmonic_mean(s, u);
        if hm > best_hm {
            best_hm = hm;
            seen_at_best = s;
            unseen_at_best = u;
        }
    }

    Ok(GeneralizedReport {
        bias_grid,
        seen_curve: top1_points.iter().map(|p| p.0).collect(),
        unseen_curve: top1_points.iter().map(|p| p.1).collect(),
        auc_topk,
        best_hm,
        seen_at_best,
        unseen_at_best,
        n_seen_samples: seen_samples.len(),
        n_unseen_samples: unseen_samples.len(),
    })
}

/// One retrieval hit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RetrievalHit {
    pub rank: usize,
    pub sample_id: String,
    pub distance: f64,
}

/// Ranks gallery rows by ascending L2 distance to the query, ties broken
/// by the accompanying index; k is clamped to the gallery size. This is
/// the nearest-neighbor core of [`retrieve`]: with identity transforms
/// the query is the source's own latent and this reduces to plain
/// nearest-neighbor search.
pub fn rank_gallery(
    query: &[f32],
    gallery: &Mat<f32>,
    indices: &[usize],
    k: usize,
) -> Vec<(usize, f64)> {
    assert_eq!(gallery.rows(), indices.len());
    let mut ranked: Vec<(f64, usize)> = indices
        .iter()
        .enumerate()
        .map(|(row, &idx)| {
            let d = crate::tensor::l2_distance_slices(gallery.row(row), query);
            (d as f64, idx)
        })
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
    ranked.truncate(k);
    ranked.into_iter().map(|(d, idx)| (idx, d)).collect()
}

/// Removes attribute `remove_attr` with the decoupler, adds `add_attr`
/// with the coupler, then returns the k nearest test-gallery samples to
/// the manipulated embedding (source excluded, ties broken by sample
/// index, k clamped to the gallery size).
#[allow(clippy::too_many_arguments)]
pub fn retrieve(
    ckpt: &Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    src_sample: &str,
    remove_attr: usize,
    add_attr: usize,
    k: usize,
) -> Result<Vec<RetrievalHit>> {
    check_features_against_meta(features, meta)?;
    let n = meta.n_attrs();
    for attr in [remove_attr, add_attr] {
        if attr >= n {
            return Err(SymNetError::AttrOutOfRange { index: attr, n });
        }
    }
    if remove_attr == add_attr {
        return Err(SymNetError::IdenticalAttrIndices { index: remove_attr });
    }
    let src_idx = meta.sample_index_by_id(src_sample)?;

    let opts = ckpt.config.net_opts(crate::net::Mode::Eval);
    let model = &ckpt.model;

    // Query: project, decouple the removed attribute, couple the added one.
    let mut fw = ModelForward::new(model, opts);
    let raw = fw.leaf(features.gather_mat::<f32>(&[src_idx]));
    let latent = fw.project(raw)?;
    let e_remove = fw.leaf(embeds.gather_mat::<f32>(&[remove_attr]));
    let e_add = fw.leaf(embeds.gather_mat::<f32>(&[add_attr]));
    let removed = fw.transform(Net::Decoupling, latent, e_remove)?;
    let query_id = fw.transform(Net::Coupling, removed, e_add)?;
    let query = fw.ctx.graph.value(query_id).row(0).to_vec();

    // Gallery: projected test features, source excluded.
    let gallery_idx: Vec<usize> = meta
        .split_indices(Split::Test)
        .into_iter()
        .filter(|&i| i != src_idx)
        .collect();
    let mut fw = ModelForward::new(model, opts);
    let raw = fw.leaf(features.gather_mat::<f32>(&gallery_idx));
    let latent = fw.project(raw)?;
    let gallery: Mat<f32> = fw.ctx.graph.value(latent).clone();

    Ok(rank_gallery(&query, &gallery, &gallery_idx, k)
        .into_iter()
        .enumerate()
        .map(|(i, (idx, d))| RetrievalHit {
            rank: i + 1,
            sample_id: meta.samples[idx].id.clone(),
            distance: d,
        })
        .collect())
}
