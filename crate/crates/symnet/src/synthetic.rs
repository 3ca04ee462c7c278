//! Synthetic attribute-object datasets with known ground truth.
//!
//! Latent geometry: each object owns a prototype vector, each attribute
//! an additive offset, and a sample of pair (a, o) is
//! `prototype_o + offset_a + noise`. Raw features are a fixed linear mix
//! of the latents, so the learned projector has an exact target, and
//! attribute "word embeddings" are the true offsets plus small noise.
//! Under this geometry coupling/decoupling have an exact additive
//! realization, which makes every learning claim checkable against an
//! oracle at desk scale.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{
    sample_negative, DatasetMeta, EmbeddingTable, FeatureMatrix, SampleRecord, Split,
};
use crate::dist::distance_slices;
use crate::error::{Result, SymNetError};
use crate::objectives::{loss_clo, loss_com, loss_inv, loss_sym, DistSpec};
use crate::tensor::Mat;
use crate::transforms::{AttrTransform, EvalTransform};

fn default_feat_dim() -> usize {
    512
}

fn default_latent_dim() -> usize {
    300
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthSpec {
    pub n_attrs: usize,
    pub n_objs: usize,
    #[serde(default = "default_feat_dim")]
    pub feat_dim: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    pub samples_per_pair: usize,
    pub unseen_fraction: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// The desk-scale configuration used by the verification suites:
    /// trains in minutes on one CPU core.
    pub fn desk(seed: u64) -> Self {
        SynthSpec {
            n_attrs: 6,
            n_objs: 8,
            feat_dim: 64,
            latent_dim: 32,
            samples_per_pair: 40,
            unseen_fraction: 0.15,
            noise_sigma: 0.05,
            seed,
        }
    }
}

/// Training configuration sized for [`SynthSpec::desk`] datasets: small
/// hidden widths, a staged learning rate is unnecessary, and every loss
/// term participates.
pub fn desk_train_config(spec: &SynthSpec, seed: u64) -> crate::trainer::TrainConfig {
    crate::trainer::TrainConfig {
        lr: 0.01,
        batch_size: 64,
        epochs: 60,
        weights: crate::objectives::LossWeights {
            sym: 0.05,
            axiom: 0.05,
            cls_attr: 1.0,
            cls_obj: 0.5,
            triplet: 0.5,
            margin: 0.5,
        },
        gamma: 1.0,
        seed,
        embed_dim: spec.latent_dim,
        feat_dim: spec.feat_dim,
        latent_dim: spec.latent_dim,
        attn_hidden: 2 * spec.latent_dim,
        clf_hidden: 2 * spec.latent_dim,
        log_every: 5,
        ..crate::trainer::TrainConfig::default()
    }
}

/// The generating geometry, kept for auditing and oracle checks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthTruth {
    /// n_objs x latent_dim object prototypes.
    pub prototypes: Vec<Vec<f32>>,
    /// n_attrs x latent_dim attribute offsets, mutually well separated.
    pub offsets: Vec<Vec<f32>>,
    /// feat_dim x latent_dim mixing map from latent to raw features.
    pub mixing: Vec<Vec<f32>>,
    /// One latent vector per generated sample, in sample order.
    pub sample_latents: Vec<Vec<f32>>,
}

const OFFSET_RETRIES: usize = 64;
const SPLIT_RETRIES: usize = 100;

fn min_pairwise_distance(rows: &[Vec<f32>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let u: Vec<f64> = rows[i].iter().map(|&v| v as f64).collect();
            let v: Vec<f64> = rows[j].iter().map(|&v| v as f64).collect();
            best = best.min(crate::tensor::l2_distance_slices(&u, &v));
        }
    }
    best
}

pub fn gen_synthetic(
    spec: &SynthSpec,
) -> Result<(DatasetMeta, FeatureMatrix, EmbeddingTable, SynthTruth)> {
    if spec.n_attrs < 2 || spec.n_objs < 2 {
        return Err(SymNetError::InvariantViolation {
            rule: "synth_spec_min_sizes".into(),
            detail: format!(
                "need >= 2 attrs and objs, got {} x {}",
                spec.n_attrs, spec.n_objs
            ),
        });
    }
    if !(spec.unseen_fraction > 0.0 && spec.unseen_fraction < 1.0) {
        return Err(SymNetError::InvariantViolation {
            rule: "synth_spec_unseen_fraction".into(),
            detail: format!("unseen_fraction {} outside (0, 1)", spec.unseen_fraction),
        });
    }
    if spec.noise_sigma < 0.0 || spec.samples_per_pair == 0 {
        return Err(SymNetError::InvariantViolation {
            rule: "synth_spec_fields".into(),
            detail: "noise_sigma must be >= 0 and samples_per_pair >= 1".into(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let latent = spec.latent_dim;
    let normal = Normal::new(0.0f64, 1.0).unwrap();
    let gauss_rows = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64| {
        (0..rows)
            .map(|_| {
                (0..cols)
                    .map(|_| (normal.sample(rng) * scale) as f32)
                    .collect::<Vec<f32>>()
            })
            .collect::<Vec<Vec<f32>>>()
    };

    // Attribute offsets: resample until the separability margin holds.
    let separation = 4.0 * spec.noise_sigma * (latent as f64).sqrt();
    let offset_scale = (separation / (2.0 * latent as f64).sqrt() * 4.0).max(0.5);
    let mut offsets = None;
    for _ in 0..OFFSET_RETRIES {
        let cand = gauss_rows(&mut rng, spec.n_attrs, latent, offset_scale);
        if min_pairwise_distance(&cand) >= separation {
            offsets = Some(cand);
            break;
        }
    }
    let offsets = offsets.ok_or(SymNetError::InfeasibleSplit {
        attempts: OFFSET_RETRIES,
    })?;

    let prototypes = gauss_rows(&mut rng, spec.n_objs, latent, 1.0);
    let mixing = gauss_rows(
        &mut rng,
        spec.feat_dim,
        latent,
        1.0 / (latent as f64).sqrt(),
    );

    // Pair split: hold out a fraction of the grid while keeping every
    // component covered by some seen pair.
    let all_pairs: Vec<(usize, usize)> = (0..spec.n_attrs)
        .flat_map(|a| (0..spec.n_objs).map(move |o| (a, o)))
        .collect();
    let n_unseen =
        ((spec.unseen_fraction * all_pairs.len() as f64).ceil() as usize).min(all_pairs.len() - 1);
    let mut split = None;
    for _ in 0..SPLIT_RETRIES {
        let mut shuffled = all_pairs.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut rng);
        let unseen: std::collections::HashSet<(usize, usize)> =
            shuffled[..n_unseen].iter().cloned().collect();
        let seen: Vec<(usize, usize)> = all_pairs
            .iter()
            .cloned()
            .filter(|p| !unseen.contains(p))
            .collect();
        let attrs_covered: std::collections::HashSet<usize> = seen.iter().map(|p| p.0).collect();
        let objs_covered: std::collections::HashSet<usize> = seen.iter().map(|p| p.1).collect();
        if attrs_covered.len() == spec.n_attrs && objs_covered.len() == spec.n_objs {
            let mut unseen: Vec<(usize, usize)> = unseen.into_iter().collect();
            unseen.sort();
            split = Some((seen, unseen));
            break;
        }
    }
    let (train_pairs, test_pairs) = split.ok_or(SymNetError::InfeasibleSplit {
        attempts: SPLIT_RETRIES,
    })?;
    let unseen_set: std::collections::HashSet<(usize, usize)> =
        test_pairs.iter().cloned().collect();

    // Samples, iterated in pair grid order so generation is reproducible.
    let mut samples = Vec::new();
    let mut sample_latents: Vec<Vec<f32>> = Vec::new();
    let mut feature_data: Vec<f32> = Vec::new();
    for &(a, o) in &all_pairs {
        let split = if unseen_set.contains(&(a, o)) {
            Split::Test
        } else {
            Split::Train
        };
        for _ in 0..spec.samples_per_pair {
            let idx = samples.len();
            let mut z = vec![0.0f32; latent];
            for (d, zd) in z.iter_mut().enumerate() {
                let noise = (normal.sample(&mut rng) * spec.noise_sigma) as f32;
                *zd = prototypes[o][d] + offsets[a][d] + noise;
            }
            for mix_row in &mixing {
                let mut acc = 0.0f32;
                for d in 0..latent {
                    acc += mix_row[d] * z[d];
                }
                feature_data.push(acc);
            }
            sample_latents.push(z);
            samples.push(SampleRecord {
                id: format!("s{idx:05}"),
                attr: a,
                obj: o,
                split,
            });
        }
    }

    // Attribute embeddings: the true offsets plus small noise (a tenth of
    // the sample noise), so the attention pathway gets informative input.
    let emb_sigma = 0.1 * spec.noise_sigma;
    let mut embed_data = Vec::with_capacity(spec.n_attrs * latent);
    for offset_row in &offsets {
        for &v in offset_row {
            embed_data.push(v + (normal.sample(&mut rng) * emb_sigma) as f32);
        }
    }

    let count = samples.len();
    let meta = DatasetMeta {
        attributes: (0..spec.n_attrs).map(|i| format!("attr_{i}")).collect(),
        objects: (0..spec.n_objs).map(|i| format!("obj_{i}")).collect(),
        train_pairs,
        test_pairs,
        val_pairs: None,
        samples,
    };
    meta.validate()?;

    Ok((
        meta,
        FeatureMatrix::new(count, spec.feat_dim, feature_data),
        EmbeddingTable::new(spec.n_attrs, latent, embed_data),
        SynthTruth {
            prototypes,
            offsets,
            mixing,
            sample_latents,
        },
    ))
}

/// Decodes the generating attribute of a latent vector by the nearest
/// (prototype + offset) combination.
pub fn decode_attr(truth: &SynthTruth, latent: &[f32]) -> usize {
    let mut best = (f64::INFINITY, 0usize);
    for (a, offset) in truth.offsets.iter().enumerate() {
        for proto in &truth.prototypes {
            let d: f64 = latent
                .iter()
                .zip(proto.iter().zip(offset))
                .map(|(&z, (&p, &u))| {
                    let diff = (z - p - u) as f64;
                    diff * diff
                })
                .sum();
            if d < best.0 {
                best = (d, a);
            }
        }
    }
    best.1
}

/// Ground-truth answer to "does this sample have this attribute":
/// whether the latent's generating attribute equals the query.
pub fn oracle_rmd_sign(truth: &SynthTruth, latent: &[f32], attr: usize) -> bool {
    decode_attr(truth, latent) == attr
}

/// Fraction of samples whose geometric decode matches their label; with a
/// valid separation margin this should be essentially perfect.
pub fn latent_attr_accuracy(truth: &SynthTruth, meta: &DatasetMeta) -> f64 {
    let hits = truth
        .sample_latents
        .iter()
        .zip(&meta.samples)
        .filter(|(z, s)| decode_attr(truth, z) == s.attr)
        .count();
    hits as f64 / meta.samples.len() as f64
}

/// Mean per-axiom residuals over a sample set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxiomResiduals {
    pub sym: f64,
    pub clo: f64,
    pub inv: f64,
    pub com: f64,
    pub n_used: usize,
}

/// Mean symmetry/closure/invertibility/commutativity residuals over the
/// given samples, with negatives drawn by uniform negative sampling.
/// Samples whose object has no alternative attribute in the train split
/// are skipped. Generic over the transforms so mocks can stand in.
#[allow(clippy::too_many_arguments)]
pub fn residuals_with<T, C, D>(
    project: impl Fn(&[f32]) -> Vec<T>,
    con: &C,
    decon: &D,
    dist: &DistSpec,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<AxiomResiduals>
where
    T: crate::tensor::Scalar,
    C: AttrTransform<T>,
    D: AttrTransform<T>,
{
    let mut sums = [0.0f64; 4];
    let mut used = 0usize;
    for &idx in indices {
        let sample = &meta.samples[idx];
        let neg = match sample_negative(meta, sample, rng) {
            Ok(n) => n,
            Err(SymNetError::NoNegativeAvailable { .. }) => continue,
            Err(e) => return Err(e),
        };
        let f = project(features.row(idx));
        let emb_i: Vec<T> = embeds
            .row(sample.attr)
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        let emb_j: Vec<T> = embeds
            .row(neg.attr)
            .iter()
            .map(|&v| T::lit(v as f64))
            .collect();
        let (i, j) = (sample.attr, neg.attr);
        sums[0] += loss_sym(&f, &emb_i, &emb_j, i, j, con, decon, dist)?
            .to_f64()
            .unwrap();
        sums[1] += loss_clo(&f, &emb_i, &emb_j, i, j, con, decon, dist)?
            .to_f64()
            .unwrap();
        sums[2] += loss_inv(&f, &emb_i, &emb_j, i, j, con, decon, dist)?
            .to_f64()
            .unwrap();
        sums[3] += loss_com(&f, &emb_i, &emb_j, i, j, con, decon, dist)?
            .to_f64()
            .unwrap();
        used += 1;
    }
    let denom = used.max(1) as f64;
    Ok(AxiomResiduals {
        sym: sums[0] / denom,
        clo: sums[1] / denom,
        inv: sums[2] / denom,
        com: sums[3] / denom,
        n_used: used,
    })
}

/// Residuals of a trained (or freshly initialized) model in eval mode.
pub fn axiom_residuals(
    ckpt: &crate::trainer::Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    indices: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<AxiomResiduals> {
    let opts = ckpt.config.net_opts(crate::net::Mode::Eval);
    let con = EvalTransform::new(&ckpt.model.con, opts);
    let decon = EvalTransform::new(&ckpt.model.decon, opts);
    let dist = ckpt.config.dist_spec();
    let model = &ckpt.model;
    let project = |raw: &[f32]| -> Vec<f32> {
        crate::transforms::project_feature(&Mat::row_vec(raw), &model.proj)
            .expect("projector shape")
            .row(0)
            .to_vec()
    };
    residuals_with(
        project, &con, &decon, &dist, meta, features, embeds, indices, rng,
    )
}

/// Agreement between the model's sign rule and the ground truth, averaged
/// over every (sample, attribute) decision.
pub fn sign_rule_agreement(
    ckpt: &crate::trainer::Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    truth: &SynthTruth,
    indices: &[usize],
) -> Result<f64> {
    let opts = ckpt.config.net_opts(crate::net::Mode::Eval);
    let raw = features.gather_mat::<f32>(indices);
    let mut fw = crate::model::ModelForward::new(&ckpt.model, opts);
    let raw_id = fw.leaf(raw);
    let latent_id = fw.project(raw_id)?;
    let latent = fw.ctx.graph.value(latent_id).clone();
    let rmd = crate::rmd::rmd_scores_batch(&latent, embeds, &ckpt.model, &opts, ckpt.config.dist)?;
    let n = meta.n_attrs();
    let mut agree = 0usize;
    for (row, &idx) in indices.iter().enumerate() {
        let z = &truth.sample_latents[idx];
        for a in 0..n {
            let model_says = rmd.d.at(row, a) >= 0.0;
            let truth_says = oracle_rmd_sign(truth, z, a);
            if model_says == truth_says {
                agree += 1;
            }
        }
    }
    Ok(agree as f64 / (indices.len() * n) as f64)
}

/// Sanity check used by tests: distance between a sample latent and its
/// own (prototype + offset) center.
pub fn latent_noise_magnitude(truth: &SynthTruth, meta: &DatasetMeta, idx: usize) -> f64 {
    let s = &meta.samples[idx];
    let z = &truth.sample_latents[idx];
    let center: Vec<f32> = truth.prototypes[s.obj]
        .iter()
        .zip(&truth.offsets[s.attr])
        .map(|(&p, &u)| p + u)
        .collect();
    distance_slices(
        &z.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        &center.iter().map(|&v| v as f64).collect::<Vec<_>>(),
        crate::dist::DistKind::L2,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            n_attrs: 3,
            n_objs: 4,
            feat_dim: 16,
            latent_dim: 8,
            samples_per_pair: 20,
            unseen_fraction: 0.25,
            noise_sigma: 0.05,
            seed: 11,
        }
    }

    #[test]
    fn counting_example() {
        let (meta, features, embeds, truth) = gen_synthetic(&small_spec()).unwrap();
        assert_eq!(meta.train_pairs.len() + meta.test_pairs.len(), 12);
        assert_eq!(meta.test_pairs.len(), 3);
        assert_eq!(meta.train_pairs.len(), 9);
        assert_eq!(meta.split_indices(Split::Train).len(), 180);
        assert_eq!(meta.split_indices(Split::Test).len(), 60);
        assert_eq!(features.count, 240);
        assert_eq!(embeds.count, 3);
        assert_eq!(truth.sample_latents.len(), 240);
    }

    #[test]
    fn zero_noise_collapses_pairs() {
        let mut spec = small_spec();
        spec.noise_sigma = 0.0;
        let (meta, _, _, truth) = gen_synthetic(&spec).unwrap();
        // all samples of one pair share a latent point
        let mut by_pair: std::collections::HashMap<(usize, usize), &Vec<f32>> =
            std::collections::HashMap::new();
        for (i, s) in meta.samples.iter().enumerate() {
            let z = &truth.sample_latents[i];
            match by_pair.entry((s.attr, s.obj)) {
                std::collections::hash_map::Entry::Vacant(e) => {
                    e.insert(z);
                }
                std::collections::hash_map::Entry::Occupied(e) => {
                    assert_eq!(*e.get(), z);
                }
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = small_spec();
        let (m1, f1, e1, t1) = gen_synthetic(&spec).unwrap();
        let (m2, f2, e2, t2) = gen_synthetic(&spec).unwrap();
        assert_eq!(
            serde_json::to_string(&m1).unwrap(),
            serde_json::to_string(&m2).unwrap()
        );
        assert_eq!(f1.data, f2.data);
        assert_eq!(e1.data, e2.data);
        assert_eq!(t1.offsets, t2.offsets);
        assert_eq!(t1.sample_latents, t2.sample_latents);
    }

    #[test]
    fn desk_spec_is_separable() {
        let (meta, _, _, truth) = gen_synthetic(&SynthSpec::desk(5)).unwrap();
        let acc = latent_attr_accuracy(&truth, &meta);
        assert!(acc >= 0.99, "latent separability only {acc}");

        // separation invariant on the offsets
        let spec = SynthSpec::desk(5);
        let sep = 4.0 * spec.noise_sigma * (spec.latent_dim as f64).sqrt();
        assert!(min_pairwise_distance(&truth.offsets) >= sep);
    }

    #[test]
    fn split_satisfies_dataset_invariants() {
        for seed in 0..5 {
            let mut spec = small_spec();
            spec.seed = seed;
            let (meta, _, _, _) = gen_synthetic(&spec).unwrap();
            meta.validate().unwrap();
            assert!(!meta.test_pairs.is_empty());
        }
    }

    #[test]
    fn infeasible_split_reported_after_retries() {
        // 2 x 2 grid with 90% of pairs held out: one seen pair can never
        // cover both attributes and both objects.
        let spec = SynthSpec {
            n_attrs: 2,
            n_objs: 2,
            feat_dim: 8,
            latent_dim: 4,
            samples_per_pair: 2,
            unseen_fraction: 0.9,
            noise_sigma: 0.01,
            seed: 1,
        };
        assert!(matches!(
            gen_synthetic(&spec).unwrap_err(),
            SymNetError::InfeasibleSplit { .. }
        ));
    }

    #[test]
    fn oracle_sign_examples() {
        let (meta, _, _, truth) = gen_synthetic(&small_spec()).unwrap();
        let idx = 0;
        let attr = meta.samples[idx].attr;
        let z = &truth.sample_latents[idx];
        assert!(oracle_rmd_sign(&truth, z, attr));
        let other = (attr + 1) % meta.n_attrs();
        assert!(!oracle_rmd_sign(&truth, z, other));
    }

    #[test]
    fn identity_mocked_residuals_vanish() {
        let (meta, features, embeds, _) = gen_synthetic(&small_spec()).unwrap();
        let id_con = |f: &[f32], _: &[f32]| f.to_vec();
        let id_decon = |f: &[f32], _: &[f32]| f.to_vec();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let indices = meta.split_indices(Split::Train);
        let res = residuals_with(
            |raw: &[f32]| raw.to_vec(),
            &id_con,
            &id_decon,
            &DistSpec::default(),
            &meta,
            &features,
            &embeds,
            &indices[..20],
            &mut rng,
        )
        .unwrap();
        assert_eq!(res.sym, 0.0);
        assert_eq!(res.clo, 0.0);
        assert_eq!(res.inv, 0.0);
        assert_eq!(res.com, 0.0);
        assert!(res.n_used > 0);
    }

    #[test]
    fn random_model_residuals_are_non_negative() {
        use crate::model::ModelDims;
        use crate::trainer::{Checkpoint, RngState, TrainConfig};
        let spec = small_spec();
        let (meta, features, embeds, _) = gen_synthetic(&spec).unwrap();
        let cfg = TrainConfig {
            feat_dim: spec.feat_dim,
            embed_dim: spec.latent_dim,
            latent_dim: spec.latent_dim,
            attn_hidden: 8,
            clf_hidden: 8,
            ..TrainConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let dims = ModelDims {
            feat_dim: spec.feat_dim,
            embed_dim: spec.latent_dim,
            latent_dim: spec.latent_dim,
            attn_hidden: 8,
            clf_hidden: 8,
            n_attrs: meta.n_attrs(),
            n_objs: meta.n_objs(),
            obj_head_layers: 2,
        };
        let model = crate::model::SymNetModel::<f32>::init(dims, &mut rng);
        let ckpt = Checkpoint {
            model,
            config: cfg,
            epoch: 0,
            rng: RngState::capture(&rng),
        };
        let indices = meta.split_indices(Split::Test);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let res = axiom_residuals(&ckpt, &meta, &features, &embeds, &indices, &mut rng).unwrap();
        for v in [res.sym, res.clo, res.inv, res.com] {
            assert!(v >= 0.0 && v.is_finite());
        }
    }
}
