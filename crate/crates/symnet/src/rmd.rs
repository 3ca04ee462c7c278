//! Relative moving distance recognition and the probabilistic heads.
//!
//! For a latent feature f and every attribute, both transformers are
//! applied in parallel; `d_plus` is how far coupling moved the embedding,
//! `d_minus` how far decoupling moved it, and `d = d_minus - d_plus` is
//! the relative moving distance. A non-negative `d` reads as "the sample
//! has this attribute". Attribute probabilities pass `gamma * d` through
//! a sigmoid; object probabilities come from the classifier head; pair
//! scores are their product under a candidate mask.

use crate::data::{EmbeddingTable, PairMask};
use crate::dist::{row_distance_graph, DistKind};
use crate::error::{Result, SymNetError};
use crate::model::{ModelForward, Net, SymNetModel};
use crate::tensor::{sigmoid_scalar, Mat, Scalar};
use crate::transforms::NetOpts;

/// Per-attribute moving distances for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct RmdScores<T> {
    pub d_plus: Vec<T>,
    pub d_minus: Vec<T>,
    pub d: Vec<T>,
}

impl<T: Scalar> RmdScores<T> {
    /// The binary decision rule: `d >= 0` classifies as "has attribute".
    pub fn has_attribute(&self, attr: usize) -> bool {
        self.d[attr] >= T::zero()
    }

    pub fn into_result(self, gamma: T) -> Result<RmdResult<T>> {
        let p_attr = attr_probs(&self.d, gamma)?;
        Ok(RmdResult {
            d_plus: self.d_plus,
            d_minus: self.d_minus,
            d: self.d,
            p_attr,
        })
    }
}

/// Moving distances plus the derived attribute probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RmdResult<T> {
    pub d_plus: Vec<T>,
    pub d_minus: Vec<T>,
    pub d: Vec<T>,
    pub p_attr: Vec<T>,
}

/// Batched moving distances: row b holds sample b's per-attribute values.
#[derive(Debug, Clone, PartialEq)]
pub struct RmdBatch<T> {
    pub d_plus: Mat<T>,
    pub d_minus: Mat<T>,
    pub d: Mat<T>,
}

impl<T: Scalar> RmdBatch<T> {
    pub fn sample(&self, b: usize) -> RmdScores<T> {
        RmdScores {
            d_plus: self.d_plus.row(b).to_vec(),
            d_minus: self.d_minus.row(b).to_vec(),
            d: self.d.row(b).to_vec(),
        }
    }
}

/// Computes moving distances for a batch of latent features in one pass:
/// features are tiled once per attribute and both transformers run over
/// the `rows * n` tiled batch.
pub fn rmd_scores_batch<T: Scalar>(
    latent: &Mat<T>,
    embeds: &EmbeddingTable,
    model: &SymNetModel<T>,
    opts: &NetOpts,
    kind: DistKind,
) -> Result<RmdBatch<T>> {
    if latent.cols() != model.dims.latent_dim {
        return Err(SymNetError::ShapeMismatch {
            op: "rmd_scores".into(),
            detail: format!(
                "latent dim {} != model latent dim {}",
                latent.cols(),
                model.dims.latent_dim
            ),
        });
    }
    if embeds.dim != model.dims.embed_dim {
        return Err(SymNetError::ShapeMismatch {
            op: "rmd_scores".into(),
            detail: format!(
                "embedding dim {} != model embed dim {}",
                embeds.dim, model.dims.embed_dim
            ),
        });
    }
    let b = latent.rows();
    let n = embeds.count;
    let mut fw = ModelForward::new(model, *opts);
    let f = fw.leaf(latent.clone());
    let tiled = fw.ctx.graph.repeat_rows_interleave(f, n);
    let block = embeds.to_mat::<T>();
    let blocks: Vec<&Mat<T>> = vec![&block; b];
    let emb_tiled = fw.leaf(Mat::vcat(&blocks));
    let coupled = fw.transform(Net::Coupling, tiled, emb_tiled)?;
    let decoupled = fw.transform(Net::Decoupling, tiled, emb_tiled)?;
    let dp = row_distance_graph(&mut fw.ctx.graph, tiled, coupled, kind);
    let dm = row_distance_graph(&mut fw.ctx.graph, tiled, decoupled, kind);
    let d_plus = fw.ctx.graph.value(dp).reshaped(b, n);
    let d_minus = fw.ctx.graph.value(dm).reshaped(b, n);
    let d = Mat::from_vec(
        b,
        n,
        d_minus
            .data()
            .iter()
            .zip(d_plus.data())
            .map(|(&m, &p)| m - p)
            .collect(),
    );
    Ok(RmdBatch { d_plus, d_minus, d })
}

/// Single-sample moving distances over all attributes.
pub fn rmd_scores<T: Scalar>(
    latent: &[T],
    embeds: &EmbeddingTable,
    model: &SymNetModel<T>,
    opts: &NetOpts,
    kind: DistKind,
) -> Result<RmdScores<T>> {
    let batch = rmd_scores_batch(&Mat::row_vec(latent), embeds, model, opts, kind)?;
    Ok(batch.sample(0))
}

/// `p = sigmoid(gamma * d)` per attribute.
pub fn attr_probs<T: Scalar>(d: &[T], gamma: T) -> Result<Vec<T>> {
    if gamma <= T::zero() {
        return Err(SymNetError::NonPositiveGamma {
            gamma: gamma.to_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(d.iter().map(|&v| sigmoid_scalar(gamma * v)).collect())
}

/// Softmax object probabilities from the classifier head.
pub fn object_probs<T: Scalar>(latent: &[T], model: &SymNetModel<T>) -> Result<Vec<T>> {
    let logits = model.obj_clf.logits(&Mat::row_vec(latent))?;
    Ok(crate::net::softmax(logits.row(0)))
}

/// Masked pair scores: `p_pair[a][o] = p_attr[a] * p_obj[o]` on admitted
/// cells. Masked cells carry a value but are excluded from every query.
#[derive(Debug, Clone)]
pub struct PairScores<'a, T> {
    pub p_pair: Mat<T>,
    pub mask: &'a PairMask,
}

pub fn pair_scores<'a, T: Scalar>(
    p_attr: &[T],
    p_obj: &[T],
    mask: &'a PairMask,
) -> Result<PairScores<'a, T>> {
    if p_attr.len() != mask.n() || p_obj.len() != mask.m() {
        return Err(SymNetError::ShapeMismatch {
            op: "pair_scores".into(),
            detail: format!(
                "probs ({}, {}) vs mask ({}, {})",
                p_attr.len(),
                p_obj.len(),
                mask.n(),
                mask.m()
            ),
        });
    }
    let mut p = Mat::zeros(p_attr.len(), p_obj.len());
    for (a, &pa) in p_attr.iter().enumerate() {
        for (o, &po) in p_obj.iter().enumerate() {
            p.set(a, o, pa * po);
        }
    }
    Ok(PairScores { p_pair: p, mask })
}

/// One ranked candidate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairHit<T> {
    pub attr: usize,
    pub obj: usize,
    pub score: T,
}

impl<T: Scalar> PairScores<'_, T> {
    /// Top-k admitted cells by descending score; ties break on ascending
    /// (attr, obj). Errors if the mask admits nothing.
    pub fn top_k(&self, k: usize) -> Result<Vec<PairHit<T>>> {
        let mut hits: Vec<PairHit<T>> = Vec::new();
        for a in 0..self.mask.n() {
            for o in 0..self.mask.m() {
                if self.mask.admits(a, o) {
                    hits.push(PairHit {
                        attr: a,
                        obj: o,
                        score: self.p_pair.at(a, o),
                    });
                }
            }
        }
        if hits.is_empty() {
            return Err(SymNetError::EmptyCandidateSet);
        }
        hits.sort_by(|x, y| {
            y.score
                .partial_cmp(&x.score)
                .expect("finite scores")
                .then(x.attr.cmp(&y.attr))
                .then(x.obj.cmp(&y.obj))
        });
        hits.truncate(k);
        Ok(hits)
    }
}
