//! Training objectives: the symmetry loss, the three group-axiom losses
//! (closure, invertibility, commutativity), semantic-consistency
//! classification losses, the triplet loss over relative moving
//! distances, and their weighted total.
//!
//! Two layers exist on purpose. The per-sample functions below state each
//! objective directly and are exercised against analytic mocks; the
//! batched graph assembly at the bottom vectorizes the identical math for
//! training and gradient checking. An eval-mode equivalence test ties the
//! two together.

use serde::{Deserialize, Serialize};

use crate::data::EmbeddingTable;
use crate::dist::{distance_slices, row_distance_graph, DistKind};
use crate::error::{Result, SymNetError};
use crate::graph::NodeId;
use crate::model::{ModelForward, Net};
use crate::tensor::{Mat, Scalar};
use crate::transforms::AttrTransform;

/// Weights of the total loss plus the triplet margin.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub sym: f64,
    pub axiom: f64,
    pub cls_attr: f64,
    pub cls_obj: f64,
    pub triplet: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            sym: 0.05,
            axiom: 0.01,
            cls_attr: 1.0,
            cls_obj: 0.01,
            triplet: 0.03,
            margin: 0.5,
        }
    }
}

/// Per-term loss values; `axiom` is always the sum of its three parts and
/// `total` the weighted combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub sym: f64,
    pub clo: f64,
    pub inv: f64,
    pub com: f64,
    pub axiom: f64,
    pub cls_a: f64,
    pub cls_o: f64,
    pub tri: f64,
    pub total: f64,
}

impl LossBreakdown {
    #[allow(clippy::too_many_arguments)]
    pub fn compose(
        sym: f64,
        clo: f64,
        inv: f64,
        com: f64,
        cls_a: f64,
        cls_o: f64,
        tri: f64,
        w: &LossWeights,
    ) -> Self {
        let axiom = clo + inv + com;
        LossBreakdown {
            sym,
            clo,
            inv,
            com,
            axiom,
            cls_a,
            cls_o,
            tri,
            total: w.sym * sym
                + w.axiom * axiom
                + w.cls_attr * cls_a
                + w.cls_obj * cls_o
                + w.triplet * tri,
        }
    }

    /// First non-finite term name, if any.
    pub fn first_non_finite(&self) -> Option<&'static str> {
        for (name, v) in [
            ("sym", self.sym),
            ("clo", self.clo),
            ("inv", self.inv),
            ("com", self.com),
            ("cls_a", self.cls_a),
            ("cls_o", self.cls_o),
            ("tri", self.tri),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

/// How distances inside the axiom losses are measured.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistSpec {
    pub kind: DistKind,
    pub squared: bool,
}

impl Default for DistSpec {
    fn default() -> Self {
        DistSpec {
            kind: DistKind::L2,
            squared: false,
        }
    }
}

impl DistSpec {
    fn eval<T: Scalar>(&self, u: &[T], v: &[T]) -> T {
        let d = distance_slices(u, v, self.kind);
        if self.squared {
            d * d
        } else {
            d
        }
    }
}

fn check_attrs(i: usize, j: usize) -> Result<()> {
    if i == j {
        return Err(SymNetError::IdenticalAttrIndices { index: i });
    }
    Ok(())
}

/// Symmetry: coupling an attribute the sample has, or decoupling one it
/// lacks, must leave the embedding unchanged.
#[allow(clippy::too_many_arguments)]
pub fn loss_sym<T: Scalar>(
    f: &[T],
    emb_i: &[T],
    emb_j: &[T],
    i: usize,
    j: usize,
    con: &impl AttrTransform<T>,
    decon: &impl AttrTransform<T>,
    dist: &DistSpec,
) -> Result<T> {
    check_attrs(i, j)?;
    let coupled = con.apply(f, emb_i);
    let decoupled = decon.apply(f, emb_j);
    Ok(dist.eval(f, &coupled) + dist.eval(f, &decoupled))
}

/// Closure: a decouple after a redundant couple should agree with the
/// plain decouple, and symmetrically for the absent attribute.
#[allow(clippy::too_many_arguments)]
pub fn loss_clo<T: Scalar>(
    f: &[T],
    emb_i: &[T],
    emb_j: &[T],
    i: usize,
    j: usize,
    con: &impl AttrTransform<T>,
    decon: &impl AttrTransform<T>,
    dist: &DistSpec,
) -> Result<T> {
    check_attrs(i, j)?;
    let couple_then_decouple = decon.apply(&con.apply(f, emb_i), emb_i);
    let decoupled_i = decon.apply(f, emb_i);
    let decouple_then_couple = con.apply(&decon.apply(f, emb_j), emb_j);
    let coupled_j = con.apply(f, emb_j);
    Ok(dist.eval(&couple_then_decouple, &decoupled_i)
        + dist.eval(&decouple_then_couple, &coupled_j))
}

/// Invertibility: couple-then-decouple of an absent attribute (and
/// decouple-then-couple of a present one) must return to the input.
#[allow(clippy::too_many_arguments)]
pub fn loss_inv<T: Scalar>(
    f: &[T],
    emb_i: &[T],
    emb_j: &[T],
    i: usize,
    j: usize,
    con: &impl AttrTransform<T>,
    decon: &impl AttrTransform<T>,
    dist: &DistSpec,
) -> Result<T> {
    check_attrs(i, j)?;
    let round_trip_j = decon.apply(&con.apply(f, emb_j), emb_j);
    let round_trip_i = con.apply(&decon.apply(f, emb_i), emb_i);
    Ok(dist.eval(&round_trip_j, f) + dist.eval(&round_trip_i, f))
}

/// Commutativity of coupling one attribute and decoupling another.
#[allow(clippy::too_many_arguments)]
pub fn loss_com<T: Scalar>(
    f: &[T],
    emb_i: &[T],
    emb_j: &[T],
    i: usize,
    j: usize,
    con: &impl AttrTransform<T>,
    decon: &impl AttrTransform<T>,
    dist: &DistSpec,
) -> Result<T> {
    check_attrs(i, j)?;
    let couple_first = decon.apply(&con.apply(f, emb_i), emb_j);
    let decouple_first = con.apply(&decon.apply(f, emb_j), emb_i);
    Ok(dist.eval(&couple_first, &decouple_first))
}

/// The four single-step transformed embeddings of one (anchor, negative
/// attribute) pair, as produced by the coupling and decoupling networks.
pub struct TransformedSet<T> {
    pub coupled_pos: Vec<T>,
    pub coupled_neg: Vec<T>,
    pub decoupled_pos: Vec<T>,
    pub decoupled_neg: Vec<T>,
}

impl<T: Scalar> TransformedSet<T> {
    pub fn compute(
        f: &[T],
        emb_i: &[T],
        emb_j: &[T],
        con: &impl AttrTransform<T>,
        decon: &impl AttrTransform<T>,
    ) -> Self {
        TransformedSet {
            coupled_pos: con.apply(f, emb_i),
            coupled_neg: con.apply(f, emb_j),
            decoupled_pos: decon.apply(f, emb_i),
            decoupled_neg: decon.apply(f, emb_j),
        }
    }
}

fn ce_scalar<T: Scalar>(logits: &Mat<T>, label: usize) -> Result<T> {
    if label >= logits.cols() {
        return Err(SymNetError::LabelOutOfRange {
            label,
            classes: logits.cols(),
        });
    }
    let (losses, _) = crate::tensor::softmax_cross_entropy(logits, &[label]);
    Ok(losses.at(0, 0))
}

/// Semantic-consistency classification losses for one sample.
///
/// The object head sees the original embedding and all four single-step
/// transforms, always labelled with the object. The attribute head sees
/// the original embedding (true attribute) and the coupled negative
/// (negative attribute); decoupled embeddings carry no attribute label.
/// When `transformed` is `None` (no negative available), both heads see
/// only the original embedding.
#[allow(clippy::too_many_arguments)]
pub fn loss_cls<T: Scalar>(
    f: &[T],
    transformed: Option<&TransformedSet<T>>,
    attr_clf: &crate::model::MlpHead<T>,
    obj_clf: &crate::model::MlpHead<T>,
    attr_i: usize,
    attr_j: Option<usize>,
    obj_label: usize,
) -> Result<(T, T)> {
    let orig = Mat::row_vec(f);
    let mut attr_terms = vec![ce_scalar(&attr_clf.logits(&orig)?, attr_i)?];
    let mut obj_terms = vec![ce_scalar(&obj_clf.logits(&orig)?, obj_label)?];
    if let Some(set) = transformed {
        let j = attr_j.ok_or(SymNetError::LabelOutOfRange {
            label: usize::MAX,
            classes: 0,
        })?;
        attr_terms.push(ce_scalar(
            &attr_clf.logits(&Mat::row_vec(&set.coupled_neg))?,
            j,
        )?);
        for emb in [
            &set.coupled_neg,
            &set.decoupled_pos,
            &set.coupled_pos,
            &set.decoupled_neg,
        ] {
            obj_terms.push(ce_scalar(&obj_clf.logits(&Mat::row_vec(emb))?, obj_label)?);
        }
    }
    let mean = |terms: &[T]| terms.iter().cloned().sum::<T>() / T::lit(terms.len() as f64);
    Ok((mean(&attr_terms), mean(&obj_terms)))
}

/// Triplet hinge over relative moving distances: for the labelled
/// attribute the coupled copy must sit closer than the decoupled one by
/// the margin, and the other way around for every other attribute.
pub fn loss_triplet<T: Scalar>(
    d_plus: &[T],
    d_minus: &[T],
    attr_label: usize,
    margin: T,
) -> Result<T> {
    if d_plus.len() != d_minus.len() || attr_label >= d_plus.len() {
        return Err(SymNetError::ShapeMismatch {
            op: "loss_triplet".into(),
            detail: format!(
                "d+ len {}, d- len {}, label {attr_label}",
                d_plus.len(),
                d_minus.len()
            ),
        });
    }
    let mut total = T::zero();
    for k in 0..d_plus.len() {
        let hinge = if k == attr_label {
            d_plus[k] - d_minus[k] + margin
        } else {
            d_minus[k] - d_plus[k] + margin
        };
        total += hinge.max(T::zero());
    }
    Ok(total)
}

/// Weighted composition of already-computed component losses.
#[allow(clippy::too_many_arguments)]
pub fn loss_total(
    sym: f64,
    clo: f64,
    inv: f64,
    com: f64,
    cls_a: f64,
    cls_o: f64,
    tri: f64,
    weights: &LossWeights,
) -> LossBreakdown {
    LossBreakdown::compose(sym, clo, inv, com, cls_a, cls_o, tri, weights)
}

/// Which loss terms participate in training. Terms that are disabled (or
/// whose weight is zero) are skipped entirely and logged as zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossToggles {
    pub sym: bool,
    pub clo: bool,
    pub inv: bool,
    pub com: bool,
    pub cls_attr: bool,
    pub cls_obj: bool,
    pub triplet: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        LossToggles {
            sym: true,
            clo: true,
            inv: true,
            com: true,
            cls_attr: true,
            cls_obj: true,
            triplet: true,
        }
    }
}

/// One training row: a projected-feature index paired with its labels.
/// Rows with a negative attribute participate in every loss; rows without
/// one only in classification on the original embedding and the triplet.
#[derive(Debug, Clone)]
pub struct BatchRow {
    pub feature_row: usize,
    pub attr: usize,
    pub obj: usize,
    pub neg_attr: Option<usize>,
}

/// Node handles of one assembled loss graph.
pub struct LossNodes {
    pub sym: Option<NodeId>,
    pub clo: Option<NodeId>,
    pub inv: Option<NodeId>,
    pub com: Option<NodeId>,
    pub cls_a: Option<NodeId>,
    pub cls_o: Option<NodeId>,
    pub tri: Option<NodeId>,
    pub total: NodeId,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(
        &self,
        fw: &ModelForward<T>,
        weights: &LossWeights,
    ) -> LossBreakdown {
        let get = |id: Option<NodeId>| {
            id.map(|id| fw.ctx.graph.value(id).at(0, 0).to_f64().unwrap())
                .unwrap_or(0.0)
        };
        LossBreakdown::compose(
            get(self.sym),
            get(self.clo),
            get(self.inv),
            get(self.com),
            get(self.cls_a),
            get(self.cls_o),
            get(self.tri),
            weights,
        )
    }
}

/// Assembles the complete training loss for a batch on the forward
/// builder's tape. `raw_features` holds one row per [`BatchRow`]; rows
/// with a negative attribute must come first.
pub fn build_loss_graph<T: Scalar>(
    fw: &mut ModelForward<T>,
    raw_features: &Mat<T>,
    rows: &[BatchRow],
    embeds: &EmbeddingTable,
    weights: &LossWeights,
    toggles: &LossToggles,
    dist: &DistSpec,
) -> Result<LossNodes> {
    assert_eq!(raw_features.rows(), rows.len());
    let n_paired = rows.iter().take_while(|r| r.neg_attr.is_some()).count();
    assert!(
        rows[n_paired..].iter().all(|r| r.neg_attr.is_none()),
        "paired rows must precede unpaired rows"
    );
    let n_total = rows.len();
    let n_attrs = embeds.count;

    let w = |v: f64| T::lit(v);
    let raw = fw.leaf(raw_features.clone());
    let projected = fw.project(raw)?;

    let dist_node = |fw: &mut ModelForward<T>, a: NodeId, b: NodeId| {
        let d = row_distance_graph(&mut fw.ctx.graph, a, b, dist.kind);
        if dist.squared {
            fw.ctx.graph.mul(d, d)
        } else {
            d
        }
    };

    let use_axioms = n_paired > 0
        && (toggles.sym && weights.sym != 0.0
            || ((toggles.clo || toggles.inv || toggles.com) && weights.axiom != 0.0));
    let use_cls_extra = n_paired > 0
        && (toggles.cls_attr && weights.cls_attr != 0.0
            || toggles.cls_obj && weights.cls_obj != 0.0);

    // Single-step transforms over the paired block: the narrowed
    // features, both embedding leaves, and the four transformed nodes.
    type PairedNodes = (NodeId, NodeId, NodeId, NodeId, NodeId, NodeId, NodeId);
    let paired_ctx: Option<PairedNodes> = if use_axioms || use_cls_extra {
        let f_p = fw.ctx.graph.narrow_rows(projected, 0, n_paired);
        let paired = &rows[..n_paired];
        let emb_i = embeds.gather_mat::<T>(&paired.iter().map(|r| r.attr).collect::<Vec<_>>());
        let emb_j = embeds.gather_mat::<T>(
            &paired
                .iter()
                .map(|r| r.neg_attr.expect("paired row"))
                .collect::<Vec<_>>(),
        );
        let e_i = fw.leaf(emb_i);
        let e_j = fw.leaf(emb_j);
        let coupled_i = fw.transform(Net::Coupling, f_p, e_i)?;
        let coupled_j = fw.transform(Net::Coupling, f_p, e_j)?;
        let decoupled_i = fw.transform(Net::Decoupling, f_p, e_i)?;
        let decoupled_j = fw.transform(Net::Decoupling, f_p, e_j)?;
        Some((
            f_p,
            e_i,
            e_j,
            coupled_i,
            coupled_j,
            decoupled_i,
            decoupled_j,
        ))
    } else {
        None
    };

    let mean_rows = |fw: &mut ModelForward<T>, x: NodeId| {
        let s = fw.ctx.graph.sum(x);
        fw.ctx.graph.scale(s, T::one() / w(n_paired as f64))
    };

    // Symmetry.
    let sym = match (paired_ctx.as_ref(), toggles.sym && weights.sym != 0.0) {
        (Some(&(f_p, _, _, coupled_i, _, _, decoupled_j)), true) => {
            let d1 = dist_node(fw, f_p, coupled_i);
            let d2 = dist_node(fw, f_p, decoupled_j);
            let s = fw.ctx.graph.add(d1, d2);
            Some(mean_rows(fw, s))
        }
        _ => None,
    };

    // Axioms need second-step transforms.
    let axiom_on = weights.axiom != 0.0;
    let (clo, inv, com) =
        if let Some(&(f_p, e_i, e_j, coupled_i, coupled_j, decoupled_i, decoupled_j)) =
            paired_ctx.as_ref()
        {
            let clo = if toggles.clo && axiom_on {
                let couple_i_then_decouple = fw.transform(Net::Decoupling, coupled_i, e_i)?;
                let decouple_j_then_couple = fw.transform(Net::Coupling, decoupled_j, e_j)?;
                let d1 = dist_node(fw, couple_i_then_decouple, decoupled_i);
                let d2 = dist_node(fw, decouple_j_then_couple, coupled_j);
                let s = fw.ctx.graph.add(d1, d2);
                Some(mean_rows(fw, s))
            } else {
                None
            };
            let inv = if toggles.inv && axiom_on {
                let couple_j_then_decouple = fw.transform(Net::Decoupling, coupled_j, e_j)?;
                let decouple_i_then_couple = fw.transform(Net::Coupling, decoupled_i, e_i)?;
                let d1 = dist_node(fw, couple_j_then_decouple, f_p);
                let d2 = dist_node(fw, decouple_i_then_couple, f_p);
                let s = fw.ctx.graph.add(d1, d2);
                Some(mean_rows(fw, s))
            } else {
                None
            };
            let com = if toggles.com && axiom_on {
                let couple_i_then_decouple_j = fw.transform(Net::Decoupling, coupled_i, e_j)?;
                let decouple_j_then_couple_i = fw.transform(Net::Coupling, decoupled_j, e_i)?;
                let d = dist_node(fw, couple_i_then_decouple_j, decouple_j_then_couple_i);
                Some(mean_rows(fw, d))
            } else {
                None
            };
            (clo, inv, com)
        } else {
            (None, None, None)
        };

    // Classification. Per-sample means first, then the batch mean, so a
    // sample contributes equally no matter how many embeddings it
    // supervises.
    let attr_labels: Vec<usize> = rows.iter().map(|r| r.attr).collect();
    let obj_labels: Vec<usize> = rows.iter().map(|r| r.obj).collect();
    let cls_a = if toggles.cls_attr && weights.cls_attr != 0.0 {
        let logits_orig = fw.attr_logits(projected);
        let ce_orig = fw.ctx.graph.softmax_ce(logits_orig, attr_labels.clone());
        let mut parts = vec![ce_orig];
        let mut weights_vec: Vec<T> = (0..n_total)
            .map(|r| {
                if r < n_paired {
                    w(1.0 / (2.0 * n_total as f64))
                } else {
                    w(1.0 / n_total as f64)
                }
            })
            .collect();
        if let Some(&(_, _, _, _, coupled_j, _, _)) = paired_ctx.as_ref() {
            let neg_labels: Vec<usize> = rows[..n_paired]
                .iter()
                .map(|r| r.neg_attr.unwrap())
                .collect();
            for &l in &neg_labels {
                if l >= n_attrs {
                    return Err(SymNetError::LabelOutOfRange {
                        label: l,
                        classes: n_attrs,
                    });
                }
            }
            let logits_coupled = fw.attr_logits(coupled_j);
            let ce_coupled = fw.ctx.graph.softmax_ce(logits_coupled, neg_labels);
            parts.push(ce_coupled);
            weights_vec.extend((0..n_paired).map(|_| w(1.0 / (2.0 * n_total as f64))));
        }
        let stacked = fw.ctx.graph.concat_rows(&parts);
        let wmat = Mat::from_vec(weights_vec.len(), 1, weights_vec);
        Some(fw.ctx.graph.mean_weighted(stacked, wmat))
    } else {
        None
    };

    let cls_o = if toggles.cls_obj && weights.cls_obj != 0.0 {
        let logits_orig = fw.obj_logits(projected);
        let ce_orig = fw.ctx.graph.softmax_ce(logits_orig, obj_labels.clone());
        let mut parts = vec![ce_orig];
        let mut weights_vec: Vec<T> = (0..n_total)
            .map(|r| {
                if r < n_paired {
                    w(1.0 / (5.0 * n_total as f64))
                } else {
                    w(1.0 / n_total as f64)
                }
            })
            .collect();
        if let Some(&(_, _, _, coupled_i, coupled_j, decoupled_i, decoupled_j)) =
            paired_ctx.as_ref()
        {
            let paired_obj: Vec<usize> = obj_labels[..n_paired].to_vec();
            for t in [coupled_j, decoupled_i, coupled_i, decoupled_j] {
                let logits = fw.obj_logits(t);
                let ce = fw.ctx.graph.softmax_ce(logits, paired_obj.clone());
                parts.push(ce);
                weights_vec.extend((0..n_paired).map(|_| w(1.0 / (5.0 * n_total as f64))));
            }
        }
        let stacked = fw.ctx.graph.concat_rows(&parts);
        let wmat = Mat::from_vec(weights_vec.len(), 1, weights_vec);
        Some(fw.ctx.graph.mean_weighted(stacked, wmat))
    } else {
        None
    };

    // Triplet over relative moving distances for every attribute.
    let tri = if toggles.triplet && weights.triplet != 0.0 {
        let tiled = fw.ctx.graph.repeat_rows_interleave(projected, n_attrs);
        let all_embs: Vec<usize> = (0..n_attrs).collect();
        let one_block = embeds.gather_mat::<T>(&all_embs);
        let mut blocks: Vec<Mat<T>> = Vec::with_capacity(n_total);
        for _ in 0..n_total {
            blocks.push(one_block.clone());
        }
        let refs: Vec<&Mat<T>> = blocks.iter().collect();
        let emb_tiled = fw.leaf(Mat::vcat(&refs));
        let coupled = fw.transform(Net::Coupling, tiled, emb_tiled)?;
        let decoupled = fw.transform(Net::Decoupling, tiled, emb_tiled)?;
        // RMD distances are unsquared regardless of the squared-loss switch.
        let d_plus_col = row_distance_graph(&mut fw.ctx.graph, tiled, coupled, dist.kind);
        let d_minus_col = row_distance_graph(&mut fw.ctx.graph, tiled, decoupled, dist.kind);
        let d_plus = fw.ctx.graph.reshape(d_plus_col, n_total, n_attrs);
        let d_minus = fw.ctx.graph.reshape(d_minus_col, n_total, n_attrs);
        let delta = fw.ctx.graph.sub(d_plus, d_minus);
        // +1 on the labelled attribute, -1 elsewhere
        let mut sign = Mat::filled(n_total, n_attrs, -T::one());
        for (r, row) in rows.iter().enumerate() {
            sign.set(r, row.attr, T::one());
        }
        let oriented = fw.ctx.graph.mul_const(delta, sign);
        let shifted = fw.ctx.graph.add_scalar(oriented, w(weights.margin));
        let hinged = fw.ctx.graph.clamp_min(shifted, T::zero());
        let s = fw.ctx.graph.sum(hinged);
        Some(fw.ctx.graph.scale(s, T::one() / w(n_total as f64)))
    } else {
        None
    };

    // Weighted total.
    let mut total = fw.ctx.graph.scalar_leaf(T::zero());
    let add_term =
        |fw: &mut ModelForward<T>, total: NodeId, id: Option<NodeId>, weight: f64| match id {
            Some(id) if weight != 0.0 => {
                let scaled = fw.ctx.graph.scale(id, w(weight));
                fw.ctx.graph.add(total, scaled)
            }
            _ => total,
        };
    total = add_term(fw, total, sym, weights.sym);
    total = add_term(fw, total, clo, weights.axiom);
    total = add_term(fw, total, inv, weights.axiom);
    total = add_term(fw, total, com, weights.axiom);
    total = add_term(fw, total, cls_a, weights.cls_attr);
    total = add_term(fw, total, cls_o, weights.cls_obj);
    total = add_term(fw, total, tri, weights.triplet);

    Ok(LossNodes {
        sym,
        clo,
        inv,
        com,
        cls_a,
        cls_o,
        tri,
        total,
    })
}
