//! The group elements: the identity transform (a skip connection) and the
//! coupling/decoupling networks. Both networks share one structure but
//! carry independent weights: an attribute-conditioned attention gate
//! followed by a two-layer transformation of the gated feature
//! concatenated with the attribute embedding.
//!
//! All real forward passes run through the [`crate::graph`] tape so the
//! training path and every evaluation path share one arithmetic
//! implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SymNetError};
use crate::graph::{Graph, NodeId};
use crate::net::{BatchNormState, DenseLayer, Mode};
use crate::tensor::{Mat, Scalar};

/// Activation of the attention head. Sigmoid gates each coordinate
/// independently; softmax normalizes the gate across coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttnAct {
    #[default]
    Sigmoid,
    Softmax,
}

/// Knobs that change how a transform is computed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetOpts {
    pub mode: Mode,
    pub attn_act: AttnAct,
    pub no_attention: bool,
}

impl NetOpts {
    pub fn eval() -> Self {
        NetOpts {
            mode: Mode::Eval,
            attn_act: AttnAct::Sigmoid,
            no_attention: false,
        }
    }

    pub fn train() -> Self {
        NetOpts {
            mode: Mode::Train,
            ..Self::eval()
        }
    }
}

/// One attribute-conditioned transformer (a coupling or decoupling
/// network). The two instances never share parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams<T> {
    pub attn_fc1: DenseLayer<T>,
    pub attn_fc2: DenseLayer<T>,
    pub main_fc1: DenseLayer<T>,
    pub main_fc2: DenseLayer<T>,
    pub bn_attn: BatchNormState<T>,
    pub bn_main: BatchNormState<T>,
}

impl<T: Scalar> TransformerParams<T> {
    pub fn init<R: rand::Rng>(
        embed_dim: usize,
        attn_hidden: usize,
        latent_dim: usize,
        rng: &mut R,
    ) -> Self {
        TransformerParams {
            attn_fc1: DenseLayer::init(embed_dim, attn_hidden, rng),
            attn_fc2: DenseLayer::init(attn_hidden, latent_dim, rng),
            main_fc1: DenseLayer::init(latent_dim + embed_dim, latent_dim, rng),
            main_fc2: DenseLayer::init(latent_dim, latent_dim, rng),
            bn_attn: BatchNormState::new(attn_hidden),
            bn_main: BatchNormState::new(latent_dim),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.attn_fc1.in_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.main_fc2.out_dim()
    }
}

/// Single affine map from raw feature space into the shared latent space.
/// Applied exactly once per raw feature, with no activation.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureProjector<T> {
    pub proj: DenseLayer<T>,
}

impl<T: Scalar> FeatureProjector<T> {
    pub fn init<R: rand::Rng>(feat_dim: usize, latent_dim: usize, rng: &mut R) -> Self {
        FeatureProjector {
            proj: DenseLayer::init(feat_dim, latent_dim, rng),
        }
    }
}

/// Batch statistics recorded by a train-mode normalization call, tagged
/// with the owning state's path so running statistics can be updated.
#[derive(Debug, Clone)]
pub struct BnStat<T> {
    pub path: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// A tape plus a per-name cache of parameter leaves, so a parameter used
/// by several forward calls in one graph accumulates one gradient.
pub struct GraphCtx<T> {
    pub graph: Graph<T>,
    params: std::collections::BTreeMap<String, NodeId>,
    pub bn_stats: Vec<BnStat<T>>,
}

impl<T: Scalar> Default for GraphCtx<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> GraphCtx<T> {
    pub fn new() -> Self {
        GraphCtx {
            graph: Graph::new(),
            params: std::collections::BTreeMap::new(),
            bn_stats: Vec::new(),
        }
    }

    pub fn param(&mut self, name: &str, value: &Mat<T>) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let id = self.graph.param(name, value.clone());
        self.params.insert(name.to_string(), id);
        id
    }
}

pub fn dense_graph<T: Scalar>(
    ctx: &mut GraphCtx<T>,
    x: NodeId,
    layer: &DenseLayer<T>,
    prefix: &str,
) -> NodeId {
    let w = ctx.param(&format!("{prefix}.w"), &layer.w);
    let b = ctx.param(&format!("{prefix}.b"), &layer.b);
    ctx.graph.affine(x, w, b)
}

pub fn bn_graph<T: Scalar>(
    ctx: &mut GraphCtx<T>,
    x: NodeId,
    state: &BatchNormState<T>,
    prefix: &str,
    mode: Mode,
) -> Result<NodeId> {
    let gamma = ctx.param(&format!("{prefix}.gamma"), &state.gamma);
    let beta = ctx.param(&format!("{prefix}.beta"), &state.beta);
    match mode {
        Mode::Train => {
            let rows = ctx.graph.value(x).rows();
            if rows < 2 {
                return Err(SymNetError::DegenerateBatch { rows });
            }
            let (id, mean, var) = ctx.graph.bn_train(x, gamma, beta, state.eps);
            ctx.bn_stats.push(BnStat {
                path: prefix.to_string(),
                mean,
                var,
            });
            Ok(id)
        }
        Mode::Eval => Ok(ctx.graph.bn_eval(
            x,
            gamma,
            beta,
            state.running_mean.data(),
            state.running_var.data(),
            state.eps,
        )),
    }
}

/// Attention gate `g(a)`: fc -> bn -> relu -> fc -> sigmoid (or softmax).
pub fn attention_graph<T: Scalar>(
    ctx: &mut GraphCtx<T>,
    emb: NodeId,
    t: &TransformerParams<T>,
    prefix: &str,
    opts: &NetOpts,
) -> Result<NodeId> {
    let a1 = dense_graph(ctx, emb, &t.attn_fc1, &format!("{prefix}.attn_fc1"));
    let a1n = bn_graph(ctx, a1, &t.bn_attn, &format!("{prefix}.bn_attn"), opts.mode)?;
    let a1r = ctx.graph.relu(a1n);
    let a2 = dense_graph(ctx, a1r, &t.attn_fc2, &format!("{prefix}.attn_fc2"));
    Ok(match opts.attn_act {
        AttnAct::Sigmoid => ctx.graph.sigmoid(a2),
        AttnAct::Softmax => ctx.graph.softmax_rows(a2),
    })
}

/// Full transform: gate the feature, keep the residual, concatenate the
/// attribute embedding, and compress back to the latent dimension.
pub fn transform_graph<T: Scalar>(
    ctx: &mut GraphCtx<T>,
    f: NodeId,
    emb: NodeId,
    t: &TransformerParams<T>,
    prefix: &str,
    opts: &NetOpts,
) -> Result<NodeId> {
    let h = if opts.no_attention {
        f
    } else {
        let att = attention_graph(ctx, emb, t, prefix, opts)?;
        let gated = ctx.graph.mul(f, att);
        ctx.graph.add(gated, f)
    };
    let z = ctx.graph.concat_cols(h, emb);
    let m1 = dense_graph(ctx, z, &t.main_fc1, &format!("{prefix}.main_fc1"));
    let m1n = bn_graph(ctx, m1, &t.bn_main, &format!("{prefix}.bn_main"), opts.mode)?;
    let m1r = ctx.graph.relu(m1n);
    Ok(dense_graph(
        ctx,
        m1r,
        &t.main_fc2,
        &format!("{prefix}.main_fc2"),
    ))
}

fn check_transform_shapes<T: Scalar>(
    f: &Mat<T>,
    emb: &Mat<T>,
    t: &TransformerParams<T>,
) -> Result<()> {
    let problem = if f.rows() != emb.rows() {
        Some(format!(
            "feature rows {} != embedding rows {}",
            f.rows(),
            emb.rows()
        ))
    } else if emb.cols() != t.attn_fc1.in_dim() {
        Some(format!(
            "embedding dim {} != expected {}",
            emb.cols(),
            t.attn_fc1.in_dim()
        ))
    } else if f.cols() != t.attn_fc2.out_dim() {
        Some(format!(
            "feature dim {} != gate dim {}",
            f.cols(),
            t.attn_fc2.out_dim()
        ))
    } else if f.cols() + emb.cols() != t.main_fc1.in_dim() {
        Some(format!(
            "concat dim {} != main input dim {}",
            f.cols() + emb.cols(),
            t.main_fc1.in_dim()
        ))
    } else {
        None
    };
    match problem {
        Some(detail) => Err(SymNetError::ShapeMismatch {
            op: "apply_transform".into(),
            detail,
        }),
        None => Ok(()),
    }
}

/// Projects raw features into latent space (a single affine map).
pub fn project_feature<T: Scalar>(raw: &Mat<T>, p: &FeatureProjector<T>) -> Result<Mat<T>> {
    crate::net::affine_forward(raw, &p.proj)
}

/// Attention gate values for a batch of attribute embeddings. Pure: in
/// train mode the batch statistics of this call are used and running
/// statistics are left untouched (the training loop owns those updates).
pub fn attention<T: Scalar>(
    attr_emb: &Mat<T>,
    t: &TransformerParams<T>,
    opts: &NetOpts,
) -> Result<Mat<T>> {
    if attr_emb.cols() != t.attn_fc1.in_dim() {
        return Err(SymNetError::ShapeMismatch {
            op: "attention".into(),
            detail: format!(
                "embedding dim {} != expected {}",
                attr_emb.cols(),
                t.attn_fc1.in_dim()
            ),
        });
    }
    let mut ctx = GraphCtx::new();
    let e = ctx.graph.leaf(attr_emb.clone());
    let att = attention_graph(&mut ctx, e, t, "t", opts)?;
    Ok(ctx.graph.value(att).clone())
}

/// Applies one transform to a batch of (feature, attribute embedding)
/// rows. Pure; see [`attention`] for the train-mode statistics contract.
pub fn apply_transform<T: Scalar>(
    f: &Mat<T>,
    attr_emb: &Mat<T>,
    t: &TransformerParams<T>,
    opts: &NetOpts,
) -> Result<Mat<T>> {
    check_transform_shapes(f, attr_emb, t)?;
    let mut ctx = GraphCtx::new();
    let fid = ctx.graph.leaf(f.clone());
    let eid = ctx.graph.leaf(attr_emb.clone());
    let out = transform_graph(&mut ctx, fid, eid, t, "t", opts)?;
    Ok(ctx.graph.value(out).clone())
}

/// The identity transform: a skip connection.
pub fn t_e<T: Scalar>(f: &Mat<T>) -> Mat<T> {
    f.clone()
}

/// The gate-plus-residual combination `h = f o att + f`.
pub fn gate_residual<T: Scalar>(f: &Mat<T>, att: &Mat<T>) -> Mat<T> {
    assert_eq!((f.rows(), f.cols()), (att.rows(), att.cols()));
    let data = f
        .data()
        .iter()
        .zip(att.data())
        .map(|(&x, &a)| x * a + x)
        .collect();
    Mat::from_vec(f.rows(), f.cols(), data)
}

/// Single-sample view of a transform, so loss terms can be written once
/// and exercised with either real networks or analytic mocks.
pub trait AttrTransform<T> {
    fn apply(&self, f: &[T], attr_emb: &[T]) -> Vec<T>;
}

impl<T: Scalar, F: Fn(&[T], &[T]) -> Vec<T>> AttrTransform<T> for F {
    fn apply(&self, f: &[T], attr_emb: &[T]) -> Vec<T> {
        self(f, attr_emb)
    }
}

/// Eval-mode single-sample wrapper around real transformer parameters.
pub struct EvalTransform<'a, T> {
    pub params: &'a TransformerParams<T>,
    pub opts: NetOpts,
}

impl<'a, T: Scalar> EvalTransform<'a, T> {
    pub fn new(params: &'a TransformerParams<T>, opts: NetOpts) -> Self {
        EvalTransform { params, opts }
    }
}

impl<T: Scalar> AttrTransform<T> for EvalTransform<'_, T> {
    fn apply(&self, f: &[T], attr_emb: &[T]) -> Vec<T> {
        let out = apply_transform(
            &Mat::row_vec(f),
            &Mat::row_vec(attr_emb),
            self.params,
            &self.opts,
        )
        .expect("shape-checked eval transform");
        out.row(0).to_vec()
    }
}
