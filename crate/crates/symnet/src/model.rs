//! The full trainable model: feature projector, coupling and decoupling
//! networks, and the attribute/object classifier heads, plus the fixed
//! parameter naming used by checkpoints.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, SymNetError};
use crate::graph::NodeId;
use crate::net::{BatchNormState, DenseLayer, ParameterStore};
use crate::tensor::{Mat, Scalar};
use crate::transforms::{
    dense_graph, transform_graph, FeatureProjector, GraphCtx, NetOpts, TransformerParams,
};

/// Shapes of every component, derived from the training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub feat_dim: usize,
    pub embed_dim: usize,
    pub latent_dim: usize,
    pub attn_hidden: usize,
    pub clf_hidden: usize,
    pub n_attrs: usize,
    pub n_objs: usize,
    pub obj_head_layers: usize,
}

/// Stack of dense layers with ReLU between them (none after the last).
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> MlpHead<T> {
    pub fn init<R: Rng>(
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        n_layers: usize,
        rng: &mut R,
    ) -> Self {
        assert!(n_layers >= 1);
        let mut layers = Vec::with_capacity(n_layers);
        let mut cur = in_dim;
        for _ in 0..n_layers - 1 {
            layers.push(DenseLayer::init(cur, hidden, rng));
            cur = hidden;
        }
        layers.push(DenseLayer::init(cur, out_dim, rng));
        MlpHead { layers }
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty head").out_dim()
    }

    pub fn logits_graph(&self, ctx: &mut GraphCtx<T>, x: NodeId, prefix: &str) -> NodeId {
        let mut cur = x;
        for (i, layer) in self.layers.iter().enumerate() {
            cur = dense_graph(ctx, cur, layer, &format!("{prefix}.fc{}", i + 1));
            if i + 1 < self.layers.len() {
                cur = ctx.graph.relu(cur);
            }
        }
        cur
    }

    /// Plain logits for a batch (no tape).
    pub fn logits(&self, x: &Mat<T>) -> Result<Mat<T>> {
        let mut cur = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            cur = crate::net::affine_forward(&cur, layer)?;
            if i + 1 < self.layers.len() {
                cur = crate::tensor::relu(&cur);
            }
        }
        Ok(cur)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SymNetModel<T> {
    pub dims: ModelDims,
    pub proj: FeatureProjector<T>,
    pub con: TransformerParams<T>,
    pub decon: TransformerParams<T>,
    pub attr_clf: MlpHead<T>,
    pub obj_clf: MlpHead<T>,
}

impl<T: Scalar> SymNetModel<T> {
    /// Initializes all components in a fixed order so a seed fully
    /// determines the weights.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Self {
        let proj = FeatureProjector::init(dims.feat_dim, dims.latent_dim, rng);
        let con = TransformerParams::init(dims.embed_dim, dims.attn_hidden, dims.latent_dim, rng);
        let decon = TransformerParams::init(dims.embed_dim, dims.attn_hidden, dims.latent_dim, rng);
        let attr_clf = MlpHead::init(dims.latent_dim, dims.clf_hidden, dims.n_attrs, 2, rng);
        let obj_clf = MlpHead::init(
            dims.latent_dim,
            dims.clf_hidden,
            dims.n_objs,
            dims.obj_head_layers,
            rng,
        );
        SymNetModel {
            dims,
            proj,
            con,
            decon,
            attr_clf,
            obj_clf,
        }
    }

    fn visit_dense<'a>(
        prefix: &str,
        layer: &'a DenseLayer<T>,
        f: &mut dyn FnMut(String, &'a Mat<T>),
    ) {
        f(format!("{prefix}.w"), &layer.w);
        f(format!("{prefix}.b"), &layer.b);
    }

    fn visit_dense_mut<'a>(
        prefix: &str,
        layer: &'a mut DenseLayer<T>,
        f: &mut dyn FnMut(String, &'a mut Mat<T>),
    ) {
        f(format!("{prefix}.w"), &mut layer.w);
        f(format!("{prefix}.b"), &mut layer.b);
    }

    fn visit_transformer<'a>(
        prefix: &str,
        t: &'a TransformerParams<T>,
        f: &mut dyn FnMut(String, &'a Mat<T>),
    ) {
        Self::visit_dense(&format!("{prefix}.attn_fc1"), &t.attn_fc1, f);
        Self::visit_dense(&format!("{prefix}.attn_fc2"), &t.attn_fc2, f);
        Self::visit_dense(&format!("{prefix}.main_fc1"), &t.main_fc1, f);
        Self::visit_dense(&format!("{prefix}.main_fc2"), &t.main_fc2, f);
        f(format!("{prefix}.bn_attn.gamma"), &t.bn_attn.gamma);
        f(format!("{prefix}.bn_attn.beta"), &t.bn_attn.beta);
        f(format!("{prefix}.bn_main.gamma"), &t.bn_main.gamma);
        f(format!("{prefix}.bn_main.beta"), &t.bn_main.beta);
    }

    fn visit_transformer_mut<'a>(
        prefix: &str,
        t: &'a mut TransformerParams<T>,
        f: &mut dyn FnMut(String, &'a mut Mat<T>),
    ) {
        Self::visit_dense_mut(&format!("{prefix}.attn_fc1"), &mut t.attn_fc1, f);
        Self::visit_dense_mut(&format!("{prefix}.attn_fc2"), &mut t.attn_fc2, f);
        Self::visit_dense_mut(&format!("{prefix}.main_fc1"), &mut t.main_fc1, f);
        Self::visit_dense_mut(&format!("{prefix}.main_fc2"), &mut t.main_fc2, f);
        f(format!("{prefix}.bn_attn.gamma"), &mut t.bn_attn.gamma);
        f(format!("{prefix}.bn_attn.beta"), &mut t.bn_attn.beta);
        f(format!("{prefix}.bn_main.gamma"), &mut t.bn_main.gamma);
        f(format!("{prefix}.bn_main.beta"), &mut t.bn_main.beta);
    }

    /// Visits every trainable tensor with its checkpoint path.
    pub fn for_each_param<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        Self::visit_dense("proj", &self.proj.proj, f);
        Self::visit_transformer("con", &self.con, f);
        Self::visit_transformer("decon", &self.decon, f);
        for (i, layer) in self.attr_clf.layers.iter().enumerate() {
            Self::visit_dense(&format!("attr_clf.fc{}", i + 1), layer, f);
        }
        for (i, layer) in self.obj_clf.layers.iter().enumerate() {
            Self::visit_dense(&format!("obj_clf.fc{}", i + 1), layer, f);
        }
    }

    pub fn for_each_param_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        Self::visit_dense_mut("proj", &mut self.proj.proj, f);
        Self::visit_transformer_mut("con", &mut self.con, f);
        Self::visit_transformer_mut("decon", &mut self.decon, f);
        for (i, layer) in self.attr_clf.layers.iter_mut().enumerate() {
            Self::visit_dense_mut(&format!("attr_clf.fc{}", i + 1), layer, f);
        }
        for (i, layer) in self.obj_clf.layers.iter_mut().enumerate() {
            Self::visit_dense_mut(&format!("obj_clf.fc{}", i + 1), layer, f);
        }
    }

    /// Visits the batch-norm running statistics (non-trainable buffers).
    pub fn for_each_buffer<'a>(&'a self, f: &mut dyn FnMut(String, &'a Mat<T>)) {
        for (prefix, t) in [("con", &self.con), ("decon", &self.decon)] {
            f(
                format!("{prefix}.bn_attn.running_mean"),
                &t.bn_attn.running_mean,
            );
            f(
                format!("{prefix}.bn_attn.running_var"),
                &t.bn_attn.running_var,
            );
            f(
                format!("{prefix}.bn_main.running_mean"),
                &t.bn_main.running_mean,
            );
            f(
                format!("{prefix}.bn_main.running_var"),
                &t.bn_main.running_var,
            );
        }
    }

    pub fn for_each_buffer_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, &'a mut Mat<T>)) {
        for (prefix, t) in [("con", &mut self.con), ("decon", &mut self.decon)] {
            f(
                format!("{prefix}.bn_attn.running_mean"),
                &mut t.bn_attn.running_mean,
            );
            f(
                format!("{prefix}.bn_attn.running_var"),
                &mut t.bn_attn.running_var,
            );
            f(
                format!("{prefix}.bn_main.running_mean"),
                &mut t.bn_main.running_mean,
            );
            f(
                format!("{prefix}.bn_main.running_var"),
                &mut t.bn_main.running_var,
            );
        }
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.for_each_param(&mut |name, _| names.push(name));
        names
    }

    /// Snapshot of all trainable tensors keyed by path.
    pub fn to_store(&self) -> ParameterStore<T> {
        let mut store = ParameterStore::default();
        self.for_each_param(&mut |name, m| store.insert(&name, m.clone()));
        store
    }

    pub fn buffer_map(&self) -> BTreeMap<String, Mat<T>> {
        let mut out = BTreeMap::new();
        self.for_each_buffer(&mut |name, m| {
            out.insert(name, m.clone());
        });
        out
    }

    /// Overwrites trainable tensors from a store. The store's key set must
    /// match the architecture exactly.
    pub fn load_params(&mut self, store: &ParameterStore<T>) -> Result<()> {
        let mut missing: Option<String> = None;
        let mut seen = 0usize;
        self.for_each_param_mut(&mut |name, m| {
            if let Some(src) = store.get(&name) {
                assert_eq!(
                    (src.rows(), src.cols()),
                    (m.rows(), m.cols()),
                    "shape mismatch loading {name}"
                );
                *m = src.clone();
                seen += 1;
            } else if missing.is_none() {
                missing = Some(name);
            }
        });
        if let Some(name) = missing {
            return Err(SymNetError::MissingParameter { name });
        }
        if seen != store.0.len() {
            let known: std::collections::BTreeSet<String> =
                self.param_names().into_iter().collect();
            let extra: Vec<String> = store
                .names()
                .into_iter()
                .filter(|n| !known.contains(n))
                .collect();
            return Err(SymNetError::KeyMismatch {
                detail: format!("checkpoint has unexpected tensors {extra:?}"),
            });
        }
        Ok(())
    }

    pub fn load_buffers(&mut self, map: &BTreeMap<String, Mat<T>>) -> Result<()> {
        let mut missing: Option<String> = None;
        self.for_each_buffer_mut(&mut |name, m| {
            if let Some(src) = map.get(&name) {
                *m = src.clone();
            } else if missing.is_none() {
                missing = Some(name);
            }
        });
        match missing {
            Some(name) => Err(SymNetError::MissingParameter { name }),
            None => Ok(()),
        }
    }

    /// Folds recorded batch statistics into the owning running statistics,
    /// in recording order.
    pub fn apply_bn_stats(&mut self, stats: &[crate::transforms::BnStat<T>]) {
        for stat in stats {
            let state = match stat.path.as_str() {
                "con.bn_attn" => &mut self.con.bn_attn,
                "con.bn_main" => &mut self.con.bn_main,
                "decon.bn_attn" => &mut self.decon.bn_attn,
                "decon.bn_main" => &mut self.decon.bn_main,
                other => panic!("unknown batchnorm path {other}"),
            };
            state.update_running(&stat.mean, &stat.var);
        }
    }

    pub fn cast<U: Scalar>(&self) -> SymNetModel<U> {
        let cast_dense = |l: &DenseLayer<T>| DenseLayer {
            w: l.w.cast::<U>(),
            b: l.b.cast::<U>(),
        };
        let cast_bn = |s: &BatchNormState<T>| BatchNormState {
            gamma: s.gamma.cast::<U>(),
            beta: s.beta.cast::<U>(),
            running_mean: s.running_mean.cast::<U>(),
            running_var: s.running_var.cast::<U>(),
            eps: U::lit(s.eps.to_f64().unwrap()),
            momentum: U::lit(s.momentum.to_f64().unwrap()),
        };
        let cast_t = |t: &TransformerParams<T>| TransformerParams {
            attn_fc1: cast_dense(&t.attn_fc1),
            attn_fc2: cast_dense(&t.attn_fc2),
            main_fc1: cast_dense(&t.main_fc1),
            main_fc2: cast_dense(&t.main_fc2),
            bn_attn: cast_bn(&t.bn_attn),
            bn_main: cast_bn(&t.bn_main),
        };
        SymNetModel {
            dims: self.dims,
            proj: FeatureProjector {
                proj: cast_dense(&self.proj.proj),
            },
            con: cast_t(&self.con),
            decon: cast_t(&self.decon),
            attr_clf: MlpHead {
                layers: self.attr_clf.layers.iter().map(cast_dense).collect(),
            },
            obj_clf: MlpHead {
                layers: self.obj_clf.layers.iter().map(cast_dense).collect(),
            },
        }
    }
}

/// Which of the two transformers to apply.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Net {
    Coupling,
    Decoupling,
}

/// Forward builder binding a model to a tape. All model-level graph
/// construction goes through this, so every caller shares one arithmetic
/// path and parameter leaves are created once per graph.
pub struct ModelForward<'m, T> {
    pub ctx: GraphCtx<T>,
    pub model: &'m SymNetModel<T>,
    pub opts: NetOpts,
}

impl<'m, T: Scalar> ModelForward<'m, T> {
    pub fn new(model: &'m SymNetModel<T>, opts: NetOpts) -> Self {
        ModelForward {
            ctx: GraphCtx::new(),
            model,
            opts,
        }
    }

    pub fn leaf(&mut self, m: Mat<T>) -> NodeId {
        self.ctx.graph.leaf(m)
    }

    /// Projects raw features (rows) into latent space.
    pub fn project(&mut self, raw: NodeId) -> Result<NodeId> {
        let cols = self.ctx.graph.value(raw).cols();
        if cols != self.model.proj.proj.in_dim() {
            return Err(SymNetError::ShapeMismatch {
                op: "project".into(),
                detail: format!(
                    "raw feature dim {cols} != projector input {}",
                    self.model.proj.proj.in_dim()
                ),
            });
        }
        Ok(dense_graph(
            &mut self.ctx,
            raw,
            &self.model.proj.proj,
            "proj",
        ))
    }

    pub fn transform(&mut self, which: Net, f: NodeId, emb: NodeId) -> Result<NodeId> {
        let (t, prefix) = match which {
            Net::Coupling => (&self.model.con, "con"),
            Net::Decoupling => (&self.model.decon, "decon"),
        };
        transform_graph(&mut self.ctx, f, emb, t, prefix, &self.opts)
    }

    pub fn attr_logits(&mut self, x: NodeId) -> NodeId {
        self.model
            .attr_clf
            .logits_graph(&mut self.ctx, x, "attr_clf")
    }

    pub fn obj_logits(&mut self, x: NodeId) -> NodeId {
        self.model.obj_clf.logits_graph(&mut self.ctx, x, "obj_clf")
    }
}
