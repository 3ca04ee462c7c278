//! Deterministic end-to-end training: mini-batching with per-anchor
//! negative sampling, symmetric loss assembly, SGD updates, and
//! checkpointing. A fixed seed fully determines batch order, negative
//! choices, and the final parameters.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    check_features_against_meta, sample_negative_excluding, DatasetMeta, EmbeddingTable,
    FeatureMatrix, Split,
};
use crate::dist::DistKind;
use crate::error::{Result, SymNetError};
use crate::model::{ModelDims, SymNetModel};
use crate::net::{backward, sgd_step, Mode};
use crate::objectives::{build_loss_graph, BatchRow, DistSpec, LossToggles, LossWeights};
use crate::tensor::Mat;
use crate::transforms::{AttnAct, NetOpts};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SYMC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Mit,
    Ut,
    #[default]
    Custom,
}

/// Full training configuration. Every field has a default so config files
/// may be partial; profile presets populate the documented values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub profile: Profile,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weights: LossWeights,
    pub gamma: f64,
    pub seed: u64,
    pub embed_dim: usize,
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub attn_hidden: usize,
    pub clf_hidden: usize,
    pub obj_head_layers: usize,
    pub dist: DistKind,
    pub attn_act: AttnAct,
    pub no_attention: bool,
    pub squared_dist: bool,
    pub no_clo: bool,
    pub no_inv: bool,
    pub no_com: bool,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            profile: Profile::Custom,
            lr: 5e-4,
            batch_size: 512,
            epochs: 320,
            weights: LossWeights::default(),
            gamma: 1.0,
            seed: 0,
            embed_dim: 300,
            feat_dim: 512,
            latent_dim: 300,
            attn_hidden: 768,
            clf_hidden: 512,
            obj_head_layers: 2,
            dist: DistKind::L2,
            attn_act: AttnAct::Sigmoid,
            no_attention: false,
            squared_dist: false,
            no_clo: false,
            no_inv: false,
            no_com: false,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn model_dims(&self, n_attrs: usize, n_objs: usize) -> ModelDims {
        ModelDims {
            feat_dim: self.feat_dim,
            embed_dim: self.embed_dim,
            latent_dim: self.latent_dim,
            attn_hidden: self.attn_hidden,
            clf_hidden: self.clf_hidden,
            n_attrs,
            n_objs,
            obj_head_layers: self.obj_head_layers,
        }
    }

    pub fn toggles(&self) -> LossToggles {
        LossToggles {
            clo: !self.no_clo,
            inv: !self.no_inv,
            com: !self.no_com,
            ..LossToggles::default()
        }
    }

    pub fn dist_spec(&self) -> DistSpec {
        DistSpec {
            kind: self.dist,
            squared: self.squared_dist,
        }
    }

    pub fn net_opts(&self, mode: Mode) -> NetOpts {
        NetOpts {
            mode,
            attn_act: self.attn_act,
            no_attention: self.no_attention,
        }
    }
}

/// Documented hyperparameter presets for the two benchmark datasets.
pub fn make_profile(name: &str) -> Result<TrainConfig> {
    match name {
        "mit" => Ok(TrainConfig {
            profile: Profile::Mit,
            lr: 5e-4,
            batch_size: 512,
            epochs: 320,
            weights: LossWeights {
                sym: 0.05,
                axiom: 0.01,
                cls_attr: 1.0,
                cls_obj: 0.01,
                triplet: 0.03,
                margin: 0.5,
            },
            ..TrainConfig::default()
        }),
        "ut" => Ok(TrainConfig {
            profile: Profile::Ut,
            lr: 1e-4,
            batch_size: 256,
            epochs: 600,
            weights: LossWeights {
                sym: 0.01,
                axiom: 0.03,
                cls_attr: 1.0,
                cls_obj: 0.5,
                triplet: 0.5,
                margin: 0.5,
            },
            ..TrainConfig::default()
        }),
        other => Err(SymNetError::UnknownProfile {
            name: other.to_string(),
        }),
    }
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub step: usize,
    pub sym: f64,
    pub clo: f64,
    pub inv: f64,
    pub com: f64,
    pub cls_a: f64,
    pub cls_o: f64,
    pub tri: f64,
    pub total: f64,
}

/// Serializable ChaCha state so a checkpoint can resume the exact stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: Vec<u8>,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed().to_vec(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&self.seed);
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

/// A trained model snapshot: parameters, running statistics, the
/// configuration that produced it, epoch counter, and rng state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: SymNetModel<f32>,
    pub config: TrainConfig,
    pub epoch: usize,
    pub rng: RngState,
}

/// Runs the full training loop and returns the final checkpoint plus one
/// loss record per step.
pub fn train(
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<LossRecord>)> {
    check_features_against_meta(features, meta)?;
    if features.dim != cfg.feat_dim {
        return Err(SymNetError::DimensionMismatch {
            detail: format!(
                "feature dim {} != configured feat_dim {}",
                features.dim, cfg.feat_dim
            ),
        });
    }
    if embeds.dim != cfg.embed_dim {
        return Err(SymNetError::DimensionMismatch {
            detail: format!(
                "embedding dim {} != configured embed_dim {}",
                embeds.dim, cfg.embed_dim
            ),
        });
    }
    if embeds.count != meta.n_attrs() {
        return Err(SymNetError::RowCountMismatch {
            expected: meta.n_attrs(),
            found: embeds.count,
        });
    }
    let train_indices_base = meta.split_indices(Split::Train);
    if train_indices_base.is_empty() {
        return Err(SymNetError::EmptyTrainSplit);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model =
        SymNetModel::<f32>::init(cfg.model_dims(meta.n_attrs(), meta.n_objs()), &mut rng);

    let weights = cfg.weights;
    let toggles = cfg.toggles();
    let dist = cfg.dist_spec();
    let opts = cfg.net_opts(Mode::Train);
    let lr = cfg.lr as f32;

    let mut log = Vec::new();
    let mut order = train_indices_base.clone();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // Negative sampling, without replacement within the batch.
            let mut used: HashSet<usize> = HashSet::new();
            let mut paired: Vec<(usize, usize)> = Vec::new();
            let mut unpaired: Vec<usize> = Vec::new();
            for &anchor_idx in chunk {
                let anchor = &meta.samples[anchor_idx];
                match sample_negative_excluding(meta, anchor, &used, &mut rng) {
                    Ok(neg_idx) => {
                        used.insert(neg_idx);
                        paired.push((anchor_idx, neg_idx));
                    }
                    Err(SymNetError::NoNegativeAvailable { .. }) => unpaired.push(anchor_idx),
                    Err(e) => return Err(e),
                }
            }

            // Each pair contributes twice with the roles swapped; anchors
            // without a negative only join the label-driven terms.
            let mut rows: Vec<BatchRow> = Vec::with_capacity(2 * paired.len() + unpaired.len());
            let mut feature_rows: Vec<usize> = Vec::with_capacity(rows.capacity());
            for &(a, n) in &paired {
                let (sa, sn) = (&meta.samples[a], &meta.samples[n]);
                rows.push(BatchRow {
                    feature_row: rows.len(),
                    attr: sa.attr,
                    obj: sa.obj,
                    neg_attr: Some(sn.attr),
                });
                feature_rows.push(a);
                rows.push(BatchRow {
                    feature_row: rows.len(),
                    attr: sn.attr,
                    obj: sn.obj,
                    neg_attr: Some(sa.attr),
                });
                feature_rows.push(n);
            }
            for &a in &unpaired {
                let sa = &meta.samples[a];
                rows.push(BatchRow {
                    feature_row: rows.len(),
                    attr: sa.attr,
                    obj: sa.obj,
                    neg_attr: None,
                });
                feature_rows.push(a);
            }

            let raw = features.gather_mat::<f32>(&feature_rows);
            let mut fw = crate::model::ModelForward::new(&model, opts);
            let nodes = build_loss_graph(&mut fw, &raw, &rows, embeds, &weights, &toggles, &dist)?;
            let breakdown = nodes.breakdown(&fw, &weights);
            if let Some(term) = breakdown.first_non_finite() {
                return Err(SymNetError::NonFiniteLoss {
                    term: term.to_string(),
                    epoch,
                    step,
                });
            }

            let mut store = model.to_store();
            let grads = backward(&mut fw.ctx.graph, nodes.total, &store)?;
            let bn_stats = std::mem::take(&mut fw.ctx.bn_stats);
            drop(fw);
            sgd_step(&mut store, &grads, lr)?;
            model.load_params(&store)?;
            model.apply_bn_stats(&bn_stats);

            log.push(LossRecord {
                epoch,
                step,
                sym: breakdown.sym,
                clo: breakdown.clo,
                inv: breakdown.inv,
                com: breakdown.com,
                cls_a: breakdown.cls_a,
                cls_o: breakdown.cls_o,
                tri: breakdown.tri,
                total: breakdown.total,
            });
        }
    }

    Ok((
        Checkpoint {
            model,
            config: cfg.clone(),
            epoch: cfg.epochs,
            rng: RngState::capture(&rng),
        },
        log,
    ))
}

#[derive(Serialize, Deserialize)]
struct CheckpointBlob {
    config: TrainConfig,
    n_attrs: usize,
    n_objs: usize,
    epoch: usize,
    rng: RngState,
}

/// Serializes a checkpoint. Tensor entries (parameters then batch-norm
/// buffers, all sorted by name) are followed by a JSON blob holding the
/// config, vocabulary sizes, epoch, and rng state.
pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, Mat<f32>)> = Vec::new();
    ckpt.model
        .for_each_param(&mut |name, m| entries.push((name, m.clone())));
    ckpt.model
        .for_each_buffer(&mut |name, m| entries.push((name, m.clone())));
    entries.sort_by(|a, b| a.0.cmp(&b.0));

    let blob = serde_json::to_vec(&CheckpointBlob {
        config: ckpt.config.clone(),
        n_attrs: ckpt.model.dims.n_attrs,
        n_objs: ckpt.model.dims.n_objs,
        epoch: ckpt.epoch,
        rng: ckpt.rng.clone(),
    })
    .expect("checkpoint blob serializes");

    let io = |e: std::io::Error| SymNetError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&CHECKPOINT_MAGIC).map_err(io)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes()).map_err(io)?;
    w.write_all(&(entries.len() as u32).to_le_bytes())
        .map_err(io)?;
    for (name, m) in &entries {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u16).to_le_bytes())
            .map_err(io)?;
        w.write_all(bytes).map_err(io)?;
        if m.rows() == 1 {
            w.write_all(&1u32.to_le_bytes()).map_err(io)?;
            w.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io)?;
        } else {
            w.write_all(&2u32.to_le_bytes()).map_err(io)?;
            w.write_all(&(m.rows() as u32).to_le_bytes()).map_err(io)?;
            w.write_all(&(m.cols() as u32).to_le_bytes()).map_err(io)?;
        }
        for &v in m.data() {
            w.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    w.write_all(&(blob.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&blob).map_err(io)?;
    w.flush().map_err(io)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SymNetError::MissingFile {
                path: path.display().to_string(),
            }
        } else {
            SymNetError::Io {
                path: path.display().to_string(),
                source: e,
            }
        }
    })?;
    let parse = |detail: &str| SymNetError::ParseError {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    let mut pos = 0usize;
    let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
        if *pos + len > bytes.len() {
            return Err(parse("unexpected end of file"));
        }
        let s = &bytes[*pos..*pos + len];
        *pos += len;
        Ok(s)
    };
    let magic: [u8; 4] = take(&mut pos, 4)?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(SymNetError::BadMagic {
            path: path.display().to_string(),
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(SymNetError::VersionMismatch {
            path: path.display().to_string(),
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let n_entries = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut entries: std::collections::BTreeMap<String, Mat<f32>> =
        std::collections::BTreeMap::new();
    for _ in 0..n_entries {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| parse("tensor name is not valid UTF-8"))?;
        let rank = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        let (rows, cols) = match rank {
            1 => (
                1usize,
                u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize,
            ),
            2 => {
                let r = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                let c = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
                (r, c)
            }
            other => return Err(parse(&format!("unsupported tensor rank {other}"))),
        };
        let payload = take(&mut pos, rows * cols * 4)?;
        let data: Vec<f32> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        entries.insert(name, Mat::from_vec(rows, cols, data));
    }
    let blob_len = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let blob_bytes = take(&mut pos, blob_len)?;
    if pos != bytes.len() {
        return Err(parse("trailing bytes after config blob"));
    }
    let blob: CheckpointBlob =
        serde_json::from_slice(blob_bytes).map_err(|e| parse(&format!("config blob: {e}")))?;

    let dims = blob.config.model_dims(blob.n_attrs, blob.n_objs);
    // Template model defines the expected name set; every tensor is then
    // overwritten from the file.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = SymNetModel::<f32>::init(dims, &mut rng);

    let mut params = crate::net::ParameterStore::<f32>::default();
    let mut buffers = std::collections::BTreeMap::new();
    let expected_buffers: std::collections::BTreeSet<String> =
        model.buffer_map().keys().cloned().collect();
    for (name, m) in entries {
        if expected_buffers.contains(&name) {
            buffers.insert(name, m);
        } else {
            params.insert(&name, m);
        }
    }
    model.load_params(&params)?;
    model.load_buffers(&buffers)?;

    Ok(Checkpoint {
        model,
        config: blob.config,
        epoch: blob.epoch,
        rng: blob.rng,
    })
}
