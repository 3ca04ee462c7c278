//! Finite-difference verification of the analytic gradients through the
//! complete training loss: both transformers, both classifier heads, the
//! projector, and train-mode batch normalization, all in 64-bit
//! arithmetic on a tiny model.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::EmbeddingTable;
use crate::error::{Result, SymNetError};
use crate::model::{ModelDims, ModelForward, SymNetModel};
use crate::objectives::{build_loss_graph, BatchRow, DistSpec, LossToggles, LossWeights};
use crate::tensor::Mat;
use crate::transforms::NetOpts;

#[derive(Debug, Clone)]
pub struct GradcheckOffender {
    pub name: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub checked_coords: usize,
    pub max_rel_err: f64,
    pub tol: f64,
    /// Largest relative errors, worst first.
    pub worst: Vec<GradcheckOffender>,
}

struct Fixture {
    model: SymNetModel<f64>,
    raw: Mat<f64>,
    rows: Vec<BatchRow>,
    embeds: EmbeddingTable,
    weights: LossWeights,
    toggles: LossToggles,
    dist: DistSpec,
    opts: NetOpts,
}

fn tiny_fixture(seed: u64) -> Fixture {
    let dims = ModelDims {
        feat_dim: 6,
        embed_dim: 4,
        latent_dim: 4,
        attn_hidden: 6,
        clf_hidden: 5,
        n_attrs: 3,
        n_objs: 3,
        obj_head_layers: 2,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = SymNetModel::<f64>::init(dims, &mut rng);
    // Check at a generic point: the zero-bias init would park dead relu
    // rows exactly on the relu kink (pre-activation identically 0.0),
    // where one-sided slopes differ and finite differences are
    // meaningless. Jittered biases and norm parameters keep the model off
    // every kink surface with probability one.
    model.for_each_param_mut(&mut |name, t| {
        let range = if name.ends_with(".b") || name.ends_with(".beta") {
            Some((-0.3, 0.3))
        } else if name.ends_with(".gamma") {
            Some((0.8, 1.2))
        } else {
            None
        };
        if let Some((lo, hi)) = range {
            for v in t.data_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    });
    let embeds = EmbeddingTable::new(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0f32)).collect());
    // Four paired rows plus one without a negative, so every loss branch
    // (including the reduced one) sits inside the checked graph.
    let rows = vec![
        BatchRow {
            feature_row: 0,
            attr: 0,
            obj: 0,
            neg_attr: Some(1),
        },
        BatchRow {
            feature_row: 1,
            attr: 1,
            obj: 0,
            neg_attr: Some(0),
        },
        BatchRow {
            feature_row: 2,
            attr: 2,
            obj: 1,
            neg_attr: Some(0),
        },
        BatchRow {
            feature_row: 3,
            attr: 0,
            obj: 2,
            neg_attr: Some(2),
        },
        BatchRow {
            feature_row: 4,
            attr: 1,
            obj: 1,
            neg_attr: None,
        },
    ];
    let raw = Mat::from_vec(
        5,
        6,
        (0..30)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect::<Vec<f64>>(),
    );
    Fixture {
        model,
        raw,
        rows,
        embeds,
        // Unit weights keep every term's gradient at comparable scale.
        weights: LossWeights {
            sym: 1.0,
            axiom: 1.0,
            cls_attr: 1.0,
            cls_obj: 1.0,
            triplet: 1.0,
            margin: 0.5,
        },
        toggles: LossToggles::default(),
        dist: DistSpec::default(),
        opts: NetOpts::train(),
    }
}

fn loss_of(fx: &Fixture, model: &SymNetModel<f64>) -> f64 {
    let mut fw = ModelForward::new(model, fx.opts);
    let nodes = build_loss_graph(
        &mut fw,
        &fx.raw,
        &fx.rows,
        &fx.embeds,
        &fx.weights,
        &fx.toggles,
        &fx.dist,
    )
    .expect("fixture shapes are valid");
    fw.ctx.graph.scalar(nodes.total)
}

/// Checks every parameter coordinate of the tiny model against central
/// finite differences. Passing returns the report; the first coordinate
/// beyond tolerance is an error carrying its location.
pub fn gradcheck(seed: u64, h: f64, tol: f64) -> Result<GradcheckReport> {
    check_fixture(&tiny_fixture(seed), h, tol)
}

fn check_fixture(fx: &Fixture, h: f64, tol: f64) -> Result<GradcheckReport> {
    // Analytic gradients of the full loss.
    let mut fw = ModelForward::new(&fx.model, fx.opts);
    let nodes = build_loss_graph(
        &mut fw,
        &fx.raw,
        &fx.rows,
        &fx.embeds,
        &fx.weights,
        &fx.toggles,
        &fx.dist,
    )?;
    let store = fx.model.to_store();
    let grads = crate::net::backward(&mut fw.ctx.graph, nodes.total, &store)?;
    drop(fw);

    let names = store.names();
    let mut worst: Vec<GradcheckOffender> = Vec::new();
    let mut checked = 0usize;
    let mut max_rel = 0.0f64;
    for name in &names {
        let n_coords = store.get(name).unwrap().data().len();
        for coord in 0..n_coords {
            let probe = |delta: f64| -> f64 {
                let mut m = fx.model.clone();
                m.for_each_param_mut(&mut |n, t| {
                    if n == *name {
                        t.data_mut()[coord] += delta;
                    }
                });
                loss_of(fx, &m)
            };
            let numeric = (probe(h) - probe(-h)) / (2.0 * h);
            let analytic = grads.get(name).unwrap().data()[coord];
            let rel_err = (analytic - numeric).abs() / numeric.abs().max(1.0);
            checked += 1;
            max_rel = max_rel.max(rel_err);
            if rel_err > tol {
                return Err(SymNetError::ToleranceExceeded {
                    name: name.clone(),
                    coord,
                    rel_err,
                    tol,
                });
            }
            worst.push(GradcheckOffender {
                name: name.clone(),
                coord,
                analytic,
                numeric,
                rel_err,
            });
            worst.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
            worst.truncate(5);
        }
    }
    Ok(GradcheckReport {
        checked_coords: checked,
        max_rel_err: max_rel,
        tol,
        worst,
    })
}
