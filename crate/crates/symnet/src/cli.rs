//! Command-line interface: train, evaluate, component accuracy,
//! retrieval, gradient checking, and synthetic data generation.
//!
//! Commands exit 0 on success and 1 on a domain error, printing a
//! machine-readable `{"error": code, "message": ...}` line to stderr;
//! usage errors exit 2. Reports go to stdout as JSON with a short
//! human-readable summary on stderr.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{
    build_pair_mask, load_embeddings, load_features, load_metadata, save_embeddings, save_features,
    save_metadata, DatasetMeta, EmbeddingTable, FeatureMatrix, Protocol, Split,
};
use crate::error::{Result, SymNetError};
use crate::evaluation::{evaluate_closed, evaluate_generalized, retrieve, score_samples, GridSpec};
use crate::synthetic::{gen_synthetic, SynthSpec};
use crate::trainer::{load_checkpoint, make_profile, save_checkpoint, train, TrainConfig};

pub const SCORES_MAGIC: [u8; 4] = *b"SYMS";

#[derive(Parser)]
#[command(
    name = "symnet",
    about = "Attribute-object composition learning with coupling/decoupling transformers",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on a dataset directory (meta.json, features.bin, embeds.bin)
    Train(TrainArgs),
    /// Evaluate a checkpoint under the closed-world or generalized protocol
    Eval(EvalArgs),
    /// Report independent attribute/object accuracy on the test split
    Components(ComponentsArgs),
    /// Retrieve nearest neighbors after removing one attribute and adding another
    Retrieve(RetrieveArgs),
    /// Verify analytic gradients against finite differences on a tiny model
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic dataset with known ground truth
    Synth(SynthArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory containing meta.json, features.bin, embeds.bin
    #[arg(long)]
    data: PathBuf,
    /// Hyperparameter preset: mit, ut, or custom
    #[arg(long, default_value = "custom")]
    profile: String,
    /// JSON config file; fields override the profile preset
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint path
    #[arg(long)]
    out: PathBuf,
    /// Random seed (overrides config)
    #[arg(long)]
    seed: Option<u64>,
    /// Epoch count (overrides config)
    #[arg(long)]
    epochs: Option<usize>,
    /// Learning rate (overrides config)
    #[arg(long)]
    lr: Option<f64>,
    /// Batch size (overrides config)
    #[arg(long)]
    batch_size: Option<usize>,
    /// Score scale factor (overrides config)
    #[arg(long)]
    gamma: Option<f64>,
    /// Comma-separated loss terms to disable:
    /// sym, axiom, clo, inv, com, cls, cls_a, cls_o, tri
    #[arg(long, value_delimiter = ',')]
    no_loss: Vec<String>,
    /// Bypass the attribute-as-attention gate
    #[arg(long)]
    no_attention: bool,
    /// Distance metric: l2, l1, or cos (overrides config)
    #[arg(long)]
    dist: Option<String>,
    /// Write the JSON-lines training log here instead of stdout
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// closed or generalized
    #[arg(long)]
    protocol: String,
    /// Comma-separated top-k levels
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    topk: Vec<usize>,
    /// Which split to evaluate
    #[arg(long, default_value = "test")]
    split: String,
    /// Dump raw pair scores (masked cells as NaN) to this path
    #[arg(long)]
    dump_scores: Option<PathBuf>,
    /// Also write the JSON report to this path
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct ComponentsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
}

#[derive(Args)]
struct RetrieveArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    /// Source sample id
    #[arg(long)]
    sample: String,
    /// Attribute to remove (index or name)
    #[arg(long)]
    remove: String,
    /// Attribute to add (index or name)
    #[arg(long)]
    add: String,
    #[arg(long, default_value_t = 5)]
    k: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
    /// Central-difference step
    #[arg(long, default_value_t = 1e-5)]
    h: f64,
}

#[derive(Args)]
struct SynthArgs {
    /// JSON file describing the synthetic dataset
    #[arg(long)]
    spec: PathBuf,
    /// Output directory (created if absent)
    #[arg(long)]
    out: PathBuf,
}

/// Parses arguments and runs; returns the process exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap exits 0 for --help/--version, 2 for usage errors
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Components(args) => cmd_components(args),
        Command::Retrieve(args) => cmd_retrieve(args),
        Command::Gradcheck(args) => cmd_gradcheck(args),
        Command::Synth(args) => cmd_synth(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let payload = serde_json::json!({
                "error": e.code(),
                "message": e.to_string(),
            });
            eprintln!("{payload}");
            1
        }
    }
}

fn load_dataset(dir: &Path) -> Result<(DatasetMeta, FeatureMatrix, EmbeddingTable)> {
    let meta = load_metadata(dir.join("meta.json"))?;
    let features = load_features(dir.join("features.bin"))?;
    crate::data::check_features_against_meta(&features, &meta)?;
    let embeds = load_embeddings(dir.join("embeds.bin"), &meta)?;
    Ok((meta, features, embeds))
}

/// Overlays JSON fields onto a base config: objects merge recursively,
/// everything else replaces.
fn merge_json(base: &mut serde_json::Value, overlay: serde_json::Value) {
    match (base, overlay) {
        (serde_json::Value::Object(b), serde_json::Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_json(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn build_train_config(args: &TrainArgs) -> Result<TrainConfig> {
    let base = match args.profile.as_str() {
        "custom" => TrainConfig::default(),
        name => make_profile(name)?,
    };
    let mut value = serde_json::to_value(&base).expect("config serializes");
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| {
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
        let overlay: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| SymNetError::ParseError {
                path: path.display().to_string(),
                detail: e.to_string(),
            })?;
        merge_json(&mut value, overlay);
    }
    let mut cfg: TrainConfig =
        serde_json::from_value(value).map_err(|e| SymNetError::ParseError {
            path: "train config".into(),
            detail: e.to_string(),
        })?;

    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(epochs) = args.epochs {
        cfg.epochs = epochs;
    }
    if let Some(lr) = args.lr {
        cfg.lr = lr;
    }
    if let Some(batch) = args.batch_size {
        cfg.batch_size = batch;
    }
    if let Some(gamma) = args.gamma {
        cfg.gamma = gamma;
    }
    if args.no_attention {
        cfg.no_attention = true;
    }
    if let Some(dist) = &args.dist {
        cfg.dist = parse_enum(dist, "dist")?;
    }
    for token in &args.no_loss {
        match token.as_str() {
            "sym" => cfg.weights.sym = 0.0,
            "axiom" => cfg.weights.axiom = 0.0,
            "clo" => cfg.no_clo = true,
            "inv" => cfg.no_inv = true,
            "com" => cfg.no_com = true,
            "cls" => {
                cfg.weights.cls_attr = 0.0;
                cfg.weights.cls_obj = 0.0;
            }
            "cls_a" => cfg.weights.cls_attr = 0.0,
            "cls_o" => cfg.weights.cls_obj = 0.0,
            "tri" => cfg.weights.triplet = 0.0,
            other => {
                return Err(SymNetError::ParseError {
                    path: "--no-loss".into(),
                    detail: format!(
                        "unknown loss term `{other}` (expected sym, axiom, clo, inv, com, cls, cls_a, cls_o, tri)"
                    ),
                })
            }
        }
    }
    Ok(cfg)
}

fn parse_enum<T: serde::de::DeserializeOwned>(token: &str, what: &str) -> Result<T> {
    serde_json::from_value(serde_json::Value::String(token.to_string())).map_err(|_| {
        SymNetError::ParseError {
            path: format!("--{what}"),
            detail: format!("invalid value `{token}`"),
        }
    })
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let cfg = build_train_config(&args)?;
    let (meta, features, embeds) = load_dataset(&args.data)?;
    let (ckpt, log) = train(&meta, &features, &embeds, &cfg)?;

    let every = cfg.log_every.max(1);
    let mut sink: Box<dyn Write> = match &args.log {
        Some(path) => Box::new(std::fs::File::create(path).map_err(|e| SymNetError::Io {
            path: path.display().to_string(),
            source: e,
        })?),
        None => Box::new(std::io::stdout()),
    };
    for rec in log.iter().filter(|r| r.step % every == 0) {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(sink, "{line}").map_err(|e| SymNetError::Io {
            path: "log sink".into(),
            source: e,
        })?;
    }
    drop(sink);

    save_checkpoint(&ckpt, &args.out)?;
    if let Some(last) = log.last() {
        eprintln!(
            "trained {} epochs ({} steps); final total loss {:.6}; checkpoint at {}",
            cfg.epochs,
            log.len(),
            last.total,
            args.out.display()
        );
    }
    Ok(())
}

fn parse_split(token: &str) -> Result<Split> {
    match token {
        "test" => Ok(Split::Test),
        "val" => Ok(Split::Val),
        other => Err(SymNetError::ParseError {
            path: "--split".into(),
            detail: format!("invalid split `{other}` (expected test or val)"),
        }),
    }
}

fn dump_scores(
    path: &Path,
    ckpt: &crate::trainer::Checkpoint,
    meta: &DatasetMeta,
    features: &FeatureMatrix,
    embeds: &EmbeddingTable,
    protocol: Protocol,
    split: Split,
) -> Result<()> {
    let mask = build_pair_mask(meta, protocol, split == Split::Val);
    let indices = meta.split_indices(split);
    let scores = score_samples(ckpt, meta, features, embeds, &indices)?;
    let io = |e: std::io::Error| SymNetError::Io {
        path: path.display().to_string(),
        source: e,
    };
    let file = std::fs::File::create(path).map_err(io)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(&SCORES_MAGIC).map_err(io)?;
    w.write_all(&(scores.len() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(meta.n_attrs() as u32).to_le_bytes())
        .map_err(io)?;
    w.write_all(&(meta.n_objs() as u32).to_le_bytes())
        .map_err(io)?;
    for s in &scores {
        for a in 0..meta.n_attrs() {
            for o in 0..meta.n_objs() {
                let v = if mask.admits(a, o) {
                    s.pair_score(a, o) as f32
                } else {
                    f32::NAN
                };
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
    }
    w.flush().map_err(io)
}

fn emit_report<T: serde::Serialize>(report: &T, path: Option<&Path>) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    println!("{json}");
    if let Some(path) = path {
        std::fs::write(path, &json).map_err(|e| SymNetError::Io {
            path: path.display().to_string(),
            source: e,
        })?;
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let (meta, features, embeds) = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let split = parse_split(&args.split)?;
    match args.protocol.as_str() {
        "closed" => {
            let report = evaluate_closed(&ckpt, &meta, &features, &embeds, &args.topk)?;
            if let Some(path) = &args.dump_scores {
                dump_scores(
                    path,
                    &ckpt,
                    &meta,
                    &features,
                    &embeds,
                    Protocol::ClosedWorld,
                    split,
                )?;
            }
            let tops: Vec<String> = report
                .topk
                .iter()
                .map(|(k, v)| format!("top-{k} {v:.4}"))
                .collect();
            eprintln!(
                "closed-world: {} | attr {:.4} | obj {:.4} ({} samples)",
                tops.join(" | "),
                report.attr_acc,
                report.obj_acc,
                report.n_samples
            );
            emit_report(&report, args.report.as_deref())
        }
        "generalized" => {
            let report = evaluate_generalized(
                &ckpt,
                &meta,
                &features,
                &embeds,
                &args.topk,
                &GridSpec::ExactMidpoints,
                split,
            )?;
            if let Some(path) = &args.dump_scores {
                dump_scores(
                    path,
                    &ckpt,
                    &meta,
                    &features,
                    &embeds,
                    Protocol::Generalized,
                    split,
                )?;
            }
            let aucs: Vec<String> = report
                .auc_topk
                .iter()
                .map(|(k, v)| format!("auc@{k} {v:.4}"))
                .collect();
            eprintln!(
                "generalized: {} | best HM {:.4} (seen {:.4}, unseen {:.4})",
                aucs.join(" | "),
                report.best_hm,
                report.seen_at_best,
                report.unseen_at_best
            );
            emit_report(&report, args.report.as_deref())
        }
        other => Err(SymNetError::ParseError {
            path: "--protocol".into(),
            detail: format!("invalid protocol `{other}` (expected closed or generalized)"),
        }),
    }
}

fn cmd_components(args: ComponentsArgs) -> Result<()> {
    let (meta, features, embeds) = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let report = evaluate_closed(&ckpt, &meta, &features, &embeds, &[1])?;
    let payload = serde_json::json!({
        "attr_acc": report.attr_acc,
        "obj_acc": report.obj_acc,
        "n_samples": report.n_samples,
    });
    eprintln!(
        "components: attr {:.4} | obj {:.4} ({} samples)",
        report.attr_acc, report.obj_acc, report.n_samples
    );
    println!("{payload}");
    Ok(())
}

fn resolve_attr(meta: &DatasetMeta, token: &str) -> Result<usize> {
    if let Ok(idx) = token.parse::<usize>() {
        if idx >= meta.n_attrs() {
            return Err(SymNetError::AttrOutOfRange {
                index: idx,
                n: meta.n_attrs(),
            });
        }
        return Ok(idx);
    }
    meta.attributes
        .iter()
        .position(|a| a == token)
        .ok_or_else(|| SymNetError::ParseError {
            path: "attribute".into(),
            detail: format!("unknown attribute `{token}`"),
        })
}

fn cmd_retrieve(args: RetrieveArgs) -> Result<()> {
    let (meta, features, embeds) = load_dataset(&args.data)?;
    let ckpt = load_checkpoint(&args.ckpt)?;
    let remove = resolve_attr(&meta, &args.remove)?;
    let add = resolve_attr(&meta, &args.add)?;
    let hits = retrieve(
        &ckpt,
        &meta,
        &features,
        &embeds,
        &args.sample,
        remove,
        add,
        args.k,
    )?;
    for hit in &hits {
        println!("{}\t{}\t{:.6}", hit.rank, hit.sample_id, hit.distance);
    }
    Ok(())
}

fn cmd_gradcheck(args: GradcheckArgs) -> Result<()> {
    let report = crate::gradcheck::gradcheck(args.seed, args.h, args.tol)?;
    let payload = serde_json::json!({
        "checked_coords": report.checked_coords,
        "max_rel_err": report.max_rel_err,
        "tol": report.tol,
        "worst": report.worst.iter().map(|o| serde_json::json!({
            "name": o.name,
            "coord": o.coord,
            "rel_err": o.rel_err,
        })).collect::<Vec<_>>(),
    });
    eprintln!(
        "gradcheck: {} coordinates, max relative error {:.3e} (tol {:.1e})",
        report.checked_coords, report.max_rel_err, report.tol
    );
    println!("{payload}");
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let text = std::fs::read_to_string(&args.spec).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            SymNetError::MissingFile {
                path: args.spec.display().to_string(),
            }
        } else {
            SymNetError::Io {
                path: args.spec.display().to_string(),
                source: e,
            }
        }
    })?;
    let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| SymNetError::ParseError {
        path: args.spec.display().to_string(),
        detail: e.to_string(),
    })?;
    let (meta, features, embeds, truth) = gen_synthetic(&spec)?;
    std::fs::create_dir_all(&args.out).map_err(|e| SymNetError::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    save_metadata(&meta, args.out.join("meta.json"))?;
    save_features(&features, args.out.join("features.bin"))?;
    save_embeddings(&embeds, args.out.join("embeds.bin"))?;
    let truth_json = serde_json::to_string_pretty(&truth).expect("truth serializes");
    std::fs::write(args.out.join("truth.json"), truth_json).map_err(|e| SymNetError::Io {
        path: args.out.display().to_string(),
        source: e,
    })?;
    eprintln!(
        "synthesized {} samples ({} attrs x {} objs, {} unseen pairs) into {}",
        meta.samples.len(),
        meta.n_attrs(),
        meta.n_objs(),
        meta.test_pairs.len(),
        args.out.display()
    );
    Ok(())
}
