//! Dataset metadata, binary feature/embedding containers, candidate-pair
//! masks, and negative sampling.
//!
//! On-disk formats:
//! - `meta.json`: UTF-8 JSON with attribute/object vocabularies, pair
//!   lists, and the sample index.
//! - `features.bin` / `embeds.bin`: magic `SYMF`/`SYME`, u32-LE version
//!   (= 1), u32-LE count, u32-LE dim, then `count * dim` f32-LE values
//!   row-major. No padding.
//!
//! Row alignment is positional: feature row i belongs to sample i, and
//! embedding row j belongs to attribute j.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SymNetError};
use crate::tensor::{Mat, Scalar};

pub const FEATURES_MAGIC: [u8; 4] = *b"SYMF";
pub const EMBEDS_MAGIC: [u8; 4] = *b"SYME";
pub const BINARY_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub attr: usize,
    pub obj: usize,
    pub split: Split,
}

/// Vocabularies, pair splits, and the sample index of one dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub attributes: Vec<String>,
    pub objects: Vec<String>,
    pub train_pairs: Vec<(usize, usize)>,
    pub test_pairs: Vec<(usize, usize)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub val_pairs: Option<Vec<(usize, usize)>>,
    pub samples: Vec<SampleRecord>,
}

impl DatasetMeta {
    pub fn n_attrs(&self) -> usize {
        self.attributes.len()
    }

    pub fn n_objs(&self) -> usize {
        self.objects.len()
    }

    fn invariant(cond: bool, rule: &str, detail: String) -> Result<()> {
        if cond {
            Ok(())
        } else {
            Err(SymNetError::InvariantViolation {
                rule: rule.to_string(),
                detail,
            })
        }
    }

    /// Checks every structural invariant; violations are errors.
    pub fn validate(&self) -> Result<()> {
        let n = self.n_attrs();
        let m = self.n_objs();

        let uniq_attrs: HashSet<_> = self.attributes.iter().collect();
        Self::invariant(
            uniq_attrs.len() == n,
            "unique_attribute_names",
            "duplicate attribute name".into(),
        )?;
        let uniq_objs: HashSet<_> = self.objects.iter().collect();
        Self::invariant(
            uniq_objs.len() == m,
            "unique_object_names",
            "duplicate object name".into(),
        )?;

        let check_pairs = |pairs: &[(usize, usize)], which: &str| -> Result<()> {
            for &(a, o) in pairs {
                Self::invariant(
                    a < n && o < m,
                    "pair_index_in_range",
                    format!("{which} pair ({a}, {o}) out of range ({n} attrs, {m} objs)"),
                )?;
            }
            Ok(())
        };
        check_pairs(&self.train_pairs, "train")?;
        check_pairs(&self.test_pairs, "test")?;
        if let Some(vp) = &self.val_pairs {
            check_pairs(vp, "val")?;
        }

        let train_set: HashSet<_> = self.train_pairs.iter().collect();
        for p in &self.test_pairs {
            Self::invariant(
                !train_set.contains(p),
                "train_test_pairs_disjoint",
                format!("pair ({}, {}) appears in both train and test", p.0, p.1),
            )?;
        }

        let train_attrs: HashSet<usize> = self.train_pairs.iter().map(|p| p.0).collect();
        let train_objs: HashSet<usize> = self.train_pairs.iter().map(|p| p.1).collect();
        for &(a, o) in &self.test_pairs {
            Self::invariant(
                train_attrs.contains(&a),
                "test_components_seen",
                format!("attribute {a} of test pair ({a}, {o}) never appears in a train pair"),
            )?;
            Self::invariant(
                train_objs.contains(&o),
                "test_components_seen",
                format!("object {o} of test pair ({a}, {o}) never appears in a train pair"),
            )?;
        }

        let test_set: HashSet<_> = self.test_pairs.iter().collect();
        let val_set: Option<HashSet<_>> = self.val_pairs.as_ref().map(|v| v.iter().collect());
        for s in &self.samples {
            Self::invariant(
                s.attr < n && s.obj < m,
                "sample_labels_in_range",
                format!(
                    "sample {} labels ({}, {}) out of range",
                    s.id, s.attr, s.obj
                ),
            )?;
            let pair = (s.attr, s.obj);
            match s.split {
                Split::Train => Self::invariant(
                    train_set.contains(&pair),
                    "train_sample_pair_in_train_pairs",
                    format!("train sample {} has pair ({}, {})", s.id, s.attr, s.obj),
                )?,
                Split::Test => Self::invariant(
                    test_set.contains(&pair),
                    "test_sample_pair_in_test_pairs",
                    format!("test sample {} has pair ({}, {})", s.id, s.attr, s.obj),
                )?,
                Split::Val => {
                    if let Some(vs) = &val_set {
                        Self::invariant(
                            vs.contains(&pair),
                            "val_sample_pair_in_val_pairs",
                            format!("val sample {} has pair ({}, {})", s.id, s.attr, s.obj),
                        )?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Indices of samples in the given split, in sample order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn sample_index_by_id(&self, id: &str) -> Result<usize> {
        self.samples
            .iter()
            .position(|s| s.id == id)
            .ok_or_else(|| SymNetError::UnknownSampleId { id: id.to_string() })
    }
}

pub fn load_metadata(path: impl AsRef<Path>) -> Result<DatasetMeta> {
    let path = path.as_ref();
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
    let meta: DatasetMeta = serde_json::from_str(&text).map_err(|e| SymNetError::ParseError {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    meta.validate()?;
    Ok(meta)
}

pub fn save_metadata(meta: &DatasetMeta, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(meta).expect("metadata serializes");
    std::fs::write(path, text).map_err(|e| SymNetError::Io {
        path: path.display().to_string(),
        source: e,
    })
}

/// Row-major f32 matrix of pre-extracted image features; row i is
/// aligned with sample i of the metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

/// Row-major f32 matrix of attribute word vectors; row j is aligned with
/// attribute j of the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    pub count: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

macro_rules! impl_f32_rows {
    ($ty:ident) => {
        impl $ty {
            pub fn new(count: usize, dim: usize, data: Vec<f32>) -> Self {
                assert_eq!(data.len(), count * dim);
                Self { count, dim, data }
            }

            pub fn row(&self, i: usize) -> &[f32] {
                &self.data[i * self.dim..(i + 1) * self.dim]
            }

            pub fn to_mat<T: Scalar>(&self) -> Mat<T> {
                Mat::from_vec(
                    self.count,
                    self.dim,
                    self.data.iter().map(|&v| T::lit(v as f64)).collect(),
                )
            }

            /// Rows selected by index, stacked in the given order.
            pub fn gather_mat<T: Scalar>(&self, indices: &[usize]) -> Mat<T> {
                let mut data = Vec::with_capacity(indices.len() * self.dim);
                for &i in indices {
                    data.extend(self.row(i).iter().map(|&v| T::lit(v as f64)));
                }
                Mat::from_vec(indices.len(), self.dim, data)
            }
        }
    };
}

impl_f32_rows!(FeatureMatrix);
impl_f32_rows!(EmbeddingTable);

impl EmbeddingTable {
    /// One-hot fallback when no word vectors are available: the n x n
    /// identity.
    pub fn one_hot(n: usize) -> Self {
        let mut data = vec![0.0f32; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        EmbeddingTable {
            count: n,
            dim: n,
            data,
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> SymNetError {
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
}

fn read_matrix_file(path: &Path, magic: [u8; 4]) -> Result<(usize, usize, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let parse = |detail: &str| SymNetError::ParseError {
        path: path.display().to_string(),
        detail: detail.to_string(),
    };
    if bytes.len() < 16 {
        return Err(parse("file shorter than the 16-byte header"));
    }
    let found: [u8; 4] = bytes[0..4].try_into().unwrap();
    if found != magic {
        return Err(SymNetError::BadMagic {
            path: path.display().to_string(),
            expected: magic,
            found,
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != BINARY_VERSION {
        return Err(SymNetError::VersionMismatch {
            path: path.display().to_string(),
            expected: BINARY_VERSION,
            found: version,
        });
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let expected_len = count
        .checked_mul(dim)
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(16))
        .ok_or_else(|| parse("header dimensions overflow"))?;
    if bytes.len() != expected_len {
        return Err(parse(&format!(
            "payload length {} does not match header count {count} x dim {dim}",
            bytes.len() - 16
        )));
    }
    let mut data = Vec::with_capacity(count * dim);
    for chunk in bytes[16..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    for (i, row) in data.chunks(dim.max(1)).enumerate() {
        if row.iter().any(|v| !v.is_finite()) {
            return Err(SymNetError::NonFiniteValue {
                row: i,
                detail: format!("{} contains a NaN or infinite entry", path.display()),
            });
        }
    }
    Ok((count, dim, data))
}

fn write_matrix_file(
    path: &Path,
    magic: [u8; 4],
    count: usize,
    dim: usize,
    data: &[f32],
) -> Result<()> {
    assert_eq!(data.len(), count * dim);
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = |buf: &[u8]| -> Result<()> { w.write_all(buf).map_err(|e| io_err(path, e)) };
    emit(&magic)?;
    emit(&BINARY_VERSION.to_le_bytes())?;
    emit(&(count as u32).to_le_bytes())?;
    emit(&(dim as u32).to_le_bytes())?;
    for v in data {
        emit(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn load_features(path: impl AsRef<Path>) -> Result<FeatureMatrix> {
    let (count, dim, data) = read_matrix_file(path.as_ref(), FEATURES_MAGIC)?;
    Ok(FeatureMatrix { count, dim, data })
}

pub fn save_features(features: &FeatureMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_matrix_file(
        path.as_ref(),
        FEATURES_MAGIC,
        features.count,
        features.dim,
        &features.data,
    )
}

/// Loads embeddings and cross-checks the row count against the attribute
/// vocabulary.
pub fn load_embeddings(path: impl AsRef<Path>, meta: &DatasetMeta) -> Result<EmbeddingTable> {
    let (count, dim, data) = read_matrix_file(path.as_ref(), EMBEDS_MAGIC)?;
    if count != meta.n_attrs() {
        return Err(SymNetError::RowCountMismatch {
            expected: meta.n_attrs(),
            found: count,
        });
    }
    Ok(EmbeddingTable { count, dim, data })
}

pub fn save_embeddings(embeds: &EmbeddingTable, path: impl AsRef<Path>) -> Result<()> {
    write_matrix_file(
        path.as_ref(),
        EMBEDS_MAGIC,
        embeds.count,
        embeds.dim,
        &embeds.data,
    )
}

/// Cross-checks a feature matrix against metadata (row count must equal
/// the number of samples).
pub fn check_features_against_meta(features: &FeatureMatrix, meta: &DatasetMeta) -> Result<()> {
    if features.count != meta.samples.len() {
        return Err(SymNetError::DimensionMismatch {
            detail: format!(
                "feature rows {} != sample count {}",
                features.count,
                meta.samples.len()
            ),
        });
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    ClosedWorld,
    Generalized,
}

/// Boolean candidate mask over the n x m pair grid.
#[derive(Debug, Clone)]
pub struct PairMask {
    n: usize,
    m: usize,
    mask: Vec<bool>,
    pub protocol: Protocol,
}

impl PairMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn admits(&self, attr: usize, obj: usize) -> bool {
        self.mask[attr * self.m + obj]
    }

    pub fn count_admitted(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    /// All admitted (attr, obj) cells in row-major order.
    pub fn admitted_pairs(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for a in 0..self.n {
            for o in 0..self.m {
                if self.admits(a, o) {
                    out.push((a, o));
                }
            }
        }
        out
    }
}

/// Builds the candidate mask for a protocol: closed-world admits exactly
/// the test pairs, generalized admits train and test pairs. Pass
/// `include_val` when evaluating a validation split so its pairs are
/// admitted too.
pub fn build_pair_mask(meta: &DatasetMeta, protocol: Protocol, include_val: bool) -> PairMask {
    let n = meta.n_attrs();
    let m = meta.n_objs();
    let mut mask = vec![false; n * m];
    let mut set = |pairs: &[(usize, usize)]| {
        for &(a, o) in pairs {
            mask[a * m + o] = true;
        }
    };
    match protocol {
        Protocol::ClosedWorld => set(&meta.test_pairs),
        Protocol::Generalized => {
            set(&meta.train_pairs);
            set(&meta.test_pairs);
            if include_val {
                if let Some(vp) = &meta.val_pairs {
                    set(vp);
                }
            }
        }
    }
    PairMask {
        n,
        m,
        mask,
        protocol,
    }
}

/// Draws a uniform negative for the anchor: a train sample with the same
/// object label but a different attribute. `exclude` removes already-used
/// sample indices from the candidate pool (within-batch sampling without
/// replacement).
pub fn sample_negative_excluding<R: Rng>(
    meta: &DatasetMeta,
    anchor: &SampleRecord,
    exclude: &HashSet<usize>,
    rng: &mut R,
) -> Result<usize> {
    let candidates: Vec<usize> = meta
        .samples
        .iter()
        .enumerate()
        .filter(|(i, s)| {
            s.split == Split::Train
                && s.obj == anchor.obj
                && s.attr != anchor.attr
                && !exclude.contains(i)
        })
        .map(|(i, _)| i)
        .collect();
    if candidates.is_empty() {
        return Err(SymNetError::NoNegativeAvailable {
            anchor_id: anchor.id.clone(),
            obj: anchor.obj,
        });
    }
    Ok(candidates[rng.gen_range(0..candidates.len())])
}

/// Uniform negative sampling without an exclusion set.
pub fn sample_negative<R: Rng>(
    meta: &DatasetMeta,
    anchor: &SampleRecord,
    rng: &mut R,
) -> Result<SampleRecord> {
    let idx = sample_negative_excluding(meta, anchor, &HashSet::new(), rng)?;
    Ok(meta.samples[idx].clone())
}

/// Reads back the raw header of a matrix file; used by tooling that wants
/// to report shapes without triggering full validation.
pub fn peek_matrix_header(path: impl AsRef<Path>) -> Result<([u8; 4], u32, u32, u32)> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = [0u8; 16];
    file.read_exact(&mut header).map_err(|e| io_err(path, e))?;
    Ok((
        header[0..4].try_into().unwrap(),
        u32::from_le_bytes(header[4..8].try_into().unwrap()),
        u32::from_le_bytes(header[8..12].try_into().unwrap()),
        u32::from_le_bytes(header[12..16].try_into().unwrap()),
    ))
}
