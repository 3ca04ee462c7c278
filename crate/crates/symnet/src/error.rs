//! Error taxonomy shared by every module. Each variant carries enough
//! context to name the offending rule, file, tensor, or index, and maps
//! to a stable machine-readable code for the CLI.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SymNetError {
    #[error("file not found: {path}")]
    MissingFile { path: String },
    #[error("parse error in {path}: {detail}")]
    ParseError { path: String, detail: String },
    #[error("invariant violation ({rule}): {detail}")]
    InvariantViolation { rule: String, detail: String },
    #[error("bad magic in {path}: expected {expected:?}, found {found:?}")]
    BadMagic {
        path: String,
        expected: [u8; 4],
        found: [u8; 4],
    },
    #[error("version mismatch in {path}: expected {expected}, found {found}")]
    VersionMismatch {
        path: String,
        expected: u32,
        found: u32,
    },
    #[error("dimension mismatch: {detail}")]
    DimensionMismatch { detail: String },
    #[error("non-finite value at row {row}: {detail}")]
    NonFiniteValue { row: usize, detail: String },
    #[error("embedding row count {found} does not match vocabulary size {expected}")]
    RowCountMismatch { expected: usize, found: usize },
    #[error("no negative sample available for anchor {anchor_id} (object {obj})")]
    NoNegativeAvailable { anchor_id: String, obj: usize },
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: String, detail: String },
    #[error("degenerate batch: train-mode batch normalization needs >= 2 rows, got {rows}")]
    DegenerateBatch { rows: usize },
    #[error("parameter {name} is not registered in the store")]
    UnregisteredParameter { name: String },
    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },
    #[error("gradient/parameter key sets differ: {detail}")]
    KeyMismatch { detail: String },
    #[error("gradient check tolerance exceeded at {name}[{coord}]: rel err {rel_err} > {tol}")]
    ToleranceExceeded {
        name: String,
        coord: usize,
        rel_err: f64,
        tol: f64,
    },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("anchor and negative attribute indices are identical ({index})")]
    IdenticalAttrIndices { index: usize },
    #[error("scale factor gamma must be positive, got {gamma}")]
    NonPositiveGamma { gamma: f64 },
    #[error("empty candidate set: every pair is masked out")]
    EmptyCandidateSet,
    #[error("empty bias grid")]
    EmptyGrid,
    #[error("train split is empty")]
    EmptyTrainSplit,
    #[error("non-finite loss term `{term}` at epoch {epoch}, step {step}")]
    NonFiniteLoss {
        term: String,
        epoch: usize,
        step: usize,
    },
    #[error("unknown profile `{name}` (expected mit or ut)")]
    UnknownProfile { name: String },
    #[error("checkpoint is missing parameter {name}")]
    MissingParameter { name: String },
    #[error("unknown sample id `{id}`")]
    UnknownSampleId { id: String },
    #[error("attribute index {index} out of range (n = {n})")]
    AttrOutOfRange { index: usize, n: usize },
    #[error("could not find a feasible pair split after {attempts} attempts")]
    InfeasibleSplit { attempts: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SymNetError {
    /// Stable machine-readable code, used by the CLI's JSON error output.
    pub fn code(&self) -> &'static str {
        use SymNetError::*;
        match self {
            MissingFile { .. } => "missing_file",
            ParseError { .. } => "parse_error",
            InvariantViolation { .. } => "invariant_violation",
            BadMagic { .. } => "bad_magic",
            VersionMismatch { .. } => "version_mismatch",
            DimensionMismatch { .. } => "dimension_mismatch",
            NonFiniteValue { .. } => "non_finite_value",
            RowCountMismatch { .. } => "row_count_mismatch",
            NoNegativeAvailable { .. } => "no_negative_available",
            ShapeMismatch { .. } => "shape_mismatch",
            DegenerateBatch { .. } => "degenerate_batch",
            UnregisteredParameter { .. } => "unregistered_parameter",
            NonFiniteGradient { .. } => "non_finite_gradient",
            KeyMismatch { .. } => "key_mismatch",
            ToleranceExceeded { .. } => "tolerance_exceeded",
            LabelOutOfRange { .. } => "label_out_of_range",
            IdenticalAttrIndices { .. } => "identical_attr_indices",
            NonPositiveGamma { .. } => "non_positive_gamma",
            EmptyCandidateSet => "empty_candidate_set",
            EmptyGrid => "empty_grid",
            EmptyTrainSplit => "empty_train_split",
            NonFiniteLoss { .. } => "non_finite_loss",
            UnknownProfile { .. } => "unknown_profile",
            MissingParameter { .. } => "missing_parameter",
            UnknownSampleId { .. } => "unknown_sample_id",
            AttrOutOfRange { .. } => "attr_out_of_range",
            InfeasibleSplit { .. } => "infeasible_split",
            Io { .. } => "io_error",
        }
    }
}

pub type Result<T> = std::result::Result<T, SymNetError>;
