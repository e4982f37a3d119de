//! Built-in data preparation: disguised missing values, imputation,
//! abbreviation standardization, duplicate detection and golden records.

pub mod abbrev;
pub mod builtin;
pub mod dedup;
pub mod dmv;
pub mod impute;

use thiserror::Error;

use crate::filter::FilterError;
use crate::table::TableError;

#[derive(Debug, Error)]
pub enum PrepError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("unknown column `{0}`")]
    UnknownColumn(String),
    #[error("column `{0}` is not a text column")]
    NotText(String),
    #[error("column `{0}` is not numeric")]
    NotNumeric(String),
    #[error("column `{0}` has no non-missing cells")]
    AllMissing(String),
    #[error(transparent)]
    Filter(#[from] FilterError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub use abbrev::{build_abbrev_map, derives_abbrev, standardize, AbbrevMap};
pub use dedup::{dedup, golden_record, DuplicateClustering};
pub use dmv::{detect_dmv, DmvConfig, DmvReport};
pub use impute::{impute_missing, ImputeStrategy};
