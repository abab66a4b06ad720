//! Objective quality measures and evaluation reports.

pub mod eval;
pub mod pesq;
pub mod sdi;
pub mod stoi;

pub use eval::{evaluate, EvalOptions, EvalReport, Summary, UtteranceScore};
pub use pesq::{pesq_adapter, resolve_pesq_bin, PesqMode, PESQ_BIN_ENV};
pub use sdi::sdi_metric;
pub use stoi::{stoi_metric, stoi_score};
