//! Modular domain experts: a frozen transformer backbone augmented with
//! parallel, token-gated expert stacks, trained per domain and composed.
//!
//! The crate bundles the numerical substrate ([`tensor`]), the model
//! ([`model`]), deterministic synthetic corpora ([`data`]), the training
//! and evaluation procedures ([`train`]) and an analytical SPMD/MPMD
//! sharding simulator ([`sim`]).

pub mod data;
pub mod error;
pub mod model;
pub mod sim;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use data::{Domain, DomainCorpus, Split};
pub use model::{LoraConfig, ModeConfig, ModeModel};
pub use tensor::{DType, Float, ParamStore, Tape, Tensor, Var};
