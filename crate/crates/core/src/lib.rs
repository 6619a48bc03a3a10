//! Uncertainty-aware human-object interaction detection at desk scale.
//!
//! The crate contains a small reverse-mode array engine ([`tensor`]), box
//! geometry, set matching, a two-decoder transformer detector ([`model`]),
//! the uncertainty-aware objectives ([`uncertainty`]), a deterministic
//! synthetic scene benchmark ([`scenegen`]), training ([`trainer`]) and
//! evaluation ([`evaluator`]).

pub mod tensor;
pub mod geometry;
pub mod matching;
pub mod scenegen;
pub mod model;
pub mod uncertainty;
pub mod seeds;
pub mod trainer;
pub mod evaluator;
pub mod selfcheck;
