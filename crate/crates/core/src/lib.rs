//! Budgeted local surrogate explanations for long documents.
//!
//! The pipeline scouts a long document with a cheap proxy model to find the
//! few paragraphs and sentences that matter, then spends the expensive target
//! model's sample budget only inside that region. See [`focus::Explainer`].

pub mod eval;
pub mod focus;
pub mod models;
pub mod perturb;
pub mod rng;
pub mod segment;
pub mod surrogate;
