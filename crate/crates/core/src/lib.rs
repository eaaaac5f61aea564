//! Homonym-aware entity linking against name-based knowledge bases.

pub mod corpus;
pub mod disambiguation;
pub mod encoder;
pub mod evaluation;
pub mod homonyms;
pub mod kb;
pub mod pipeline;
pub mod retrieval;
pub mod sentences;
pub mod string_match;
pub mod synthetic;
pub mod training;
