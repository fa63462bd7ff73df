//! Open-world compositional zero-shot learning with attention-coupled
//! primitive classifiers.
//!
//! Attributes and objects are classified independently in two cosine
//! embedding spaces; their word-embedding tokens interact through one
//! multi-head self-attention block before projection. Composition scores are
//! the product of the two marginals, optionally restricted to compositions a
//! knowledge graph deems feasible, and evaluated with a seen/unseen bias
//! sweep.

pub mod data;
pub mod evaluator;
pub mod feasibility;
pub mod model;
pub mod tensor;
pub mod trainer;

pub use tensor::{Tensor, TensorError};
