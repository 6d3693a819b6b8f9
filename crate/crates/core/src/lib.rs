//! Rule-aligned diagnostic dialogue synthesis, preference-pair forging and
//! preference alignment of a small decoder-only policy.

pub mod align;
pub mod corpus;
pub mod genpipeline;
pub mod io;
pub mod pairforge;
pub mod pipeline;
pub mod rulemodel;
pub mod scalar;
pub mod spsim;
pub mod template;
pub mod text;
pub mod policy;
pub mod textmetrics;

/// Policy in double precision.
pub type Policy = policy::PolicyModel<f64>;
pub type PolicyF32 = policy::PolicyModel<f32>;
pub type Reference = policy::ReferencePolicy<f64>;
pub type ReferenceF32 = policy::ReferencePolicy<f32>;
pub type Grads = policy::Grads<f64>;
pub type TokenBatch = policy::TokenBatch<f64>;
