// Negated float comparisons are used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod cascade;
pub mod corpus;
pub mod independence;
pub mod metrics;
pub mod model;
pub mod synthetic;
pub mod tokenizer;
pub mod training;
