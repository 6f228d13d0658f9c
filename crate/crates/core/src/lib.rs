//! Controlled sweeping processes over moving polyhedra.

// `!(r <= tol)` is used on purpose so that NaN residuals fail checks.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod certificates;
pub mod commands;
pub mod example;
pub mod geometry;
pub mod linalg;
pub mod optimizer;
pub mod problem;
pub mod qp;
pub mod report;
pub mod specfile;
pub mod sweeping;
