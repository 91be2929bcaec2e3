//! Minimal reverse-mode automatic differentiation over dense tensors.

mod attention;
mod gradcheck;
mod graph;

pub use gradcheck::{finite_diff_check, EntryError, GradCheckReport, GRAD_FLOOR};
#[cfg(test)]
pub(crate) use graph::activation_value;
pub use graph::{Activation, Fault, Graph, Var};

#[cfg(test)]
mod tests;
