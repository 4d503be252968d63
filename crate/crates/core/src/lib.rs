//! Weak-form regularised variational inference for elliptic PDE inverse problems.

pub mod linalg;
pub mod autodiff;
pub mod fem;
pub mod mesh;
pub mod relax;
pub mod surrogate;
pub mod vi;
pub mod hmc;
