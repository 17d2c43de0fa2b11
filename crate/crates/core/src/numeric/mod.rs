//! Numerical kernels shared by the estimation stages.

pub mod bspline;
pub mod lsq;
pub mod normal;
pub mod quadrature;

pub use bspline::{bspline_basis, bspline_deriv, BasisSpec};
pub use lsq::{solve_penalized_lsq, PenalizedLsq, RidgePenalty, SolverConfig};
pub use normal::{normal_cdf, normal_pdf, normal_quantile};
pub use quadrature::{gauss_legendre_integrate, GaussLegendre};
