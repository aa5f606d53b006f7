//! Reference solutions: the closed-form linear-quadratic equilibrium and a
//! finite-population dual-ascent solver that works for any convex cost.

mod lq;
mod nplayer;

pub use lq::{
    hj_residual, lq_coefficients, lq_density, lq_feedback, lq_optimal_batch, lq_price,
    GaussianPath, LqCoefficients, LqPrice, DEFAULT_REFINE,
};
pub use nplayer::{nplayer_solve, nplayer_solve_sampled, NPlayerOptions, NPlayerSolution};
