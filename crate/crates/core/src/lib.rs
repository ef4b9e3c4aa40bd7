//! Numerical laboratory for derived-from-Anosov diffeomorphisms of the
//! three-torus: linear models, conservative perturbations, cone
//! certification, Lyapunov exponents and center-foliation geometry.

pub mod linear_anosov;
pub mod experiments;
pub mod foliation;
pub mod lyapunov;
pub mod perturbation;
pub mod sampling;
pub mod splitting;
pub mod torus;
