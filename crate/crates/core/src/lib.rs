//! Finite element computation of harmonic maps into spheres and quadric
//! level-set manifolds.
//!
//! The crate solves the constrained variational problem
//!
//! ```text
//!   minimize  1/2 ∫ |∇u|²   subject to  g(u(x)) = 0,  u = u_D on ∂Ω,
//! ```
//!
//! with P1 elements on structured simplicial meshes of Ω = (-1/2,1/2)^d,
//! d ∈ {2,3}. The pointwise constraint is imposed at the mesh nodes through
//! a lumped (mass-lumping) inner product, which makes the constraint blocks
//! of the resulting KKT system node-local. Stationary pairs (u_h, λ_h) are
//! computed by a plain Newton iteration on the saddle-point optimality
//! system.
//!
//! Module map:
//! - [`mesh`]: structured triangulations, uniform and perturbed red refinement
//! - [`fem`]: P1 spaces, interpolation, lumped/consistent inner products,
//!   stiffness assembly, Clément quasi-interpolation, modified L² projection
//! - [`manifold`]: constraint functions g with gradient and Hessian
//! - [`solver`]: residual/Jacobian assembly, KKT solves, Newton iteration
//! - [`analysis`]: error norms (including the discrete H⁻¹ norm) and
//!   experimental convergence orders
//! - [`harness`]: benchmark problems, study orchestration, reports, VTU export

pub mod analysis;
pub mod fem;
pub mod harness;
pub mod manifold;
pub mod mesh;
pub mod solver;

pub use mesh::{PerturbSpec, SimplicialMesh};
