pub mod cli;
pub mod collision;
pub mod cycles;
pub mod geometry;
pub mod quadrature;
pub mod rng;
pub mod semigroup;
pub mod trajectory;

pub type Vec3 = nalgebra::Vector3<f64>;
