pub mod eval;
pub mod hmc;
pub mod ilr;
pub mod model;
pub mod pipeline;
pub mod sim;
pub mod simplex;
pub mod smooth;
pub mod stats;
pub mod usda;
