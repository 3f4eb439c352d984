pub mod catalog;
pub mod classifier;
pub mod descriptor;
pub mod embedding;
pub mod eval;
pub mod filter;
pub mod fixture;
pub mod store;
pub mod util;
pub mod vector;
