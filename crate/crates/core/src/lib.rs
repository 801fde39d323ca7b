pub mod datamodel;
pub mod domain;
pub mod inference;
pub mod io;
mod linalg;
pub mod preprocess;
pub mod process;
pub mod sim;
pub mod stats;
