pub mod numerics;
pub mod paillier;
pub mod socialgraph;
pub mod privacy;
pub mod sandwich;
pub mod dataio;
pub mod model;
pub mod runner;
