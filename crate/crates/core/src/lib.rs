pub mod audit;
pub mod confidence;
pub mod decision;
pub mod io;
pub mod model;
pub mod selective;
pub mod synth;
