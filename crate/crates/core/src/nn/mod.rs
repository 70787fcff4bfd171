pub mod backbone;
pub mod checkpoint;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;
