pub mod nn;
pub mod tensor;
pub mod dataset;
pub mod checkpoint;
pub mod nets;
pub mod losses;
pub mod objective;
pub mod trainer;
pub mod eval;
pub mod experiment;
