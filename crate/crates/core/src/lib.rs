pub mod data;
pub mod eval;
pub mod algorithms;
pub mod cli;
pub mod federation;
pub mod lora;
pub mod model;
pub mod seed;
pub mod tensor;
pub mod weighting;
