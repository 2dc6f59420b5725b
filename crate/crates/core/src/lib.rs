pub mod data;
pub mod evalstats;
pub mod experiment;
pub mod manifest;
pub mod models;
pub mod preprocess;
pub mod synth;
pub mod training;
pub mod volume;
