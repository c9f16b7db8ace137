pub mod data;
pub mod experiment;
pub mod metrics;
pub mod nested;
pub mod nn;
pub mod tensor;
pub mod vae;
