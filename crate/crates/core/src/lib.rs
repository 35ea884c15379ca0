pub mod autodiff;
pub mod data;
pub mod montecarlo;
pub mod network;
pub mod nonsmooth;
pub mod precision;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod variation;
pub mod zero;
