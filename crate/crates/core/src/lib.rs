pub mod analog;
pub mod autodiff;
pub mod cli;
pub mod data;
pub mod error;
pub mod nn;
pub mod optim;
pub mod pseudo_param;
pub mod rng;
pub mod special;
pub mod sweep;
pub mod tensor;
