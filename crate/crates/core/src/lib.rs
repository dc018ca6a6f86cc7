pub mod autodiff;
pub mod data;
pub mod error;
pub mod layers;
pub mod moments;
pub mod optim;
pub mod oracle;
pub mod seed;
pub mod tensor;
pub mod verify;
