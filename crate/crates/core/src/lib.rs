pub mod data;
pub mod decoding;
pub mod metrics;
pub mod network;
pub mod tensor;
pub mod toy;
pub mod training;
pub mod verify;
