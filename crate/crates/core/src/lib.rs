pub mod data;
pub mod energy;
pub mod error;
pub mod fusion;
pub mod grad;
pub mod lif;
pub mod net;
pub mod tensor;
pub mod train;
pub mod window;
