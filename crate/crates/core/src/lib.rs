pub mod data;
pub mod encoder;
pub mod eval;
pub mod gbdt;
pub mod numerics;
pub mod pipeline;
pub mod training;
pub mod wavelet;
