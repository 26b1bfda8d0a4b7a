//! Open-vocabulary activity recognition: a sensor regressor maps windows of
//! motion data into a sentence-embedding space, and activities are decoded
//! by nearest description.

pub mod clients;
pub mod contrast;
pub mod data;
pub mod decode;
pub mod eval;
pub mod lexicon;
pub mod nn;
pub mod par;
pub mod synth;
pub mod table;
pub mod tensor;
pub mod trainer;
pub mod windowing;

pub use tensor::Tensor;
