pub mod autodiff;
pub mod data;
pub mod error;
pub mod gaussian;
pub mod loss;
pub mod model;
pub mod nn;
pub mod optim;
pub mod params;
pub mod scalar;
pub mod stream;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

pub type TensorF32 = tensor::Tensor<f32>;
pub type TensorF64 = tensor::Tensor<f64>;
pub type TeacherF32 = model::TeacherModel<f32>;
pub type TeacherF64 = model::TeacherModel<f64>;
pub type StudentF32 = model::StudentModel<f32>;
pub type StudentF64 = model::StudentModel<f64>;
