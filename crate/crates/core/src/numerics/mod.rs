//! Dense tensors, reverse-mode differentiation and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheck};
pub use graph::{Graph, Var};
pub use tensor::{argmax, log_softmax, sigmoid, softmax, Tensor};

/// Storage precision for trained parameters.
///
/// Arithmetic always runs in `f64`. With [`Precision::F32`] parameters are
/// rounded to the nearest `f32` after every update and written as 32-bit
/// blobs in checkpoints.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub fn round(self, t: &mut Tensor) {
        if self == Precision::F32 {
            for x in t.data_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    pub fn bits(self) -> u8 {
        match self {
            Precision::F64 => 64,
            Precision::F32 => 32,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = crate::Error;

    fn from_str(s: &str) -> crate::Result<Self> {
        match s {
            "f64" | "64" => Ok(Precision::F64),
            "f32" | "32" => Ok(Precision::F32),
            other => Err(crate::Error::Config(format!(
                "precision must be f32 or f64, got {other:?}"
            ))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F64 => "f64",
            Precision::F32 => "f32",
        })
    }
}
