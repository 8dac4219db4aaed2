// `!(a > b)` is used on purpose so that NaN takes the error path.
#![allow(
    clippy::neg_cmp_op_on_partial_ord,
    clippy::large_enum_variant,
    clippy::needless_range_loop
)]

pub mod blocks;
pub mod cache;
pub mod calibrate;
pub mod cascade;
pub mod checkpoint;
pub mod config;
pub mod datapipe;
pub mod edt;
pub mod error;
pub mod gradcheck;
pub mod imageops;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod nn;
pub mod optim;
pub mod synth;
pub mod tensor;
pub mod trainer;
pub mod volume;
pub mod weightmap;

pub use error::{Error, Result};
pub use tensor::Tensor;
