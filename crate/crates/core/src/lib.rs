//! Entity disambiguation and linking with a fusion-in-decoder reader and a
//! bi-encoder retriever, built on a small reverse-mode autograd engine.

pub mod autograd;
pub mod cli;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod grammar;
pub mod kb;
pub mod linker;
pub mod nn;
pub mod retriever;
pub mod synthetic;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
