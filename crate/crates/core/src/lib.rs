//! Proprioception-aware visual token selection with a flow-matching action
//! head, built on a small reverse-mode autodiff engine.

pub mod ablate;
pub mod autodiff;
pub mod backbone;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod gradcheck;
pub mod head;
pub mod heatmap;
pub mod io;
pub mod layers;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod selector;
pub mod sequence;
pub mod task;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    struct Introduction;
    #[doc = include_str!("../../../book/src/autodiff.md")]
    struct Autodiff;
    #[doc = include_str!("../../../book/src/tokenizer.md")]
    struct Tokenizer;
    #[doc = include_str!("../../../book/src/selection.md")]
    struct Selection;
    #[doc = include_str!("../../../book/src/encoder.md")]
    struct Encoder;
    #[doc = include_str!("../../../book/src/flow_head.md")]
    struct FlowHead;
    #[doc = include_str!("../../../book/src/task.md")]
    struct Task;
    #[doc = include_str!("../../../book/src/harness.md")]
    struct Harness;
    #[doc = include_str!("../../../book/src/formats.md")]
    struct Formats;
}
