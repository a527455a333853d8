//! Captioning-pretrained radiograph encoders at desk scale.
//!
//! A convolutional visual backbone is trained jointly with a pair of
//! transformer decoders that caption the image left-to-right and
//! right-to-left. The backbone is then transferred to classification with a
//! linear decision head, either frozen (linear probe) or fine-tuned.
//!
//! The crate is `no_std` (with `alloc`). Everything here is pure computation
//! over in-memory data; file formats, the CLI and the experiment harness live
//! in the `radtex` companion crate.
//!
//! Modules:
//!
//! - [`tensor`]: dense tensors and a reverse-mode autodiff tape.
//! - [`textpipe`]: report normalization, section extraction, wordpiece
//!   vocabulary training and tokenization, severity labeling.
//! - [`synthdata`]: deterministic synthetic radiograph/report pairs and
//!   affine augmentation.
//! - [`model`]: visual backbone, textual head, classifier and checkpoints.
//! - [`train`]: schedule, SGD/LookAhead, pretraining and transfer loops.
//! - [`decode`]: greedy and beam-search caption generation.
//! - [`metrics`]: AUC, average precision, macro-F1.
//! - [`gradcheck`]: central finite-difference checks for every tensor op.
#![no_std]

extern crate alloc;
#[cfg(feature = "std")]
extern crate std;

pub mod decode;
mod error;
mod prelude;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod synthdata;
pub mod tensor;
pub mod textpipe;
pub mod train;

pub use error::{Error, Result};
