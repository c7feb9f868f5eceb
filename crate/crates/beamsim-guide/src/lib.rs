//! Doc-tested chapters of the beamsim guide.
//!
//! mdbook renders `book/` for reading; this crate includes the same markdown
//! files as rustdoc so `cargo test --doc -p beamsim-guide` compiles and runs
//! every code block in the book, keeping the guide in sync with the library.

#[doc = include_str!("../../../book/src/intro.md")]
pub mod intro {}

#[doc = include_str!("../../../book/src/channel-model.md")]
pub mod channel_model {}

#[doc = include_str!("../../../book/src/rates-and-gradients.md")]
pub mod rates_and_gradients {}

#[doc = include_str!("../../../book/src/refinement.md")]
pub mod refinement {}

#[doc = include_str!("../../../book/src/networks.md")]
pub mod networks {}

#[doc = include_str!("../../../book/src/feedback.md")]
pub mod feedback {}

#[doc = include_str!("../../../book/src/hybrid.md")]
pub mod hybrid {}

#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
