//! The chapters of the guide in `book/src`, one module each, so that
//! `cargo test` runs every example in the book.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/geometry.md")]
pub mod geometry {}

#[doc = include_str!("../../../book/src/layouts.md")]
pub mod layouts {}

#[doc = include_str!("../../../book/src/gateway.md")]
pub mod gateway {}

#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}

#[doc = include_str!("../../../book/src/lettering.md")]
pub mod lettering {}

#[doc = include_str!("../../../book/src/metrics.md")]
pub mod metrics {}

#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}

#[doc = include_str!("../../../book/src/http-api.md")]
pub mod http_api {}
