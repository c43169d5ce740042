//! Controllable manga production.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`geometry`]: rectangle arithmetic, IoU matching and reading order.
//! - [`layout`]: page layouts, deterministic projection, layout agents,
//!   templates and layout extraction from page rasters.
//! - [`story`]: story plans and their structural enforcement.
//! - [`memory`]: per-section reference bundles and their cache.
//! - [`render`]: panel prompts, panel sizing and rendering backends.
//! - [`compose`]: page composition and comic archives.
//! - [`lettering`]: bubble placement and text rasterization.
//! - [`metabench`]: benchmark tasks and metrics.
//! - [`gateway`]: model access with record/replay cassettes.
//! - [`pipeline`]: the end-to-end pipeline over a project directory.

pub mod compose;
pub mod digest;
pub mod fsutil;
pub mod gateway;
pub mod geometry;
pub mod glyph;
pub mod layout;
pub mod lettering;
pub mod render;
pub mod reply;
pub mod memory;
pub mod metabench;
pub mod pipeline;
pub mod raster;
pub mod story;
