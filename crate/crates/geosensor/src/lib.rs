//! Does tweet activity around disease research co-locate with disease burden?
//!
//! This crate implements the full measurement pipeline: free-text tweet
//! locations are cleaned against a gazetteer whitelist, resolved to
//! coordinates offline (or through an optional cached external geocoder),
//! joined with region-level disease burden and publication counts, fed into
//! a Poisson regression of tweet counts on burden and papers, and finally
//! rendered as a burden choropleth with an overlay of inverse-paper-weighted
//! tweet dots.
//!
//! The stages are exposed as independent modules so they can be run and
//! tested in isolation; [`pipeline`] wires them together behind a config
//! file and is what the `geosensor` binary drives.
//!
//! Batch stages (location filtering, offline geocoding) run data-parallel
//! via rayon when the default `parallel` feature is enabled. Results are
//! merged in input order, so parallel and sequential runs are byte-identical;
//! build with `--no-default-features` for the purely sequential fallback.

pub mod burden;
pub mod filter;
pub mod gazetteer;
pub mod geocode;
pub mod glm;
pub mod linkage;
pub mod mapgen;
pub mod pipeline;
