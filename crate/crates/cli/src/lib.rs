//! Command-line tool and local HTTP service for the yolic pipeline.
//!
//! A workspace directory holds `configs/`, `images/` (PPM), `masks/` (PGM),
//! `annotations/`, `weights/`, `reports/` and a `manifest.json` mapping image
//! ids to configurations.

pub mod commands;
pub mod diag;
pub mod service;
pub mod workspace;
