//! RSSI fingerprint indoor localization with a vision transformer.
//!
//! The pipeline turns per-access-point RSSI scans into three-channel images,
//! augments them, and classifies them into reference points with a small
//! vision transformer trained from scratch on a built-in autodiff engine.

pub mod dam;
pub mod fingerprint;
pub mod io;
pub mod numerics;
pub mod seed;
pub mod synthgen;
pub mod train_eval;
pub mod vit;
