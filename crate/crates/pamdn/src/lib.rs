//! Host-side companion to `pamdn-core`: file formats (16-bit PGM, .tns
//! containers, JSON manifests), dataset synthesis, checkpointed training
//! runs, tiled wide-field inference, and the evaluation reports. The
//! `pamdn` binary wires these into subcommands.

pub mod checkpoint;
pub mod manifest;
pub mod par;
pub mod pgm;
pub mod report;
pub mod selfcheck;
pub mod synth;
pub mod tile;
pub mod tns;
pub mod trainer;
