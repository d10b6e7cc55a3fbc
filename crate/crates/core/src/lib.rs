//! Multi-task CTC word recognition.
//!
//! A small convolutional-recurrent model reads a word image and emits two
//! CTC heads: one over characters and one over alphabet rows. The training
//! objective is the sum of both CTC losses; the row head can be switched off
//! to get the single-head baseline.

pub mod alphabet;
pub mod checkpoint;
pub mod cli;
pub mod ctc;
pub mod dataset;
pub mod glyphs;
pub mod metrics;
pub mod net;
pub mod train;
