//! Scream detection and valence classification on edge devices: audio
//! front-end, models, distillation training, data preparation, evaluation and
//! the streaming runtime.

pub mod audio;
pub mod data;
pub mod dsp;
pub mod eval;
pub mod model;
pub mod runtime;
pub mod seed;
pub mod train;
