//! Segmentation-based scene text detection with region multiple-information
//! perception: label generation, a small reverse-mode autodiff engine, the
//! network and its multi-task loss, training, post-processing and evaluation.

pub mod autodiff;
pub mod dataio;
pub mod evalkit;
pub mod geometry;
pub mod labelgen;
pub mod model;
pub mod pipeline;
pub mod postprocess;
