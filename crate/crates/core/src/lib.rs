//! Region proposals from dilated-convolution anchor augmentation.
//!
//! One set of head parameters is used twice. As a dilated convolution over a
//! feature pyramid it scores and regresses the hand-designed anchor grid,
//! producing augmented anchors without any gradient. As a fully-connected map
//! over RoI-aligned patches it refines those anchors into proposals, and only
//! this second use is trained.

pub mod coco;
pub mod commands;
pub mod config;
pub mod geometry;
pub mod head;
pub mod metrics;
pub mod pipeline;
pub mod render;
pub mod report;
pub mod synth;
pub mod tensor;
pub mod verify;
