//! Flow-free memory-attention segmentation of freespace in (infrared) video.
//!
//! The crate is organised bottom-up: [`numerics`] is a small reverse-mode tensor
//! engine, [`data`] produces and loads sequences, [`encoder`], [`temporal`] and
//! [`decoder`] make up the model, [`pipeline`] trains and streams it, and [`eval`]
//! scores predictions and runs ablations.

pub mod data;
pub mod decoder;
pub mod encoder;
pub mod eval;
mod layers;
pub mod temporal;
pub mod numerics;
pub mod pipeline;
