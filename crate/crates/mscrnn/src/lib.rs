//! Training-and-inference toolkit for multi-scale cascaded recurrent
//! classifiers on radar I/Q time-series: an instance-level early-exit
//! clutter/source discriminator cascading into a window-level source-type
//! classifier, jointly trained, then compiled to a Q15 fixed-point
//! inference engine.

pub mod numerics;
pub mod fastgrnn;
pub mod format;
pub mod radar;
pub mod optim;
pub mod emi;
pub mod cost;
pub mod cascade;
pub mod quant;
pub mod baseline;
pub mod metrics;
