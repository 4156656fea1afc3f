//! Library for predicting per-word scalar signals (six ERP components plus
//! five behavioral measures) from a recurrent sequence encoder, with
//! multitask loss sweeps and paired statistical comparison of the results.

pub mod checkpoint;
pub mod data;
pub mod decoder;
pub mod encoder;
pub mod report;
pub mod signals;
pub mod stats;
pub mod tape;
pub mod tensor;
pub mod train;
