//! Shared fixtures for the integration and acceptance targets.
#![allow(dead_code, unused_imports)]

pub mod oracles;

pub use stcflow::selftest::{
    fresh_block_deviation, gc_block, gradient_suite, grad_correlate, grad_global_context, grad_multiscale_loss,
    grad_non_local, grad_pixel_shuffle, grad_psc, grad_rrcu, grad_tcc, grad_warp, nl_block, normalization_sweep,
    psc_block, random_store, tcc_block, uniform, NormReport,
};
