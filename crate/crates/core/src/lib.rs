//! Synthetic vision-language navigation with test-time visual consistency.

pub mod numcore;
pub mod rng;
pub mod world;
pub mod augment;
pub mod agent;
pub mod objectives;
pub mod evalkit;
pub mod trainer;
