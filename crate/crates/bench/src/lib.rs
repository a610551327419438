//! Synthetic ground truths, simulated annotators and the strategy benchmark.

pub mod annotator;
pub mod benchmark;
pub mod synth;

pub use annotator::{simulate_annotator, simulate_annotator_seeded, AnnotatorProfile};
pub use benchmark::{run_benchmark, BenchmarkConfig, BenchmarkResult, RankingConfig, RankingDomain, TargetMode};
pub use synth::{exp_velocity, sample_deformation, sample_velocity, scaling_and_squaring, DeformationParams};
