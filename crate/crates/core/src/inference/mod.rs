//! Latency anatomy, cache strategies and the rollout harness.

pub mod cache;
pub mod env;
pub mod latency;
pub mod rollout;

pub use cache::{chunk_cache_step, cosine_sim, prefix_cache_step, signature, CacheState, CacheStats};
pub use env::{expert_demos, ReachConfig, ReachEnv, StepOutcome};
pub use latency::{profile_sample_actions, speedup_ceiling, LatencyProfile, StageCostModel};
pub use rollout::{cache_benchmark, rollout_suite, BenchConfig, BenchReport, CacheMode, SuiteResult};
