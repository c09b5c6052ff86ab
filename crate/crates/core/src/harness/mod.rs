//! Experiment orchestration: configuration, two-stage training, checkpoints,
//! evaluation campaigns and confidence/flip-rate analyses.

mod analysis;
mod checkpoint;
mod config;
mod eval;
mod pipeline;

pub use analysis::{
    confidence_analysis, flip_rate_csv, flip_rate_experiment, pending_confidence_split, ConfidenceMatrices,
    ConfidenceSummary, FlipRateResult,
};
pub use checkpoint::Checkpoint;
pub use config::{apply_override, CorpusConfig, EvalConfig, ExperimentConfig};
pub use eval::{
    ablate, evaluate, policy_for, run_episode, run_episodes, sweep_configs, EpisodePlan, EpisodeResult, EvalReport,
    EvalRow, TimingRow,
};
pub use pipeline::{
    collect, demonstrations, load_model, run_stage1, run_stage2, train_stage1, train_stage2, write_manifest, Manifest,
    ManifestEntry, PeriodicEval, RunPaths, Stage1Report, Stage2Report,
};
