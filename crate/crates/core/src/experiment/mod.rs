//! Experiment configuration and the end-to-end pipelines behind each
//! command: corpus generation, training, translation, scoring, gap analysis
//! and the component ablation grid.

mod config;
mod pipeline;

pub use config::{
    config_defaults, config_keys, default_output_root, load_config, ExperimentConfig, PathsConfig, OUTPUT_ROOT_ENV,
};
pub use pipeline::{
    ablation_cell, default_checkpoint, echo_config, evaluate, gap_analysis, gen_data, length_edges,
    load_corpus, load_examples, load_model, manifest_path, mean_teacher_forced_gap,
    model_config_for, read_hypotheses, read_references, run_ablate, run_evaluate, run_gap_analyze,
    run_train, run_translate, synthesize_splits, train_model, translate, write_gap_analysis,
    write_hypotheses, AblationFlags, AblationRow, Corpus, EvalReport, GapAnalysis, GapSummary,
    Search, Source, ABLATION_GRID, AVERAGED_CHECKPOINT, CONFIG_ECHO, METRICS_FILE, SPLITS,
    VOCAB_FILE,
};
