//! Grid-world simulator with egocentric images, synthetic binaural audio and
//! a breadth-first geodesic oracle.

mod audio;
mod env;
mod map;
mod oracle;
mod pose;
mod render;
mod suite;

pub use audio::{
    ild_gains, synth_audio, synth_from, AudioConfig, SoundTemplate, TemplateBank, TemplateSplit,
    AUDIO_CHANNELS,
};
pub use env::{
    EnvConfig, EpisodeRecord, EpisodeSpec, MapSpec, NavEnv, Observation, StepInfo, StepResult,
    STEP_PENALTY, SUCCESS_REWARD,
};
pub use map::{generate_map, geodesic_distance, Cell, DistanceField, GridMap, MAX_DENSITY};
pub use oracle::{oracle_action, oracle_first_actions, optimal_action_count, OraclePlan};
pub use pose::{Action, AgentPose, Heading, NULL_CLASS, NUM_ACTIONS, NUM_CLASSES};
pub use render::{render_visual, RenderConfig, IMAGE_CHANNELS};
pub use suite::{
    generate_suites, load_manifest, load_suite, read_json, write_json, Suite, SuiteParams,
    SuiteSet, TemplateManifest, MANIFEST_FILE, SUITE_FILES,
};

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("argument error: {0}")]
    Argument(String),
    #[error("generation error: {0}")]
    Generation(String),
    #[error("episode setup error: {0}")]
    Setup(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("io error: {0}")]
    Io(String),
    #[error("format error: {0}")]
    Format(String),
}
