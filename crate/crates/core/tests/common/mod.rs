//! Scene fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use stall_sentinel::config::PipelineConfig;
use stall_sentinel::synth::{generate, parse_scene_spec, SceneSpec};

pub const SMALL_SCENE: &str = include_str!("../../../../samples/small.scene");
pub const SMALL_CONFIG: &str = include_str!("../../../../samples/small.conf");

pub fn small_spec() -> SceneSpec {
    parse_scene_spec(SMALL_SCENE, Path::new("small.scene")).unwrap()
}

pub fn small_config() -> PipelineConfig {
    PipelineConfig::parse(SMALL_CONFIG, Path::new("small.conf")).unwrap()
}

/// Renders `spec` into `<root>/<video_id>` so the directory name matches
/// the ground truth.
pub fn render(spec: &SceneSpec, root: &Path) -> PathBuf {
    let dir = root.join(&spec.video_id);
    generate(spec, &dir).unwrap();
    dir
}
