//! The sample files under `samples/` stay loadable and in sync.

use std::path::Path;

use stall_sentinel::config::PipelineConfig;
use stall_sentinel::synth::{load_scene_spec, SceneSpec};

fn sample(name: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../samples").join(name)
}

#[test]
fn defaults_file_lists_the_default_config() {
    let text = std::fs::read_to_string(sample("defaults.conf")).unwrap();
    let body: String = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| format!("{l}\n"))
        .collect();
    assert_eq!(
        body,
        PipelineConfig::default().to_text(),
        "regenerate samples/defaults.conf"
    );
    assert_eq!(
        PipelineConfig::load(sample("defaults.conf")).unwrap(),
        PipelineConfig::default()
    );
}

#[test]
fn highway_sample_is_the_preset() {
    assert_eq!(load_scene_spec(sample("highway.scene")).unwrap(), SceneSpec::highway(1));
}

#[test]
fn small_sample_loads() {
    let spec = load_scene_spec(sample("small.scene")).unwrap();
    assert_eq!(
        (spec.width, spec.height, spec.stalls.len(), spec.parked.len()),
        (200, 120, 1, 1)
    );
    PipelineConfig::load(sample("small.conf")).unwrap();
}
