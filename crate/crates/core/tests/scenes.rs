use std::fs;
use std::path::Path;

use quantsim::sims::{run, RunOptions, Scene, SceneConfig, Simulator};

#[test]
fn shipped_scenes_build_and_run() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenes");
    let mut seen = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().and_then(|e| e.to_str()) != Some("toml") {
            continue;
        }
        let config = SceneConfig::from_toml(&fs::read_to_string(&path).unwrap()).unwrap();
        let scene = Scene::build(&config).unwrap();
        let names = Scene::quantized_names(&scene, &config);
        assert!(!names.is_empty(), "{}", path.display());
        let report = run(&scene, config.steps.min(16), config.evaluation, &RunOptions::default()).unwrap();
        assert!(report.z.is_finite());
        assert_eq!(report.final_state.len(), scene.state_len());
        let again = SceneConfig::from_toml(&config.to_toml()).unwrap();
        assert_eq!(again.steps, config.steps);
        seen += 1;
    }
    assert!(seen >= 3);
}
