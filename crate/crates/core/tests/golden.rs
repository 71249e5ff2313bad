//! Checked-in fixtures must match what the builders in `common` produce.
//! Run with `CORR3D_BLESS=1` to rewrite them.

mod common;

use std::fs;
use std::path::Path;

use common::*;
use corr3d::tensor_io::{load_scene, save_scene, validate_scene};

fn blessing() -> bool {
    std::env::var_os("CORR3D_BLESS").is_some()
}

fn check_file(path: &Path, expected: &[u8]) {
    if blessing() {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        fs::write(path, expected).unwrap();
    }
    let found = fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert!(found == expected, "{} differs from its generator", path.display());
}

#[test]
fn tiny_scene_fixture_is_current() {
    let tmp = tempfile::tempdir().unwrap();
    save_scene(&tiny_scene(), tmp.path()).unwrap();
    let dest = fixtures_dir().join("tiny");
    let generated = dir_contents(tmp.path());
    for (name, bytes) in &generated {
        check_file(&dest.join(name), bytes);
    }
    let names: Vec<_> = dir_contents(&dest).into_iter().map(|(n, _)| n).collect();
    let expected: Vec<_> = generated.into_iter().map(|(n, _)| n).collect();
    assert_eq!(names, expected);
}

#[test]
fn text_fixtures_are_current() {
    let dir = fixtures_dir();
    check_file(&dir.join("q8.csv"), Q8_CSV.as_bytes());
    check_file(&dir.join("synth_spec.json"), SYNTH_SPEC_JSON.as_bytes());
    check_file(&dir.join("train_config.json"), TRAIN_CONFIG_JSON.as_bytes());
}

#[test]
fn tiny_fixture_loads_cleanly() {
    let scene = load_scene(fixtures_dir().join("tiny/scene.json")).unwrap();
    assert_eq!(scene.id, "tiny");
    assert!(validate_scene(&scene).is_empty());
    assert_eq!(scene, tiny_scene());
}
