#![allow(dead_code)]

use std::path::{Path, PathBuf};

use corr3d::tensor_io::{FrameRecord, Scene, Tensor};
use serde_json::Value;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn fixtures_dir() -> PathBuf {
    crate_dir().join("fixtures")
}

pub fn schemas_dir() -> PathBuf {
    crate_dir().join("schemas")
}

const IDENTITY_K: [f64; 9] = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
const IDENTITY_T: [f64; 16] = [
    1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
];

/// Two identical cameras looking at two points that fall in different
/// voxels. View 0 has features (1,0),(1,0); view 1 has (0,1),(1,0), so the
/// two positive pairs have similarities 0 and 1.
pub fn tiny_scene() -> Scene {
    let frame = |id: &str, feats: Vec<f32>| FrameRecord {
        id: id.to_string(),
        depth: Tensor::from_f32(vec![1, 2], vec![0.05, 0.57]).unwrap(),
        intrinsics: IDENTITY_K,
        extrinsics: IDENTITY_T,
        features: Tensor::from_f32(vec![1, 2, 2], feats).unwrap(),
        teacher_features: Some(Tensor::from_f32(vec![1, 2, 2], vec![1.0, 1.0, 0.0, 1.0]).unwrap()),
    };
    Scene {
        id: "tiny".into(),
        frames: vec![
            frame("f0", vec![1.0, 0.0, 1.0, 0.0]),
            frame("f1", vec![0.0, 1.0, 1.0, 0.0]),
        ],
        voxel_size: 0.1,
        frame_budget: 32,
    }
}

/// Eight samples whose metric rises with score; quartile metric means are
/// 15, 35, 55 and 75.
pub const Q8_CSV: &str = "id,score,metric\n\
s5,0.5,50\n\
s2,0.2,20\n\
s8,0.8,80\n\
s1,0.1,10\n\
s7,0.7,70\n\
s3,0.3,30\n\
s6,0.6,60\n\
s4,0.4,40\n";

/// Small synthetic spec and short training config used by CLI runs.
pub const SYNTH_SPEC_JSON: &str = r#"{
  "n_views": 3,
  "feat_rows": 8,
  "feat_cols": 8,
  "dim": 16,
  "teacher_dim": 8,
  "n_points": 60,
  "points_per_view": 40,
  "seed": 7
}
"#;

pub const TRAIN_CONFIG_JSON: &str = r#"{
  "loss": "both",
  "steps": 30,
  "eval_stride": 5,
  "seed": 3
}
"#;

struct SchemaDir(PathBuf);

impl jsonschema::Retrieve for SchemaDir {
    fn retrieve(
        &self,
        uri: &jsonschema::Uri<String>,
    ) -> Result<Value, Box<dyn std::error::Error + Send + Sync>> {
        let path = uri.path().as_str();
        let name = path.rsplit('/').next().unwrap_or(path);
        let text = std::fs::read_to_string(self.0.join(name))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Validates `value` against a schema shipped in `schemas/`.
pub fn check_schema(schema_file: &str, value: &Value) -> Result<(), String> {
    let dir = schemas_dir();
    let text = std::fs::read_to_string(dir.join(schema_file)).map_err(|e| e.to_string())?;
    let schema: Value = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    let validator = jsonschema::options()
        .with_retriever(SchemaDir(dir))
        .build(&schema)
        .map_err(|e| format!("{schema_file}: {e}"))?;
    let errors: Vec<String> = validator.iter_errors(value).map(|e| format!("{} at {}", e, e.instance_path())).collect();
    if errors.is_empty() {
        Ok(())
    } else {
        Err(format!("{schema_file}: {}", errors.join("; ")))
    }
}

pub struct CliRun {
    pub code: i32,
    pub stdout: Vec<u8>,
    pub stderr: Vec<u8>,
}

impl CliRun {
    pub fn stdout_json(&self) -> Value {
        serde_json::from_slice(&self.stdout).expect("stdout is JSON")
    }

    pub fn stderr_text(&self) -> String {
        String::from_utf8_lossy(&self.stderr).into_owned()
    }
}

pub fn run(args: &[&str]) -> CliRun {
    let mut argv = vec!["corr3d".to_string()];
    argv.extend(args.iter().map(|s| s.to_string()));
    let mut stdout = Vec::new();
    let mut stderr = Vec::new();
    let code = corr3d::cli::run_cli(&argv, &mut stdout, &mut stderr);
    CliRun { code, stdout, stderr }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Every file under `dir`, sorted by relative path, with its bytes.
pub fn dir_contents(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    out.sort();
    out
}
