//! `corr3d` command-line front end. Reports go to stdout as JSON; failures
//! are a single JSON line on stderr with exit code 2 (bad input) or 3
//! (runtime failure).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::features::FeatureMap;
use crate::geometry::{feature_coordinate_maps, unproject_frame, Intrinsics, Pose};
use crate::losses::{
    align_loss, avg_pool_2d, corr_loss, default_hidden, read_mlp, AlignNorm, CorrWeights, MlpAlign,
};
use crate::metrics::{quartile_report, read_samples_csv, score_scene, scene_feature_maps, FeatureSource};
use crate::tensor_io::{load_scene, save_scene, write_tensor, Scene, WriteOptions};
use crate::trainer::{generate_synthetic_scene, run_training, SynthSpec, TrainConfig};
use crate::voxel::{
    build_voxel_grid, derive_seed, enumerate_negative_pairs, enumerate_positive_pairs,
    sample_negative_pairs, PairMode, PairSet, EXHAUSTIVE_NEGATIVE_LIMIT,
};

pub const THREADS_ENV: &str = "CORR3D_THREADS";

#[derive(Debug, Parser)]
#[command(name = "corr3d", version, about = "Multi-view correspondence scoring and feature supervision")]
struct Cli {
    /// Cap on worker threads (falls back to CORR3D_THREADS). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Pretty-print JSON output.
    #[arg(long, global = true)]
    pretty: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ModeArg {
    Exhaustive,
    Sampled,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PairKindArg {
    Pos,
    Neg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum LossArg {
    Corr,
    Align,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Student,
    Teacher,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum NormArg {
    Valid,
    All,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write per-frame world-coordinate maps ([R, C, 4] f64: xyz + validity).
    Unproject {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correspondence score of a scene.
    Score {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        voxel_size: Option<f64>,
        #[arg(long, value_enum, default_value = "exhaustive")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Pair cap per voxel in sampled mode.
        #[arg(long, default_value_t = 64)]
        budget: usize,
        #[arg(long, value_enum, default_value = "student")]
        features: SourceArg,
    },
    /// Dump a positive or negative pair set as CSV.
    Pairs {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        kind: PairKindArg,
        #[arg(long)]
        voxel_size: Option<f64>,
        #[arg(long, value_enum, default_value = "exhaustive")]
        mode: ModeArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Per-voxel cap for positives, partners per anchor for negatives.
        #[arg(long, default_value_t = 8)]
        budget: usize,
        /// Largest exhaustive negative set allowed.
        #[arg(long, default_value_t = EXHAUSTIVE_NEGATIVE_LIMIT)]
        limit: u64,
    },
    /// Evaluate a loss on a scene's student features.
    Loss {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, value_enum)]
        kind: LossArg,
        /// MLP meta JSON; a seeded random MLP is used when absent.
        #[arg(long)]
        mlp: Option<PathBuf>,
        #[arg(long)]
        voxel_size: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 8)]
        per_anchor: usize,
        #[arg(long, value_enum, default_value = "sampled")]
        neg_mode: ModeArg,
        #[arg(long, value_enum, default_value = "valid")]
        norm: NormArg,
        #[arg(long)]
        hidden: Option<usize>,
        /// Include per-feature gradients in the output.
        #[arg(long)]
        grads: bool,
    },
    /// Quartile analysis of `id,score,metric` rows.
    Quartiles {
        #[arg(long)]
        csv: PathBuf,
    },
    /// Generate a synthetic scene from a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the descent loop and write a training report.
    Train {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Optional step,loss,score CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct ErrorLine<'a> {
    error: String,
    kind: &'a str,
}

#[derive(Serialize)]
struct UnprojectSummary {
    scene_id: String,
    files: Vec<String>,
}

#[derive(Serialize)]
struct LossSummary {
    kind: &'static str,
    value: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    positive_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative_term: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    positive_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    negative_pairs: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    valid_cells: Option<usize>,
    grad_norm: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_param_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grad_features: Option<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
struct SynthSummary {
    manifest: String,
    frames: usize,
}

#[derive(Serialize)]
struct TrainSummary {
    scene_id: String,
    initial_score: f64,
    final_score: f64,
    report: String,
}

fn to_json<T: Serialize>(value: &T, pretty: bool) -> String {
    if pretty {
        serde_json::to_string_pretty(value).expect("serializable")
    } else {
        serde_json::to_string(value).expect("serializable")
    }
}

fn sq_norm(maps: &[FeatureMap]) -> f64 {
    maps.iter().flat_map(|m| m.data.iter()).map(|x| x * x).sum::<f64>()
}

fn pair_mode(mode: ModeArg, seed: u64, budget: usize) -> PairMode {
    match mode {
        ModeArg::Exhaustive => PairMode::Exhaustive,
        ModeArg::Sampled => PairMode::Sampled { seed, budget },
    }
}

fn resolve_voxel_size(scene: &Scene, flag: Option<f64>) -> Result<f64> {
    match flag {
        Some(v) if !(v > 0.0 && v.is_finite()) => {
            Err(Error::Config(format!("--voxel-size must be positive, got {v}")))
        }
        Some(v) => Ok(v),
        None => Ok(scene.voxel_size),
    }
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Schema(format!("{}: {e}", path.display())))
}

fn negatives_for(
    grid: &crate::voxel::VoxelGrid,
    mode: ModeArg,
    per_anchor: usize,
    seed: u64,
    limit: u64,
) -> Result<PairSet> {
    match mode {
        ModeArg::Exhaustive => enumerate_negative_pairs(grid, limit),
        ModeArg::Sampled => sample_negative_pairs(grid, per_anchor, seed),
    }
}

fn dispatch(cli: Cli) -> Result<Vec<u8>> {
    let pretty = cli.pretty;
    let out = match cli.command {
        Command::Unproject { scene, out } => {
            let scene = load_scene(&scene)?;
            fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let pooled = feature_coordinate_maps(&scene)?;
            let mut files = Vec::new();
            for (fr, cm_feat) in scene.frames.iter().zip(&pooled) {
                let k = Intrinsics::from_row_major(&fr.intrinsics);
                let t = Pose::from_row_major(&fr.extrinsics);
                let full = unproject_frame(&fr.depth, &k, &t)?;
                for (name, cm) in [
                    (format!("{}_coords.c3d", fr.id), &full),
                    (format!("{}_coords_feat.c3d", fr.id), cm_feat),
                ] {
                    write_tensor(&cm.to_tensor(), out.join(&name), WriteOptions::default())?;
                    files.push(name);
                }
            }
            to_json(&UnprojectSummary { scene_id: scene.id, files }, pretty)
        }
        Command::Score {
            scene,
            voxel_size,
            mode,
            seed,
            budget,
            features,
        } => {
            let scene = load_scene(&scene)?;
            let vs = resolve_voxel_size(&scene, voxel_size)?;
            let source = match features {
                SourceArg::Student => FeatureSource::Student,
                SourceArg::Teacher => FeatureSource::Teacher,
            };
            to_json(&score_scene(&scene, source, vs, pair_mode(mode, seed, budget))?, pretty)
        }
        Command::Pairs {
            scene,
            kind,
            voxel_size,
            mode,
            seed,
            budget,
            limit,
        } => {
            let scene = load_scene(&scene)?;
            let vs = resolve_voxel_size(&scene, voxel_size)?;
            let grid = build_voxel_grid(&feature_coordinate_maps(&scene)?, vs)?;
            let set = match kind {
                PairKindArg::Pos => enumerate_positive_pairs(&grid, pair_mode(mode, seed, budget)),
                PairKindArg::Neg => negatives_for(&grid, mode, budget, seed, limit)?,
            };
            let mut buf = Vec::new();
            set.write_csv(&mut buf)?;
            return Ok(buf);
        }
        Command::Loss {
            scene,
            kind,
            mlp,
            voxel_size,
            seed,
            per_anchor,
            neg_mode,
            norm,
            hidden,
            grads,
        } => {
            let scene = load_scene(&scene)?;
            let vs = resolve_voxel_size(&scene, voxel_size)?;
            let maps = feature_coordinate_maps(&scene)?;
            let student = scene_feature_maps(&scene, FeatureSource::Student)?;
            let summary = match kind {
                LossArg::Corr => {
                    let grid = build_voxel_grid(&maps, vs)?;
                    let pos = enumerate_positive_pairs(&grid, PairMode::Exhaustive);
                    let neg = match negatives_for(&grid, neg_mode, per_anchor, seed, EXHAUSTIVE_NEGATIVE_LIMIT) {
                        Ok(n) => Some(n),
                        Err(Error::NoNegatives) => None,
                        Err(e) => return Err(e),
                    };
                    let (r, parts) = corr_loss(&pos, neg.as_ref(), &student, CorrWeights::default(), true)?;
                    LossSummary {
                        kind: "corr",
                        value: r.value,
                        positive_term: Some(parts.positive),
                        negative_term: Some(parts.negative),
                        positive_pairs: Some(pos.len()),
                        negative_pairs: Some(neg.as_ref().map_or(0, PairSet::len)),
                        valid_cells: None,
                        grad_norm: sq_norm(&r.grad_features).sqrt(),
                        grad_param_norm: None,
                        grad_features: grads.then(|| r.grad_features.into_iter().map(|m| m.data).collect()),
                    }
                }
                LossArg::Align => {
                    let teacher = scene
                        .frames
                        .iter()
                        .zip(&student)
                        .map(|(fr, s)| {
                            let t = fr.teacher_features.as_ref().ok_or_else(|| {
                                Error::Config(format!("frame {} has no teacher features", fr.id))
                            })?;
                            avg_pool_2d(&FeatureMap::from_tensor(t)?, (s.rows, s.cols))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let m = match mlp {
                        Some(path) => read_mlp(path)?,
                        None => {
                            let d = student[0].dim;
                            let h = hidden.unwrap_or_else(|| default_hidden(d));
                            MlpAlign::random(d, h, teacher[0].dim, derive_seed(seed, &[0x4d4c50]))
                        }
                    };
                    let valid: Vec<Vec<bool>> = maps.iter().map(|m| m.valid.clone()).collect();
                    let norm = match norm {
                        NormArg::Valid => AlignNorm::ValidCells,
                        NormArg::All => AlignNorm::AllCells,
                    };
                    let r = align_loss(&student, &teacher, &m, &valid, norm, true)?;
                    let gp = r.grad_params.as_ref().expect("requested");
                    LossSummary {
                        kind: "align",
                        value: r.value,
                        positive_term: None,
                        negative_term: None,
                        positive_pairs: None,
                        negative_pairs: None,
                        valid_cells: Some(valid.iter().flatten().filter(|&&v| v).count()),
                        grad_norm: sq_norm(&r.grad_features).sqrt(),
                        grad_param_norm: Some(gp.to_flat().iter().map(|x| x * x).sum::<f64>().sqrt()),
                        grad_features: grads.then(|| r.grad_features.into_iter().map(|m| m.data).collect()),
                    }
                }
            };
            to_json(&summary, pretty)
        }
        Command::Quartiles { csv } => to_json(&quartile_report(&read_samples_csv(&csv)?)?, pretty),
        Command::Synth { spec, out } => {
            let spec: SynthSpec = read_json(&spec)?;
            let synth = generate_synthetic_scene(&spec)?;
            let manifest = save_scene(&synth.scene, &out)?;
            to_json(
                &SynthSummary {
                    manifest: manifest.display().to_string(),
                    frames: synth.scene.frames.len(),
                },
                pretty,
            )
        }
        Command::Train {
            scene,
            config,
            report,
            csv,
        } => {
            let cfg: TrainConfig = read_json(&config)?;
            let scene = load_scene(&scene)?;
            let r = run_training(&scene, &cfg)?;
            let mut text = to_json(&r, pretty);
            text.push('\n');
            write_file(&report, text.as_bytes())?;
            if let Some(csv) = csv {
                write_file(&csv, r.to_csv().as_bytes())?;
            }
            to_json(
                &TrainSummary {
                    scene_id: r.scene_id.clone(),
                    initial_score: r.initial_score,
                    final_score: r.final_score,
                    report: report.display().to_string(),
                },
                pretty,
            )
        }
    };
    Ok(format!("{out}\n").into_bytes())
}

fn report_error(stderr: &mut dyn Write, err: &Error) -> i32 {
    let line = ErrorLine {
        error: err.to_string(),
        kind: err.kind(),
    };
    let _ = writeln!(stderr, "{}", serde_json::to_string(&line).expect("serializable"));
    err.exit_code()
}

fn thread_count(flag: Option<usize>) -> Result<Option<usize>> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(s) => Some(
                s.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("{THREADS_ENV}={s} is not a thread count")))?,
            ),
            Err(_) => None,
        },
    };
    match n {
        Some(0) => Err(Error::Config("thread count must be at least 1".into())),
        n => Ok(n),
    }
}

/// Entry point shared by the binary and tests; `argv[0]` is the program name.
pub fn run_cli(argv: &[String], stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(stdout, "{text}");
                    0
                }
                _ => {
                    let _ = write!(stderr, "{text}");
                    2
                }
            };
        }
    };
    let threads = match thread_count(cli.threads) {
        Ok(t) => t,
        Err(e) => return report_error(stderr, &e),
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = match builder.build() {
        Ok(p) => p,
        Err(e) => return report_error(stderr, &Error::Config(e.to_string())),
    };
    match pool.install(|| dispatch(cli)) {
        Ok(bytes) => match stdout.write_all(&bytes).and_then(|_| stdout.flush()) {
            Ok(()) => 0,
            Err(e) => report_error(stderr, &Error::io("<stdout>", e)),
        },
        Err(e) => report_error(stderr, &e),
    }
}
