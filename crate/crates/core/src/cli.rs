//! Batch commands behind the `confpose` binary. Each command takes a
//! validated [`RunConfig`], writes its artifacts plus a `manifest.json` into
//! the output directory and returns a summary for printing.
//!
//! Artifacts depend only on the config (output directory excluded) and the
//! seed, so two runs produce byte-identical files.

use crate::config::{sha256_hex, RunConfig};
use crate::error::{Error, Result};
use crate::eval::{
    confidence_bins, evaluate, restrict_to, robustness_score, win_rate, Component,
    ConfidenceBinSummary, RobustnessReport, Trajectory, TrajectoryReport,
};
use crate::oracle::{derive_seed, generate_scene, make_distractor_stream, OracleConfig, PlannedStream};
use crate::pipeline::{aggregate_causal, all_pair_edges, run_stream, StreamOptions, StreamStats};
use crate::posegraph::{write_edges, FrameId, FusionConfig, PoseEdge, TopK};
use crate::refine::{refine, RefinementProblem};
use crate::stream::write_event_log;
use crate::tum::{read_tum, write_tum};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

const ROBUST_TAG: u64 = 0x726f_6275;
const DIAG_TAG: u64 = 0x6469_6167;

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub k: Option<TopK>,
    pub refine: bool,
    pub bins: Option<usize>,
}

impl Overrides {
    /// Applies the overrides and re-validates. `--k` sets the stream fusion
    /// size and narrows the offline sweep to that single value.
    pub fn apply(&self, config: &mut RunConfig) -> Result<()> {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        if let Some(k) = self.k {
            config.stream.fusion.k = k;
            config.offline.ks = vec![k];
        }
        if self.refine {
            config.offline.refine = true;
        }
        if let Some(bins) = self.bins {
            config.diag.bins = bins;
        }
        config.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub version: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input files by the name given on the command line.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every artifact, keyed by path relative to the run directory.
    pub artifacts: BTreeMap<String, String>,
}

/// Output directory that records a hash of everything written to it.
struct RunDir {
    root: PathBuf,
    artifacts: BTreeMap<String, String>,
}

impl RunDir {
    fn create(root: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&root)?;
        Ok(Self {
            root,
            artifacts: BTreeMap::new(),
        })
    }

    fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.root.join(name);
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(&path, bytes)?;
        self.artifacts.insert(name.to_string(), sha256_hex(bytes));
        Ok(())
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut bytes = serde_json::to_vec_pretty(value).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        self.write(name, &bytes)
    }

    fn write_csv<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in rows {
            w.serialize(r).map_err(std::io::Error::other)?;
        }
        let bytes = w.into_inner().map_err(|e| std::io::Error::other(e.to_string()))?;
        self.write(name, &bytes)
    }

    fn write_tum(&mut self, name: &str, t: &Trajectory) -> Result<()> {
        let mut buf = Vec::new();
        write_tum(&mut buf, t)?;
        self.write(name, &buf)
    }

    fn finish(
        self,
        command: &str,
        config: &RunConfig,
        inputs: BTreeMap<String, String>,
    ) -> Result<PathBuf> {
        let mut dir = self;
        dir.write("config.toml", config.portable().to_toml()?.as_bytes())?;
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            config_sha256: config.digest(),
            inputs,
            artifacts: dir.artifacts.clone(),
        };
        let mut bytes = serde_json::to_vec_pretty(&manifest).map_err(std::io::Error::other)?;
        bytes.push(b'\n');
        std::fs::write(dir.root.join("manifest.json"), bytes)?;
        Ok(dir.root)
    }
}

/// One CSV row: a method's metrics on one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub scene: String,
    pub method: String,
    pub ate_rmse: f64,
    pub ate_norm: f64,
    pub rpe_t: f64,
    pub rpe_r: f64,
    pub rot_rmse: f64,
    pub frames: usize,
}

impl MethodRow {
    fn new(scene: &str, method: &str, r: &TrajectoryReport) -> Self {
        Self {
            scene: scene.to_string(),
            method: method.to_string(),
            ate_rmse: r.ate_rmse,
            ate_norm: r.ate_norm,
            rpe_t: r.rpe_t,
            rpe_r: r.rpe_r,
            rot_rmse: r.rot_rmse,
            frames: r.frames,
        }
    }
}

/// Scores an estimate against ground truth over the frames it contains.
fn score(estimate: &Trajectory, truth: &Trajectory, config: &RunConfig) -> Result<TrajectoryReport> {
    let reference = restrict_to(truth, estimate)?;
    evaluate(estimate, &reference, config.eval.alignment, config.eval.rpe_delta)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamSummary {
    pub dir: PathBuf,
    pub report: TrajectoryReport,
    pub stats: StreamStats,
}

/// Streams one oracle scene through the causal engine.
///
/// Writes `trajectory.tum`, `reference.tum`, `events.ndjson`, `report.json`
/// and `report.csv`.
pub fn cmd_stream(config: &RunConfig) -> Result<StreamSummary> {
    let scene = generate_scene(&config.scene, config.seed)?;
    let truth = scene.trajectory();
    let run = run_stream(
        &scene,
        scene.frame_ids(),
        &config.stream,
        StreamOptions::default(),
        &mut Vec::new(),
    )?;
    let report = score(&run.trajectory, &truth, config)?;

    let mut dir = RunDir::create(config.output_dir("stream"))?;
    dir.write_tum("trajectory.tum", &run.trajectory)?;
    dir.write_tum("reference.tum", &truth)?;
    let mut log = Vec::new();
    write_event_log(&mut log, &run.events)?;
    dir.write("events.ndjson", &log)?;
    dir.write_json(
        "report.json",
        &serde_json::json!({ "report": report, "stats": run.stats }),
    )?;
    dir.write_csv(
        "report.csv",
        &[MethodRow::new(&format!("seed-{}", config.seed), "stream", &report)],
    )?;
    Ok(StreamSummary {
        dir: dir.finish("stream", config, BTreeMap::new())?,
        report,
        stats: run.stats,
    })
}

/// Refinement objectives of one offline scene.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementRecord {
    pub initial_objective: f64,
    pub final_objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineScene {
    pub seed: u64,
    pub rows: Vec<MethodRow>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub refinement: Option<RefinementRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub mean_ate: f64,
    pub win_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OfflineSummary {
    pub dir: PathBuf,
    pub scenes: Vec<OfflineScene>,
    pub methods: Vec<MethodSummary>,
}

fn method_name(k: TopK) -> String {
    match k {
        TopK::All => "all".to_string(),
        TopK::K(k) => format!("top{k}"),
    }
}

struct OfflineOutput {
    scene: OfflineScene,
    trajectories: Vec<(String, Trajectory)>,
    truth: Trajectory,
}

fn offline_scene(config: &RunConfig, seed: u64, ks: &[TopK]) -> Result<OfflineOutput> {
    let scene = generate_scene(&config.scene, seed)?;
    let truth = scene.trajectory();
    let frames: Vec<FrameId> = scene.frame_ids().collect();
    let label = format!("seed-{seed}");
    let mut rows = Vec::new();
    let mut trajectories = Vec::new();

    let streamed = run_stream(
        &scene,
        frames.iter().copied(),
        &config.stream,
        StreamOptions::default(),
        &mut Vec::new(),
    )?;
    rows.push(MethodRow::new(&label, "stream", &score(&streamed.trajectory, &truth, config)?));
    trajectories.push(("stream".to_string(), streamed.trajectory));

    let mut last_init = None;
    for &k in ks {
        let fusion = FusionConfig {
            k,
            ..config.stream.fusion
        };
        let init = aggregate_causal(&scene, &frames, &fusion)?;
        let name = method_name(k);
        rows.push(MethodRow::new(&label, &name, &score(&init, &truth, config)?));
        trajectories.push((name.clone(), init.clone()));
        last_init = Some((name, init));
    }

    let mut refinement = None;
    if config.offline.refine {
        let (name, init) = last_init.expect("ks is non-empty");
        let problem = RefinementProblem::new(
            init,
            all_pair_edges(&scene, &frames)?,
            frames[0],
            &config.refine,
        )?;
        let result = refine(&problem, &config.refine)?;
        let name = format!("{name}+pgo");
        rows.push(MethodRow::new(&label, &name, &score(&result.poses, &truth, config)?));
        refinement = Some(RefinementRecord {
            initial_objective: result.initial_objective,
            final_objective: result.final_objective,
            iterations: result.iterations,
            converged: result.converged,
        });
        trajectories.push((name, result.poses));
    }

    Ok(OfflineOutput {
        scene: OfflineScene {
            seed,
            rows,
            refinement,
        },
        trajectories,
        truth,
    })
}

/// Full-context runs over `offline.seeds` consecutive seeds.
///
/// Each scene is streamed for comparison, aggregated causally for every `k`
/// in the sweep and, with refinement enabled, refined from the last
/// aggregation over all ordered pairs. Per scene it writes one TUM file per
/// method under `seed-<s>/`; overall it writes `report.csv` (one row per
/// scene and method), `summary.csv` and `report.json`.
pub fn cmd_offline(config: &RunConfig) -> Result<OfflineSummary> {
    let ks = if config.offline.ks.is_empty() {
        vec![config.stream.fusion.k]
    } else {
        config.offline.ks.clone()
    };
    let seeds: Vec<u64> = (0..config.offline.seeds as u64)
        .map(|i| config.seed.wrapping_add(i))
        .collect();
    let outputs = seeds
        .par_iter()
        .map(|&s| offline_scene(config, s, &ks))
        .collect::<Result<Vec<_>>>()?;

    let mut dir = RunDir::create(config.output_dir("offline"))?;
    let mut by_method: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for out in &outputs {
        let sub = format!("seed-{}", out.scene.seed);
        dir.write_tum(&format!("{sub}/reference.tum"), &out.truth)?;
        for (name, t) in &out.trajectories {
            dir.write_tum(&format!("{sub}/{name}.tum"), t)?;
        }
        for row in &out.scene.rows {
            if !order.contains(&row.method) {
                order.push(row.method.clone());
            }
            by_method
                .entry(row.method.clone())
                .or_default()
                .insert(row.scene.clone(), row.ate_rmse);
        }
    }
    let wins = win_rate(&by_method)?;
    let methods: Vec<MethodSummary> = order
        .iter()
        .map(|m| {
            let v = &by_method[m];
            MethodSummary {
                method: m.clone(),
                mean_ate: v.values().sum::<f64>() / v.len() as f64,
                win_rate: wins[m],
            }
        })
        .collect();
    let scenes: Vec<OfflineScene> = outputs.into_iter().map(|o| o.scene).collect();
    let rows: Vec<&MethodRow> = scenes.iter().flat_map(|s| &s.rows).collect();
    dir.write_csv("report.csv", &rows)?;
    dir.write_csv("summary.csv", &methods)?;
    dir.write_json(
        "report.json",
        &serde_json::json!({ "scenes": scenes, "methods": methods }),
    )?;
    Ok(OfflineSummary {
        dir: dir.finish("offline", config, BTreeMap::new())?,
        scenes,
        methods,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustTrial {
    pub setting: String,
    pub size: usize,
    pub trial: usize,
    pub sr: f64,
    pub bfs: f64,
    pub clean_accept: f64,
    pub distractors: usize,
    pub clean: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSetting {
    pub setting: String,
    pub size: usize,
    pub trials: usize,
    pub sr: f64,
    pub bfs: f64,
    pub clean_accept: f64,
    pub min_sr: f64,
    pub min_bfs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustSummary {
    pub dir: PathBuf,
    pub settings: Vec<RobustSetting>,
    pub trials: Vec<RobustTrial>,
}

fn setting_name(index: usize, size: usize) -> String {
    match index {
        0 => "small".to_string(),
        1 => "medium".to_string(),
        2 => "large".to_string(),
        _ => format!("n{size}"),
    }
}

/// One distractor trial: a clean scene of `n_clean` frames interleaved with
/// `size` frames of an unrelated scene, streamed once and scored.
pub fn robust_trial(config: &RunConfig, size: usize, trial: usize) -> Result<RobustnessReport> {
    let r = &config.robust;
    let t = trial as u64;
    let clean = generate_scene(
        &OracleConfig {
            frames: r.n_clean,
            ..config.scene.clone()
        },
        derive_seed(config.seed, &[ROBUST_TAG, t, 0]),
    )?;
    let other = generate_scene(
        &OracleConfig {
            frames: r.distractor_frames,
            ..config.scene.clone()
        },
        derive_seed(config.seed, &[ROBUST_TAG, t, 1]),
    )?;
    let plan = make_distractor_stream(
        &clean,
        &other,
        r.n_clean,
        size,
        derive_seed(config.seed, &[ROBUST_TAG, t, 2, size as u64]),
    )?;
    let view = PlannedStream {
        scene: &clean,
        other: &other,
        plan: &plan,
    };
    let run = run_stream(
        &view,
        plan.entries.iter().map(|e| e.id),
        &config.stream,
        StreamOptions::default(),
        &mut Vec::new(),
    )?;
    robustness_score(&run.events, &plan)
}

/// Distractor robustness for every configured size over `robust.trials`
/// trials. Writes `trials.csv`, `report.csv` and `report.json`.
pub fn cmd_robust(config: &RunConfig) -> Result<RobustSummary> {
    let jobs: Vec<(usize, usize, usize)> = config
        .robust
        .sizes
        .iter()
        .enumerate()
        .flat_map(|(i, &size)| (0..config.robust.trials).map(move |t| (i, size, t)))
        .collect();
    let trials = jobs
        .par_iter()
        .map(|&(i, size, trial)| {
            robust_trial(config, size, trial).map(|r| RobustTrial {
                setting: setting_name(i, size),
                size,
                trial,
                sr: r.sr,
                bfs: r.bfs,
                clean_accept: r.clean_accept,
                distractors: r.distractors,
                clean: r.clean,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let settings: Vec<RobustSetting> = config
        .robust
        .sizes
        .iter()
        .enumerate()
        .map(|(i, &size)| {
            let group: Vec<&RobustTrial> = trials.iter().filter(|t| t.size == size).collect();
            let n = group.len() as f64;
            let mean = |f: fn(&RobustTrial) -> f64| group.iter().map(|t| f(t)).sum::<f64>() / n;
            let min = |f: fn(&RobustTrial) -> f64| group.iter().map(|t| f(t)).fold(1.0, f64::min);
            RobustSetting {
                setting: setting_name(i, size),
                size,
                trials: group.len(),
                sr: mean(|t| t.sr),
                bfs: mean(|t| t.bfs),
                clean_accept: mean(|t| t.clean_accept),
                min_sr: min(|t| t.sr),
                min_bfs: min(|t| t.bfs),
            }
        })
        .collect();

    let mut dir = RunDir::create(config.output_dir("robust"))?;
    dir.write_csv("trials.csv", &trials)?;
    dir.write_csv("report.csv", &settings)?;
    dir.write_json(
        "report.json",
        &serde_json::json!({ "settings": settings, "trials": trials }),
    )?;
    Ok(RobustSummary {
        dir: dir.finish("robust", config, BTreeMap::new())?,
        settings,
        trials,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagSummary {
    pub dir: PathBuf,
    pub rotation: ConfidenceBinSummary,
    pub translation: ConfidenceBinSummary,
}

impl DiagSummary {
    pub fn monotone(&self) -> bool {
        self.rotation.strictly_decreasing() && self.translation.strictly_decreasing()
    }
}

/// Distinct oracle edges with their ground-truth relative poses. Pairs are
/// at most `diag.max_gap` frames apart and drawn without replacement from
/// as many scenes as needed.
pub fn diag_edges(config: &RunConfig) -> Result<Vec<(PoseEdge, crate::geom::Pose)>> {
    let want = config.diag.edges;
    let mut out = Vec::with_capacity(want);
    let mut index = 0u64;
    while out.len() < want {
        let seed = derive_seed(config.seed, &[DIAG_TAG, index]);
        let scene = generate_scene(&config.scene, seed)?;
        let n = scene.len() as u64;
        let mut pairs: Vec<(u64, u64)> = (1..=n)
            .flat_map(|i| (1..=n).map(move |j| (i, j)))
            .filter(|&(i, j)| i != j && i.abs_diff(j) <= config.diag.max_gap as u64)
            .collect();
        if pairs.is_empty() {
            return Err(Error::InvalidConfig("diag scenes need at least two frames".into()));
        }
        pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        for (i, j) in pairs.into_iter().take(want - out.len()) {
            let (a, b) = (FrameId(i), FrameId(j));
            let gt = scene.pose(a)?.relative(scene.pose(b)?);
            out.push((scene.emit_edge(a, b)?, gt));
        }
        index += 1;
    }
    Ok(out)
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    lo: f64,
    hi: f64,
    center: f64,
    count: usize,
    mean: f64,
    std: f64,
}

fn bin_rows(s: &ConfidenceBinSummary) -> Vec<BinRow> {
    s.bins
        .iter()
        .enumerate()
        .map(|(bin, b)| BinRow {
            bin,
            lo: b.lo,
            hi: b.hi,
            center: b.center,
            count: b.count,
            mean: b.mean_error,
            std: b.std_error,
        })
        .collect()
}

/// Confidence reliability: errors of `diag.edges` oracle edges grouped into
/// `diag.bins` equal-mass confidence bins per component. Writes `edges.txt`,
/// `bins_rotation.csv`, `bins_translation.csv` and `report.json`.
pub fn cmd_diag(config: &RunConfig) -> Result<DiagSummary> {
    let edges = diag_edges(config)?;
    let rot: Vec<(f64, f64)> = edges
        .iter()
        .map(|(e, gt)| (e.conf_rot, e.rel_rotation.geodesic_rad(&gt.rotation)))
        .collect();
    let trans: Vec<(f64, f64)> = edges
        .iter()
        .map(|(e, gt)| (e.conf_trans, (e.rel_translation - gt.translation).norm()))
        .collect();
    let rotation = confidence_bins(&rot, config.diag.bins, Component::Rotation)?;
    let translation = confidence_bins(&trans, config.diag.bins, Component::Translation)?;

    let mut dir = RunDir::create(config.output_dir("diag"))?;
    let mut buf = Vec::new();
    write_edges(&mut buf, edges.iter().map(|(e, _)| e))?;
    dir.write("edges.txt", &buf)?;
    dir.write_csv("bins_rotation.csv", &bin_rows(&rotation))?;
    dir.write_csv("bins_translation.csv", &bin_rows(&translation))?;
    dir.write_json(
        "report.json",
        &serde_json::json!({ "rotation": rotation, "translation": translation }),
    )?;
    Ok(DiagSummary {
        dir: dir.finish("diag", config, BTreeMap::new())?,
        rotation,
        translation,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dir: PathBuf,
    pub report: TrajectoryReport,
}

fn read_tum_file(path: &Path) -> Result<(Trajectory, String)> {
    let bytes = std::fs::read(path)?;
    Ok((read_tum(bytes.as_slice())?, sha256_hex(&bytes)))
}

/// Re-scores an existing estimate against a reference trajectory. Reference
/// frames missing from the estimate are ignored. Writes `report.json` and
/// `report.csv`; input hashes go into the manifest.
pub fn cmd_eval(config: &RunConfig, estimate: &Path, reference: &Path) -> Result<EvalSummary> {
    let (est, est_hash) = read_tum_file(estimate)?;
    let (truth, ref_hash) = read_tum_file(reference)?;
    let report = score(&est, &truth, config)?;

    let mut dir = RunDir::create(config.output_dir("eval"))?;
    dir.write_json("report.json", &report)?;
    let scene = reference
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let method = estimate
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.write_csv("report.csv", &[MethodRow::new(&scene, &method, &report)])?;
    let inputs = BTreeMap::from([
        ("estimate".to_string(), est_hash),
        ("reference".to_string(), ref_hash),
    ]);
    Ok(EvalSummary {
        dir: dir.finish("eval", config, inputs)?,
        report,
    })
}
