//! Two-pipeline orchestration: a front end that fuses depth frames, and a
//! back end that completes sub-maps, fuses predictions and regularizes
//! labels — runnable inline (synchronous, deterministic) or on a separate
//! execution context (concurrent).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Condvar, Mutex, RwLock};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::completion::{
    CompletionBackend, ExternalBackend, HeuristicBackend, NullBackend, OracleBackend,
    DEFAULT_EXTERNAL_TIMEOUT,
};
use crate::crf::{regularize, CrfConfig};
use crate::eval::EvalMode;
use crate::integration::{fuse_submap, FusionPolicyConfig, FusionStats};
use crate::io;
use crate::map::{GlobalMap, MapConfig};
use crate::sensor::{integrate_depth, CameraIntrinsics, DepthImage, Pose, SensorNoiseModel};
use crate::submap::{
    compute_frustum, cover_frustum, extract_submap, filter_stale, StalenessConfig, SubMapAnchor,
    SubMapGrid, FRUSTUM_FAR, FRUSTUM_NEAR,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunMode {
    /// Everything inline in frame order; bit-for-bit reproducible.
    Sync,
    /// Completion, fusion and CRF on a dedicated back-end context.
    Concurrent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Null,
    Heuristic,
    Oracle {
        /// Path to a ground-truth volume dump.
        gt: PathBuf,
    },
    External {
        command: Vec<String>,
        #[serde(default = "default_external_timeout_ms")]
        timeout_ms: u64,
    },
}

fn default_external_timeout_ms() -> u64 {
    DEFAULT_EXTERNAL_TIMEOUT.as_millis() as u64
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub map: MapConfig,
    pub sensor: SensorNoiseModel,
    pub staleness: StalenessConfig,
    pub fusion: FusionPolicyConfig,
    pub crf: CrfConfig,
    pub backend: BackendConfig,
    pub mode: RunMode,
    pub frustum_near: f64,
    pub frustum_far: f64,
    /// Run the CRF every n-th frame over that frame's fused anchors;
    /// 0 disables regularization.
    pub crf_every: u32,
    /// Evaluation mode used by reporting helpers.
    pub eval_mode: EvalMode,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            map: MapConfig::default(),
            sensor: SensorNoiseModel::default(),
            staleness: StalenessConfig::default(),
            fusion: FusionPolicyConfig::default(),
            crf: CrfConfig::default(),
            backend: BackendConfig::Null,
            mode: RunMode::Sync,
            frustum_near: FRUSTUM_NEAR,
            frustum_far: FRUSTUM_FAR,
            crf_every: 1,
            eval_mode: EvalMode::Full,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.map.validate()?;
        self.sensor.validate()?;
        self.staleness.validate()?;
        self.fusion.validate()?;
        self.crf.validate()?;
        if !(self.frustum_near > 0.0 && self.frustum_near < self.frustum_far) {
            return Err(Error::Config("frustum near/far range is invalid".into()));
        }
        Ok(())
    }
}

/// Instantiates the configured backend; the oracle loads its volume here.
pub fn make_backend(cfg: &BackendConfig, voxel_size: f64) -> Result<Box<dyn CompletionBackend>> {
    Ok(match cfg {
        BackendConfig::Null => Box::new(NullBackend),
        BackendConfig::Heuristic => Box::new(HeuristicBackend),
        BackendConfig::Oracle { gt } => {
            let volume = io::load_gt(gt)?;
            Box::new(OracleBackend::new(Arc::new(volume), voxel_size)?)
        }
        BackendConfig::External {
            command,
            timeout_ms,
        } => Box::new(ExternalBackend::new(
            command.clone(),
            Duration::from_millis(*timeout_ms),
        )?),
    })
}

pub const STAGE_NAMES: [&str; 6] = [
    "Input Processing",
    "Mapping",
    "Sub-Map Extraction",
    "Completion",
    "Sub-Map Fusion",
    "CRF Regularization",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Input = 0,
    Mapping = 1,
    Extraction = 2,
    Completion = 3,
    Fusion = 4,
    Crf = 5,
}

#[derive(Debug, Clone, Copy, Default)]
struct StageAcc {
    sum: f64,
    sumsq: f64,
    count: u64,
}

impl StageAcc {
    fn record(&mut self, ms: f64) {
        self.sum += ms;
        self.sumsq += ms * ms;
        self.count += 1;
    }
}

#[derive(Debug, Clone, Default)]
struct TimingCollector {
    stages: [StageAcc; 6],
}

impl TimingCollector {
    fn record(&mut self, stage: Stage, d: Duration) {
        self.stages[stage as usize].record(d.as_secs_f64() * 1e3);
    }

    fn merge(&mut self, other: &TimingCollector) {
        for (a, b) in self.stages.iter_mut().zip(other.stages.iter()) {
            a.sum += b.sum;
            a.sumsq += b.sumsq;
            a.count += b.count;
        }
    }

    fn report(&self, frames: u64) -> TimingReport {
        let stages = STAGE_NAMES
            .iter()
            .zip(self.stages.iter())
            .map(|(name, acc)| {
                let mean = if acc.count > 0 {
                    acc.sum / acc.count as f64
                } else {
                    0.0
                };
                let var = if acc.count > 0 {
                    (acc.sumsq / acc.count as f64 - mean * mean).max(0.0)
                } else {
                    0.0
                };
                StageTiming {
                    name: name.to_string(),
                    mean_ms: mean,
                    std_ms: var.sqrt(),
                    invocations: acc.count,
                }
            })
            .collect();
        let total: f64 = self.stages.iter().map(|a| a.sum).sum();
        TimingReport {
            stages,
            per_frame_total_ms: if frames > 0 { total / frames as f64 } else { 0.0 },
            frames,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageTiming {
    pub name: String,
    pub mean_ms: f64,
    pub std_ms: f64,
    pub invocations: u64,
}

/// Per-stage runtime breakdown plus the average per-frame total.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TimingReport {
    pub stages: Vec<StageTiming>,
    pub per_frame_total_ms: f64,
    pub frames: u64,
}

impl TimingReport {
    pub fn stage(&self, stage: Stage) -> &StageTiming {
        &self.stages[stage as usize]
    }

    /// Human-readable table: one row per stage, mean and std in ms, then the
    /// per-frame average.
    pub fn format_table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<22} {:>10} {:>10} {:>8}\n",
            "Stage", "mean (ms)", "std (ms)", "calls"
        ));
        for s in &self.stages {
            out.push_str(&format!(
                "{:<22} {:>10.3} {:>10.3} {:>8}\n",
                s.name, s.mean_ms, s.std_ms, s.invocations
            ));
        }
        out.push_str(&format!(
            "Average run-time per-frame: {:.3} ms over {} frames\n",
            self.per_frame_total_ms, self.frames
        ));
        out
    }
}

/// One input frame; `decode_time` carries upstream file-decode cost into the
/// Input Processing stage.
#[derive(Debug, Clone)]
pub struct FrameInput {
    pub depth: DepthImage,
    pub pose: Pose,
    pub decode_time: Duration,
}

impl FrameInput {
    pub fn new(depth: DepthImage, pose: Pose) -> Self {
        Self {
            depth,
            pose,
            decode_time: Duration::ZERO,
        }
    }
}

#[derive(Debug)]
pub struct PipelineOutput {
    pub map: GlobalMap,
    pub timing: TimingReport,
    pub fusion: FusionStats,
    /// Backend invocations (successful or not) = retained anchors.
    pub completion_calls: u64,
    /// Sub-maps dropped after a backend or fusion error.
    pub skipped_submaps: u64,
    /// Voxels whose label the CRF changed.
    pub relabeled: u64,
}

#[derive(Debug, Default)]
struct BackendSideStats {
    fusion: FusionStats,
    completion_calls: u64,
    skipped: u64,
    relabeled: u64,
    timing: TimingCollector,
}

/// Completion + fusion (+ CRF bookkeeping) for one grid against a map
/// reference. Shared by both modes so their per-sub-map semantics match.
fn complete_and_fuse(
    backend: &mut dyn CompletionBackend,
    grid: &SubMapGrid,
    map: &mut GlobalMap,
    cfg: &PipelineConfig,
    stats: &mut BackendSideStats,
) -> Option<SubMapAnchor> {
    let t = Instant::now();
    let result = backend.complete(grid);
    stats.timing.record(Stage::Completion, t.elapsed());
    stats.completion_calls += 1;
    let result = match result {
        Ok(r) => r,
        Err(e) => {
            log::warn!(
                "backend {} failed on anchor {:?}: {e}; sub-map skipped",
                backend.name(),
                grid.anchor.lattice
            );
            stats.skipped += 1;
            return None;
        }
    };
    let t = Instant::now();
    let now = map.frame_counter();
    let fused = fuse_submap(map, &result, now, &cfg.fusion);
    stats.timing.record(Stage::Fusion, t.elapsed());
    match fused {
        Ok(s) => {
            stats.fusion += s;
            Some(grid.anchor)
        }
        Err(e) => {
            log::warn!("fusion failed on anchor {:?}: {e}; sub-map skipped", grid.anchor.lattice);
            stats.skipped += 1;
            None
        }
    }
}

fn crf_pass(
    map: &mut GlobalMap,
    anchors: &[SubMapAnchor],
    cfg: &PipelineConfig,
    stats: &mut BackendSideStats,
) {
    if anchors.is_empty() || cfg.crf.iterations == 0 {
        return;
    }
    let t = Instant::now();
    match regularize(map, anchors, &cfg.crf) {
        Ok(s) => stats.relabeled += s.relabeled,
        Err(e) => log::warn!("CRF pass failed: {e}"),
    }
    stats.timing.record(Stage::Crf, t.elapsed());
}

/// Runs the full pipeline over in-memory frames.
pub fn run_frames(
    cfg: &PipelineConfig,
    frames: &[FrameInput],
    intr: &CameraIntrinsics,
    backend: Box<dyn CompletionBackend>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    intr.validate()?;
    if frames.is_empty() {
        return Err(Error::Input("no input frames".into()));
    }
    match cfg.mode {
        RunMode::Sync => run_frames_sync(cfg, frames, intr, backend),
        RunMode::Concurrent => run_frames_concurrent(cfg, frames, intr, backend),
    }
}

fn retained_anchors(
    map: &GlobalMap,
    pose: &Pose,
    intr: &CameraIntrinsics,
    cfg: &PipelineConfig,
    now: u32,
) -> Result<Vec<SubMapAnchor>> {
    let frustum = compute_frustum(pose, intr, cfg.frustum_near, cfg.frustum_far)?;
    let anchors = cover_frustum(&frustum, map.config());
    Ok(filter_stale(map, &anchors, &cfg.staleness, now))
}

fn run_frames_sync(
    cfg: &PipelineConfig,
    frames: &[FrameInput],
    intr: &CameraIntrinsics,
    mut backend: Box<dyn CompletionBackend>,
) -> Result<PipelineOutput> {
    let mut map = GlobalMap::new(cfg.map)?;
    let mut timing = TimingCollector::default();
    let mut back = BackendSideStats::default();

    for (i, frame) in frames.iter().enumerate() {
        let t = Instant::now();
        if frame.depth.width != intr.width || frame.depth.height != intr.height {
            return Err(Error::Input(format!(
                "frame {i}: depth {}x{} does not match intrinsics",
                frame.depth.width, frame.depth.height
            )));
        }
        timing.record(Stage::Input, t.elapsed() + frame.decode_time);

        let t = Instant::now();
        let now = map.advance_frame();
        integrate_depth(&mut map, &frame.depth, &frame.pose, intr, &cfg.sensor)?;
        timing.record(Stage::Mapping, t.elapsed());

        let t = Instant::now();
        let retained = retained_anchors(&map, &frame.pose, intr, cfg, now)?;
        let grids: Vec<SubMapGrid> = retained.iter().map(|a| extract_submap(&map, a)).collect();
        timing.record(Stage::Extraction, t.elapsed());

        let mut fused_anchors = Vec::new();
        for grid in &grids {
            if let Some(a) = complete_and_fuse(backend.as_mut(), grid, &mut map, cfg, &mut back) {
                fused_anchors.push(a);
            }
        }
        if cfg.crf_every > 0 && now % cfg.crf_every == 0 {
            crf_pass(&mut map, &fused_anchors, cfg, &mut back);
        }
    }

    timing.merge(&back.timing);
    Ok(PipelineOutput {
        timing: timing.report(frames.len() as u64),
        map,
        fusion: back.fusion,
        completion_calls: back.completion_calls,
        skipped_submaps: back.skipped,
        relabeled: back.relabeled,
    })
}

#[derive(Default)]
struct Queue {
    /// Newest-wins pending grid per anchor.
    pending: BTreeMap<SubMapAnchor, SubMapGrid>,
    done: bool,
}

fn run_frames_concurrent(
    cfg: &PipelineConfig,
    frames: &[FrameInput],
    intr: &CameraIntrinsics,
    mut backend: Box<dyn CompletionBackend>,
) -> Result<PipelineOutput> {
    let map = Arc::new(RwLock::new(GlobalMap::new(cfg.map)?));
    let queue = Arc::new((Mutex::new(Queue::default()), Condvar::new()));
    let back_stats = Arc::new(Mutex::new(BackendSideStats::default()));
    let mut front_timing = TimingCollector::default();
    let mut front_error: Option<Error> = None;

    std::thread::scope(|scope| {
        let worker = {
            let map = Arc::clone(&map);
            let queue = Arc::clone(&queue);
            let back_stats = Arc::clone(&back_stats);
            scope.spawn(move || {
                let (lock, cv) = &*queue;
                loop {
                    let grid = {
                        let mut q = lock.lock().unwrap();
                        loop {
                            if let Some((_, grid)) = q.pending.pop_first() {
                                break Some(grid);
                            }
                            if q.done {
                                break None;
                            }
                            q = cv.wait(q).unwrap();
                        }
                    };
                    let Some(grid) = grid else { break };
                    let mut stats = BackendSideStats::default();
                    // Completion holds no map access; fusion and CRF take a
                    // short exclusive section.
                    let t = Instant::now();
                    let result = backend.complete(&grid);
                    stats.timing.record(Stage::Completion, t.elapsed());
                    stats.completion_calls = 1;
                    match result {
                        Ok(result) => {
                            let mut map = map.write().unwrap();
                            let t = Instant::now();
                            let now = map.frame_counter();
                            match fuse_submap(&mut map, &result, now, &cfg.fusion) {
                                Ok(s) => {
                                    stats.fusion += s;
                                    stats.timing.record(Stage::Fusion, t.elapsed());
                                    if cfg.crf_every > 0 {
                                        crf_pass(&mut map, &[grid.anchor], cfg, &mut stats);
                                    }
                                }
                                Err(e) => {
                                    stats.timing.record(Stage::Fusion, t.elapsed());
                                    log::warn!(
                                        "fusion failed on anchor {:?}: {e}; sub-map skipped",
                                        grid.anchor.lattice
                                    );
                                    stats.skipped += 1;
                                }
                            }
                        }
                        Err(e) => {
                            log::warn!(
                                "backend failed on anchor {:?}: {e}; sub-map skipped",
                                grid.anchor.lattice
                            );
                            stats.skipped += 1;
                        }
                    }
                    let mut total = back_stats.lock().unwrap();
                    total.fusion += stats.fusion;
                    total.completion_calls += stats.completion_calls;
                    total.skipped += stats.skipped;
                    total.relabeled += stats.relabeled;
                    total.timing.merge(&stats.timing);
                }
            })
        };

        for (i, frame) in frames.iter().enumerate() {
            let t = Instant::now();
            if frame.depth.width != intr.width || frame.depth.height != intr.height {
                front_error = Some(Error::Input(format!(
                    "frame {i}: depth {}x{} does not match intrinsics",
                    frame.depth.width, frame.depth.height
                )));
                break;
            }
            front_timing.record(Stage::Input, t.elapsed() + frame.decode_time);

            let t = Instant::now();
            let integrate = {
                let mut map = map.write().unwrap();
                let _ = map.advance_frame();
                integrate_depth(&mut map, &frame.depth, &frame.pose, intr, &cfg.sensor)
            };
            front_timing.record(Stage::Mapping, t.elapsed());
            if let Err(e) = integrate {
                front_error = Some(e);
                break;
            }

            let t = Instant::now();
            let grids = {
                let map = map.read().unwrap();
                let now = map.frame_counter();
                match retained_anchors(&map, &frame.pose, intr, cfg, now) {
                    Ok(anchors) => anchors
                        .iter()
                        .map(|a| extract_submap(&map, a))
                        .collect::<Vec<_>>(),
                    Err(e) => {
                        front_error = Some(e);
                        break;
                    }
                }
            };
            front_timing.record(Stage::Extraction, t.elapsed());

            if !grids.is_empty() {
                let (lock, cv) = &*queue;
                let mut q = lock.lock().unwrap();
                for grid in grids {
                    q.pending.insert(grid.anchor, grid);
                }
                cv.notify_all();
            }
        }

        {
            let (lock, cv) = &*queue;
            lock.lock().unwrap().done = true;
            cv.notify_all();
        }
        worker.join().expect("back-end thread panicked");
    });

    if let Some(e) = front_error {
        return Err(e);
    }
    let back = Arc::try_unwrap(back_stats)
        .expect("back-end stats released")
        .into_inner()
        .unwrap();
    front_timing.merge(&back.timing);
    let map = Arc::try_unwrap(map).expect("map released").into_inner().unwrap();
    Ok(PipelineOutput {
        timing: front_timing.report(frames.len() as u64),
        map,
        fusion: back.fusion,
        completion_calls: back.completion_calls,
        skipped_submaps: back.skipped,
        relabeled: back.relabeled,
    })
}

/// Loads a frame-numbered depth PNG directory plus trajectory and intrinsics
/// files, then runs the pipeline. Frames pair with trajectory lines in
/// filename order.
pub fn run_sequence(
    cfg: &PipelineConfig,
    depth_dir: &Path,
    trajectory: &Path,
    intrinsics: &Path,
) -> Result<PipelineOutput> {
    let intr = io::load_intrinsics(intrinsics)?;
    let poses = io::load_trajectory(trajectory)?;
    let mut entries: Vec<PathBuf> = std::fs::read_dir(depth_dir)
        .map_err(|e| Error::Input(format!("depth dir {}: {e}", depth_dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    entries.sort();
    if entries.len() != poses.len() {
        return Err(Error::Input(format!(
            "{} depth frames but {} trajectory poses",
            entries.len(),
            poses.len()
        )));
    }
    let mut frames = Vec::with_capacity(entries.len());
    for (path, (_, pose)) in entries.iter().zip(poses.into_iter()) {
        let t = Instant::now();
        let depth = io::load_depth_png(path)?;
        frames.push(FrameInput {
            depth,
            pose,
            decode_time: t.elapsed(),
        });
    }
    let backend = make_backend(&cfg.backend, cfg.map.voxel_size)?;
    run_frames(cfg, &frames, &intr, backend)
}
