//! Per-frame processing chain, live streaming with drop-oldest hand-offs,
//! runtime commands and the per-stage benchmark.

use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::calib::{synthesize_default_calibration, CalibrationSet, CameraProfile, ResolvedCalibration, NOMINAL_DISTANCE_CM};
use crate::cube::{extract_raw_cube, warp_cube_owned, RawSensorFrame, ResamplePlan, SpectralCube};
use crate::error::{Error, Result};
use crate::oxy::{
    build_synthetic_library, build_tissue_mask, classify_resampled, colorize, composite, fine_grid, render_rgb,
    render_rgb_scaled, render_similarity_map, render_so2_map, so2_histogram, so2_mean, validate_alpha,
    validate_threshold, Colormap, OverlayImage, ReferenceLibrary, ResampledLibrary, RgbImage, SimilarityMap, So2Map,
    TissueMask, DEFAULT_LEVELS, DEFAULT_MIN_VALID_BANDS, DEFAULT_OVERLAY_ALPHA, DEFAULT_SAM_THRESHOLD,
};
use crate::reflect::{extract_white_reference, normalize_reflectance_owned, RegionOfInterest, WhiteReferenceCube};
use crate::sim::{ScenePhantom, Simulator};

pub const DEFAULT_QUEUE_CAPACITY: usize = 2;
pub const DEFAULT_TARGET_FPS: f64 = 1.0;
pub const WHITE_REFERENCE_STALE_AFTER: Duration = Duration::from_secs(300);
pub const SATURATION_WARNING_FRACTION: f64 = 0.01;
pub const BENCH_WARMUP_FRAMES: usize = 3;
pub const BENCH_MIN_REPETITIONS: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverlayMode {
    Rgb,
    Overlay,
    Composite,
    So2,
    Similarity,
}

impl OverlayMode {
    pub fn by_name(name: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(name.to_string())).map_err(|_| Error::Unknown {
            kind: "overlay mode",
            name: name.to_string(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub profile: String,
    pub working_distance_cm: f64,
    pub roi: Option<RegionOfInterest>,
    pub gauze_factor: f64,
    /// "synthetic" or a library file path.
    pub library: String,
    pub sam_threshold: f64,
    pub min_valid_bands: usize,
    pub colormap: Colormap,
    pub alpha: f64,
    pub overlay_mode: OverlayMode,
    pub target_fps: f64,
    pub queue_capacity: usize,
}

impl PipelineConfig {
    pub fn for_profile(profile: &CameraProfile) -> Self {
        Self {
            profile: profile.name.clone(),
            working_distance_cm: NOMINAL_DISTANCE_CM,
            roi: None,
            gauze_factor: 1.0,
            library: "synthetic".into(),
            sam_threshold: DEFAULT_SAM_THRESHOLD,
            min_valid_bands: DEFAULT_MIN_VALID_BANDS,
            colormap: Colormap::Oxygen,
            alpha: DEFAULT_OVERLAY_ALPHA,
            overlay_mode: OverlayMode::Composite,
            target_fps: DEFAULT_TARGET_FPS,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
        }
    }

    pub fn validate(&self, profile: &CameraProfile) -> Result<()> {
        if !(self.working_distance_cm.is_finite() && self.working_distance_cm > 0.0) {
            return Err(Error::invalid("working_distance_cm", "must be positive"));
        }
        if !(self.gauze_factor > 0.0 && self.gauze_factor <= 1.0) {
            return Err(Error::invalid("gauze_factor", "must lie in (0, 1]"));
        }
        validate_threshold(self.sam_threshold)?;
        validate_alpha(self.alpha)?;
        if self.min_valid_bands == 0 {
            return Err(Error::invalid("min_valid_bands", "must be at least 1"));
        }
        if !(self.target_fps > 0.0 && self.target_fps <= profile.max_fps) {
            return Err(Error::invalid(
                "target_fps",
                format!("{} not in (0, {}]", self.target_fps, profile.max_fps),
            ));
        }
        if self.queue_capacity == 0 {
            return Err(Error::invalid("queue_capacity", "must be at least 1"));
        }
        if let Some(roi) = &self.roi {
            roi.validate(profile.subimage_width, profile.subimage_height)?;
        }
        Ok(())
    }

    /// Validate `cmd` and apply it. Returns whether the configuration is
    /// affected; on error `self` is unchanged.
    pub fn apply_command(&mut self, cmd: &Command, profile: &CameraProfile) -> Result<bool> {
        match cmd {
            Command::SetRoi { roi } => {
                roi.validate(profile.subimage_width, profile.subimage_height)?;
                self.roi = Some(*roi);
            }
            Command::SetWorkingDistance { cm } => {
                if !(cm.is_finite() && *cm > 0.0) {
                    return Err(Error::invalid("working_distance_cm", "working distance out of range"));
                }
                self.working_distance_cm = *cm;
            }
            Command::SetThreshold { rad } => {
                validate_threshold(*rad)?;
                self.sam_threshold = *rad;
            }
            Command::SetColormap { name, alpha } => {
                let cmap = Colormap::by_name(name)?;
                validate_alpha(*alpha)?;
                self.colormap = cmap;
                self.alpha = *alpha;
            }
            Command::SetOverlayMode { mode } => self.overlay_mode = *mode,
            Command::Pause | Command::Resume => return Ok(false),
        }
        Ok(true)
    }
}

/// Wall-clock milliseconds per stage. `overhead_ms` is the residual, so the
/// five components always sum to `total_ms`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub reflectance_cube_ms: f64,
    pub rgb_image_ms: f64,
    pub oxy_correlation_ms: f64,
    pub oxy_image_ms: f64,
    pub overhead_ms: f64,
    pub total_ms: f64,
}

impl StageTimings {
    pub const ROW_NAMES: [&'static str; 6] = [
        "Reflectance Cube",
        "RGB Image",
        "Oxy Correlation",
        "Oxy Image",
        "Add. Overhead",
        "Total",
    ];

    pub fn as_array(&self) -> [f64; 6] {
        [
            self.reflectance_cube_ms,
            self.rgb_image_ms,
            self.oxy_correlation_ms,
            self.oxy_image_ms,
            self.overhead_ms,
            self.total_ms,
        ]
    }

    pub fn component_sum(&self) -> f64 {
        self.as_array()[..5].iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Warning {
    Uncalibrated,
    StaleWhiteReference { age_s: f64 },
    ExtrapolatedDistance { cm: f64 },
    Saturation { fraction: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PipelineEvent {
    WhiteReferenceUpdated { frame_id: u64, roi: RegionOfInterest, valid_bands: usize },
    WhiteReferenceFailed { frame_id: u64, reason: String },
    SourceChanged { name: String },
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct So2Summary {
    pub histogram: Vec<u32>,
    pub mean: Option<f64>,
    pub tissue_pixels: usize,
}

#[derive(Debug, Clone)]
pub struct ProcessedFrame {
    pub frame_id: u64,
    pub width: usize,
    pub height: usize,
    pub rgb: RgbImage,
    pub overlay: Option<OverlayImage>,
    pub composite: RgbImage,
    pub so2: Option<So2Map>,
    pub similarity: Option<SimilarityMap>,
    pub mask: Option<TissueMask>,
    pub summary: So2Summary,
    pub timings: StageTimings,
    pub warnings: Vec<Warning>,
    pub events: Vec<PipelineEvent>,
    pub overlay_mode: OverlayMode,
    pub colormap: Colormap,
    /// Incremented by every applied configuration change.
    pub config_generation: u64,
    pub captured_at: Instant,
}

impl ProcessedFrame {
    pub fn calibrated(&self) -> bool {
        self.so2.is_some()
    }

    /// Raster for the active view mode.
    pub fn display(&self) -> RgbImage {
        match self.overlay_mode {
            OverlayMode::Rgb => self.rgb.clone(),
            OverlayMode::Composite => self.composite.clone(),
            OverlayMode::Overlay => match &self.overlay {
                Some(ov) => {
                    let black = RgbImage::new(self.width, self.height);
                    composite(&black, ov).unwrap_or(black)
                }
                None => RgbImage::new(self.width, self.height),
            },
            OverlayMode::So2 => match &self.so2 {
                Some(m) => render_so2_map(m, self.colormap),
                None => RgbImage::new(self.width, self.height),
            },
            OverlayMode::Similarity => match &self.similarity {
                Some(s) => render_similarity_map(s),
                None => RgbImage::new(self.width, self.height),
            },
        }
    }
}

/// Runtime steering applied between frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Command {
    SetRoi { roi: RegionOfInterest },
    SetWorkingDistance { cm: f64 },
    SetThreshold { rad: f64 },
    SetColormap { name: String, alpha: f64 },
    SetOverlayMode { mode: OverlayMode },
    Pause,
    Resume,
}

/// Immutable calibration and library plus per-frame mutable state.
pub struct Pipeline {
    cfg: PipelineConfig,
    calib: Arc<CalibrationSet>,
    library: Arc<ReferenceLibrary>,
    resolved: ResolvedCalibration,
    plan: ResamplePlan,
    resampled: ResampledLibrary,
    white: Option<WhiteReferenceCube>,
    /// Set when the roi changed and the next frame must extract a new white.
    white_pending: bool,
    generation: u64,
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig, calib: Arc<CalibrationSet>, library: Arc<ReferenceLibrary>) -> Result<Self> {
        calib.validate()?;
        cfg.validate(&calib.profile)?;
        let resolved = calib.at_distance(cfg.working_distance_cm);
        let grid = calib.profile.band_grid.clone();
        let plan = ResamplePlan::new(&resolved, &grid)?;
        let resampled = library.resample(&grid, cfg.min_valid_bands)?;
        let white_pending = cfg.roi.is_some();
        Ok(Self {
            cfg,
            calib,
            library,
            resolved,
            plan,
            resampled,
            white: None,
            white_pending,
            generation: 0,
        })
    }

    /// Synthetic calibration and library for a named profile.
    pub fn synthetic(profile: &CameraProfile, levels: usize) -> Result<Self> {
        let calib = Arc::new(synthesize_default_calibration(profile, &[40.0, NOMINAL_DISTANCE_CM, 80.0])?);
        let library = Arc::new(build_synthetic_library(levels, &fine_grid())?);
        Self::new(PipelineConfig::for_profile(profile), calib, library)
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn calibration(&self) -> &Arc<CalibrationSet> {
        &self.calib
    }

    pub fn library(&self) -> &Arc<ReferenceLibrary> {
        &self.library
    }

    pub fn white_reference(&self) -> Option<&WhiteReferenceCube> {
        self.white.as_ref()
    }

    pub fn generation(&self) -> u64 {
        self.generation
    }

    pub fn set_white_reference(&mut self, white: WhiteReferenceCube) {
        self.white = Some(white);
        self.white_pending = false;
    }

    /// Validate and apply a configuration command. Invalid commands leave the
    /// configuration untouched. Pause and resume are stream-level and are
    /// accepted without effect here.
    pub fn apply(&mut self, cmd: &Command) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if !cfg.apply_command(cmd, &self.calib.profile)? {
            return Ok(());
        }
        if cfg.working_distance_cm != self.cfg.working_distance_cm {
            let resolved = self.calib.at_distance(cfg.working_distance_cm);
            self.plan = ResamplePlan::new(&resolved, &self.calib.profile.band_grid)?;
            self.resolved = resolved;
        }
        if matches!(cmd, Command::SetRoi { .. }) {
            self.white_pending = true;
        }
        self.cfg = cfg;
        self.generation += 1;
        Ok(())
    }

    /// Raw frame to uniform radiance cube.
    pub fn reconstruct(&self, frame: &RawSensorFrame) -> Result<SpectralCube> {
        let raw = extract_raw_cube(frame, &self.calib.layout)?;
        let warped = warp_cube_owned(raw, &self.resolved)?;
        self.plan.apply(&warped)
    }

    /// Run the full chain on one frame.
    pub fn process_frame(&mut self, frame: &RawSensorFrame) -> Result<ProcessedFrame> {
        let t0 = Instant::now();
        let mut events = Vec::new();
        let mut warnings = Vec::new();

        let uniform = self.reconstruct(frame)?;
        if self.white_pending {
            self.white_pending = false;
            let roi = self.cfg.roi.expect("pending white has a roi");
            match extract_white_reference(&uniform, RegionOfInterest { frame_id: Some(frame.frame_id), ..roi }, self.cfg.gauze_factor) {
                Ok(w) => {
                    events.push(PipelineEvent::WhiteReferenceUpdated {
                        frame_id: frame.frame_id,
                        roi,
                        valid_bands: w.valid_bands(),
                    });
                    self.white = Some(w);
                }
                Err(e) => events.push(PipelineEvent::WhiteReferenceFailed {
                    frame_id: frame.frame_id,
                    reason: e.to_string(),
                }),
            }
        }
        let (width, height) = (uniform.width, uniform.height);
        let (radiance, reflectance) = match &self.white {
            Some(w) => (None, Some(normalize_reflectance_owned(uniform, w)?)),
            None => (Some(uniform), None),
        };
        let t1 = Instant::now();

        let rgb = match (&reflectance, &radiance) {
            (Some(r), _) => render_rgb(r)?,
            (None, Some(u)) => render_rgb_scaled(u, 1.0 / f64::from(self.calib.profile.max_dn()))?,
            (None, None) => unreachable!("one of radiance or reflectance is kept"),
        };
        let t2 = Instant::now();

        let classified = match &reflectance {
            Some(r) => Some(classify_resampled(r, &self.resampled)?),
            None => None,
        };
        let t3 = Instant::now();

        let (overlay, composite_img, mask, summary) = match &classified {
            Some((so2, sim)) => {
                let mask = build_tissue_mask(sim, self.cfg.sam_threshold, self.cfg.min_valid_bands)?;
                let ov = colorize(so2, &mask, self.cfg.colormap, self.cfg.alpha)?;
                let comp = composite(&rgb, &ov)?;
                let summary = So2Summary {
                    histogram: so2_histogram(so2, &mask),
                    mean: so2_mean(so2, &mask),
                    tissue_pixels: mask.count(),
                };
                (Some(ov), comp, Some(mask), summary)
            }
            None => (None, rgb.clone(), None, So2Summary::default()),
        };
        let t4 = Instant::now();

        if self.white.is_none() {
            warnings.push(Warning::Uncalibrated);
        } else if let Some(w) = &self.white {
            if w.age() > WHITE_REFERENCE_STALE_AFTER {
                warnings.push(Warning::StaleWhiteReference {
                    age_s: w.age().as_secs_f64(),
                });
            }
        }
        if self.resolved.extrapolated {
            warnings.push(Warning::ExtrapolatedDistance {
                cm: self.cfg.working_distance_cm,
            });
        }
        let sat = frame.saturated_fraction();
        if sat > SATURATION_WARNING_FRACTION {
            warnings.push(Warning::Saturation { fraction: sat });
        }
        let (so2, similarity) = match classified {
            Some((a, b)) => (Some(a), Some(b)),
            None => (None, None),
        };
        let mut out = ProcessedFrame {
            frame_id: frame.frame_id,
            width,
            height,
            rgb,
            overlay,
            composite: composite_img,
            so2,
            similarity,
            mask,
            summary,
            timings: StageTimings::default(),
            warnings,
            events,
            overlay_mode: self.cfg.overlay_mode,
            colormap: self.cfg.colormap,
            config_generation: self.generation,
            captured_at: frame.captured_at,
        };
        let t5 = Instant::now();
        let ms = |a: Instant, b: Instant| (b - a).as_secs_f64() * 1e3;
        let mut t = StageTimings {
            reflectance_cube_ms: ms(t0, t1),
            rgb_image_ms: ms(t1, t2),
            oxy_correlation_ms: ms(t2, t3),
            oxy_image_ms: ms(t3, t4),
            overhead_ms: 0.0,
            total_ms: ms(t0, t5),
        };
        t.overhead_ms = t.total_ms - (t.reflectance_cube_ms + t.rgb_image_ms + t.oxy_correlation_ms + t.oxy_image_ms);
        out.timings = t;
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Bounded hand-off

/// Bounded FIFO that discards its oldest item when full.
pub struct DropOldestQueue<T> {
    inner: Mutex<QueueState<T>>,
    ready: Condvar,
    capacity: usize,
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    dropped: u64,
}

impl<T> DropOldestQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "queue capacity must be at least 1");
        Self {
            inner: Mutex::new(QueueState {
                items: VecDeque::with_capacity(capacity),
                closed: false,
                dropped: 0,
            }),
            ready: Condvar::new(),
            capacity,
        }
    }

    /// Enqueue, returning the item evicted to make room.
    pub fn push(&self, item: T) -> Option<T> {
        let mut s = self.inner.lock().unwrap();
        let evicted = if s.items.len() >= self.capacity {
            s.dropped += 1;
            s.items.pop_front()
        } else {
            None
        };
        s.items.push_back(item);
        drop(s);
        self.ready.notify_one();
        evicted
    }

    /// Block until an item arrives; `None` once closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.inner.lock().unwrap();
        loop {
            if let Some(v) = s.items.pop_front() {
                return Some(v);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap();
        }
    }

    pub fn close(&self) {
        self.inner.lock().unwrap().closed = true;
        self.ready.notify_all();
    }

    pub fn dropped(&self) -> u64 {
        self.inner.lock().unwrap().dropped
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

// ---------------------------------------------------------------------------
// Streaming

/// Yields raw frames in id order; `None` ends the stream.
pub trait FrameSource: Send {
    fn next_frame(&mut self) -> Option<Result<RawSensorFrame>>;
    fn name(&self) -> String;
}

/// Live simulator source.
pub struct SimulatorSource {
    sim: Simulator,
    next: u64,
    limit: Option<u64>,
}

impl SimulatorSource {
    pub fn new(sim: Simulator, limit: Option<u64>) -> Self {
        Self { sim, next: 0, limit }
    }
}

impl FrameSource for SimulatorSource {
    fn next_frame(&mut self) -> Option<Result<RawSensorFrame>> {
        if self.limit.is_some_and(|l| self.next >= l) {
            return None;
        }
        let f = self.sim.frame(self.next);
        self.next += 1;
        Some(f)
    }

    fn name(&self) -> String {
        format!("sim:{}", self.sim.phantom.name)
    }
}

/// Replays a fixed list of frames, optionally cycling.
pub struct VecSource {
    frames: Vec<RawSensorFrame>,
    pos: usize,
    cycle: bool,
    label: String,
}

impl VecSource {
    pub fn new(frames: Vec<RawSensorFrame>, cycle: bool, label: impl Into<String>) -> Self {
        Self {
            frames,
            pos: 0,
            cycle,
            label: label.into(),
        }
    }
}

impl FrameSource for VecSource {
    fn next_frame(&mut self) -> Option<Result<RawSensorFrame>> {
        if self.frames.is_empty() || (!self.cycle && self.pos >= self.frames.len()) {
            return None;
        }
        let mut f = self.frames[self.pos % self.frames.len()].clone();
        f.frame_id = self.pos as u64;
        self.pos += 1;
        Some(Ok(f))
    }

    fn name(&self) -> String {
        self.label.clone()
    }
}

/// Receives every published frame on the publication thread. Must not block.
pub trait FrameSink: Send {
    fn publish(&mut self, frame: &Arc<ProcessedFrame>);
}

impl<F: FnMut(&Arc<ProcessedFrame>) + Send> FrameSink for F {
    fn publish(&mut self, frame: &Arc<ProcessedFrame>) {
        self(frame)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum CommandOutcome {
    /// Applied; `frame_id` is the first frame that reflects it.
    Ack { frame_id: u64 },
    Nack { reason: String },
}

struct PendingCommand {
    cmd: Command,
    reply: Option<Sender<CommandOutcome>>,
}

#[derive(Debug, Clone)]
pub struct StreamOptions {
    /// Source pacing; `None` pulls frames as fast as they are produced.
    pub source_fps: Option<f64>,
    pub queue_capacity: usize,
    /// Added to every frame's processing time (testing aid).
    pub processing_delay: Duration,
    pub max_frames: Option<u64>,
}

impl Default for StreamOptions {
    fn default() -> Self {
        Self {
            source_fps: None,
            queue_capacity: DEFAULT_QUEUE_CAPACITY,
            processing_delay: Duration::ZERO,
            max_frames: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamStats {
    pub frames_in: u64,
    pub frames_processed: u64,
    pub frames_out: u64,
    pub dropped: u64,
    pub failed: u64,
    pub skipped_paused: u64,
    pub paused: bool,
    pub source: String,
    /// Median per stage over the most recent frames, in row order.
    pub stage_medians_ms: Option<StageTimings>,
    pub last_error: Option<String>,
    pub active_config: Option<PipelineConfig>,
}

const RECENT_TIMINGS: usize = 64;

#[derive(Default)]
struct SharedStats {
    stats: StreamStats,
    recent: VecDeque<StageTimings>,
}

impl SharedStats {
    fn snapshot(&self) -> StreamStats {
        let mut s = self.stats.clone();
        s.stage_medians_ms = median_timings(self.recent.iter().copied());
        s
    }
}

pub fn median_timings(it: impl Iterator<Item = StageTimings>) -> Option<StageTimings> {
    let all: Vec<[f64; 6]> = it.map(|t| t.as_array()).collect();
    if all.is_empty() {
        return None;
    }
    let m: Vec<f64> = (0..6).map(|k| median(&mut all.iter().map(|a| a[k]).collect::<Vec<_>>())).collect();
    Some(StageTimings {
        reflectance_cube_ms: m[0],
        rgb_image_ms: m[1],
        oxy_correlation_ms: m[2],
        oxy_image_ms: m[3],
        overhead_ms: m[4],
        total_ms: m[5],
    })
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Handle to a running stream.
pub struct StreamHandle {
    stop: Arc<AtomicBool>,
    commands: Sender<PendingCommand>,
    source_swap: Arc<Mutex<Option<SourceSwap>>>,
    stats: Arc<Mutex<SharedStats>>,
    threads: Vec<JoinHandle<()>>,
    frame_counter: Arc<AtomicU64>,
}

impl StreamHandle {
    /// Queue a command; the outcome arrives once a frame boundary is reached.
    pub fn send(&self, cmd: Command) -> Receiver<CommandOutcome> {
        let (tx, rx) = mpsc::channel();
        if self.commands.send(PendingCommand { cmd, reply: Some(tx.clone()) }).is_err() {
            let _ = tx.send(CommandOutcome::Nack {
                reason: "stream stopped".into(),
            });
        }
        rx
    }

    /// Switch sources at the next frame boundary. The receiver yields the
    /// id of the first frame taken from the new source; a swap requested
    /// before the previous one took effect replaces it.
    pub fn select_source(&self, source: Box<dyn FrameSource>) -> Receiver<u64> {
        let (tx, rx) = mpsc::channel();
        *self.source_swap.lock().unwrap() = Some(SourceSwap { source, first_frame: tx });
        rx
    }

    pub fn stats(&self) -> StreamStats {
        self.stats.lock().unwrap().snapshot()
    }

    /// Frames read from the source so far.
    pub fn frames_in(&self) -> u64 {
        self.frame_counter.load(Ordering::Relaxed)
    }

    pub fn stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }

    pub fn is_finished(&self) -> bool {
        self.threads.iter().all(|t| t.is_finished())
    }

    /// Wait for all stages to finish and return the final stats.
    pub fn join(mut self) -> StreamStats {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
        self.stats()
    }
}

impl Drop for StreamHandle {
    fn drop(&mut self) {
        self.stop();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

struct SourceSwap {
    source: Box<dyn FrameSource>,
    first_frame: Sender<u64>,
}

struct Captured {
    frame: RawSensorFrame,
}

/// Start the three-stage stream: source, processor, publisher. Frames pass
/// through drop-oldest queues, so consumers always see the freshest output.
pub fn run_stream(
    source: Box<dyn FrameSource>,
    pipeline: Pipeline,
    opts: StreamOptions,
    sinks: Vec<Box<dyn FrameSink>>,
) -> StreamHandle {
    let stop = Arc::new(AtomicBool::new(false));
    let (cmd_tx, cmd_rx) = mpsc::channel::<PendingCommand>();
    let source_swap: Arc<Mutex<Option<SourceSwap>>> = Arc::new(Mutex::new(None));
    let stats = Arc::new(Mutex::new(SharedStats::default()));
    let capacity = opts.queue_capacity.max(1);
    let raw_q = Arc::new(DropOldestQueue::<Captured>::new(capacity));
    let out_q = Arc::new(DropOldestQueue::<Arc<ProcessedFrame>>::new(capacity));
    let frame_counter = Arc::new(AtomicU64::new(0));
    {
        let mut s = stats.lock().unwrap();
        s.stats.source = source.name();
        s.stats.active_config = Some(pipeline.config().clone());
    }

    let source_thread = {
        let (stop, swap, q, stats, counter) = (stop.clone(), source_swap.clone(), raw_q.clone(), stats.clone(), frame_counter.clone());
        let opts = opts.clone();
        thread::Builder::new()
            .name("oxy-source".into())
            .spawn(move || source_loop(source, &opts, &stop, &swap, &q, &stats, &counter))
            .expect("spawn source thread")
    };
    let processor_thread = {
        let (stop, raw_q, out_q, stats) = (stop.clone(), raw_q.clone(), out_q.clone(), stats.clone());
        let delay = opts.processing_delay;
        thread::Builder::new()
            .name("oxy-process".into())
            .spawn(move || processor_loop(pipeline, cmd_rx, delay, &stop, &raw_q, &out_q, &stats))
            .expect("spawn processor thread")
    };
    let publisher_thread = {
        let (out_q, stats) = (out_q.clone(), stats.clone());
        thread::Builder::new()
            .name("oxy-publish".into())
            .spawn(move || {
                let mut sinks = sinks;
                while let Some(f) = out_q.pop() {
                    for s in sinks.iter_mut() {
                        s.publish(&f);
                    }
                    let mut st = stats.lock().unwrap();
                    st.stats.frames_out += 1;
                    st.stats.dropped = raw_q.dropped() + out_q.dropped();
                }
                let mut st = stats.lock().unwrap();
                st.stats.dropped = raw_q.dropped() + out_q.dropped();
            })
            .expect("spawn publisher thread")
    };

    StreamHandle {
        stop,
        commands: cmd_tx,
        source_swap,
        stats,
        threads: vec![source_thread, processor_thread, publisher_thread],
        frame_counter,
    }
}

fn source_loop(
    mut source: Box<dyn FrameSource>,
    opts: &StreamOptions,
    stop: &AtomicBool,
    swap: &Mutex<Option<SourceSwap>>,
    q: &DropOldestQueue<Captured>,
    stats: &Mutex<SharedStats>,
    counter: &AtomicU64,
) {
    let period = opts.source_fps.map(|f| Duration::from_secs_f64(1.0 / f));
    let start = Instant::now();
    let mut seq: u64 = 0;
    while !stop.load(Ordering::SeqCst) {
        if opts.max_frames.is_some_and(|m| seq >= m) {
            break;
        }
        if let Some(new) = swap.lock().unwrap().take() {
            stats.lock().unwrap().stats.source = new.source.name();
            source = new.source;
            let _ = new.first_frame.send(seq);
        }
        if let Some(p) = period {
            let due = start + p * seq as u32;
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            }
        }
        match source.next_frame() {
            None => break,
            Some(Err(e)) => {
                let mut s = stats.lock().unwrap();
                s.stats.failed += 1;
                s.stats.last_error = Some(e.to_string());
            }
            Some(Ok(mut frame)) => {
                // stream ids stay strictly increasing across source switches
                frame.frame_id = seq;
                frame.captured_at = Instant::now();
                q.push(Captured { frame });
                counter.fetch_add(1, Ordering::Relaxed);
                stats.lock().unwrap().stats.frames_in += 1;
            }
        }
        seq += 1;
    }
    q.close();
}

fn processor_loop(
    mut pipeline: Pipeline,
    commands: Receiver<PendingCommand>,
    delay: Duration,
    stop: &AtomicBool,
    raw_q: &DropOldestQueue<Captured>,
    out_q: &DropOldestQueue<Arc<ProcessedFrame>>,
    stats: &Mutex<SharedStats>,
) {
    let mut paused = false;
    let mut deferred: Vec<PendingCommand> = Vec::new();
    while let Some(Captured { frame }) = raw_q.pop() {
        // a stop lets the current frame finish but starts no new one
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let id = frame.frame_id;
        // frame boundary: apply everything queued so far
        while let Ok(pc) = commands.try_recv() {
            match pc.cmd {
                Command::Pause => {
                    paused = true;
                    reply(pc.reply, CommandOutcome::Ack { frame_id: id });
                }
                Command::Resume => {
                    paused = false;
                    reply(pc.reply, CommandOutcome::Ack { frame_id: id });
                }
                _ => deferred.push(pc),
            }
        }
        if paused {
            let mut s = stats.lock().unwrap();
            s.stats.skipped_paused += 1;
            s.stats.paused = true;
            continue;
        }
        for pc in deferred.drain(..) {
            let outcome = match pipeline.apply(&pc.cmd) {
                Ok(()) => CommandOutcome::Ack { frame_id: id },
                Err(e) => CommandOutcome::Nack { reason: e.to_string() },
            };
            reply(pc.reply, outcome);
        }
        let result = pipeline.process_frame(&frame);
        if !delay.is_zero() {
            thread::sleep(delay);
        }
        let mut s = stats.lock().unwrap();
        s.stats.paused = false;
        s.stats.active_config = Some(pipeline.config().clone());
        match result {
            Ok(pf) => {
                s.stats.frames_processed += 1;
                if s.recent.len() == RECENT_TIMINGS {
                    s.recent.pop_front();
                }
                s.recent.push_back(pf.timings);
                drop(s);
                out_q.push(Arc::new(pf));
            }
            Err(e) => {
                s.stats.failed += 1;
                s.stats.last_error = Some(format!("frame {id}: {e}"));
                log::warn!("frame {id} failed: {e}");
            }
        }
    }
    // commands that never reached a frame boundary
    for pc in deferred.into_iter().chain(commands.try_iter()) {
        reply(pc.reply, CommandOutcome::Nack {
            reason: "stream ended before the next frame".into(),
        });
    }
    out_q.close();
}

fn reply(to: Option<Sender<CommandOutcome>>, outcome: CommandOutcome) {
    if let Some(tx) = to {
        let _ = tx.send(outcome);
    }
}

// ---------------------------------------------------------------------------
// Benchmark

/// Reference per-stage timings for the two shipped profiles, in row order.
pub const REFERENCE_S5_MS: [f64; 6] = [57.69, 10.25, 80.98, 6.85, 5.76, 161.53];
pub const REFERENCE_X20_MS: [f64; 6] = [185.95, 75.17, 104.16, 14.22, 17.68, 397.18];

pub fn reference_timings(profile: &str) -> Option<[f64; 6]> {
    match profile.to_ascii_lowercase().as_str() {
        "s5" => Some(REFERENCE_S5_MS),
        "x20" => Some(REFERENCE_X20_MS),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MachineDescriptor {
    pub cpu: String,
    pub logical_cores: usize,
    pub os: String,
    pub arch: String,
    pub rayon_threads: usize,
}

impl MachineDescriptor {
    pub fn detect() -> Self {
        let cpu = std::fs::read_to_string("/proc/cpuinfo")
            .ok()
            .and_then(|s| {
                s.lines()
                    .find(|l| l.starts_with("model name"))
                    .and_then(|l| l.split(':').nth(1))
                    .map(|v| v.trim().to_string())
            })
            .unwrap_or_else(|| "unknown".into());
        Self {
            cpu,
            logical_cores: thread::available_parallelism().map_or(1, |n| n.get()),
            os: std::env::consts::OS.into(),
            arch: std::env::consts::ARCH.into(),
            rayon_threads: rayon::current_num_threads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageStat {
    pub stage: String,
    pub median_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub reference_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub profile: String,
    pub cube_shape: [usize; 3],
    pub levels: usize,
    pub repetitions: usize,
    pub warmup: usize,
    pub stages: Vec<StageStat>,
    pub machine: MachineDescriptor,
    /// Streaming rate with processing back to back.
    pub sustained_fps: f64,
}

impl BenchmarkReport {
    pub fn total_median_ms(&self) -> f64 {
        self.stages.last().map_or(f64::NAN, |s| s.median_ms)
    }

    pub fn stage(&self, name: &str) -> Option<&StageStat> {
        self.stages.iter().find(|s| s.stage == name)
    }

    pub fn to_text(&self) -> String {
        let [w, h, b] = self.cube_shape;
        let mut out = format!(
            "Processing times (ms) for {} ({w}x{h}x{b}), {} levels, {} repetitions after {} warm-up frames\n",
            self.profile.to_uppercase(),
            self.levels,
            self.repetitions,
            self.warmup
        );
        out.push_str(&format!(
            "{:<18} {:>10} {:>10} {:>10} {:>10}\n",
            "Stage", "median", "min", "max", "reference"
        ));
        for s in &self.stages {
            let r = s.reference_ms.map_or_else(|| "-".to_string(), |r| format!("{r:.2}"));
            out.push_str(&format!(
                "{:<18} {:>10.2} {:>10.2} {:>10.2} {:>10}\n",
                s.stage, s.median_ms, s.min_ms, s.max_ms, r
            ));
        }
        out.push_str(&format!("Sustained rate: {:.2} fps\n", self.sustained_fps));
        out.push_str(&format!(
            "Machine: {} ({} logical cores, {} worker threads, {}/{})\n",
            self.machine.cpu, self.machine.logical_cores, self.machine.rayon_threads, self.machine.os, self.machine.arch
        ));
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Time `process_frame` on a representative simulated frame.
pub fn benchmark(profile: &CameraProfile, levels: usize, repetitions: usize) -> Result<BenchmarkReport> {
    if repetitions < BENCH_MIN_REPETITIONS {
        return Err(Error::invalid(
            "repetitions",
            format!("need at least {BENCH_MIN_REPETITIONS}, got {repetitions}"),
        ));
    }
    let mut pipeline = Pipeline::synthetic(profile, levels)?;
    let phantom = ScenePhantom::wedge(profile.subimage_width, profile.subimage_height, DEFAULT_LEVELS);
    let gauze = phantom.gauze.expect("wedge has gauze");
    let sim = Simulator::new(
        (**pipeline.calibration()).clone(),
        build_synthetic_library(DEFAULT_LEVELS, &fine_grid())?,
        phantom,
    );
    let frame = sim.frame(0)?;
    pipeline.apply(&Command::SetRoi {
        roi: RegionOfInterest::new(gauze.x, gauze.y, gauze.width, gauze.height),
    })?;
    for _ in 0..BENCH_WARMUP_FRAMES {
        pipeline.process_frame(&frame)?;
    }
    let mut samples = Vec::with_capacity(repetitions);
    let start = Instant::now();
    for _ in 0..repetitions {
        samples.push(pipeline.process_frame(&frame)?.timings);
    }
    let elapsed = start.elapsed().as_secs_f64();
    let reference = reference_timings(&profile.name);
    let stages = StageTimings::ROW_NAMES
        .iter()
        .enumerate()
        .map(|(k, name)| {
            let mut v: Vec<f64> = samples.iter().map(|t| t.as_array()[k]).collect();
            let med = median(&mut v);
            StageStat {
                stage: (*name).to_string(),
                median_ms: med,
                min_ms: v[0],
                max_ms: v[v.len() - 1],
                reference_ms: reference.map(|r| r[k]),
            }
        })
        .collect();
    Ok(BenchmarkReport {
        profile: profile.name.clone(),
        cube_shape: [profile.subimage_width, profile.subimage_height, profile.band_grid.len()],
        levels,
        repetitions,
        warmup: BENCH_WARMUP_FRAMES,
        stages,
        machine: MachineDescriptor::detect(),
        sustained_fps: repetitions as f64 / elapsed,
    })
}
