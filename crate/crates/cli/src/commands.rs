use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{Context, Result};
use clap::Args;
use serde::Serialize;

use oxyfield::calib::{load_calibration, save_calibration, synthesize_default_calibration, CalibrationSet, CameraProfile};
use oxyfield::io::{export_png, read_frame, read_white_reference, Recording, RecordingSetup, RecordingSource, RecordingWriter};
use oxyfield::oxy::{build_synthetic_library, fine_grid, load_library, save_library, ReferenceLibrary, DEFAULT_LEVELS};
use oxyfield::pipeline::{benchmark, Command, FrameSource, Pipeline, PipelineConfig, ProcessedFrame, SimulatorSource, StreamOptions};
use oxyfield::reflect::RegionOfInterest;
use oxyfield::sim::{
    estimate_split_boundary, load_phantom, score_so2, Material, NoiseModel, ScenePhantom, Simulator, So2Field,
    PHANTOM_NAMES,
};
use oxyfield::Error;
use oxyfield_service::{Encoding, LiveService, ServiceOptions, SourceResolver};

use crate::{ProfileArg, UsageError};

const DEFAULT_DISTANCES_CM: [f64; 3] = [40.0, 56.0, 80.0];

fn parse_roi(s: &str) -> std::result::Result<RegionOfInterest, String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| format!("expected x,y,width,height: {e}"))?;
    match v[..] {
        [x, y, w, h] => Ok(RegionOfInterest::new(x, y, w, h)),
        _ => Err("expected x,y,width,height".into()),
    }
}

fn invalid(field: &str, msg: impl Into<String>) -> anyhow::Error {
    Error::Invalid { field: field.into(), msg: msg.into() }.into()
}

fn print_report<T: Serialize>(json: bool, value: &T, text: impl FnOnce() -> String) -> Result<()> {
    let mut out = std::io::stdout().lock();
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(value)?)?;
    } else {
        write!(out, "{}", text())?;
    }
    out.flush()?;
    Ok(())
}

fn calibration_for(profile: &CameraProfile, path: Option<&Path>) -> Result<CalibrationSet> {
    let calib = match path {
        Some(p) => load_calibration(p)?,
        None => synthesize_default_calibration(profile, &DEFAULT_DISTANCES_CM)?,
    };
    if calib.profile.name != profile.name {
        return Err(invalid(
            "calibration",
            format!("is for profile {} but {} was requested", calib.profile.name, profile.name),
        ));
    }
    Ok(calib)
}

fn library_for(levels: usize, path: Option<&Path>) -> Result<ReferenceLibrary> {
    Ok(match path {
        Some(p) => load_library(p)?,
        None => build_synthetic_library(levels, &fine_grid())?,
    })
}

/// A built-in phantom name or a scenario JSON file.
fn phantom_for(spec: &str, profile: &CameraProfile) -> Result<ScenePhantom> {
    let ph = if PHANTOM_NAMES.contains(&spec) {
        ScenePhantom::by_name(spec, profile.subimage_width, profile.subimage_height)?
    } else {
        load_phantom(spec)?
    };
    if (ph.width, ph.height) != (profile.subimage_width, profile.subimage_height) {
        return Err(invalid(
            "phantom",
            format!(
                "{}x{} does not match the {}x{} scene of {}",
                ph.width, ph.height, profile.subimage_width, profile.subimage_height, profile.name
            ),
        ));
    }
    Ok(ph)
}

fn gauze_roi(ph: &ScenePhantom) -> Option<RegionOfInterest> {
    ph.gauze.map(|g| RegionOfInterest::new(g.x, g.y, g.width, g.height))
}

// ---------------------------------------------------------------------------
// simulate

#[derive(Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    profile: ProfileArg,
    /// Phantom name (wedge, resection, props) or scenario JSON file.
    #[arg(long, default_value = "wedge")]
    phantom: String,
    /// Number of frames to render.
    #[arg(long, default_value_t = 10)]
    frames: u64,
    /// Noise seed; identical seeds give identical recordings.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Shot-noise variance per DN of signal.
    #[arg(long, default_value_t = 0.0)]
    shot_noise: f64,
    /// Gaussian read noise in DN.
    #[arg(long, default_value_t = 0.0)]
    read_noise: f64,
    /// Library levels used to render tissue and stored with the recording.
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Do not record a white-reference selection over the gauze at frame 0.
    #[arg(long)]
    no_roi: bool,
    /// Output recording directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Serialize)]
struct SimulateReport {
    recording: PathBuf,
    profile: String,
    phantom: String,
    frames: u64,
    seed: u64,
    events: usize,
}

pub fn simulate(a: SimulateArgs, json: bool) -> Result<()> {
    let profile = CameraProfile::by_name(a.profile.profile.as_str())?;
    let calib = calibration_for(&profile, a.calibration.as_deref())?;
    let library = library_for(a.levels, None)?;
    let phantom = phantom_for(&a.phantom, &profile)?;
    let config = PipelineConfig::for_profile(&profile);
    let mut writer = RecordingWriter::create(
        &a.out,
        RecordingSetup {
            calibration: &calib,
            library: &library,
            config: &config,
            scenario: Some(&phantom),
            seed: Some(a.seed),
        },
    )?;
    if !a.no_roi {
        let roi = gauze_roi(&phantom).ok_or_else(|| UsageError("phantom has no gauze patch; pass --no-roi".into()))?;
        writer.command(Command::SetRoi { roi })?;
    }
    let mut sim = Simulator::new(calib, library, phantom.clone());
    sim.noise = NoiseModel {
        shot_noise_scale: a.shot_noise,
        read_noise_sigma_dn: a.read_noise,
        seed: a.seed,
    };
    for id in 0..a.frames {
        writer.append(&sim.frame(id)?)?;
    }
    let manifest = writer.finish()?;
    let report = SimulateReport {
        recording: a.out.clone(),
        profile: profile.name.clone(),
        phantom: phantom.name.clone(),
        frames: a.frames,
        seed: a.seed,
        events: manifest.events.len(),
    };
    print_report(json, &report, || {
        format!(
            "wrote {} {} frames of {} to {} (seed {}, {} events)\n",
            report.frames,
            report.profile,
            report.phantom,
            report.recording.display(),
            report.seed,
            report.events
        )
    })
}

// ---------------------------------------------------------------------------
// process

#[derive(Args)]
pub struct ProcessArgs {
    /// Recording directory or single raw frame file.
    input: PathBuf,
    /// Directory for PNG output; nothing is written without it.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fail if any scored frame falls below this tissue accuracy.
    #[arg(long)]
    min_accuracy: Option<f64>,
    /// Single frame only: camera profile.
    #[command(flatten)]
    profile: ProfileArg,
    /// Single frame only: calibration file (default synthetic).
    #[arg(long)]
    calibration: Option<PathBuf>,
    /// Single frame only: reference library file (default synthetic).
    #[arg(long)]
    library: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    /// Single frame only: white reference region as x,y,width,height.
    #[arg(long, value_parser = parse_roi)]
    roi: Option<RegionOfInterest>,
    /// Single frame only: stored white reference.
    #[arg(long)]
    white: Option<PathBuf>,
    /// Single frame only: phantom name or scenario file for scoring.
    #[arg(long)]
    scenario: Option<String>,
}

#[derive(Serialize)]
struct FrameReport {
    frame_id: u64,
    calibrated: bool,
    tissue_pixels: usize,
    so2_mean: Option<f64>,
    /// Fraction of ground-truth tissue classified to the nearest level.
    accuracy: Option<f64>,
    false_tissue: Option<usize>,
    boundary_estimate: Option<f64>,
    boundary_truth: Option<usize>,
    total_ms: f64,
}

#[derive(Serialize)]
struct ProcessReport {
    input: PathBuf,
    frames: Vec<FrameReport>,
    min_accuracy: Option<f64>,
    max_boundary_error_px: Option<f64>,
}

fn split_levels(ph: &ScenePhantom) -> Option<(f64, f64)> {
    match &ph.background {
        Material::Tissue {
            so2: So2Field::Split { left, right, .. },
        } => Some((*left, *right)),
        _ => None,
    }
}

fn evaluate(f: &ProcessedFrame, scenario: Option<&ScenePhantom>, lib: &ReferenceLibrary) -> FrameReport {
    let mut r = FrameReport {
        frame_id: f.frame_id,
        calibrated: f.calibrated(),
        tissue_pixels: f.summary.tissue_pixels,
        so2_mean: f.summary.mean,
        accuracy: None,
        false_tissue: None,
        boundary_estimate: None,
        boundary_truth: None,
        total_ms: f.timings.total_ms,
    };
    if let (Some(ph), Some(map), Some(mask)) = (scenario, &f.so2, &f.mask) {
        let score = score_so2(map, mask, &ph.ground_truth(f.frame_id), lib);
        r.accuracy = Some(score.accuracy());
        r.false_tissue = Some(score.false_tissue);
        if let Some((left, right)) = split_levels(ph) {
            r.boundary_estimate = estimate_split_boundary(map, mask, left, right);
            r.boundary_truth = ph.boundary_column(f.frame_id);
        }
    }
    r
}

fn write_pngs(dir: &Path, f: &ProcessedFrame) -> oxyfield::Result<()> {
    export_png(&f.display(), dir.join(format!("frame_{:08}.png", f.frame_id)))?;
    if let Some(o) = &f.overlay {
        export_png(o, dir.join(format!("frame_{:08}_overlay.png", f.frame_id)))?;
    }
    Ok(())
}

pub fn process(a: ProcessArgs, json: bool) -> Result<()> {
    if let Some(dir) = &a.out {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut frames = Vec::new();
    if a.input.is_dir() {
        if a.roi.is_some() || a.white.is_some() || a.scenario.is_some() || a.calibration.is_some() || a.library.is_some() {
            return Err(UsageError("recordings carry their own calibration, library, scenario and commands".into()).into());
        }
        let rec = Recording::open(&a.input)?;
        let scenario = rec.scenario()?;
        let lib = rec.library()?;
        rec.replay(|f| {
            if let Some(dir) = &a.out {
                write_pngs(dir, &f)?;
            }
            frames.push(evaluate(&f, scenario.as_ref(), &lib));
            Ok(())
        })?;
    } else {
        let profile = CameraProfile::by_name(a.profile.profile.as_str())?;
        let calib = calibration_for(&profile, a.calibration.as_deref())?;
        let lib = Arc::new(library_for(a.levels, a.library.as_deref())?);
        let scenario = a.scenario.as_deref().map(|s| phantom_for(s, &profile)).transpose()?;
        let mut pipeline = Pipeline::new(PipelineConfig::for_profile(&profile), Arc::new(calib), lib.clone())?;
        if let Some(w) = &a.white {
            pipeline.set_white_reference(read_white_reference(w)?);
        }
        if let Some(roi) = a.roi {
            pipeline.apply(&Command::SetRoi { roi })?;
        }
        let f = pipeline.process_frame(&read_frame(&a.input)?)?;
        if let Some(dir) = &a.out {
            write_pngs(dir, &f)?;
        }
        frames.push(evaluate(&f, scenario.as_ref(), &lib));
    }
    let min_accuracy = frames.iter().filter_map(|f| f.accuracy).reduce(f64::min);
    let max_boundary_error_px = frames
        .iter()
        .filter_map(|f| Some((f.boundary_estimate? - f.boundary_truth? as f64).abs()))
        .reduce(f64::max);
    let report = ProcessReport {
        input: a.input.clone(),
        frames,
        min_accuracy,
        max_boundary_error_px,
    };
    print_report(json, &report, || {
        let mut s = format!("{:>8} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9}\n", "frame", "calibrated", "tissue", "so2", "accuracy", "boundary", "ms");
        let opt = |v: Option<f64>, digits: usize| v.map_or_else(|| "-".to_string(), |v| format!("{v:.digits$}"));
        for f in &report.frames {
            s.push_str(&format!(
                "{:>8} {:>10} {:>8} {:>8} {:>9} {:>9} {:>9.1}\n",
                f.frame_id,
                f.calibrated,
                f.tissue_pixels,
                opt(f.so2_mean, 3),
                opt(f.accuracy.map(|a| 100.0 * a), 2),
                opt(f.boundary_estimate, 1),
                f.total_ms
            ));
        }
        if let Some(m) = report.min_accuracy {
            s.push_str(&format!("min accuracy: {:.3}%\n", 100.0 * m));
        }
        if let Some(b) = report.max_boundary_error_px {
            s.push_str(&format!("max boundary error: {b:.2} px\n"));
        }
        s
    })?;
    if let Some(need) = a.min_accuracy {
        match report.min_accuracy {
            Some(got) if got >= need => {}
            Some(got) => return Err(invalid("accuracy", format!("{got:.5} below required {need}"))),
            None => return Err(invalid("accuracy", "no frame could be scored")),
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

#[derive(Args)]
pub struct BenchArgs {
    #[command(flatten)]
    profile: ProfileArg,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    #[arg(long, default_value_t = 20)]
    repetitions: usize,
}

pub fn bench(a: BenchArgs, json: bool) -> Result<()> {
    let profile = CameraProfile::by_name(a.profile.profile.as_str())?;
    let report = benchmark(&profile, a.levels, a.repetitions)?;
    print_report(json, &report, || report.to_text())
}

// ---------------------------------------------------------------------------
// serve

#[derive(Args)]
pub struct ServeArgs {
    #[command(flatten)]
    profile: ProfileArg,
    /// Phantom name or scenario file to simulate live.
    #[arg(long, default_value = "props", conflicts_with = "recording")]
    phantom: String,
    /// Recording directory to loop instead of a live phantom.
    #[arg(long)]
    recording: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    bind: String,
    /// Source frame rate.
    #[arg(long, default_value_t = 2.0)]
    fps: f64,
    /// Default payload encoding (png or rgba).
    #[arg(long, default_value = "png")]
    encoding: String,
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    /// Stop after this many seconds instead of running until killed.
    #[arg(long)]
    duration: Option<f64>,
}

pub fn serve(a: ServeArgs, json: bool) -> Result<()> {
    let encoding = Encoding::by_name(&a.encoding).ok_or_else(|| UsageError(format!("unknown encoding {}", a.encoding)))?;
    if !(a.fps.is_finite() && a.fps > 0.0) {
        return Err(UsageError("--fps must be positive".into()).into());
    }
    let (pipeline, source): (Pipeline, Box<dyn FrameSource>) = match &a.recording {
        Some(dir) => {
            let rec = Recording::open(dir)?;
            (rec.pipeline()?, Box::new(RecordingSource::new(rec, true)))
        }
        None => {
            let profile = CameraProfile::by_name(a.profile.profile.as_str())?;
            let pipeline = Pipeline::synthetic(&profile, a.levels)?;
            let ph = phantom_for(&a.phantom, &profile)?;
            let sim = Simulator::new((**pipeline.calibration()).clone(), (**pipeline.library()).clone(), ph);
            (pipeline, Box::new(SimulatorSource::new(sim, None)))
        }
    };
    let calib = pipeline.calibration().clone();
    let library = pipeline.library().clone();
    let resolver: SourceResolver = Arc::new(move |name: &str| {
        let path = Path::new(name);
        if path.is_dir() {
            let rec = Recording::open(path).map_err(|e| e.to_string())?;
            if rec.manifest.profile != calib.profile.name {
                return Err(format!("recording is for {} but the stream runs {}", rec.manifest.profile, calib.profile.name));
            }
            return Ok(Box::new(RecordingSource::new(rec, true)) as Box<dyn FrameSource>);
        }
        let ph = phantom_for(name, &calib.profile).map_err(|e| format!("{e:#}"))?;
        let sim = Simulator::new((*calib).clone(), (*library).clone(), ph);
        Ok(Box::new(SimulatorSource::new(sim, None)) as Box<dyn FrameSource>)
    });
    let opts = StreamOptions {
        source_fps: Some(a.fps),
        ..StreamOptions::default()
    };
    let svc = LiveService::start(
        source,
        pipeline,
        opts,
        &a.bind,
        ServiceOptions {
            default_encoding: encoding,
            resolver: Some(resolver),
        },
    )?;
    let url = svc.url();
    print_report(json, &serde_json::json!({ "listening": url }), || format!("listening on {url}\n"))?;
    let deadline = a.duration.map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0)));
    while deadline.is_none_or(|d| Instant::now() < d) && !svc.stream.is_finished() {
        thread::sleep(Duration::from_millis(50));
    }
    let stats = svc.stream.stats();
    svc.stop();
    print_report(json, &stats, || {
        format!(
            "stopped: {} frames in, {} published, {} dropped, {} failed\n",
            stats.frames_in, stats.frames_out, stats.dropped, stats.failed
        )
    })
}

// ---------------------------------------------------------------------------
// calib gen / library gen

#[derive(Args)]
pub struct CalibGenArgs {
    #[command(flatten)]
    profile: ProfileArg,
    /// Working distances in cm with a stored calibration.
    #[arg(long, value_delimiter = ',', default_values_t = DEFAULT_DISTANCES_CM)]
    distances: Vec<f64>,
    #[arg(long)]
    out: PathBuf,
}

pub fn calib_gen(a: CalibGenArgs, json: bool) -> Result<()> {
    let profile = CameraProfile::by_name(a.profile.profile.as_str())?;
    let calib = synthesize_default_calibration(&profile, &a.distances)?;
    save_calibration(&calib, &a.out)?;
    let report = serde_json::json!({
        "calibration": a.out,
        "profile": profile.name,
        "lenses": calib.profile.lens_count,
        "distances_cm": a.distances,
    });
    print_report(json, &report, || {
        format!(
            "wrote {} calibration ({} lenses, distances {:?} cm) to {}\n",
            profile.name,
            calib.profile.lens_count,
            a.distances,
            a.out.display()
        )
    })
}

#[derive(Args)]
pub struct LibraryGenArgs {
    #[arg(long, default_value_t = DEFAULT_LEVELS)]
    levels: usize,
    #[arg(long)]
    out: PathBuf,
}

pub fn library_gen(a: LibraryGenArgs, json: bool) -> Result<()> {
    let lib = build_synthetic_library(a.levels, &fine_grid())?;
    save_library(&lib, &a.out)?;
    let report = serde_json::json!({
        "library": a.out,
        "levels": lib.len(),
        "bands": lib.wavelengths_nm.len(),
    });
    print_report(json, &report, || {
        format!("wrote {}-level library to {}\n", lib.len(), a.out.display())
    })
}
