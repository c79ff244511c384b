//! Binary cube and raw-frame formats, white-reference export, session
//! recordings with replay, and PNG export.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::calib::{load_calibration, save_calibration, CalibrationSet};
use crate::cube::{CubeStage, RawSensorFrame, SpectralCube};
use crate::error::{Error, Result};
use crate::oxy::{load_library, save_library, OverlayImage, ReferenceLibrary, RgbImage};
use crate::pipeline::{Command, FrameSource, Pipeline, PipelineConfig, ProcessedFrame};
use crate::reflect::{RegionOfInterest, WhiteReferenceCube};
use crate::sim::{load_phantom, save_phantom, ScenePhantom};

pub const CUBE_MAGIC: [u8; 4] = *b"HSC1";
pub const FRAME_MAGIC: [u8; 4] = *b"HSR1";
pub const CUBE_VERSION: u16 = 1;
pub const FRAME_VERSION: u16 = 1;
pub const RECORDING_VERSION: u16 = 1;

const CUBE_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 4 + 1;
const FRAME_HEADER_LEN: usize = 4 + 2 + 4 + 4 + 2 + 2 + 8 + 4;

// ---------------------------------------------------------------------------
// Little-endian helpers

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.buf[self.pos..self.pos + N].try_into().expect("length checked");
        self.pos += N;
        out
    }

    fn u8(&mut self) -> u8 {
        self.take::<1>()[0]
    }

    fn u16(&mut self) -> u16 {
        u16::from_le_bytes(self.take())
    }

    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }

    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }

    fn f32(&mut self) -> f32 {
        f32::from_le_bytes(self.take())
    }
}

fn check_magic(buf: &[u8], expected: [u8; 4]) -> Result<()> {
    if buf.len() < 4 {
        return Err(Error::LengthMismatch {
            expected: 4,
            actual: buf.len(),
        });
    }
    let found: [u8; 4] = buf[..4].try_into().expect("length checked");
    if found != expected {
        return Err(Error::BadMagic { expected, found });
    }
    Ok(())
}

fn check_version(found: u16, supported: u16) -> Result<()> {
    if found != supported {
        return Err(Error::UnsupportedVersion { found, supported });
    }
    Ok(())
}

fn dim_u32(v: usize, field: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::invalid(field, format!("{v} exceeds u32")))
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn malformed(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Malformed {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

// ---------------------------------------------------------------------------
// Cubes

/// Serialize a cube. Wavelengths are stored as f32 (NaN for lens-indexed
/// stages), so spectral grids round-trip exactly when f32-representable.
pub fn encode_cube(cube: &SpectralCube) -> Result<Vec<u8>> {
    cube.validate()?;
    let planes = cube.plane_count();
    if cube.stage.is_lens_indexed() && cube.lenses.iter().enumerate().any(|(i, &l)| i != l) {
        return Err(Error::invalid("cube.lenses", "only consecutive lens planes can be stored"));
    }
    let plane = cube.plane_len();
    let mask_bytes = plane.div_ceil(8);
    let mut out = Vec::with_capacity(CUBE_HEADER_LEN + planes * (4 + plane * 4 + mask_bytes));
    out.extend_from_slice(&CUBE_MAGIC);
    out.extend_from_slice(&CUBE_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(cube.width, "cube.width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(cube.height, "cube.height")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(planes, "cube.planes")?.to_le_bytes());
    out.push(cube.stage.tag());
    for p in 0..planes {
        let wl = if cube.stage.is_lens_indexed() { f32::NAN } else { cube.wavelengths_nm[p] as f32 };
        out.extend_from_slice(&wl.to_le_bytes());
    }
    for v in &cube.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for p in 0..planes {
        let mut bits = vec![0u8; mask_bytes];
        for (i, &ok) in cube.plane_valid(p).iter().enumerate() {
            if ok {
                bits[i / 8] |= 1 << (i % 8);
            }
        }
        out.extend_from_slice(&bits);
    }
    Ok(out)
}

pub fn decode_cube(buf: &[u8]) -> Result<SpectralCube> {
    check_magic(buf, CUBE_MAGIC)?;
    if buf.len() < CUBE_HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: CUBE_HEADER_LEN,
            actual: buf.len(),
        });
    }
    let mut r = Reader::new(&buf[4..]);
    check_version(r.u16(), CUBE_VERSION)?;
    let width = r.u32() as usize;
    let height = r.u32() as usize;
    let planes = r.u32() as usize;
    let tag = r.u8();
    let stage = CubeStage::from_tag(tag).ok_or_else(|| Error::invalid("cube.stage", format!("unknown tag {tag}")))?;
    let plane = width
        .checked_mul(height)
        .ok_or_else(|| Error::invalid("cube", "dimensions overflow"))?;
    let expected = planes
        .checked_mul(4 + plane * 4 + plane.div_ceil(8))
        .and_then(|b| b.checked_add(CUBE_HEADER_LEN))
        .ok_or_else(|| Error::invalid("cube", "dimensions overflow"))?;
    if buf.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: buf.len(),
        });
    }
    let wavelengths: Vec<f32> = (0..planes).map(|_| r.f32()).collect();
    let mut cube = if stage.is_lens_indexed() {
        SpectralCube::lens_indexed(width, height, stage, planes)
    } else {
        if let Some(i) = wavelengths.iter().position(|w| !w.is_finite()) {
            return Err(Error::invalid(format!("cube.wavelengths_nm[{i}]"), "not finite"));
        }
        SpectralCube {
            width,
            height,
            stage,
            lenses: Vec::new(),
            wavelengths_nm: wavelengths.iter().map(|&w| f64::from(w)).collect(),
            values: vec![0.0; plane * planes],
            valid: vec![false; plane * planes],
        }
    };
    for v in cube.values.iter_mut() {
        *v = r.f32();
    }
    let mask_bytes = plane.div_ceil(8);
    for p in 0..planes {
        let bits = &r.buf[r.pos..r.pos + mask_bytes];
        r.pos += mask_bytes;
        for (i, m) in cube.valid[p * plane..(p + 1) * plane].iter_mut().enumerate() {
            *m = bits[i / 8] >> (i % 8) & 1 == 1;
        }
    }
    Ok(cube)
}

pub fn write_cube(cube: &SpectralCube, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_cube(cube)?)
}

pub fn read_cube(path: impl AsRef<Path>) -> Result<SpectralCube> {
    decode_cube(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// Raw frames

pub fn encode_frame(frame: &RawSensorFrame) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(FRAME_HEADER_LEN + frame.pixels.len() * 2);
    out.extend_from_slice(&FRAME_MAGIC);
    out.extend_from_slice(&FRAME_VERSION.to_le_bytes());
    out.extend_from_slice(&dim_u32(frame.width, "frame.width")?.to_le_bytes());
    out.extend_from_slice(&dim_u32(frame.height, "frame.height")?.to_le_bytes());
    out.extend_from_slice(&u16::from(frame.bit_depth).to_le_bytes());
    out.extend_from_slice(&0u16.to_le_bytes());
    out.extend_from_slice(&frame.frame_id.to_le_bytes());
    out.extend_from_slice(&frame.integration_time_ms.to_le_bytes());
    for p in &frame.pixels {
        out.extend_from_slice(&p.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_frame(buf: &[u8]) -> Result<RawSensorFrame> {
    check_magic(buf, FRAME_MAGIC)?;
    if buf.len() < FRAME_HEADER_LEN {
        return Err(Error::LengthMismatch {
            expected: FRAME_HEADER_LEN,
            actual: buf.len(),
        });
    }
    let mut r = Reader::new(&buf[4..]);
    check_version(r.u16(), FRAME_VERSION)?;
    let width = r.u32() as usize;
    let height = r.u32() as usize;
    let bit_depth = r.u16();
    let _reserved = r.u16();
    let frame_id = r.u64();
    let integration = r.f32();
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(2))
        .and_then(|n| n.checked_add(FRAME_HEADER_LEN))
        .ok_or_else(|| Error::invalid("frame", "dimensions overflow"))?;
    if buf.len() != expected {
        return Err(Error::LengthMismatch {
            expected,
            actual: buf.len(),
        });
    }
    let bit_depth = u8::try_from(bit_depth).map_err(|_| Error::invalid("frame.bit_depth", format!("{bit_depth}")))?;
    let pixels = buf[FRAME_HEADER_LEN..]
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]))
        .collect();
    RawSensorFrame::new(width, height, bit_depth, pixels, integration, frame_id)
}

pub fn write_frame(frame: &RawSensorFrame, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_frame(frame)?)
}

pub fn read_frame(path: impl AsRef<Path>) -> Result<RawSensorFrame> {
    decode_frame(&read_file(path.as_ref())?)
}

// ---------------------------------------------------------------------------
// White reference

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct WhiteSidecar {
    roi: RegionOfInterest,
    gauze_reflectance_factor: f64,
    frame_id: u64,
    /// File name of the optional per-pixel flat field, next to the cube.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spatial: Option<String>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Write the reference spectrum as a 1x1 uniform-stage cube plus a JSON
/// sidecar (same stem, `.json`) with roi, factor and frame id.
pub fn write_white_reference(white: &WhiteReferenceCube, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cube = SpectralCube {
        width: 1,
        height: 1,
        stage: CubeStage::Uniform,
        lenses: Vec::new(),
        wavelengths_nm: white.wavelengths_nm.clone(),
        values: white.spectrum.clone(),
        valid: white.band_valid.clone(),
    };
    write_cube(&cube, path)?;
    let spatial = match &white.spatial {
        Some(s) => {
            let name = format!(
                "{}.spatial.hsc",
                path.file_stem().and_then(|s| s.to_str()).unwrap_or("white")
            );
            write_cube(s, path.with_file_name(&name))?;
            Some(name)
        }
        None => None,
    };
    let side = WhiteSidecar {
        roi: white.roi,
        gauze_reflectance_factor: white.gauze_reflectance_factor,
        frame_id: white.frame_id,
        spatial,
    };
    let text = serde_json::to_string_pretty(&side).expect("sidecar serializes");
    write_file(&sidecar_path(path), text.as_bytes())
}

pub fn read_white_reference(path: impl AsRef<Path>) -> Result<WhiteReferenceCube> {
    let path = path.as_ref();
    let cube = read_cube(path)?;
    if cube.stage != CubeStage::Uniform || cube.plane_len() != 1 {
        return Err(malformed(path, "white reference must be a 1x1 uniform cube"));
    }
    let side_path = sidecar_path(path);
    let text = fs::read_to_string(&side_path).map_err(|e| Error::io(&side_path, e))?;
    let side: WhiteSidecar = serde_json::from_str(&text).map_err(|e| malformed(&side_path, e))?;
    let spatial = match &side.spatial {
        Some(name) => Some(read_cube(path.with_file_name(name))?),
        None => None,
    };
    Ok(WhiteReferenceCube {
        wavelengths_nm: cube.wavelengths_nm.clone(),
        spectrum: cube.values,
        band_valid: cube.valid,
        spatial,
        gauze_reflectance_factor: side.gauze_reflectance_factor,
        roi: side.roi,
        frame_id: side.frame_id,
        acquired_at: std::time::Instant::now(),
    })
}

// ---------------------------------------------------------------------------
// Recordings

pub const MANIFEST_NAME: &str = "manifest.json";
pub const CALIBRATION_NAME: &str = "calibration.calib";
pub const LIBRARY_NAME: &str = "library.json";
pub const SCENARIO_NAME: &str = "scenario.json";
pub const FRAMES_DIR: &str = "frames";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameEntry {
    pub frame_id: u64,
    /// Path relative to the recording directory.
    pub file: String,
}

/// A command applied at the boundary before `frame_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommandEvent {
    pub frame_id: u64,
    pub command: Command,
}

/// Configuration in force for frames `from_frame..=to_frame`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub from_frame: u64,
    pub to_frame: u64,
    pub config: PipelineConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingManifest {
    pub version: u16,
    pub profile: String,
    pub calibration: String,
    pub library: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub initial_config: PipelineConfig,
    pub config_snapshots: Vec<ConfigSnapshot>,
    pub events: Vec<CommandEvent>,
    pub frames: Vec<FrameEntry>,
}

impl RecordingManifest {
    pub fn validate(&self) -> Result<()> {
        if self.version != RECORDING_VERSION {
            return Err(Error::UnsupportedVersion {
                found: self.version,
                supported: RECORDING_VERSION,
            });
        }
        for (i, w) in self.frames.windows(2).enumerate() {
            if w[1].frame_id <= w[0].frame_id {
                return Err(Error::invalid(format!("frames[{}]", i + 1), "frame ids must strictly increase"));
            }
        }
        for (i, w) in self.events.windows(2).enumerate() {
            if w[1].frame_id < w[0].frame_id {
                return Err(Error::invalid(format!("events[{}]", i + 1), "events out of frame order"));
            }
        }
        let ids: Vec<u64> = self.frames.iter().map(|f| f.frame_id).collect();
        let mut next = ids.first().copied();
        for (i, s) in self.config_snapshots.iter().enumerate() {
            let field = format!("config_snapshots[{i}]");
            if s.from_frame > s.to_frame || ids.binary_search(&s.from_frame).is_err() || ids.binary_search(&s.to_frame).is_err() {
                return Err(Error::invalid(field, "range does not match recorded frames"));
            }
            if Some(s.from_frame) != next {
                return Err(Error::invalid(field, "snapshots must cover the frames contiguously"));
            }
            next = ids.iter().copied().find(|&id| id > s.to_frame);
        }
        if !self.frames.is_empty() && next.is_some() {
            return Err(Error::invalid("config_snapshots", "not every frame is covered"));
        }
        Ok(())
    }

    pub fn snapshot_for(&self, frame_id: u64) -> Option<&ConfigSnapshot> {
        self.config_snapshots
            .iter()
            .find(|s| (s.from_frame..=s.to_frame).contains(&frame_id))
    }
}

/// Static inputs of a recording.
pub struct RecordingSetup<'a> {
    pub calibration: &'a CalibrationSet,
    pub library: &'a ReferenceLibrary,
    pub config: &'a PipelineConfig,
    pub scenario: Option<&'a ScenePhantom>,
    pub seed: Option<u64>,
}

/// Single writer appending frames and commands to a recording directory.
pub struct RecordingWriter {
    dir: PathBuf,
    manifest: RecordingManifest,
    calib: CalibrationSet,
    config: PipelineConfig,
    /// Commands accepted since the last frame.
    pending: Vec<Command>,
}

impl RecordingWriter {
    pub fn create(dir: impl AsRef<Path>, setup: RecordingSetup<'_>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        setup.config.validate(&setup.calibration.profile)?;
        fs::create_dir_all(dir.join(FRAMES_DIR)).map_err(|e| Error::io(&dir, e))?;
        save_calibration(setup.calibration, dir.join(CALIBRATION_NAME))?;
        save_library(setup.library, dir.join(LIBRARY_NAME))?;
        if let Some(s) = setup.scenario {
            save_phantom(s, dir.join(SCENARIO_NAME))?;
        }
        let manifest = RecordingManifest {
            version: RECORDING_VERSION,
            profile: setup.calibration.profile.name.clone(),
            calibration: CALIBRATION_NAME.into(),
            library: LIBRARY_NAME.into(),
            scenario: setup.scenario.map(|_| SCENARIO_NAME.into()),
            seed: setup.seed,
            initial_config: setup.config.clone(),
            config_snapshots: Vec::new(),
            events: Vec::new(),
            frames: Vec::new(),
        };
        Ok(Self {
            dir,
            manifest,
            calib: setup.calibration.clone(),
            config: setup.config.clone(),
            pending: Vec::new(),
        })
    }

    /// Queue a command for the next frame boundary. Invalid commands are
    /// rejected and not recorded.
    pub fn command(&mut self, cmd: Command) -> Result<()> {
        let mut probe = self.config.clone();
        for c in &self.pending {
            probe.apply_command(c, &self.calib.profile)?;
        }
        probe.apply_command(&cmd, &self.calib.profile)?;
        self.pending.push(cmd);
        Ok(())
    }

    pub fn append(&mut self, frame: &RawSensorFrame) -> Result<()> {
        if let Some(last) = self.manifest.frames.last() {
            if frame.frame_id <= last.frame_id {
                return Err(Error::invalid(
                    "frame_id",
                    format!("{} does not follow {}", frame.frame_id, last.frame_id),
                ));
            }
        }
        let changed = !self.pending.is_empty();
        for cmd in self.pending.drain(..) {
            self.config.apply_command(&cmd, &self.calib.profile)?;
            self.manifest.events.push(CommandEvent {
                frame_id: frame.frame_id,
                command: cmd,
            });
        }
        let file = format!("{FRAMES_DIR}/{:08}.hsr", frame.frame_id);
        write_frame(frame, self.dir.join(&file))?;
        let snaps = &mut self.manifest.config_snapshots;
        match snaps.last_mut() {
            Some(s) if !changed && s.config == self.config => s.to_frame = frame.frame_id,
            _ => snaps.push(ConfigSnapshot {
                from_frame: frame.frame_id,
                to_frame: frame.frame_id,
                config: self.config.clone(),
            }),
        }
        self.manifest.frames.push(FrameEntry {
            frame_id: frame.frame_id,
            file,
        });
        Ok(())
    }

    /// Write the manifest; commands never followed by a frame are discarded.
    pub fn finish(self) -> Result<RecordingManifest> {
        let path = self.dir.join(MANIFEST_NAME);
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        write_file(&path, text.as_bytes())?;
        Ok(self.manifest)
    }
}

/// A recording opened for reading.
#[derive(Debug, Clone)]
pub struct Recording {
    pub dir: PathBuf,
    pub manifest: RecordingManifest,
}

impl Recording {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: RecordingManifest = serde_json::from_str(&text).map_err(|e| malformed(&path, e))?;
        manifest.validate()?;
        Ok(Self { dir, manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.frames.is_empty()
    }

    pub fn calibration(&self) -> Result<CalibrationSet> {
        load_calibration(self.dir.join(&self.manifest.calibration))
    }

    pub fn library(&self) -> Result<ReferenceLibrary> {
        load_library(self.dir.join(&self.manifest.library))
    }

    pub fn scenario(&self) -> Result<Option<ScenePhantom>> {
        self.manifest
            .scenario
            .as_ref()
            .map(|s| load_phantom(self.dir.join(s)))
            .transpose()
    }

    pub fn frame(&self, index: usize) -> Result<RawSensorFrame> {
        let entry = &self.manifest.frames[index];
        let frame = read_frame(self.dir.join(&entry.file))?;
        if frame.frame_id != entry.frame_id {
            return Err(Error::invalid(
                format!("frames[{index}]"),
                format!("file holds frame {} but manifest says {}", frame.frame_id, entry.frame_id),
            ));
        }
        Ok(frame)
    }

    pub fn events_at(&self, frame_id: u64) -> impl Iterator<Item = &Command> {
        self.manifest
            .events
            .iter()
            .filter(move |e| e.frame_id == frame_id)
            .map(|e| &e.command)
    }

    /// Pipeline configured as at the start of the recording.
    pub fn pipeline(&self) -> Result<Pipeline> {
        let calib = self.calibration()?;
        if calib.profile.name != self.manifest.profile {
            return Err(Error::invalid(
                "manifest.profile",
                format!("{} but calibration is for {}", self.manifest.profile, calib.profile.name),
            ));
        }
        Pipeline::new(
            self.manifest.initial_config.clone(),
            std::sync::Arc::new(calib),
            std::sync::Arc::new(self.library()?),
        )
    }

    /// Process every frame, applying recorded commands at their frame
    /// boundaries. The result depends only on the recording.
    pub fn replay(&self, mut each: impl FnMut(ProcessedFrame) -> Result<()>) -> Result<()> {
        let mut pipeline = self.pipeline()?;
        for i in 0..self.len() {
            let frame = self.frame(i)?;
            for cmd in self.events_at(frame.frame_id) {
                pipeline.apply(cmd)?;
            }
            if let Some(s) = self.manifest.snapshot_for(frame.frame_id) {
                if &s.config != pipeline.config() {
                    return Err(Error::invalid(
                        format!("config snapshot at frame {}", frame.frame_id),
                        "replayed configuration diverges from the recording",
                    ));
                }
            }
            each(pipeline.process_frame(&frame)?)?;
        }
        Ok(())
    }
}

/// Streams a recording's frames, optionally looping.
pub struct RecordingSource {
    recording: Recording,
    pos: usize,
    cycle: bool,
}

impl RecordingSource {
    pub fn new(recording: Recording, cycle: bool) -> Self {
        Self {
            recording,
            pos: 0,
            cycle,
        }
    }
}

impl FrameSource for RecordingSource {
    fn next_frame(&mut self) -> Option<Result<RawSensorFrame>> {
        let n = self.recording.len();
        if n == 0 || (!self.cycle && self.pos >= n) {
            return None;
        }
        let f = self.recording.frame(self.pos % n);
        self.pos += 1;
        Some(f)
    }

    fn name(&self) -> String {
        format!("recording:{}", self.recording.dir.display())
    }
}

// ---------------------------------------------------------------------------
// PNG

/// 8-bit raster that can be written as PNG.
pub trait Raster {
    fn dimensions(&self) -> (usize, usize);
    fn color_type(&self) -> image::ExtendedColorType;
    fn bytes(&self) -> &[u8];
}

impl Raster for RgbImage {
    fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn color_type(&self) -> image::ExtendedColorType {
        image::ExtendedColorType::Rgb8
    }

    fn bytes(&self) -> &[u8] {
        &self.data
    }
}

impl Raster for OverlayImage {
    fn dimensions(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    fn color_type(&self) -> image::ExtendedColorType {
        image::ExtendedColorType::Rgba8
    }

    fn bytes(&self) -> &[u8] {
        &self.data
    }
}

pub fn encode_png(raster: &impl Raster) -> Result<Vec<u8>> {
    use image::ImageEncoder;
    let (w, h) = raster.dimensions();
    let mut out = Vec::new();
    image::codecs::png::PngEncoder::new(&mut out)
        .write_image(raster.bytes(), dim_u32(w, "width")?, dim_u32(h, "height")?, raster.color_type())
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(out)
}

pub fn export_png(raster: &impl Raster, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_png(raster)?)
}
