//! Forward camera model: phantom scenes rendered through illuminant,
//! calibration geometry, dispersion and quantization into raw frames.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::{CalibrationSet, CameraProfile};
use crate::cube::RawSensorFrame;
use crate::error::{Error, Result};
use crate::oxy::{ReferenceLibrary, So2Map, TissueMask};

/// Emission range of the default surgical light.
pub const SURGICAL_LIGHT_RANGE_NM: (f64, f64) = (450.0, 700.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IlluminantShape {
    /// Broad visible spectrum peaking near 575 nm.
    SurgicalLight,
    Flat,
    Table { wavelengths_nm: Vec<f64>, power: Vec<f64> },
}

/// Spectral power in DN per millisecond on a unit reflector; zero outside
/// `range_nm`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Illuminant {
    pub shape: IlluminantShape,
    pub range_nm: (f64, f64),
    pub intensity: f64,
}

impl Illuminant {
    pub fn surgical_light(intensity: f64) -> Self {
        Self {
            shape: IlluminantShape::SurgicalLight,
            range_nm: SURGICAL_LIGHT_RANGE_NM,
            intensity,
        }
    }

    pub fn flat(range_nm: (f64, f64), intensity: f64) -> Self {
        Self {
            shape: IlluminantShape::Flat,
            range_nm,
            intensity,
        }
    }

    /// Intensity giving roughly 1000 DN on a white reflector at the profile's
    /// default exposure.
    pub fn for_profile(profile: &CameraProfile) -> Self {
        Self::surgical_light(1000.0 / default_integration_time_ms(profile))
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            intensity: self.intensity * alpha,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.intensity.is_finite() && self.intensity >= 0.0) {
            return Err(Error::invalid("illuminant.intensity", "must be finite and non-negative"));
        }
        if !(self.range_nm.0 < self.range_nm.1) {
            return Err(Error::invalid("illuminant.range_nm", "empty range"));
        }
        if let IlluminantShape::Table { wavelengths_nm, power } = &self.shape {
            if wavelengths_nm.len() != power.len() || wavelengths_nm.len() < 2 {
                return Err(Error::invalid("illuminant.power", "table needs matching wavelengths and power"));
            }
            if wavelengths_nm.windows(2).any(|w| w[1] <= w[0]) {
                return Err(Error::invalid("illuminant.wavelengths_nm", "must strictly increase"));
            }
            if power.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::invalid("illuminant.power", "must be finite and non-negative"));
            }
        }
        Ok(())
    }

    pub fn power_at(&self, wavelength_nm: f64) -> f64 {
        if wavelength_nm < self.range_nm.0 || wavelength_nm > self.range_nm.1 {
            return 0.0;
        }
        let rel = match &self.shape {
            IlluminantShape::SurgicalLight => {
                0.75 + 0.25 * (-0.5 * ((wavelength_nm - 575.0) / 90.0).powi(2)).exp()
            }
            IlluminantShape::Flat => 1.0,
            IlluminantShape::Table { wavelengths_nm, power } => table_lookup(wavelengths_nm, power, wavelength_nm),
        };
        self.intensity * rel
    }
}

/// Default integration time for the synthetic exposure.
pub fn default_integration_time_ms(profile: &CameraProfile) -> f64 {
    if profile.scene_pixels() > 100_000 {
        2.0
    } else {
        5.0
    }
}

fn table_lookup(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[xs.len() - 1] {
        return ys[ys.len() - 1];
    }
    let k = xs.partition_point(|&a| a <= x) - 1;
    let t = (x - xs[k]) / (xs[k + 1] - xs[k]);
    ys[k] + (ys[k + 1] - ys[k]) * t
}

/// Shot noise with variance `shot_noise_scale * signal` plus Gaussian read
/// noise. Seeded per frame, so identical seeds give identical frames.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub shot_noise_scale: f64,
    pub read_noise_sigma_dn: f64,
    pub seed: u64,
}

impl NoiseModel {
    pub fn none() -> Self {
        Self {
            shot_noise_scale: 0.0,
            read_noise_sigma_dn: 0.0,
            seed: 0,
        }
    }

    pub fn is_noiseless(&self) -> bool {
        self.shot_noise_scale == 0.0 && self.read_noise_sigma_dn == 0.0
    }

    fn rng(&self, frame_id: u64, lens: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ frame_id.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        rng.set_stream(lens as u64);
        rng
    }
}

// ---------------------------------------------------------------------------
// Phantoms

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum So2Field {
    Constant { so2: f64 },
    /// Linear ramp along x; with `levels` set, snapped to the nearest of
    /// that many uniform levels.
    Ramp { from: f64, to: f64, levels: Option<usize> },
    /// Vertical boundary at `boundary_x + drift_px_per_frame * frame`;
    /// columns left of it take `left`.
    Split { boundary_x: f64, drift_px_per_frame: f64, left: f64, right: f64 },
}

impl So2Field {
    pub fn boundary_at(&self, frame_index: u64) -> Option<f64> {
        match self {
            So2Field::Split {
                boundary_x,
                drift_px_per_frame,
                ..
            } => Some(boundary_x + drift_px_per_frame * frame_index as f64),
            _ => None,
        }
    }

    fn value(&self, x: f64, width: usize, frame_index: u64) -> f64 {
        match self {
            So2Field::Constant { so2 } => *so2,
            So2Field::Ramp { from, to, levels } => {
                let t = if width > 1 { x / (width - 1) as f64 } else { 0.0 };
                let v = from + (to - from) * t.clamp(0.0, 1.0);
                match levels {
                    Some(n) if *n >= 2 => {
                        let step = (n - 1) as f64;
                        (v * step).round() / step
                    }
                    _ => v,
                }
            }
            So2Field::Split { left, right, .. } => {
                if x < self.boundary_at(frame_index).unwrap() {
                    *left
                } else {
                    *right
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Material {
    Tissue { so2: So2Field },
    /// Spectrally flat reflector (gauze, gray drapes, tables).
    Flat { reflectance: f64 },
    Spectrum { wavelengths_nm: Vec<f64>, reflectance: Vec<f64> },
}

impl Material {
    /// Blue nitrile glove: bright in the blue, dark in the red.
    pub fn blue_glove() -> Self {
        let wavelengths_nm: Vec<f64> = (0..=80).map(|i| 300.0 + 10.0 * i as f64).collect();
        let reflectance = wavelengths_nm
            .iter()
            .map(|&l| 0.06 + 0.6 * (-0.5 * ((l - 465.0) / 40.0).powi(2)).exp())
            .collect();
        Material::Spectrum {
            wavelengths_nm,
            reflectance,
        }
    }

    fn validate(&self, field: &str) -> Result<()> {
        match self {
            Material::Tissue { so2 } => {
                let vals: Vec<f64> = match so2 {
                    So2Field::Constant { so2 } => vec![*so2],
                    So2Field::Ramp { from, to, .. } => vec![*from, *to],
                    So2Field::Split { left, right, .. } => vec![*left, *right],
                };
                if vals.iter().any(|v| !(0.0..=1.0).contains(v)) {
                    return Err(Error::invalid(format!("{field}.so2"), "so2 must lie in [0, 1]"));
                }
            }
            Material::Flat { reflectance } => {
                if !(reflectance.is_finite() && *reflectance >= 0.0) {
                    return Err(Error::invalid(format!("{field}.reflectance"), "must be non-negative"));
                }
            }
            Material::Spectrum {
                wavelengths_nm,
                reflectance,
            } => {
                if wavelengths_nm.len() < 2 || wavelengths_nm.len() != reflectance.len() {
                    return Err(Error::invalid(format!("{field}.reflectance"), "table sizes differ"));
                }
                if wavelengths_nm.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::invalid(format!("{field}.wavelengths_nm"), "must strictly increase"));
                }
                if reflectance.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
                    return Err(Error::invalid(format!("{field}.reflectance"), "must be non-negative"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && y >= self.y && x < self.x + self.width && y < self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub rect: Rect,
    pub material: Material,
}

/// Scene description with known ground truth. Regions paint over the
/// background in order; scene pixels align with cube pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenePhantom {
    pub name: String,
    pub width: usize,
    pub height: usize,
    pub background: Material,
    pub regions: Vec<Region>,
    /// White gauze patch for white-reference extraction.
    pub gauze: Option<Rect>,
}

/// Per-pixel truth for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub width: usize,
    pub height: usize,
    pub so2: Vec<Option<f64>>,
}

impl GroundTruth {
    pub fn is_tissue(&self, x: usize, y: usize) -> bool {
        self.so2[y * self.width + x].is_some()
    }

    pub fn tissue_mask(&self) -> Vec<bool> {
        self.so2.iter().map(Option::is_some).collect()
    }
}

pub const PHANTOM_NAMES: [&str; 3] = ["wedge", "resection", "props"];
pub const GAUZE_REFLECTANCE: f64 = 1.0;
pub const TABLE_REFLECTANCE: f64 = 0.35;

fn gauze_rect(width: usize, height: usize) -> Rect {
    let s = (width.min(height) / 8).max(4);
    Rect {
        x: 2,
        y: 2,
        width: s,
        height: s,
    }
}

impl ScenePhantom {
    pub fn by_name(name: &str, width: usize, height: usize) -> Result<Self> {
        match name {
            "wedge" => Ok(Self::wedge(width, height, 36)),
            "resection" => Ok(Self::resection(width, height, 0.5)),
            "props" => Ok(Self::props(width, height)),
            _ => Err(Error::Unknown {
                kind: "phantom",
                name: name.to_string(),
            }),
        }
    }

    /// Tissue whose so2 rises from 0 at the left edge to 1 at the right,
    /// snapped to `levels` uniform levels.
    pub fn wedge(width: usize, height: usize, levels: usize) -> Self {
        let g = gauze_rect(width, height);
        Self {
            name: "wedge".into(),
            width,
            height,
            background: Material::Tissue {
                so2: So2Field::Ramp {
                    from: 0.0,
                    to: 1.0,
                    levels: Some(levels),
                },
            },
            regions: vec![Region {
                rect: g,
                material: Material::Flat {
                    reflectance: GAUZE_REFLECTANCE,
                },
            }],
            gauze: Some(g),
        }
    }

    /// Perfused tissue on the left, devascularized on the right, the
    /// boundary drifting right by `drift_px_per_frame`.
    pub fn resection(width: usize, height: usize, drift_px_per_frame: f64) -> Self {
        let g = gauze_rect(width, height);
        Self {
            name: "resection".into(),
            width,
            height,
            background: Material::Tissue {
                so2: So2Field::Split {
                    boundary_x: (0.45 * width as f64).round() + 0.5,
                    drift_px_per_frame,
                    left: 28.0 / 35.0,
                    right: 10.0 / 35.0,
                },
            },
            regions: vec![Region {
                rect: g,
                material: Material::Flat {
                    reflectance: GAUZE_REFLECTANCE,
                },
            }],
            gauze: Some(g),
        }
    }

    /// Tissue patch on a gray table next to a glove and the gauze.
    pub fn props(width: usize, height: usize) -> Self {
        let g = gauze_rect(width, height);
        let tissue = Rect {
            x: width / 3,
            y: height / 4,
            width: width / 2,
            height: height / 2,
        };
        let glove = Rect {
            x: width / 12,
            y: height / 2,
            width: width / 5,
            height: height / 3,
        };
        Self {
            name: "props".into(),
            width,
            height,
            background: Material::Flat {
                reflectance: TABLE_REFLECTANCE,
            },
            regions: vec![
                Region {
                    rect: tissue,
                    material: Material::Tissue {
                        so2: So2Field::Constant { so2: 25.0 / 35.0 },
                    },
                },
                Region {
                    rect: glove,
                    material: Material::blue_glove(),
                },
                Region {
                    rect: g,
                    material: Material::Flat {
                        reflectance: GAUZE_REFLECTANCE,
                    },
                },
            ],
            gauze: Some(g),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("phantom", "empty scene"));
        }
        self.background.validate("background")?;
        for (i, r) in self.regions.iter().enumerate() {
            r.material.validate(&format!("regions[{i}]"))?;
            if r.rect.x + r.rect.width > self.width || r.rect.y + r.rect.height > self.height {
                return Err(Error::invalid(format!("regions[{i}].rect"), "outside the scene"));
            }
        }
        if let Some(g) = self.gauze {
            if g.x + g.width > self.width || g.y + g.height > self.height {
                return Err(Error::invalid("gauze", "outside the scene"));
            }
        }
        Ok(())
    }

    fn material_at(&self, x: usize, y: usize) -> &Material {
        self.regions
            .iter()
            .rev()
            .find(|r| r.rect.contains(x, y))
            .map_or(&self.background, |r| &r.material)
    }

    pub fn ground_truth(&self, frame_index: u64) -> GroundTruth {
        let mut so2 = Vec::with_capacity(self.width * self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                so2.push(match self.material_at(x, y) {
                    Material::Tissue { so2 } => Some(so2.value(x as f64, self.width, frame_index)),
                    _ => None,
                });
            }
        }
        GroundTruth {
            width: self.width,
            height: self.height,
            so2,
        }
    }

    /// Ground-truth boundary column for split fields: first column on the
    /// right-hand side.
    pub fn boundary_column(&self, frame_index: u64) -> Option<usize> {
        let field = match &self.background {
            Material::Tissue { so2 } => so2,
            _ => return None,
        };
        field.boundary_at(frame_index).map(|b| b.ceil().max(0.0) as usize)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("phantom serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let p: Self = serde_json::from_str(text).map_err(|e| Error::Malformed {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        p.validate()?;
        Ok(p)
    }
}

/// Classification accuracy against simulator truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoundTripScore {
    pub tissue_pixels: usize,
    /// Tissue pixels assigned the library level nearest their true value.
    pub correct: usize,
    /// Non-tissue pixels the tissue mask accepted.
    pub false_tissue: usize,
}

impl RoundTripScore {
    pub fn accuracy(&self) -> f64 {
        if self.tissue_pixels == 0 {
            1.0
        } else {
            self.correct as f64 / self.tissue_pixels as f64
        }
    }
}

/// Score a classification against ground truth. `mask` marks pixels the
/// pipeline treated as tissue; only those count as correct.
pub fn score_so2(map: &So2Map, mask: &TissueMask, truth: &GroundTruth, lib: &ReferenceLibrary) -> RoundTripScore {
    let mut score = RoundTripScore {
        tissue_pixels: 0,
        correct: 0,
        false_tissue: 0,
    };
    for (i, t) in truth.so2.iter().enumerate() {
        match t {
            Some(v) => {
                score.tissue_pixels += 1;
                if mask.mask[i] && usize::from(map.index[i]) == lib.nearest_level(*v) {
                    score.correct += 1;
                }
            }
            None => score.false_tissue += usize::from(mask.mask[i]),
        }
    }
    score
}

/// Locate a vertical left/right split in a classified map: per row, the
/// column that best separates levels nearer `left` from levels nearer
/// `right`; the median over rows. Returns the first right-hand column.
pub fn estimate_split_boundary(map: &So2Map, mask: &TissueMask, left: f64, right: f64) -> Option<f64> {
    let w = map.width;
    let mut per_row = Vec::with_capacity(map.height);
    for y in 0..map.height {
        // errors(b) = right-labelled pixels before b + left-labelled from b on
        let mut side: Vec<Option<bool>> = Vec::with_capacity(w);
        for x in 0..w {
            let i = y * w + x;
            side.push(map.get(x, y).filter(|_| mask.mask[i]).map(|v| (v - right).abs() < (v - left).abs()));
        }
        let lefts_total = side.iter().filter(|s| **s == Some(false)).count();
        if lefts_total + side.iter().filter(|s| **s == Some(true)).count() == 0 {
            continue;
        }
        let (mut rights_before, mut lefts_before) = (0usize, 0usize);
        let mut best = (usize::MAX, 0usize);
        for b in 0..=w {
            let errors = rights_before + (lefts_total - lefts_before);
            if errors < best.0 {
                best = (errors, b);
            }
            if b < w {
                match side[b] {
                    Some(true) => rights_before += 1,
                    Some(false) => lefts_before += 1,
                    None => {}
                }
            }
        }
        per_row.push(best.1 as f64);
    }
    if per_row.is_empty() {
        return None;
    }
    per_row.sort_by(f64::total_cmp);
    let n = per_row.len();
    Some(if n % 2 == 1 { per_row[n / 2] } else { 0.5 * (per_row[n / 2 - 1] + per_row[n / 2]) })
}

pub fn load_phantom(path: impl AsRef<Path>) -> Result<ScenePhantom> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ScenePhantom::from_json(&text, path)
}

pub fn save_phantom(phantom: &ScenePhantom, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, phantom.to_json()).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Rendering

#[derive(Debug, Clone, Copy, PartialEq)]
enum PixelSpectrum {
    Tissue(f64),
    Flat(f64),
    Table(usize),
}

/// Continuous radiance spectra for every scene pixel of one frame.
#[derive(Debug, Clone)]
pub struct SceneRadiance<'a> {
    pub width: usize,
    pub height: usize,
    pixels: Vec<PixelSpectrum>,
    tables: Vec<(&'a [f64], &'a [f64])>,
    lib: &'a ReferenceLibrary,
    illuminant: Illuminant,
}

impl SceneRadiance<'_> {
    pub fn reflectance(&self, x: usize, y: usize, wavelength_nm: f64) -> f64 {
        match self.pixels[y * self.width + x] {
            PixelSpectrum::Tissue(s) => self.lib.spectrum_at(s, wavelength_nm),
            PixelSpectrum::Flat(r) => r,
            PixelSpectrum::Table(t) => table_lookup(self.tables[t].0, self.tables[t].1, wavelength_nm),
        }
    }

    pub fn radiance(&self, x: usize, y: usize, wavelength_nm: f64) -> f64 {
        let p = self.illuminant.power_at(wavelength_nm);
        if p == 0.0 {
            return 0.0;
        }
        p * self.reflectance(x, y, wavelength_nm)
    }

    /// Bilinear in space at a fractional scene point; zero outside the scene.
    fn sample(&self, sx: f64, sy: f64, wavelength_nm: f64) -> f64 {
        let p = self.illuminant.power_at(wavelength_nm);
        if p == 0.0 {
            return 0.0;
        }
        let (x0, y0) = (sx.floor(), sy.floor());
        let (fx, fy) = (sx - x0, sy - y0);
        let (x0, y0) = (x0 as i64, y0 as i64);
        let mut acc = 0.0;
        for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
            if wy == 0.0 {
                continue;
            }
            for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
                if wx == 0.0 {
                    continue;
                }
                let (x, y) = (x0 + dx, y0 + dy);
                if x < 0 || y < 0 || x >= self.width as i64 || y >= self.height as i64 {
                    continue;
                }
                acc += wx * wy * self.reflectance(x as usize, y as usize, wavelength_nm);
            }
        }
        p * acc
    }
}

/// Tissue pixels emit illuminant times the library spectrum at their so2
/// (interpolated between entries); other pixels use their material.
pub fn render_scene_radiance<'a>(
    phantom: &'a ScenePhantom,
    lib: &'a ReferenceLibrary,
    illuminant: &Illuminant,
    frame_index: u64,
) -> Result<SceneRadiance<'a>> {
    phantom.validate()?;
    illuminant.validate()?;
    lib.validate()?;
    let mut tables: Vec<(&[f64], &[f64])> = Vec::new();
    let mut table_of = |m: &'a Material| -> Option<usize> {
        if let Material::Spectrum {
            wavelengths_nm,
            reflectance,
        } = m
        {
            let key = wavelengths_nm.as_ptr();
            Some(match tables.iter().position(|t| t.0.as_ptr() == key) {
                Some(i) => i,
                None => {
                    tables.push((wavelengths_nm, reflectance));
                    tables.len() - 1
                }
            })
        } else {
            None
        }
    };
    let mut pixels = Vec::with_capacity(phantom.width * phantom.height);
    for y in 0..phantom.height {
        for x in 0..phantom.width {
            let m = phantom.material_at(x, y);
            pixels.push(match m {
                Material::Tissue { so2 } => PixelSpectrum::Tissue(so2.value(x as f64, phantom.width, frame_index)),
                Material::Flat { reflectance } => PixelSpectrum::Flat(*reflectance),
                Material::Spectrum { .. } => PixelSpectrum::Table(table_of(m).expect("spectrum material")),
            });
        }
    }
    Ok(SceneRadiance {
        width: phantom.width,
        height: phantom.height,
        pixels,
        tables,
        lib,
        illuminant: illuminant.clone(),
    })
}

/// Image the scene through every lens: lens pixel `(u, v)` sees the scene
/// point `H(u, v)` at the dispersion wavelength, scaled by the exposure,
/// with noise added and quantized with saturation clipping.
pub fn project_to_sensor(
    radiance: &SceneRadiance<'_>,
    calib: &CalibrationSet,
    working_distance_cm: f64,
    integration_time_ms: f64,
    noise: &NoiseModel,
    frame_id: u64,
) -> Result<RawSensorFrame> {
    if !(integration_time_ms.is_finite() && integration_time_ms > 0.0) {
        return Err(Error::invalid("integration_time_ms", "must be positive"));
    }
    let profile = &calib.profile;
    let resolved = calib.at_distance(working_distance_cm);
    let (w, h) = (resolved.subimage_width, resolved.subimage_height);
    let max_dn = f64::from(profile.max_dn());

    let lenses: Vec<Vec<u16>> = (0..resolved.lens_count())
        .into_par_iter()
        .map(|lens| {
            let mut out = vec![0u16; w * h];
            let Some(disp) = resolved.dispersion[lens] else {
                return out;
            };
            let hmat = resolved.homographies[lens];
            let mut rng = noise.rng(frame_id, lens);
            for v in 0..h {
                for u in 0..w {
                    let (sx, sy) = hmat.apply(u as f64, v as f64);
                    let lambda = disp.wavelength_at(u as f64, v as f64);
                    let mut dn = radiance.sample(sx, sy, lambda) * integration_time_ms;
                    if noise.shot_noise_scale > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        dn += (noise.shot_noise_scale * dn.max(0.0)).sqrt() * z;
                    }
                    if noise.read_noise_sigma_dn > 0.0 {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        dn += noise.read_noise_sigma_dn * z;
                    }
                    out[v * w + u] = dn.round().clamp(0.0, max_dn) as u16;
                }
            }
            out
        })
        .collect();

    let (sw, sh) = (profile.sensor_width, profile.sensor_height);
    let mut pixels = vec![0u16; sw * sh];
    for (lens, data) in calib.layout.regions.iter().zip(&lenses) {
        for v in 0..h {
            let dst = (lens.y + v) * sw + lens.x;
            pixels[dst..dst + w].copy_from_slice(&data[v * w..(v + 1) * w]);
        }
    }
    RawSensorFrame::new(sw, sh, profile.bit_depth, pixels, integration_time_ms as f32, frame_id)
}

/// Everything needed to synthesize a frame sequence.
#[derive(Debug, Clone)]
pub struct Simulator {
    pub calib: CalibrationSet,
    pub library: ReferenceLibrary,
    pub phantom: ScenePhantom,
    pub illuminant: Illuminant,
    pub noise: NoiseModel,
    pub working_distance_cm: f64,
    pub integration_time_ms: f64,
}

impl Simulator {
    /// Noise-free simulator for `phantom` with the profile's default exposure.
    pub fn new(calib: CalibrationSet, library: ReferenceLibrary, phantom: ScenePhantom) -> Self {
        let illuminant = Illuminant::for_profile(&calib.profile);
        let integration_time_ms = default_integration_time_ms(&calib.profile);
        Self {
            calib,
            library,
            phantom,
            illuminant,
            noise: NoiseModel::none(),
            working_distance_cm: crate::calib::NOMINAL_DISTANCE_CM,
            integration_time_ms,
        }
    }

    pub fn frame(&self, frame_id: u64) -> Result<RawSensorFrame> {
        let radiance = render_scene_radiance(&self.phantom, &self.library, &self.illuminant, frame_id)?;
        project_to_sensor(
            &radiance,
            &self.calib,
            self.working_distance_cm,
            self.integration_time_ms,
            &self.noise,
            frame_id,
        )
    }
}
