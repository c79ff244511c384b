//! Spectral angle classification against an SO2 reference library, tissue
//! masking and color rendering.

use std::f64::consts::FRAC_PI_2;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::calib::BandGrid;
use crate::cube::{CubeStage, SpectralCube};
use crate::error::{Error, Result};

pub const DEFAULT_LEVELS: usize = 36;
pub const DEFAULT_MIN_VALID_BANDS: usize = 8;
pub const DEFAULT_SAM_THRESHOLD: f64 = 0.15;
pub const DEFAULT_OVERLAY_ALPHA: f64 = 0.6;
pub const UNCLASSIFIED: u16 = u16::MAX;

/// Target wavelengths for the red, green and blue channels.
pub const RGB_TARGETS_NM: [f64; 3] = [610.0, 540.0, 470.0];
const GAMMA: f64 = 1.0 / 2.2;
/// Candidates whose cosine is this close to the best are compared by angle.
const COS_TIE_WINDOW: f64 = 1e-9;

// ---------------------------------------------------------------------------
// SAM

/// Spectral angle between `a` and `b` over the bands where `valid` is set.
pub fn sam(a: &[f64], b: &[f64], valid: &[bool]) -> Result<f64> {
    sam_with(a, b, valid, DEFAULT_MIN_VALID_BANDS)
}

pub fn sam_with(a: &[f64], b: &[f64], valid: &[bool], min_valid_bands: usize) -> Result<f64> {
    if a.len() != b.len() || a.len() != valid.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} bands", a.len()),
            actual: format!("{} and {} entries", b.len(), valid.len()),
        });
    }
    let (mut dot, mut na, mut nb, mut n) = (0.0f64, 0.0f64, 0.0f64, 0usize);
    for i in 0..a.len() {
        if valid[i] {
            dot += a[i] * b[i];
            na += a[i] * a[i];
            nb += b[i] * b[i];
            n += 1;
        }
    }
    if n < min_valid_bands {
        return Err(Error::TooFewBands {
            found: n,
            required: min_valid_bands,
        });
    }
    angle_from_sums(dot, na, nb).ok_or(Error::ZeroNorm)
}

/// sqrt(na * nb) rather than sqrt(na) * sqrt(nb): identical inputs give
/// exactly 1 and therefore exactly zero angle.
#[inline]
fn cosine(dot: f64, na: f64, nb: f64) -> Option<f64> {
    if na > 0.0 && nb > 0.0 {
        Some((dot / (na * nb).sqrt()).clamp(-1.0, 1.0))
    } else {
        None
    }
}

#[inline]
fn angle_from_sums(dot: f64, na: f64, nb: f64) -> Option<f64> {
    cosine(dot, na, nb).map(f64::acos)
}

// ---------------------------------------------------------------------------
// Reference library

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LibrarySource {
    Synthetic,
    File,
}

/// Reflectance spectra indexed by SO2 level on a shared wavelength axis.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceLibrary {
    pub wavelengths_nm: Vec<f64>,
    pub levels: Vec<f64>,
    pub spectra: Vec<Vec<f64>>,
    pub source: LibrarySource,
}

#[derive(Serialize, Deserialize)]
struct LibraryDoc {
    wavelengths_nm: Vec<f64>,
    entries: Vec<LibraryEntryDoc>,
}

#[derive(Serialize, Deserialize)]
struct LibraryEntryDoc {
    so2: f64,
    reflectance: Vec<f64>,
}

impl ReferenceLibrary {
    pub fn new(
        wavelengths_nm: Vec<f64>,
        levels: Vec<f64>,
        spectra: Vec<Vec<f64>>,
        source: LibrarySource,
    ) -> Result<Self> {
        let lib = Self {
            wavelengths_nm,
            levels,
            spectra,
            source,
        };
        lib.validate()?;
        Ok(lib)
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels.is_empty() {
            return Err(Error::EmptyLibrary);
        }
        BandGrid::new(self.wavelengths_nm.clone())
            .map_err(|_| Error::invalid("wavelengths_nm", "need at least two strictly increasing wavelengths"))?;
        if self.spectra.len() != self.levels.len() {
            return Err(Error::invalid(
                "entries",
                format!("{} levels but {} spectra", self.levels.len(), self.spectra.len()),
            ));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if !(0.0..=1.0).contains(l) {
                return Err(Error::invalid(format!("entries[{i}].so2"), format!("{l} not in [0, 1]")));
            }
            if i > 0 && *l <= self.levels[i - 1] {
                return Err(Error::invalid(format!("entries[{i}].so2"), "levels must strictly increase"));
            }
        }
        if self.levels.len() >= 2 && (self.levels[0] != 0.0 || *self.levels.last().unwrap() != 1.0) {
            return Err(Error::invalid("entries", "levels must span [0, 1]"));
        }
        for (i, s) in self.spectra.iter().enumerate() {
            if s.len() != self.wavelengths_nm.len() {
                return Err(Error::invalid(
                    format!("entries[{i}].reflectance"),
                    format!("{} values for {} wavelengths", s.len(), self.wavelengths_nm.len()),
                ));
            }
            if let Some(j) = s.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::invalid(
                    format!("entries[{i}].reflectance[{j}]"),
                    "reflectance must be finite and strictly positive",
                ));
            }
        }
        Ok(())
    }

    /// Reflectance at a fractional `so2` and arbitrary wavelength: linear in
    /// both, clamped at the ends of each axis.
    pub fn spectrum_at(&self, so2: f64, wavelength_nm: f64) -> f64 {
        let (k, t) = locate(&self.levels, so2);
        let a = interp_axis(&self.wavelengths_nm, &self.spectra[k], wavelength_nm);
        if t == 0.0 || k + 1 >= self.spectra.len() {
            return a;
        }
        let b = interp_axis(&self.wavelengths_nm, &self.spectra[k + 1], wavelength_nm);
        a + (b - a) * t
    }

    /// Index of the level nearest to `so2` (lower index on ties).
    pub fn nearest_level(&self, so2: f64) -> usize {
        let mut best = 0;
        for (i, l) in self.levels.iter().enumerate() {
            if (l - so2).abs() < (self.levels[best] - so2).abs() {
                best = i;
            }
        }
        best
    }

    /// Linearly interpolate every entry onto `grid`. Bands outside the
    /// library's wavelength range are marked uncovered.
    pub fn resample(&self, grid: &BandGrid, min_valid_bands: usize) -> Result<ResampledLibrary> {
        self.validate()?;
        let lo = self.wavelengths_nm[0];
        let hi = *self.wavelengths_nm.last().unwrap();
        let covered: Vec<bool> = grid.wavelengths().iter().map(|&w| w >= lo && w <= hi).collect();
        let overlap = covered.iter().filter(|c| **c).count();
        if overlap < min_valid_bands {
            return Err(Error::TooFewBands {
                found: overlap,
                required: min_valid_bands,
            });
        }
        let entries = self.len();
        let bands = grid.len();
        let mut band_major = vec![0.0f64; bands * entries];
        for (e, s) in self.spectra.iter().enumerate() {
            for (b, &w) in grid.wavelengths().iter().enumerate() {
                if covered[b] {
                    // rounded to cube precision so a pixel copied from an
                    // entry matches it exactly
                    band_major[b * entries + e] = f64::from(interp_axis(&self.wavelengths_nm, s, w) as f32);
                }
            }
        }
        let chunks = entries.div_ceil(LANES);
        let mut lanes = vec![[0.0f64; LANES]; chunks * bands];
        for b in 0..bands {
            for e in 0..entries {
                lanes[(e / LANES) * bands + b][e % LANES] = band_major[b * entries + e];
            }
        }
        Ok(ResampledLibrary {
            wavelengths_nm: grid.wavelengths().to_vec(),
            levels: self.levels.clone(),
            covered,
            band_major,
            lanes,
            min_valid_bands,
        })
    }

    pub fn to_json(&self) -> String {
        let doc = LibraryDoc {
            wavelengths_nm: self.wavelengths_nm.clone(),
            entries: self
                .levels
                .iter()
                .zip(&self.spectra)
                .map(|(&so2, r)| LibraryEntryDoc {
                    so2,
                    reflectance: r.clone(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&doc).expect("library serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let doc: LibraryDoc = serde_json::from_str(text).map_err(|e| Error::Malformed {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        let (levels, spectra) = doc.entries.into_iter().map(|e| (e.so2, e.reflectance)).unzip();
        Self::new(doc.wavelengths_nm, levels, spectra, LibrarySource::File)
    }
}

pub fn load_library(path: impl AsRef<Path>) -> Result<ReferenceLibrary> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    ReferenceLibrary::from_json(&text, path)
}

pub fn save_library(lib: &ReferenceLibrary, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, lib.to_json()).map_err(|e| Error::io(path, e))
}

/// Bracketing index and fraction of `x` on an increasing axis, clamped.
fn locate(axis: &[f64], x: f64) -> (usize, f64) {
    let n = axis.len();
    if n == 1 || x <= axis[0] {
        return (0, 0.0);
    }
    if x >= axis[n - 1] {
        return (n - 1, 0.0);
    }
    let k = axis.partition_point(|&a| a <= x) - 1;
    (k, (x - axis[k]) / (axis[k + 1] - axis[k]))
}

fn interp_axis(axis: &[f64], values: &[f64], x: f64) -> f64 {
    let (k, t) = locate(axis, x);
    if t == 0.0 {
        values[k]
    } else {
        values[k] + (values[k + 1] - values[k]) * t
    }
}

// Synthetic two-endmember attenuation model. The curves are smooth
// stand-ins with oxy/deoxy-like shape: a strong Soret-like band near
// 420-430 nm, a double peak (oxy) versus a single broad peak (deoxy) in the
// green, and a weaker red/near-infrared tail that is larger for deoxy.

const PATH_LENGTH: f64 = 1.6;

/// (amplitude, center nm, width nm)
const OXY_GAUSSIANS: [(f64, f64, f64); 4] = [(1.0, 542.0, 20.0), (1.0, 578.0, 20.0), (2.0, 420.0, 30.0), (0.15, 920.0, 60.0)];
const DEOXY_GAUSSIANS: [(f64, f64, f64); 4] = [(1.3, 558.0, 32.0), (2.2, 432.0, 30.0), (0.25, 760.0, 25.0), (0.1, 900.0, 70.0)];
/// (amplitude, center nm, softness nm) of a falling logistic edge
const OXY_TAIL: (f64, f64, f64) = (0.05, 640.0, 30.0);
const DEOXY_TAIL: (f64, f64, f64) = (0.55, 640.0, 25.0);

fn gaussian(l: f64, c: f64, s: f64) -> f64 {
    (-0.5 * ((l - c) / s).powi(2)).exp()
}

fn logistic_tail(l: f64, c: f64, s: f64) -> f64 {
    1.0 / (1.0 + ((l - c) / s).exp())
}

fn absorption(l: f64, gaussians: &[(f64, f64, f64)], tail: (f64, f64, f64)) -> f64 {
    gaussians.iter().map(|&(a, c, s)| a * gaussian(l, c, s)).sum::<f64>() + tail.0 * logistic_tail(l, tail.1, tail.2)
}

pub fn oxy_absorption(wavelength_nm: f64) -> f64 {
    absorption(wavelength_nm, &OXY_GAUSSIANS, OXY_TAIL)
}

pub fn deoxy_absorption(wavelength_nm: f64) -> f64 {
    absorption(wavelength_nm, &DEOXY_GAUSSIANS, DEOXY_TAIL)
}

/// Reflectance of the mixture model at saturation `so2`.
pub fn synthetic_reflectance(so2: f64, wavelength_nm: f64) -> f64 {
    (-PATH_LENGTH * (so2 * oxy_absorption(wavelength_nm) + (1.0 - so2) * deoxy_absorption(wavelength_nm))).exp()
}

/// `count` levels uniformly spaced over [0, 1] (a single level sits at 0).
pub fn build_synthetic_library(count: usize, grid: &BandGrid) -> Result<ReferenceLibrary> {
    if count == 0 {
        return Err(Error::EmptyLibrary);
    }
    let levels: Vec<f64> = if count == 1 {
        vec![0.0]
    } else {
        (0..count).map(|i| i as f64 / (count - 1) as f64).collect()
    };
    let spectra = levels
        .iter()
        .map(|&s| grid.wavelengths().iter().map(|&l| synthetic_reflectance(s, l)).collect())
        .collect();
    ReferenceLibrary::new(grid.wavelengths().to_vec(), levels, spectra, LibrarySource::Synthetic)
}

/// 1 nm grid over 300-1100 nm, wide enough for both camera profiles.
pub fn fine_grid() -> BandGrid {
    BandGrid::uniform(300.0, 1100.0, 801).expect("static grid")
}

/// Library resampled onto a cube's band grid, stored band-major so one band
/// row holds every entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledLibrary {
    pub wavelengths_nm: Vec<f64>,
    pub levels: Vec<f64>,
    pub covered: Vec<bool>,
    band_major: Vec<f64>,
    /// Entries in groups of `LANES`, laid out `[group][band]`, zero padded.
    lanes: Vec<[f64; LANES]>,
    pub min_valid_bands: usize,
}

const LANES: usize = 8;

impl ResampledLibrary {
    pub fn entries(&self) -> usize {
        self.levels.len()
    }

    pub fn bands(&self) -> usize {
        self.wavelengths_nm.len()
    }

    /// Entry `e` as a per-band vector (zero on uncovered bands).
    pub fn spectrum(&self, e: usize) -> Vec<f64> {
        let n = self.entries();
        (0..self.bands()).map(|b| self.band_major[b * n + e]).collect()
    }

    fn band_row(&self, b: usize) -> &[f64] {
        let n = self.entries();
        &self.band_major[b * n..(b + 1) * n]
    }
}

// ---------------------------------------------------------------------------
// Classification

#[derive(Debug, Clone, PartialEq)]
pub struct So2Map {
    pub width: usize,
    pub height: usize,
    /// Library index per pixel, `UNCLASSIFIED` where no match was possible.
    pub index: Vec<u16>,
    pub levels: Vec<f64>,
}

impl So2Map {
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        let i = self.index[y * self.width + x];
        (i != UNCLASSIFIED).then(|| self.levels[i as usize])
    }

    pub fn classified(&self) -> usize {
        self.index.iter().filter(|&&i| i != UNCLASSIFIED).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMap {
    pub width: usize,
    pub height: usize,
    /// Best-match angle in radians, NaN where unclassified.
    pub angle: Vec<f64>,
    pub valid_bands: Vec<u16>,
}

/// Resample `lib` onto the cube grid and classify every pixel.
pub fn classify_so2(cube: &SpectralCube, lib: &ReferenceLibrary) -> Result<(So2Map, SimilarityMap)> {
    let grid = cube
        .band_grid()
        .ok_or_else(|| Error::invalid("cube.wavelengths_nm", "cube has no band grid"))?;
    let resampled = lib.resample(&grid, DEFAULT_MIN_VALID_BANDS)?;
    classify_resampled(cube, &resampled)
}

/// Per pixel, the entry with the smallest spectral angle over the bands valid
/// in both pixel and library. Ties go to the lower index.
pub fn classify_resampled(cube: &SpectralCube, lib: &ResampledLibrary) -> Result<(So2Map, SimilarityMap)> {
    if cube.stage.is_lens_indexed() {
        return Err(Error::invalid("cube.stage", "classification needs a spectral cube"));
    }
    if cube.wavelengths_nm != lib.wavelengths_nm {
        return Err(Error::BandGridMismatch(format!(
            "cube has {} bands, library resampled to {}",
            cube.wavelengths_nm.len(),
            lib.wavelengths_nm.len()
        )));
    }
    if lib.entries() == 0 {
        return Err(Error::EmptyLibrary);
    }
    let (w, h) = (cube.width, cube.height);
    let n = w * h;
    let mut index = vec![UNCLASSIFIED; n];
    let mut angle = vec![f64::NAN; n];
    let mut valid_bands = vec![0u16; n];

    index
        .par_chunks_mut(w)
        .zip(angle.par_chunks_mut(w))
        .zip(valid_bands.par_chunks_mut(w))
        .enumerate()
        .for_each(|(y, ((idx_row, ang_row), vb_row))| {
            classify_row(cube, lib, y, idx_row, ang_row, vb_row);
        });

    Ok((
        So2Map {
            width: w,
            height: h,
            index,
            levels: lib.levels.clone(),
        },
        SimilarityMap {
            width: w,
            height: h,
            angle,
            valid_bands,
        },
    ))
}

struct NormCache {
    key: Vec<u64>,
    norms: Vec<f64>,
    /// Number of valid bands.
    count: usize,
}

fn classify_row(
    cube: &SpectralCube,
    lib: &ResampledLibrary,
    y: usize,
    idx_row: &mut [u16],
    ang_row: &mut [f64],
    vb_row: &mut [u16],
) {
    let w = cube.width;
    let bands = lib.bands();
    let entries = lib.entries();
    let plane = cube.plane_len();
    let words = bands.div_ceil(64);

    // pixel-major copy of the row so each pixel's spectrum is contiguous
    let mut spectra = vec![0.0f64; w * bands];
    let mut masks = vec![false; w * bands];
    for b in 0..bands {
        let off = b * plane + y * w;
        let vals = &cube.values[off..off + w];
        let ok = &cube.valid[off..off + w];
        let cov = lib.covered[b];
        for x in 0..w {
            spectra[x * bands + b] = f64::from(vals[x]);
            masks[x * bands + b] = ok[x] && cov;
        }
    }

    // per pixel: norm cache slot (None when too few bands), |p|^2 and the
    // compacted valid bands, stored in place of the full spectrum
    let mut caches: Vec<NormCache> = Vec::new();
    let mut slot: Vec<Option<usize>> = vec![None; w];
    let mut na = vec![0.0f64; w];
    let mut band_idx = vec![0u32; w * bands];
    let mut key = vec![0u64; words];
    for x in 0..w {
        let spec = &mut spectra[x * bands..(x + 1) * bands];
        let mask = &masks[x * bands..(x + 1) * bands];
        let idx = &mut band_idx[x * bands..(x + 1) * bands];
        key.fill(0);
        let mut count = 0usize;
        let mut sum = 0.0f64;
        for b in 0..bands {
            if mask[b] {
                key[b / 64] |= 1 << (b % 64);
                let p = spec[b];
                sum += p * p;
                idx[count] = b as u32;
                spec[count] = p;
                count += 1;
            }
        }
        vb_row[x] = count.min(u16::MAX as usize) as u16;
        if count < lib.min_valid_bands {
            continue;
        }
        na[x] = sum;
        slot[x] = Some(match caches.iter().position(|c| c.key == key) {
            Some(i) => i,
            None => {
                let mut norms = vec![0.0f64; entries];
                for &b in &idx[..count] {
                    for (n, &r) in norms.iter_mut().zip(lib.band_row(b as usize)) {
                        *n += r * r;
                    }
                }
                caches.push(NormCache { key: key.clone(), norms, count });
                caches.len() - 1
            }
        });
    }

    let stride = entries.div_ceil(LANES) * LANES;
    let mut dots = vec![0.0f64; w * stride];
    let mut x = 0;
    while x < w {
        let Some(c) = slot[x] else {
            x += 1;
            continue;
        };
        let m = caches[c].count;
        let idx = &band_idx[x * bands..x * bands + m];
        if x + PIXEL_BLOCK <= w && slot[x..x + PIXEL_BLOCK].iter().all(|s| *s == Some(c)) {
            let vals: [&[f64]; PIXEL_BLOCK] =
                std::array::from_fn(|i| &spectra[(x + i) * bands..(x + i) * bands + m]);
            lane_dots_block(&lib.lanes, bands, idx, vals, &mut dots[x * stride..(x + PIXEL_BLOCK) * stride]);
            x += PIXEL_BLOCK;
        } else {
            let vals = &spectra[x * bands..x * bands + m];
            lane_dots_block(&lib.lanes, bands, idx, [vals], &mut dots[x * stride..(x + 1) * stride]);
            x += 1;
        }
    }

    for x in 0..w {
        let Some(c) = slot[x] else { continue };
        let norms = &caches[c].norms;
        let dots = &dots[x * stride..x * stride + entries];
        let na = na[x];
        let mut best_cos = f64::NEG_INFINITY;
        let mut cosines_ok = false;
        for e in 0..entries {
            if let Some(c) = cosine(dots[e], na, norms[e]) {
                cosines_ok = true;
                if c > best_cos {
                    best_cos = c;
                }
            }
        }
        if !cosines_ok {
            continue;
        }
        let mut best = (UNCLASSIFIED, f64::INFINITY);
        for e in 0..entries {
            if let Some(c) = cosine(dots[e], na, norms[e]) {
                if c >= best_cos - COS_TIE_WINDOW {
                    let a = c.acos();
                    if a < best.1 {
                        best = (e as u16, a);
                    }
                }
            }
        }
        idx_row[x] = best.0;
        ang_row[x] = best.1;
    }
}

const PIXEL_BLOCK: usize = 4;

/// Dot products of `P` pixels sharing one valid-band list with every library
/// entry, summed in band order exactly like the scalar definition. `out`
/// holds `P` rows of padded entries.
fn lane_dots_block<const P: usize>(
    lanes: &[[f64; LANES]],
    bands: usize,
    idx: &[u32],
    vals: [&[f64]; P],
    out: &mut [f64],
) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            unsafe { lane_dots_avx512(lanes, bands, idx, vals, out) };
            return;
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            unsafe { lane_dots_avx2(lanes, bands, idx, vals, out) };
            return;
        }
    }
    lane_dots_generic(lanes, bands, idx, vals, out);
}

// no fma: fused rounding would make results CPU dependent
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn lane_dots_avx2<const P: usize>(
    lanes: &[[f64; LANES]],
    bands: usize,
    idx: &[u32],
    vals: [&[f64]; P],
    out: &mut [f64],
) {
    lane_dots_generic(lanes, bands, idx, vals, out);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn lane_dots_avx512<const P: usize>(
    lanes: &[[f64; LANES]],
    bands: usize,
    idx: &[u32],
    vals: [&[f64]; P],
    out: &mut [f64],
) {
    lane_dots_generic(lanes, bands, idx, vals, out);
}

#[inline(always)]
fn lane_dots_generic<const P: usize>(
    lanes: &[[f64; LANES]],
    bands: usize,
    idx: &[u32],
    vals: [&[f64]; P],
    out: &mut [f64],
) {
    let stride = out.len() / P;
    let vals: [&[f64]; P] = std::array::from_fn(|q| &vals[q][..idx.len()]);
    for (g, group) in lanes.chunks_exact(bands).enumerate() {
        let mut acc = [[0.0f64; LANES]; P];
        for (i, &b) in idx.iter().enumerate() {
            let r = &group[b as usize];
            for q in 0..P {
                let p = vals[q][i];
                for k in 0..LANES {
                    acc[q][k] += p * r[k];
                }
            }
        }
        for q in 0..P {
            out[q * stride + g * LANES..q * stride + (g + 1) * LANES].copy_from_slice(&acc[q]);
        }
    }
}

// ---------------------------------------------------------------------------
// Masking and rendering

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub mask: Vec<bool>,
}

impl TissueMask {
    pub fn count(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

pub fn validate_threshold(threshold: f64) -> Result<()> {
    if (0.0..=FRAC_PI_2).contains(&threshold) {
        Ok(())
    } else {
        Err(Error::invalid("threshold", "threshold out of range [0, pi/2]"))
    }
}

/// Tissue where the pixel was classified on enough bands and its best angle
/// is within `threshold`.
pub fn build_tissue_mask(sim: &SimilarityMap, threshold: f64, min_valid_bands: usize) -> Result<TissueMask> {
    validate_threshold(threshold)?;
    let mask = sim
        .angle
        .iter()
        .zip(&sim.valid_bands)
        .map(|(&a, &n)| !a.is_nan() && usize::from(n) >= min_valid_bands && a <= threshold)
        .collect();
    Ok(TissueMask {
        width: sim.width,
        height: sim.height,
        mask,
    })
}

/// Packed 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgba(&self) -> Vec<u8> {
        self.data.chunks_exact(3).flat_map(|p| [p[0], p[1], p[2], 255]).collect()
    }
}

/// Packed 8-bit RGBA raster; alpha is zero outside the tissue mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl OverlayImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let i = (y * self.width + x) * 4;
        [self.data[i], self.data[i + 1], self.data[i + 2], self.data[i + 3]]
    }
}

/// Clip to [0, 1], apply display gamma and quantize.
pub fn gamma_encode(reflectance: f64) -> u8 {
    let r = if reflectance.is_nan() { 0.0 } else { reflectance.clamp(0.0, 1.0) };
    (255.0 * r.powf(GAMMA)).round() as u8
}

/// Band index per channel, `None` for targets outside the cube's range.
pub fn rgb_bands(wavelengths_nm: &[f64]) -> Result<[Option<usize>; 3]> {
    let (lo, hi) = match (wavelengths_nm.first(), wavelengths_nm.last()) {
        (Some(&lo), Some(&hi)) => (lo, hi),
        _ => return Err(Error::invalid("cube.wavelengths_nm", "cube has no bands")),
    };
    let pick = |t: f64| -> Option<usize> {
        if t < lo || t > hi {
            return None;
        }
        let mut best = 0;
        for (i, w) in wavelengths_nm.iter().enumerate() {
            if (w - t).abs() < (wavelengths_nm[best] - t).abs() {
                best = i;
            }
        }
        Some(best)
    };
    let bands = RGB_TARGETS_NM.map(pick);
    if bands.iter().all(Option::is_none) {
        return Err(Error::invalid("cube.wavelengths_nm", "no band near 610, 540 or 470 nm"));
    }
    Ok(bands)
}

pub fn render_rgb(cube: &SpectralCube) -> Result<RgbImage> {
    render_rgb_scaled(cube, 1.0)
}

/// RGB preview of a cube whose values are `1 / scale` times reflectance-like
/// units (e.g. raw radiance before a white reference exists).
pub fn render_rgb_scaled(cube: &SpectralCube, scale: f64) -> Result<RgbImage> {
    if cube.stage.is_lens_indexed() {
        return Err(Error::invalid("cube.stage", "rgb rendering needs a spectral cube"));
    }
    let bands = rgb_bands(&cube.wavelengths_nm)?;
    let mut img = RgbImage::new(cube.width, cube.height);
    for (c, band) in bands.iter().enumerate() {
        let Some(b) = *band else { continue };
        let (vals, mask) = (cube.plane(b), cube.plane_valid(b));
        for i in 0..cube.plane_len() {
            if mask[i] {
                img.data[i * 3 + c] = gamma_encode(f64::from(vals[i]) * scale);
            }
        }
    }
    Ok(img)
}

/// Continuous piecewise-linear color map over [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Colormap {
    /// blue, cyan, yellow, red
    Oxygen,
    Gray,
}

impl Colormap {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "oxygen" | "default" => Ok(Colormap::Oxygen),
            "gray" | "grey" => Ok(Colormap::Gray),
            _ => Err(Error::Unknown {
                kind: "colormap",
                name: name.to_string(),
            }),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Colormap::Oxygen => "oxygen",
            Colormap::Gray => "gray",
        }
    }

    fn stops(self) -> &'static [[f64; 3]] {
        match self {
            Colormap::Oxygen => &[[0.0, 0.0, 255.0], [0.0, 255.0, 255.0], [255.0, 255.0, 0.0], [255.0, 0.0, 0.0]],
            Colormap::Gray => &[[0.0, 0.0, 0.0], [255.0, 255.0, 255.0]],
        }
    }

    pub fn color(self, t: f64) -> [u8; 3] {
        let stops = self.stops();
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let pos = t * (stops.len() - 1) as f64;
        let k = (pos.floor() as usize).min(stops.len() - 2);
        let f = pos - k as f64;
        let (a, b) = (stops[k], stops[k + 1]);
        [0, 1, 2].map(|c| (a[c] + (b[c] - a[c]) * f).round() as u8)
    }
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if (0.0..=1.0).contains(&alpha) {
        Ok(())
    } else {
        Err(Error::invalid("alpha", "alpha out of range [0, 1]"))
    }
}

pub fn colorize(so2: &So2Map, mask: &TissueMask, cmap: Colormap, alpha: f64) -> Result<OverlayImage> {
    validate_alpha(alpha)?;
    if (so2.width, so2.height) != (mask.width, mask.height) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", so2.width, so2.height),
            actual: format!("{}x{} mask", mask.width, mask.height),
        });
    }
    let a = (alpha * 255.0).round() as u8;
    let lut: Vec<[u8; 3]> = so2.levels.iter().map(|&l| cmap.color(l)).collect();
    let mut data = vec![0u8; so2.index.len() * 4];
    for (i, px) in data.chunks_exact_mut(4).enumerate() {
        let idx = so2.index[i];
        if mask.mask[i] && idx != UNCLASSIFIED {
            let [r, g, b] = lut[idx as usize];
            px.copy_from_slice(&[r, g, b, a]);
        }
    }
    Ok(OverlayImage {
        width: so2.width,
        height: so2.height,
        data,
    })
}

/// Source-over blend in integer arithmetic; zero alpha leaves `base` intact.
pub fn composite(base: &RgbImage, overlay: &OverlayImage) -> Result<RgbImage> {
    if (base.width, base.height) != (overlay.width, overlay.height) {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", base.width, base.height),
            actual: format!("{}x{} overlay", overlay.width, overlay.height),
        });
    }
    let mut out = base.clone();
    for (o, ov) in out.data.chunks_exact_mut(3).zip(overlay.data.chunks_exact(4)) {
        let a = u32::from(ov[3]);
        if a == 0 {
            continue;
        }
        for c in 0..3 {
            o[c] = ((u32::from(ov[c]) * a + u32::from(o[c]) * (255 - a) + 127) / 255) as u8;
        }
    }
    Ok(out)
}

/// Grayscale visualizations used by the overlay view modes.
pub fn render_so2_map(so2: &So2Map, cmap: Colormap) -> RgbImage {
    let mut img = RgbImage::new(so2.width, so2.height);
    for (px, &i) in img.data.chunks_exact_mut(3).zip(&so2.index) {
        if i != UNCLASSIFIED {
            px.copy_from_slice(&cmap.color(so2.levels[i as usize]));
        }
    }
    img
}

pub fn render_similarity_map(sim: &SimilarityMap) -> RgbImage {
    let mut img = RgbImage::new(sim.width, sim.height);
    for (px, &a) in img.data.chunks_exact_mut(3).zip(&sim.angle) {
        if !a.is_nan() {
            let v = (255.0 * (1.0 - a / FRAC_PI_2)).round().clamp(0.0, 255.0) as u8;
            px.copy_from_slice(&[v, v, v]);
        }
    }
    img
}

/// Count of masked pixels per library level.
pub fn so2_histogram(so2: &So2Map, mask: &TissueMask) -> Vec<u32> {
    let mut hist = vec![0u32; so2.levels.len()];
    for (&i, &m) in so2.index.iter().zip(&mask.mask) {
        if m && i != UNCLASSIFIED {
            hist[i as usize] += 1;
        }
    }
    hist
}

/// Mean so2 over masked pixels.
pub fn so2_mean(so2: &So2Map, mask: &TissueMask) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for (&i, &m) in so2.index.iter().zip(&mask.mask) {
        if m && i != UNCLASSIFIED {
            sum += so2.levels[i as usize];
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Build a reflectance cube whose pixels are the given resampled entries.
pub fn cube_from_entries(width: usize, height: usize, lib: &ResampledLibrary, entry: impl Fn(usize, usize) -> usize) -> SpectralCube {
    let grid = BandGrid::new(lib.wavelengths_nm.clone()).expect("library grid");
    let mut cube = SpectralCube::spectral(width, height, CubeStage::Reflectance, &grid);
    for y in 0..height {
        for x in 0..width {
            let e = entry(x, y);
            for b in 0..lib.bands() {
                cube.set(b, x, y, lib.band_row(b)[e] as f32, lib.covered[b]);
            }
        }
    }
    cube
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_1_SQRT_2;

    fn s5_grid() -> BandGrid {
        BandGrid::uniform(450.0, 850.0, 51).unwrap()
    }

    fn all(n: usize) -> Vec<bool> {
        vec![true; n]
    }

    /// Exhaustive scalar loop: sam against every entry, first minimum wins.
    fn naive_classify(cube: &SpectralCube, lib: &ResampledLibrary) -> Vec<u16> {
        let n = cube.plane_len();
        (0..n)
            .map(|i| {
                let px: Vec<f64> = (0..lib.bands()).map(|b| f64::from(cube.values[b * n + i])).collect();
                let m: Vec<bool> = (0..lib.bands()).map(|b| cube.valid[b * n + i] && lib.covered[b]).collect();
                let mut best = (UNCLASSIFIED, f64::INFINITY);
                for e in 0..lib.entries() {
                    if let Ok(a) = sam_with(&px, &lib.spectrum(e), &m, lib.min_valid_bands) {
                        if a < best.1 {
                            best = (e as u16, a);
                        }
                    }
                }
                best.0
            })
            .collect()
    }

    #[test]
    fn sam_trivial_cases() {
        let a = vec![0.3, 0.5, 0.2, 0.9, 0.1, 0.4, 0.7, 0.6];
        assert_eq!(sam(&a, &a, &all(8)).unwrap(), 0.0);
        let mut e1 = vec![0.0; 8];
        let mut e2 = vec![0.0; 8];
        e1[0] = 1.0;
        e2[1] = 1.0;
        assert_eq!(sam(&e1, &e2, &all(8)).unwrap(), FRAC_PI_2);
        let two = sam_with(&[1.0, 1.0], &[1.0, 0.0], &all(2), 2).unwrap();
        assert!((two - FRAC_1_SQRT_2.acos()).abs() < 1e-9);
        assert!((two - 0.785398).abs() < 1e-6);
    }

    #[test]
    fn sam_preconditions() {
        let a = vec![1.0; 8];
        let mut m = all(8);
        m[0] = false;
        assert!(matches!(sam(&a, &a, &m), Err(Error::TooFewBands { found: 7, required: 8 })));
        assert!(matches!(sam(&vec![0.0; 8], &a, &all(8)), Err(Error::ZeroNorm)));
        assert!(sam(&a, &a[..7], &all(8)).is_err());
    }

    #[test]
    fn synthetic_library_shape() {
        let lib = build_synthetic_library(36, &s5_grid()).unwrap();
        assert_eq!(lib.len(), 36);
        assert_eq!(lib.levels[0], 0.0);
        assert_eq!(lib.levels[35], 1.0);
        for (i, l) in lib.levels.iter().enumerate() {
            assert!((l - i as f64 / 35.0).abs() < 1e-15);
        }
        // endpoint is the pure oxy attenuation
        for (j, &w) in lib.wavelengths_nm.iter().enumerate() {
            assert_eq!(lib.spectra[35][j], (-PATH_LENGTH * oxy_absorption(w)).exp());
            assert_eq!(lib.spectra[0][j], (-PATH_LENGTH * deoxy_absorption(w)).exp());
        }
        assert!(build_synthetic_library(0, &s5_grid()).is_err());
        assert_eq!(build_synthetic_library(1, &s5_grid()).unwrap().len(), 1);
    }

    #[test]
    fn synthetic_entries_are_pairwise_distinct() {
        for grid in [s5_grid(), BandGrid::uniform(350.0, 1002.0, 164).unwrap()] {
            let lib = build_synthetic_library(36, &grid).unwrap();
            let m = all(grid.len());
            for i in 0..36 {
                for j in i + 1..36 {
                    let a = sam(&lib.spectra[i], &lib.spectra[j], &m).unwrap();
                    assert!(a > 1e-3, "{i} {j}: {a}");
                }
            }
        }
    }

    #[test]
    fn library_validation() {
        let g = vec![500.0, 510.0];
        let ok = |levels: Vec<f64>, spectra: Vec<Vec<f64>>| ReferenceLibrary::new(g.clone(), levels, spectra, LibrarySource::File);
        assert!(ok(vec![0.0, 1.0], vec![vec![1.0, 1.0], vec![0.5, 0.5]]).is_ok());
        assert!(ok(vec![1.0, 0.0], vec![vec![1.0, 1.0], vec![0.5, 0.5]]).is_err());
        assert!(ok(vec![0.0, 0.9], vec![vec![1.0, 1.0], vec![0.5, 0.5]]).is_err());
        assert!(ok(vec![0.0, 1.0], vec![vec![1.0, 0.0], vec![0.5, 0.5]]).is_err());
        assert!(ok(vec![0.0, 1.0], vec![vec![1.0], vec![0.5, 0.5]]).is_err());
        assert!(matches!(ok(vec![], vec![]), Err(Error::EmptyLibrary)));
    }

    #[test]
    fn library_json_round_trip() {
        let lib = build_synthetic_library(36, &s5_grid()).unwrap();
        let back = ReferenceLibrary::from_json(&lib.to_json(), Path::new("mem")).unwrap();
        assert_eq!(back.levels, lib.levels);
        assert_eq!(back.spectra, lib.spectra);
        assert_eq!(back.wavelengths_nm, lib.wavelengths_nm);
        assert_eq!(back.source, LibrarySource::File);
        let bad = r#"{"wavelengths_nm":[500,510],"entries":[{"so2":0.5,"reflectance":[1,1]},{"so2":0.2,"reflectance":[1,1]}]}"#;
        assert!(ReferenceLibrary::from_json(bad, Path::new("x")).is_err());
        assert!(matches!(
            ReferenceLibrary::from_json("{", Path::new("x")),
            Err(Error::Malformed { .. })
        ));
    }

    #[test]
    fn resample_rejects_small_overlap() {
        let lib = build_synthetic_library(4, &BandGrid::uniform(500.0, 530.0, 4).unwrap()).unwrap();
        assert!(matches!(lib.resample(&s5_grid(), 8), Err(Error::TooFewBands { .. })));
    }

    #[test]
    fn exact_member_and_scaled_member() {
        let lib = build_synthetic_library(36, &fine_grid()).unwrap();
        let r = lib.resample(&s5_grid(), 8).unwrap();
        let cube = cube_from_entries(3, 2, &r, |_, _| 20);
        let (so2, sim) = classify_resampled(&cube, &r).unwrap();
        assert!(so2.index.iter().all(|&i| i == 20));
        assert!(sim.angle.iter().all(|&a| a == 0.0));
        let (half, _) = classify_resampled(&cube.scaled(0.5), &r).unwrap();
        assert_eq!(half.index, so2.index);
        assert_eq!(so2.get(0, 0), Some(20.0 / 35.0));
    }

    #[test]
    fn midpoints_match_exhaustive_oracle() {
        let lib = build_synthetic_library(36, &s5_grid()).unwrap();
        let r = lib.resample(&s5_grid(), 8).unwrap();
        let mut cube = SpectralCube::spectral(35, 1, CubeStage::Reflectance, &s5_grid());
        for k in 0..35 {
            let (a, b) = (r.spectrum(k), r.spectrum(k + 1));
            for j in 0..51 {
                cube.set(j, k, 0, (0.5 * (a[j] + b[j])) as f32, true);
            }
        }
        let (so2, _) = classify_resampled(&cube, &r).unwrap();
        assert_eq!(so2.index, naive_classify(&cube, &r));
        for k in 0..35 {
            assert!(so2.index[k] == k as u16 || so2.index[k] == k as u16 + 1);
        }
    }

    #[test]
    fn ties_go_to_lower_index() {
        let g = BandGrid::uniform(500.0, 570.0, 8).unwrap();
        let spectra = vec![vec![1.0; 8], vec![2.0; 8], vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]];
        let lib = ReferenceLibrary::new(g.wavelengths().to_vec(), vec![0.0, 0.5, 1.0], spectra, LibrarySource::File).unwrap();
        let r = lib.resample(&g, 8).unwrap();
        let cube = SpectralCube::filled(1, 1, &g, 3.0);
        let (so2, _) = classify_resampled(&cube, &r).unwrap();
        assert_eq!(so2.index, vec![0]);
    }

    #[test]
    fn too_few_bands_leaves_pixel_unclassified() {
        let lib = build_synthetic_library(36, &s5_grid()).unwrap();
        let r = lib.resample(&s5_grid(), 8).unwrap();
        let mut cube = cube_from_entries(2, 1, &r, |_, _| 3);
        for b in 7..51 {
            cube.set(b, 1, 0, 0.0, false);
        }
        let (so2, sim) = classify_resampled(&cube, &r).unwrap();
        assert_eq!(so2.index, vec![3, UNCLASSIFIED]);
        assert_eq!(sim.valid_bands, vec![51, 7]);
        assert!(sim.angle[1].is_nan());
    }

    #[test]
    fn tissue_mask_limits() {
        let sim = SimilarityMap {
            width: 4,
            height: 1,
            angle: vec![0.0, 0.1, 0.4, f64::NAN],
            valid_bands: vec![51, 51, 51, 0],
        };
        assert_eq!(build_tissue_mask(&sim, FRAC_PI_2, 8).unwrap().mask, vec![true, true, true, false]);
        assert_eq!(build_tissue_mask(&sim, 0.0, 8).unwrap().mask, vec![true, false, false, false]);
        assert_eq!(build_tissue_mask(&sim, 0.15, 8).unwrap().mask, vec![true, true, false, false]);
        assert!(build_tissue_mask(&sim, -1.0, 8).is_err());
        assert!(build_tissue_mask(&sim, f64::NAN, 8).is_err());
    }

    #[test]
    fn rgb_rendering() {
        let g = s5_grid();
        let img = render_rgb(&SpectralCube::filled(2, 2, &g, 1.0)).unwrap();
        assert!(img.data.iter().all(|&v| v == 255));
        let img = render_rgb(&SpectralCube::filled(2, 2, &g, 0.0)).unwrap();
        assert!(img.data.iter().all(|&v| v == 0));
        let mut cube = SpectralCube::filled(1, 1, &g, 0.0);
        cube.set(g.nearest(610.0), 0, 0, 0.25, true);
        // round(255 * 0.25^(1/2.2)) = round(135.79...) = 136
        assert_eq!(render_rgb(&cube).unwrap().pixel(0, 0), [136, 0, 0]);
        let oracle = (255.0 * 0.25f64.powf(1.0 / 2.2)).round();
        assert_eq!(oracle, 136.0);
        cube.set(g.nearest(610.0), 0, 0, 7.0, false);
        assert_eq!(render_rgb(&cube).unwrap().pixel(0, 0), [0, 0, 0]);
        let ir = SpectralCube::filled(1, 1, &BandGrid::uniform(700.0, 900.0, 11).unwrap(), 1.0);
        assert!(render_rgb(&ir).is_err());
    }

    #[test]
    fn colormap_endpoints() {
        assert_eq!(Colormap::Oxygen.color(1.0), [255, 0, 0]);
        assert_eq!(Colormap::Oxygen.color(0.0), [0, 0, 255]);
        assert_eq!(Colormap::Oxygen.color(1.0 / 3.0), [0, 255, 255]);
        assert_eq!(Colormap::Gray.color(0.5), [128, 128, 128]);
        assert!(Colormap::by_name("plasma").is_err());
    }

    #[test]
    fn colorize_and_composite() {
        let so2 = So2Map {
            width: 2,
            height: 1,
            index: vec![1, 0],
            levels: vec![0.0, 1.0],
        };
        let mask = TissueMask {
            width: 2,
            height: 1,
            mask: vec![true, false],
        };
        let ov = colorize(&so2, &mask, Colormap::Oxygen, 0.6).unwrap();
        assert_eq!(ov.pixel(0, 0), [255, 0, 0, 153]);
        assert_eq!(ov.pixel(1, 0), [0, 0, 0, 0]);
        let base = RgbImage {
            width: 2,
            height: 1,
            data: vec![10, 20, 30, 40, 50, 60],
        };
        let out = composite(&base, &ov).unwrap();
        assert_eq!(out.pixel(1, 0), [40, 50, 60]);
        assert_eq!(out.pixel(0, 0), [(255 * 153 + 10 * 102 + 127) / 255, (20 * 102 + 127) / 255, (30 * 102 + 127) / 255].map(|v: u32| v as u8));
        let clear = colorize(&so2, &mask, Colormap::Oxygen, 0.0).unwrap();
        assert_eq!(composite(&base, &clear).unwrap(), base);
        assert!(colorize(&so2, &mask, Colormap::Oxygen, 1.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn spectrum(n: usize) -> impl Strategy<Value = Vec<f64>> {
            prop::collection::vec(0.001f64..10.0, n)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(256))]

            #[test]
            fn sam_symmetric_and_in_range(a in spectrum(24), b in spectrum(24)) {
                let m = all(24);
                let ab = sam(&a, &b, &m).unwrap();
                prop_assert_eq!(ab, sam(&b, &a, &m).unwrap());
                prop_assert!((0.0..=FRAC_PI_2).contains(&ab));
            }

            #[test]
            fn sam_scale_invariant(a in spectrum(16), b in spectrum(16), c in 1e-3f64..1e3) {
                let m = all(16);
                let scaled: Vec<f64> = a.iter().map(|v| v * c).collect();
                prop_assert!(sam(&a, &scaled, &m).unwrap() < 1e-7);
                prop_assert!((sam(&scaled, &b, &m).unwrap() - sam(&a, &b, &m).unwrap()).abs() < 1e-7);
            }

            #[test]
            fn classification_matches_oracle(
                vals in prop::collection::vec(0.0f32..1.2, 4 * 4 * 51),
                holes in prop::collection::vec(any::<bool>(), 4 * 4 * 51),
            ) {
                let lib = build_synthetic_library(36, &s5_grid()).unwrap();
                let r = lib.resample(&s5_grid(), 8).unwrap();
                let mut cube = SpectralCube::spectral(4, 4, CubeStage::Reflectance, &s5_grid());
                cube.values.copy_from_slice(&vals);
                for (v, h) in cube.valid.iter_mut().zip(&holes) {
                    *v = !*h;
                }
                let (so2, _) = classify_resampled(&cube, &r).unwrap();
                prop_assert_eq!(so2.index, naive_classify(&cube, &r));
            }

            #[test]
            fn per_pixel_scaling_is_invariant(
                entries in prop::collection::vec(0usize..36, 9),
                alpha in prop::collection::vec(0.05f32..20.0, 9),
            ) {
                let lib = build_synthetic_library(36, &s5_grid()).unwrap();
                let r = lib.resample(&s5_grid(), 8).unwrap();
                let cube = cube_from_entries(3, 3, &r, |x, y| entries[y * 3 + x]);
                let mut scaled = cube.clone();
                let n = cube.plane_len();
                for (i, v) in scaled.values.iter_mut().enumerate() {
                    *v *= alpha[i % n];
                }
                let (a, _) = classify_resampled(&cube, &r).unwrap();
                let (b, _) = classify_resampled(&scaled, &r).unwrap();
                prop_assert_eq!(&a.index, &b.index);
                prop_assert_eq!(a.index.iter().map(|&i| i as usize).collect::<Vec<_>>(), entries);
            }

            #[test]
            fn restriction_commutes(
                vals in prop::collection::vec(0.01f32..1.0, 2 * 2 * 51),
                drop in prop::collection::btree_set(0usize..51, 1..20),
            ) {
                let lib = build_synthetic_library(36, &s5_grid()).unwrap();
                let r = lib.resample(&s5_grid(), 8).unwrap();
                let mut cube = SpectralCube::spectral(2, 2, CubeStage::Reflectance, &s5_grid());
                cube.values.copy_from_slice(&vals);
                cube.valid.fill(true);
                for &b in &drop {
                    for i in 0..4 {
                        cube.valid[b * 4 + i] = false;
                    }
                }
                let (a, _) = classify_resampled(&cube, &r).unwrap();
                // same bands removed from the library instead of the cube
                let mut restricted = r.clone();
                for &b in &drop {
                    restricted.covered[b] = false;
                }
                let mut full = cube.clone();
                full.valid.fill(true);
                let (b, _) = classify_resampled(&full, &restricted).unwrap();
                prop_assert_eq!(a.index, b.index);
            }

            #[test]
            fn empty_mask_composite_is_identity(
                pixels in prop::collection::vec(any::<u8>(), 6 * 3),
                levels in prop::collection::vec(0u16..36, 6),
                alpha in 0.0f64..=1.0,
            ) {
                let base = RgbImage { width: 3, height: 2, data: pixels };
                let so2 = So2Map { width: 3, height: 2, index: levels, levels: (0..36).map(|i| i as f64 / 35.0).collect() };
                let mask = TissueMask { width: 3, height: 2, mask: vec![false; 6] };
                let ov = colorize(&so2, &mask, Colormap::Oxygen, alpha).unwrap();
                prop_assert_eq!(composite(&base, &ov).unwrap(), base);
            }
        }
    }
}
