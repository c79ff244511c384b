//! Camera profiles and pre-calibrated geometry/spectral data.
//!
//! A [`CalibrationSet`] bundles the microlens layout of a light-field sensor
//! with, for every calibrated working distance, one projective homography and
//! one linear dispersion map per lens. [`CalibrationSet::at_distance`] resolves
//! the set for an arbitrary working distance.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Working distance at which the synthetic calibrations are perfectly aligned.
pub const NOMINAL_DISTANCE_CM: f64 = 56.0;

/// Wavelengths may be assigned this far outside the band grid.
pub const DISPERSION_MARGIN_NM: f64 = 50.0;

pub const CALIB_FORMAT_VERSION: u16 = 1;

/// Ordered band-center wavelengths in nm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "BandGridRepr", into = "BandGridRepr")]
pub struct BandGrid {
    wavelengths_nm: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct BandGridRepr {
    wavelengths_nm: Vec<f64>,
}

impl TryFrom<BandGridRepr> for BandGrid {
    type Error = Error;
    fn try_from(r: BandGridRepr) -> Result<Self> {
        BandGrid::new(r.wavelengths_nm)
    }
}

impl From<BandGrid> for BandGridRepr {
    fn from(g: BandGrid) -> Self {
        BandGridRepr {
            wavelengths_nm: g.wavelengths_nm,
        }
    }
}

impl BandGrid {
    pub fn new(wavelengths_nm: Vec<f64>) -> Result<Self> {
        if wavelengths_nm.len() < 2 {
            return Err(Error::invalid(
                "band_grid.count",
                format!("need at least 2 bands, got {}", wavelengths_nm.len()),
            ));
        }
        if wavelengths_nm.iter().any(|w| !w.is_finite()) {
            return Err(Error::invalid("band_grid.wavelengths_nm", "non-finite value"));
        }
        if let Some(i) = wavelengths_nm.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                format!("band_grid.wavelengths_nm[{}]", i + 1),
                "wavelengths must be strictly increasing",
            ));
        }
        Ok(Self { wavelengths_nm })
    }

    /// `count` equally spaced bands from `first_nm` to `last_nm` inclusive.
    pub fn uniform(first_nm: f64, last_nm: f64, count: usize) -> Result<Self> {
        if count < 2 {
            return Err(Error::invalid("band_grid.count", "need at least 2 bands"));
        }
        let step = (last_nm - first_nm) / (count - 1) as f64;
        let mut w: Vec<f64> = (0..count).map(|i| first_nm + step * i as f64).collect();
        w[count - 1] = last_nm;
        Self::new(w)
    }

    pub fn wavelengths(&self) -> &[f64] {
        &self.wavelengths_nm
    }

    pub fn len(&self) -> usize {
        self.wavelengths_nm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wavelengths_nm.is_empty()
    }

    pub fn min(&self) -> f64 {
        self.wavelengths_nm[0]
    }

    pub fn max(&self) -> f64 {
        self.wavelengths_nm[self.len() - 1]
    }

    /// Mean spacing of the intervals adjacent to band `j`.
    pub fn local_spacing(&self, j: usize) -> f64 {
        let w = &self.wavelengths_nm;
        let n = w.len();
        if j == 0 {
            w[1] - w[0]
        } else if j == n - 1 {
            w[n - 1] - w[n - 2]
        } else {
            0.5 * (w[j + 1] - w[j - 1])
        }
    }

    pub fn mean_spacing(&self) -> f64 {
        (self.max() - self.min()) / (self.len() - 1) as f64
    }

    /// Index of the band whose center is nearest to `nm`; ties go to the lower band.
    pub fn nearest(&self, nm: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, w) in self.wavelengths_nm.iter().enumerate() {
            let d = (w - nm).abs();
            if d < best_d {
                best_d = d;
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraProfile {
    pub name: String,
    pub lens_count: usize,
    pub subimage_width: usize,
    pub subimage_height: usize,
    pub sensor_width: usize,
    pub sensor_height: usize,
    pub bit_depth: u8,
    pub max_fps: f64,
    pub band_grid: BandGrid,
    pub fov_deg: f64,
}

impl CameraProfile {
    /// 42-lens linear-filter camera: 51 bands over 450-850 nm, 290x275 scene pixels.
    pub fn s5() -> Self {
        Self {
            name: "s5".into(),
            lens_count: 42,
            subimage_width: 290,
            subimage_height: 275,
            sensor_width: 2448,
            sensor_height: 2048,
            bit_depth: 12,
            max_fps: 15.0,
            band_grid: BandGrid::uniform(450.0, 850.0, 51).expect("static grid"),
            fov_deg: 30.0,
        }
    }

    /// 66-lens individually filtered camera: 164 bands over 350-1002 nm, 410x410 scene pixels.
    pub fn x20() -> Self {
        Self {
            name: "x20".into(),
            lens_count: 66,
            subimage_width: 410,
            subimage_height: 410,
            sensor_width: 5120,
            sensor_height: 3840,
            bit_depth: 12,
            max_fps: 8.0,
            band_grid: BandGrid::uniform(350.0, 1002.0, 164).expect("static grid"),
            fov_deg: 35.0,
        }
    }

    pub fn by_name(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "s5" => Ok(Self::s5()),
            "x20" => Ok(Self::x20()),
            _ => Err(Error::Unknown {
                kind: "camera profile",
                name: name.to_string(),
            }),
        }
    }

    pub fn scene_pixels(&self) -> usize {
        self.subimage_width * self.subimage_height
    }

    pub fn max_dn(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn validate(&self) -> Result<()> {
        if self.lens_count == 0 {
            return Err(Error::invalid("profile.lens_count", "must be positive"));
        }
        if self.subimage_width == 0 || self.subimage_height == 0 {
            return Err(Error::invalid("profile.subimage", "empty sub-image"));
        }
        if !(1..=16).contains(&self.bit_depth) {
            return Err(Error::invalid(
                "profile.bit_depth",
                format!("{} not in 1..=16", self.bit_depth),
            ));
        }
        let lens_area = self.lens_count * self.subimage_width * self.subimage_height;
        let sensor_area = self.sensor_width * self.sensor_height;
        if lens_area > sensor_area {
            return Err(Error::invalid(
                "profile.lens_count",
                format!("lens area {lens_area} exceeds sensor area {sensor_area}"),
            ));
        }
        if !(self.max_fps > 0.0) {
            return Err(Error::invalid("profile.max_fps", "must be positive"));
        }
        Ok(())
    }
}

/// Rectangular sensor region covered by one microlens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LensRegion {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl LensRegion {
    fn overlaps(&self, o: &LensRegion) -> bool {
        self.x < o.x + o.width
            && o.x < self.x + self.width
            && self.y < o.y + o.height
            && o.y < self.y + self.height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MicrolensLayout {
    pub regions: Vec<LensRegion>,
}

impl MicrolensLayout {
    pub fn validate(&self, profile: &CameraProfile) -> Result<()> {
        if self.regions.len() != profile.lens_count {
            return Err(Error::invalid(
                "layout",
                format!(
                    "{} regions for {} lenses",
                    self.regions.len(),
                    profile.lens_count
                ),
            ));
        }
        for (i, r) in self.regions.iter().enumerate() {
            if r.width != profile.subimage_width || r.height != profile.subimage_height {
                return Err(Error::invalid(
                    format!("layout[{i}]"),
                    format!(
                        "region is {}x{}, profile sub-image is {}x{}",
                        r.width, r.height, profile.subimage_width, profile.subimage_height
                    ),
                ));
            }
            if r.x + r.width > profile.sensor_width || r.y + r.height > profile.sensor_height {
                return Err(Error::invalid(
                    format!("layout[{i}]"),
                    "region exceeds sensor bounds",
                ));
            }
        }
        for i in 0..self.regions.len() {
            for j in i + 1..self.regions.len() {
                if self.regions[i].overlaps(&self.regions[j]) {
                    return Err(Error::invalid(
                        format!("layout[{i}]"),
                        format!("lens regions {i} and {j} overlap"),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Row-major 3x3 projective matrix mapping lens sub-image coordinates to
/// scene coordinates. Pixel centers sit at integer coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography([1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0])
    }

    /// Scale the matrix so the bottom-right entry is 1.
    pub fn normalized(&self) -> Option<Self> {
        let h = &self.0;
        if h[8] == 0.0 || !h[8].is_finite() {
            return None;
        }
        if h[8] == 1.0 {
            return Some(*self);
        }
        let mut out = [0.0; 9];
        for (o, v) in out.iter_mut().zip(h) {
            *o = v / h[8];
        }
        Some(Homography(out))
    }

    pub fn determinant(&self) -> f64 {
        let h = &self.0;
        h[0] * (h[4] * h[8] - h[5] * h[7]) - h[1] * (h[3] * h[8] - h[5] * h[6])
            + h[2] * (h[3] * h[7] - h[4] * h[6])
    }

    pub fn is_invertible(&self) -> bool {
        self.normalized()
            .map(|n| n.determinant().abs() > 1e-9)
            .unwrap_or(false)
    }

    pub fn inverse(&self) -> Option<Self> {
        let h = &self.0;
        let det = self.determinant();
        if det.abs() <= 1e-12 || !det.is_finite() {
            return None;
        }
        let adj = [
            h[4] * h[8] - h[5] * h[7],
            h[2] * h[7] - h[1] * h[8],
            h[1] * h[5] - h[2] * h[4],
            h[5] * h[6] - h[3] * h[8],
            h[0] * h[8] - h[2] * h[6],
            h[2] * h[3] - h[0] * h[5],
            h[3] * h[7] - h[4] * h[6],
            h[1] * h[6] - h[0] * h[7],
            h[0] * h[4] - h[1] * h[3],
        ];
        let mut out = [0.0; 9];
        for (o, a) in out.iter_mut().zip(adj) {
            *o = a / det;
        }
        Homography(out).normalized()
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let h = &self.0;
        let w = h[6] * x + h[7] * y + h[8];
        (
            (h[0] * x + h[1] * y + h[2]) / w,
            (h[3] * x + h[4] * y + h[5]) / w,
        )
    }

    /// `Some((tx, ty))` when the matrix is a pure translation.
    pub fn as_translation(&self) -> Option<(f64, f64)> {
        let h = &self.0;
        (h[0] == 1.0 && h[1] == 0.0 && h[3] == 0.0 && h[4] == 1.0 && h[6] == 0.0 && h[7] == 0.0 && h[8] == 1.0)
            .then_some((h[2], h[5]))
    }
}

/// Per-lens wavelength assignment, linear in sub-image coordinates:
/// `origin_nm + dnm_dx * u + dnm_dy * v`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearDispersion {
    pub origin_nm: f64,
    pub dnm_dx: f64,
    pub dnm_dy: f64,
}

impl LinearDispersion {
    #[inline]
    pub fn wavelength_at(&self, u: f64, v: f64) -> f64 {
        self.origin_nm + self.dnm_dx * u + self.dnm_dy * v
    }

    fn extremes(&self, width: usize, height: usize) -> (f64, f64) {
        let (w, h) = ((width - 1) as f64, (height - 1) as f64);
        let c = [
            self.wavelength_at(0.0, 0.0),
            self.wavelength_at(w, 0.0),
            self.wavelength_at(0.0, h),
            self.wavelength_at(w, h),
        ];
        (
            c.iter().copied().fold(f64::INFINITY, f64::min),
            c.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        )
    }
}

/// Dispersion for one working distance; `None` marks an unassigned lens.
pub type DispersionMap = Vec<Option<LinearDispersion>>;

#[derive(Debug, Clone, PartialEq)]
pub struct HomographySet {
    pub distances_cm: Vec<f64>,
    /// `matrices[d][lens]`
    pub matrices: Vec<Vec<Homography>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    pub profile: CameraProfile,
    pub layout: MicrolensLayout,
    pub homographies: HomographySet,
    /// One map per entry of `homographies.distances_cm`.
    pub dispersion: Vec<DispersionMap>,
}

/// Calibration specialized to a single working distance.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedCalibration {
    pub working_distance_cm: f64,
    pub extrapolated: bool,
    pub subimage_width: usize,
    pub subimage_height: usize,
    pub band_grid: BandGrid,
    pub homographies: Vec<Homography>,
    pub dispersion: DispersionMap,
}

impl ResolvedCalibration {
    pub fn lens_count(&self) -> usize {
        self.homographies.len()
    }
}

fn lerp_clamped(a: f64, b: f64, t: f64) -> f64 {
    if a == b {
        return a;
    }
    let v = a + t * (b - a);
    v.clamp(a.min(b), a.max(b))
}

impl CalibrationSet {
    pub fn validate(&self) -> Result<()> {
        self.profile.validate()?;
        self.layout.validate(&self.profile)?;
        let d = &self.homographies.distances_cm;
        if d.is_empty() {
            return Err(Error::invalid("distances_cm", "no calibrated distance"));
        }
        for (i, v) in d.iter().enumerate() {
            if !(v.is_finite() && *v > 0.0) {
                return Err(Error::invalid(format!("distances_cm[{i}]"), "must be positive"));
            }
        }
        if let Some(i) = d.windows(2).position(|w| w[1] <= w[0]) {
            return Err(Error::invalid(
                format!("distances_cm[{}]", i + 1),
                "distances must be strictly ascending",
            ));
        }
        if self.homographies.matrices.len() != d.len() {
            return Err(Error::invalid(
                "homographies",
                "one matrix list per calibrated distance required",
            ));
        }
        if self.dispersion.len() != d.len() {
            return Err(Error::invalid(
                "dispersion",
                "one dispersion map per calibrated distance required",
            ));
        }
        let n = self.profile.lens_count;
        let grid = &self.profile.band_grid;
        let (lo, hi) = (grid.min() - DISPERSION_MARGIN_NM, grid.max() + DISPERSION_MARGIN_NM);
        for (di, dist) in d.iter().enumerate() {
            let mats = &self.homographies.matrices[di];
            if mats.len() != n {
                return Err(Error::invalid(
                    format!("homographies[{dist}]"),
                    format!("{} matrices for {n} lenses", mats.len()),
                ));
            }
            for (li, m) in mats.iter().enumerate() {
                if m.0.iter().any(|v| !v.is_finite()) || !m.is_invertible() {
                    return Err(Error::invalid(
                        format!("homographies[{dist}][{li}]"),
                        "matrix is not invertible",
                    ));
                }
            }
            let disp = &self.dispersion[di];
            if disp.len() != n {
                return Err(Error::invalid(
                    format!("dispersion[{dist}]"),
                    format!("{} entries for {n} lenses", disp.len()),
                ));
            }
            for (li, entry) in disp.iter().enumerate() {
                let Some(ld) = entry else { continue };
                let (wmin, wmax) =
                    ld.extremes(self.profile.subimage_width, self.profile.subimage_height);
                if !(wmin.is_finite() && wmax.is_finite()) || wmin < lo || wmax > hi {
                    return Err(Error::invalid(
                        format!("dispersion[{dist}][{li}]"),
                        format!("wavelengths {wmin:.3}..{wmax:.3} nm outside [{lo}, {hi}]"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Resolve homographies and dispersion for `working_distance_cm`.
    ///
    /// Exact at calibrated distances, entrywise linear in between, clamped
    /// (and flagged) outside the calibrated range.
    pub fn at_distance(&self, working_distance_cm: f64) -> ResolvedCalibration {
        let d = &self.homographies.distances_cm;
        let resolved = |homographies: Vec<Homography>, dispersion: DispersionMap, extrapolated| {
            ResolvedCalibration {
                working_distance_cm,
                extrapolated,
                subimage_width: self.profile.subimage_width,
                subimage_height: self.profile.subimage_height,
                band_grid: self.profile.band_grid.clone(),
                homographies,
                dispersion,
            }
        };
        let entry = |i: usize, extrapolated| {
            resolved(
                self.homographies.matrices[i].clone(),
                self.dispersion[i].clone(),
                extrapolated,
            )
        };
        if let Some(i) = d.iter().position(|&v| v == working_distance_cm) {
            return entry(i, false);
        }
        if working_distance_cm < d[0] || working_distance_cm.is_nan() {
            return entry(0, true);
        }
        if working_distance_cm > d[d.len() - 1] {
            return entry(d.len() - 1, true);
        }
        let hi = d.iter().position(|&v| v > working_distance_cm).expect("bracketed");
        let lo = hi - 1;
        let t = (working_distance_cm - d[lo]) / (d[hi] - d[lo]);
        let homographies = self.homographies.matrices[lo]
            .iter()
            .zip(&self.homographies.matrices[hi])
            .map(|(a, b)| {
                let a = a.normalized().expect("validated");
                let b = b.normalized().expect("validated");
                let mut m = [0.0; 9];
                for k in 0..9 {
                    m[k] = lerp_clamped(a.0[k], b.0[k], t);
                }
                Homography(m)
            })
            .collect();
        let dispersion = self.dispersion[lo]
            .iter()
            .zip(&self.dispersion[hi])
            .map(|(a, b)| match (a, b) {
                (Some(a), Some(b)) => Some(LinearDispersion {
                    origin_nm: lerp_clamped(a.origin_nm, b.origin_nm, t),
                    dnm_dx: lerp_clamped(a.dnm_dx, b.dnm_dx, t),
                    dnm_dy: lerp_clamped(a.dnm_dy, b.dnm_dy, t),
                }),
                _ => None,
            })
            .collect();
        resolved(homographies, dispersion, false)
    }
}

/// Pick a `cols x rows` lens grid that fits the sensor, preferring full and square-ish grids.
fn lens_grid(profile: &CameraProfile) -> Option<(usize, usize)> {
    let n = profile.lens_count;
    let (w, h) = (profile.subimage_width, profile.subimage_height);
    let mut best: Option<(usize, usize, (usize, usize, usize))> = None;
    for cols in 1..=n {
        let rows = n.div_ceil(cols);
        if cols * w > profile.sensor_width || rows * h > profile.sensor_height {
            continue;
        }
        let key = (cols * rows - n, cols.abs_diff(rows), rows);
        if best.map_or(true, |(_, _, k)| key < k) {
            best = Some((cols, rows, key));
        }
    }
    best.map(|(c, r, _)| (c, r))
}

/// Lens center wavelengths. Spacing stays below 1.8x the band spacing where
/// possible; when there are too few lenses for the whole grid, a dense window
/// around the visible range is kept and the remaining lenses spread sparsely
/// over the extremes.
fn lens_wavelengths(grid: &BandGrid, n: usize, sweep_nm: f64) -> Vec<f64> {
    if n == 1 {
        return vec![0.5 * (grid.min() + grid.max())];
    }
    let lo = grid.min() - 0.5 * sweep_nm - 0.5;
    let hi = grid.max() + 0.5 * sweep_nm + 0.5;
    let dense = 1.8 * grid.mean_spacing();
    let uniform = (hi - lo) / (n - 1) as f64;
    if uniform <= dense {
        return (0..n).map(|i| lo + uniform * i as f64).collect();
    }
    let sparse_max = 4.0 * grid.mean_spacing();
    let center = 575.0_f64.clamp(lo, hi);
    for k in (2..=n).rev() {
        let width = (k - 1) as f64 * dense;
        let mut a = center - 0.5 * width;
        let mut b = center + 0.5 * width;
        if a < lo {
            b += lo - a;
            a = lo;
        }
        if b > hi {
            a -= b - hi;
            b = hi;
        }
        let a = a.max(lo);
        let (left, right) = (a - lo, hi - b);
        let nl = (left / sparse_max).ceil() as usize;
        let nr = (right / sparse_max).ceil() as usize;
        if k + nl + nr > n {
            continue;
        }
        let extra = n - k - nl - nr;
        let nl = nl + extra / 2;
        let nr = nr + extra - extra / 2;
        let mut out = Vec::with_capacity(n);
        for j in (1..=nl).rev() {
            out.push(a - left * j as f64 / nl as f64);
        }
        for i in 0..k {
            out.push(a + dense * i as f64);
        }
        for j in 1..=nr {
            out.push(b + right * j as f64 / nr as f64);
        }
        return out;
    }
    (0..n).map(|i| lo + uniform * i as f64).collect()
}

/// Deterministic synthetic calibration for `profile` at the given distances.
///
/// Lenses tile the sensor in a rectangular grid. Each lens is perfectly
/// aligned at [`NOMINAL_DISTANCE_CM`]; away from it, a sub-pixel parallax
/// translation (proportional to the lens offset from the array center) and a
/// slight magnification appear. Each lens passes a single wavelength; a
/// single-lens profile instead sweeps the whole band grid across its
/// sub-image.
pub fn synthesize_default_calibration(
    profile: &CameraProfile,
    distances_cm: &[f64],
) -> Result<CalibrationSet> {
    profile.validate()?;
    if distances_cm.is_empty() {
        return Err(Error::invalid("distances_cm", "no distance given"));
    }
    let mut distances = distances_cm.to_vec();
    distances.sort_by(f64::total_cmp);
    distances.dedup();

    let (cols, rows) = lens_grid(profile).ok_or_else(|| {
        Error::invalid(
            "layout",
            format!(
                "{} lenses of {}x{} do not fit a {}x{} sensor",
                profile.lens_count,
                profile.subimage_width,
                profile.subimage_height,
                profile.sensor_width,
                profile.sensor_height
            ),
        )
    })?;
    let (w, h) = (profile.subimage_width, profile.subimage_height);
    let gap_x = (profile.sensor_width - cols * w) / (cols + 1);
    let gap_y = (profile.sensor_height - rows * h) / (rows + 1);
    let regions = (0..profile.lens_count)
        .map(|i| {
            let (c, r) = (i % cols, i / cols);
            LensRegion {
                x: gap_x + c * (w + gap_x),
                y: gap_y + r * (h + gap_y),
                width: w,
                height: h,
            }
        })
        .collect();

    let grid = &profile.band_grid;
    let n = profile.lens_count;
    // Multi-lens profiles keep one wavelength per lens: every scene pixel is
    // then sampled at the same wavelengths, so a white reference taken
    // anywhere in the scene cancels the illuminant everywhere, including at
    // its sharp emission edges.
    let sweep = if n == 1 { grid.max() - grid.min() } else { 0.0 };
    let centers = lens_wavelengths(grid, n, sweep);
    let dnm_dx = if w > 1 { sweep / (w - 1) as f64 } else { 0.0 };

    let (cx, cy) = (0.5 * (w - 1) as f64, 0.5 * (h - 1) as f64);
    let mut matrices = Vec::with_capacity(distances.len());
    let mut dispersion: Vec<DispersionMap> = Vec::with_capacity(distances.len());
    for &d in &distances {
        let rel = (d - NOMINAL_DISTANCE_CM) / NOMINAL_DISTANCE_CM;
        let mats = (0..n)
            .map(|i| {
                if rel == 0.0 {
                    return Homography::IDENTITY;
                }
                let (c, r) = ((i % cols) as f64, (i / cols) as f64);
                let tx = 0.25 * rel * (c - 0.5 * (cols - 1) as f64);
                let ty = 0.25 * rel * (r - 0.5 * (rows - 1) as f64);
                let s = 1.0 + 0.002 * rel;
                Homography([
                    s,
                    0.0,
                    (1.0 - s) * cx + tx,
                    0.0,
                    s,
                    (1.0 - s) * cy + ty,
                    0.0,
                    0.0,
                    1.0,
                ])
            })
            .collect();
        matrices.push(mats);
        let shift = 0.02 * (d - NOMINAL_DISTANCE_CM);
        dispersion.push(
            centers
                .iter()
                .map(|&c| {
                    Some(LinearDispersion {
                        origin_nm: c - dnm_dx * cx + shift,
                        dnm_dx,
                        dnm_dy: 0.0,
                    })
                })
                .collect(),
        );
    }
    // Single-lens profiles sweep the whole grid starting at its first band.
    if n == 1 {
        for map in &mut dispersion {
            if let Some(Some(ld)) = map.first_mut() {
                ld.origin_nm = grid.min();
            }
        }
    }
    let calib = CalibrationSet {
        profile: profile.clone(),
        layout: MicrolensLayout { regions },
        homographies: HomographySet {
            distances_cm: distances,
            matrices,
        },
        dispersion,
    };
    calib.validate()?;
    Ok(calib)
}

#[derive(Serialize, Deserialize)]
struct CalibFile {
    #[serde(default)]
    version: Option<u16>,
    profile: CameraProfile,
    layout: MicrolensLayout,
    distances_cm: Vec<f64>,
    homographies: BTreeMap<String, Vec<Homography>>,
    dispersion: BTreeMap<String, DispersionMap>,
}

fn distance_key(d: f64) -> String {
    format!("{d}")
}

fn lookup<'a, T>(
    map: &'a BTreeMap<String, T>,
    what: &str,
    d: f64,
) -> Result<&'a T> {
    map.iter()
        .find(|(k, _)| k.trim().parse::<f64>().ok() == Some(d))
        .map(|(_, v)| v)
        .ok_or_else(|| Error::invalid(format!("{what}[{d}]"), "missing entry for calibrated distance"))
}

impl CalibrationSet {
    pub fn to_json(&self) -> String {
        let file = CalibFile {
            version: Some(CALIB_FORMAT_VERSION),
            profile: self.profile.clone(),
            layout: self.layout.clone(),
            distances_cm: self.homographies.distances_cm.clone(),
            homographies: self
                .homographies
                .distances_cm
                .iter()
                .zip(&self.homographies.matrices)
                .map(|(d, m)| (distance_key(*d), m.clone()))
                .collect(),
            dispersion: self
                .homographies
                .distances_cm
                .iter()
                .zip(&self.dispersion)
                .map(|(d, m)| (distance_key(*d), m.clone()))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("calibration serializes")
    }

    pub fn from_json(text: &str, origin: &Path) -> Result<Self> {
        let file: CalibFile = serde_json::from_str(text).map_err(|e| Error::Malformed {
            path: origin.to_path_buf(),
            msg: e.to_string(),
        })?;
        if let Some(v) = file.version {
            if v != CALIB_FORMAT_VERSION {
                return Err(Error::UnsupportedVersion {
                    found: v,
                    supported: CALIB_FORMAT_VERSION,
                });
            }
        }
        for (what, keys) in [
            ("homographies", file.homographies.keys().collect::<Vec<_>>()),
            ("dispersion", file.dispersion.keys().collect::<Vec<_>>()),
        ] {
            for k in keys {
                match k.trim().parse::<f64>() {
                    Ok(d) if file.distances_cm.contains(&d) => {}
                    _ => {
                        return Err(Error::invalid(
                            format!("{what}[{k}]"),
                            "key is not a calibrated distance",
                        ))
                    }
                }
            }
        }
        let mut matrices = Vec::with_capacity(file.distances_cm.len());
        let mut dispersion = Vec::with_capacity(file.distances_cm.len());
        for &d in &file.distances_cm {
            matrices.push(lookup(&file.homographies, "homographies", d)?.clone());
            dispersion.push(lookup(&file.dispersion, "dispersion", d)?.clone());
        }
        let calib = CalibrationSet {
            profile: file.profile,
            layout: file.layout,
            homographies: HomographySet {
                distances_cm: file.distances_cm,
                matrices,
            },
            dispersion,
        };
        calib.validate()?;
        Ok(calib)
    }
}

pub fn load_calibration(path: impl AsRef<Path>) -> Result<CalibrationSet> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    CalibrationSet::from_json(&text, path)
}

pub fn save_calibration(calib: &CalibrationSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, calib.to_json()).map_err(|e| Error::io(path, e))
}
