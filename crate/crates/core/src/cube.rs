//! Raw frame to uniform hyperspectral cube: sub-image extraction, homography
//! alignment and dispersion-map resampling.

use std::collections::HashMap;
use std::time::Instant;

use rayon::prelude::*;

use crate::calib::{BandGrid, Homography, MicrolensLayout, ResolvedCalibration};
use crate::error::{Error, Result};

/// Raw light-field sensor readout in digital numbers.
#[derive(Debug, Clone)]
pub struct RawSensorFrame {
    pub width: usize,
    pub height: usize,
    pub bit_depth: u8,
    /// Row-major.
    pub pixels: Vec<u16>,
    pub integration_time_ms: f32,
    pub frame_id: u64,
    pub captured_at: Instant,
}

impl PartialEq for RawSensorFrame {
    fn eq(&self, o: &Self) -> bool {
        self.width == o.width
            && self.height == o.height
            && self.bit_depth == o.bit_depth
            && self.integration_time_ms.to_bits() == o.integration_time_ms.to_bits()
            && self.frame_id == o.frame_id
            && self.pixels == o.pixels
    }
}

impl RawSensorFrame {
    pub fn new(
        width: usize,
        height: usize,
        bit_depth: u8,
        pixels: Vec<u16>,
        integration_time_ms: f32,
        frame_id: u64,
    ) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::DimensionMismatch {
                expected: format!("{} pixels ({width}x{height})", width * height),
                actual: format!("{} pixels", pixels.len()),
            });
        }
        if !(1..=16).contains(&bit_depth) {
            return Err(Error::invalid("frame.bit_depth", format!("{bit_depth}")));
        }
        let limit = 1u32 << bit_depth;
        if let Some(i) = pixels.iter().position(|&v| u32::from(v) >= limit) {
            return Err(Error::invalid(
                format!("frame.pixels[{i}]"),
                format!("{} does not fit {bit_depth} bits", pixels[i]),
            ));
        }
        Ok(Self {
            width,
            height,
            bit_depth,
            pixels,
            integration_time_ms,
            frame_id,
            captured_at: Instant::now(),
        })
    }

    pub fn saturation_dn(&self) -> u16 {
        ((1u32 << self.bit_depth) - 1) as u16
    }

    pub fn saturated_fraction(&self) -> f64 {
        let sat = self.saturation_dn();
        let n = self.pixels.iter().filter(|&&v| v == sat).count();
        n as f64 / self.pixels.len().max(1) as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CubeStage {
    Raw = 0,
    Transformed = 1,
    Uniform = 2,
    Reflectance = 3,
}

impl CubeStage {
    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => CubeStage::Raw,
            1 => CubeStage::Transformed,
            2 => CubeStage::Uniform,
            3 => CubeStage::Reflectance,
            _ => return None,
        })
    }

    pub fn is_lens_indexed(self) -> bool {
        matches!(self, CubeStage::Raw | CubeStage::Transformed)
    }
}

/// Stack of equally sized planes with a per-sample validity mask.
///
/// Values and mask are plane-major, row-major within a plane.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralCube {
    pub width: usize,
    pub height: usize,
    pub stage: CubeStage,
    /// Lens index per plane for lens-indexed stages, otherwise empty.
    pub lenses: Vec<usize>,
    /// Band wavelength per plane for spectral stages, otherwise empty.
    pub wavelengths_nm: Vec<f64>,
    pub values: Vec<f32>,
    pub valid: Vec<bool>,
}

impl SpectralCube {
    pub fn lens_indexed(width: usize, height: usize, stage: CubeStage, planes: usize) -> Self {
        debug_assert!(stage.is_lens_indexed());
        let n = width * height * planes;
        Self {
            width,
            height,
            stage,
            lenses: (0..planes).collect(),
            wavelengths_nm: Vec::new(),
            values: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    pub fn spectral(width: usize, height: usize, stage: CubeStage, grid: &BandGrid) -> Self {
        debug_assert!(!stage.is_lens_indexed());
        let n = width * height * grid.len();
        Self {
            width,
            height,
            stage,
            lenses: Vec::new(),
            wavelengths_nm: grid.wavelengths().to_vec(),
            values: vec![0.0; n],
            valid: vec![false; n],
        }
    }

    /// Uniform-stage cube with the same value everywhere.
    pub fn filled(width: usize, height: usize, grid: &BandGrid, value: f32) -> Self {
        let mut c = Self::spectral(width, height, CubeStage::Uniform, grid);
        c.values.fill(value);
        c.valid.fill(true);
        c
    }

    #[inline]
    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn plane_count(&self) -> usize {
        if self.stage.is_lens_indexed() {
            self.lenses.len()
        } else {
            self.wavelengths_nm.len()
        }
    }

    pub fn plane(&self, i: usize) -> &[f32] {
        let n = self.plane_len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn plane_valid(&self, i: usize) -> &[bool] {
        let n = self.plane_len();
        &self.valid[i * n..(i + 1) * n]
    }

    #[inline]
    pub fn index(&self, plane: usize, x: usize, y: usize) -> usize {
        plane * self.plane_len() + y * self.width + x
    }

    pub fn get(&self, plane: usize, x: usize, y: usize) -> Option<f32> {
        let i = self.index(plane, x, y);
        self.valid[i].then_some(self.values[i])
    }

    pub fn set(&mut self, plane: usize, x: usize, y: usize, value: f32, valid: bool) {
        let i = self.index(plane, x, y);
        self.values[i] = value;
        self.valid[i] = valid;
    }

    pub fn band_grid(&self) -> Option<BandGrid> {
        BandGrid::new(self.wavelengths_nm.clone()).ok()
    }

    /// Multiply every value by `alpha`, keeping the mask.
    pub fn scaled(&self, alpha: f32) -> Self {
        let mut c = self.clone();
        c.values.iter_mut().for_each(|v| *v *= alpha);
        c
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.plane_len() * self.plane_count();
        if self.values.len() != n || self.valid.len() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n} samples"),
                actual: format!("{} values, {} mask bits", self.values.len(), self.valid.len()),
            });
        }
        Ok(())
    }
}

/// Copy each lens region of `frame` into its own plane. Saturated pixels are invalid.
pub fn extract_raw_cube(frame: &RawSensorFrame, layout: &MicrolensLayout) -> Result<SpectralCube> {
    let first = layout
        .regions
        .first()
        .ok_or_else(|| Error::invalid("layout", "no lens regions"))?;
    let (w, h) = (first.width, first.height);
    for (i, r) in layout.regions.iter().enumerate() {
        if r.x + r.width > frame.width || r.y + r.height > frame.height {
            return Err(Error::DimensionMismatch {
                expected: format!("frame covering lens {i} at ({}, {}) {}x{}", r.x, r.y, r.width, r.height),
                actual: format!("{}x{} frame", frame.width, frame.height),
            });
        }
        if (r.width, r.height) != (w, h) {
            return Err(Error::invalid(format!("layout[{i}]"), "lens regions differ in size"));
        }
    }
    let sat = frame.saturation_dn();
    let mut cube = SpectralCube::lens_indexed(w, h, CubeStage::Raw, layout.regions.len());
    let n = w * h;
    cube.values
        .par_chunks_mut(n)
        .zip(cube.valid.par_chunks_mut(n))
        .zip(&layout.regions)
        .for_each(|((vals, mask), r)| {
            for y in 0..h {
                let src = &frame.pixels[(r.y + y) * frame.width + r.x..][..w];
                let dst = &mut vals[y * w..(y + 1) * w];
                let m = &mut mask[y * w..(y + 1) * w];
                for ((d, mv), &s) in dst.iter_mut().zip(m.iter_mut()).zip(src) {
                    *d = f32::from(s);
                    *mv = s != sat;
                }
            }
        });
    Ok(cube)
}

/// Bilinear sample at `(sx, sy)`; terms with zero weight are not touched, so
/// integer coordinates read exactly one pixel. Returns `None` when a
/// contributing sample is outside the plane or invalid.
#[inline]
fn bilinear(
    vals: &[f32],
    mask: &[bool],
    w: usize,
    h: usize,
    sx: f64,
    sy: f64,
) -> Option<f32> {
    let x0 = sx.floor();
    let y0 = sy.floor();
    let fx = sx - x0;
    let fy = sy - y0;
    let (x0, y0) = (x0 as i64, y0 as i64);
    let mut acc = 0.0f64;
    for (dy, wy) in [(0i64, 1.0 - fy), (1, fy)] {
        if wy == 0.0 {
            continue;
        }
        for (dx, wx) in [(0i64, 1.0 - fx), (1, fx)] {
            if wx == 0.0 {
                continue;
            }
            let (x, y) = (x0 + dx, y0 + dy);
            if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
                return None;
            }
            let i = y as usize * w + x as usize;
            if !mask[i] {
                return None;
            }
            acc += wx * wy * f64::from(vals[i]);
        }
    }
    Some(acc as f32)
}

fn warp_plane(
    src: &[f32],
    src_mask: &[bool],
    dst: &mut [f32],
    dst_mask: &mut [bool],
    w: usize,
    h: usize,
    to_source: &Homography,
) {
    if let Some((tx, ty)) = to_source.as_translation() {
        if tx == 0.0 && ty == 0.0 {
            dst.copy_from_slice(src);
            dst_mask.copy_from_slice(src_mask);
            return;
        }
        for y in 0..h {
            let sy = y as f64 + ty;
            for x in 0..w {
                let i = y * w + x;
                match bilinear(src, src_mask, w, h, x as f64 + tx, sy) {
                    Some(v) => {
                        dst[i] = v;
                        dst_mask[i] = true;
                    }
                    None => {
                        dst[i] = 0.0;
                        dst_mask[i] = false;
                    }
                }
            }
        }
        return;
    }
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = to_source.apply(x as f64, y as f64);
            let i = y * w + x;
            match bilinear(src, src_mask, w, h, sx, sy) {
                Some(v) => {
                    dst[i] = v;
                    dst_mask[i] = true;
                }
                None => {
                    dst[i] = 0.0;
                    dst_mask[i] = false;
                }
            }
        }
    }
}

/// As [`warp_cube`], but an all-identity calibration passes the planes
/// through without copying.
pub fn warp_cube_owned(raw: SpectralCube, resolved: &ResolvedCalibration) -> Result<SpectralCube> {
    if raw.plane_count() == resolved.lens_count()
        && resolved.homographies.iter().all(|h| h.as_translation() == Some((0.0, 0.0)))
    {
        let mut out = raw;
        out.stage = CubeStage::Transformed;
        return Ok(out);
    }
    warp_cube(&raw, resolved)
}

/// Align every lens plane with the scene through its homography (bilinear).
pub fn warp_cube(raw: &SpectralCube, resolved: &ResolvedCalibration) -> Result<SpectralCube> {
    if raw.plane_count() != resolved.lens_count() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} lens planes", resolved.lens_count()),
            actual: format!("{} planes", raw.plane_count()),
        });
    }
    let inverses = resolved
        .homographies
        .iter()
        .enumerate()
        .map(|(lens, h)| h.inverse().ok_or(Error::SingularHomography { lens }))
        .collect::<Result<Vec<_>>>()?;
    let (w, h) = (raw.width, raw.height);
    let n = raw.plane_len();
    let mut out = SpectralCube::lens_indexed(w, h, CubeStage::Transformed, raw.plane_count());
    out.lenses = raw.lenses.clone();
    out.values
        .par_chunks_mut(n)
        .zip(out.valid.par_chunks_mut(n))
        .enumerate()
        .for_each(|(i, (dst, dst_mask))| {
            warp_plane(raw.plane(i), raw.plane_valid(i), dst, dst_mask, w, h, &inverses[i]);
        });
    Ok(out)
}

const NO_LENS: u16 = u16::MAX;

/// Interpolation recipe for one band given that every sample is valid.
#[derive(Debug, Clone, Copy, PartialEq)]
struct BandTap {
    /// `NO_LENS` when the band cannot be reconstructed.
    lo: u16,
    /// `NO_LENS` for an exact hit on `lo`.
    hi: u16,
    frac: f64,
}

/// Resampling recipe precomputed from a resolved calibration. Pixels that
/// see the same wavelength samples share one sample set and one tap table,
/// so a frame is resampled plane by plane; pixels with an invalid sample
/// fall back to per-pixel interpolation over their valid samples.
#[derive(Debug, Clone)]
pub struct ResamplePlan {
    width: usize,
    height: usize,
    lenses: usize,
    grid: BandGrid,
    /// Per band: maximum distance from a bracketing sample.
    reach: Vec<f64>,
    /// Wavelength-sorted `(lens, wavelength)` samples per distinct set.
    sample_sets: Vec<Vec<(u16, f64)>>,
    /// `bands` taps per sample set.
    taps: Vec<BandTap>,
    /// Sample set index per pixel.
    set_of: Vec<u32>,
}

impl ResamplePlan {
    pub fn new(resolved: &ResolvedCalibration, grid: &BandGrid) -> Result<Self> {
        let (w, h) = (resolved.subimage_width, resolved.subimage_height);
        let l = resolved.lens_count();
        if l >= NO_LENS as usize {
            return Err(Error::invalid("layout", "too many lenses"));
        }
        let inverses = resolved
            .homographies
            .iter()
            .enumerate()
            .map(|(lens, h)| h.inverse().ok_or(Error::SingularHomography { lens }))
            .collect::<Result<Vec<_>>>()?;
        let per_pixel: Vec<Vec<(u16, f64)>> = (0..w * h)
            .into_par_iter()
            .map(|p| {
                let (x, y) = ((p % w) as f64, (p / w) as f64);
                let mut samples: Vec<(u16, f64)> = Vec::with_capacity(l);
                for (lens, disp) in resolved.dispersion.iter().enumerate() {
                    if let Some(d) = disp {
                        let (u, v) = inverses[lens].apply(x, y);
                        samples.push((lens as u16, d.wavelength_at(u, v)));
                    }
                }
                samples.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
                samples
            })
            .collect();

        let mut index: HashMap<Vec<(u16, u64)>, u32> = HashMap::new();
        let mut sample_sets: Vec<Vec<(u16, f64)>> = Vec::new();
        let mut set_of = Vec::with_capacity(w * h);
        for samples in per_pixel {
            if let Some(last) = sample_sets.last() {
                if *last == samples {
                    set_of.push((sample_sets.len() - 1) as u32);
                    continue;
                }
            }
            let key: Vec<(u16, u64)> = samples.iter().map(|&(l, wl)| (l, wl.to_bits())).collect();
            let id = *index.entry(key).or_insert_with(|| {
                sample_sets.push(samples);
                (sample_sets.len() - 1) as u32
            });
            set_of.push(id);
        }

        let reach: Vec<f64> = (0..grid.len()).map(|j| 2.0 * grid.local_spacing(j)).collect();
        let taps = sample_sets
            .iter()
            .flat_map(|set| band_taps(set, grid.wavelengths(), &reach))
            .collect();
        Ok(Self {
            width: w,
            height: h,
            lenses: l,
            grid: grid.clone(),
            reach,
            sample_sets,
            taps,
            set_of,
        })
    }

    pub fn grid(&self) -> &BandGrid {
        &self.grid
    }

    /// Number of distinct per-pixel sample sets.
    pub fn distinct_sample_sets(&self) -> usize {
        self.sample_sets.len()
    }

    /// Resample a transformed cube onto the band grid.
    pub fn apply(&self, transformed: &SpectralCube) -> Result<SpectralCube> {
        if transformed.plane_count() != self.lenses
            || transformed.width != self.width
            || transformed.height != self.height
        {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{}x{} transformed cube", self.width, self.height, self.lenses),
                actual: format!(
                    "{}x{}x{}",
                    transformed.width,
                    transformed.height,
                    transformed.plane_count()
                ),
            });
        }
        let n = self.width * self.height;
        let bands = self.grid.len();
        let mut out = SpectralCube::spectral(self.width, self.height, CubeStage::Uniform, &self.grid);

        // pixels whose samples are all valid take the shared taps
        let mut all_valid = vec![true; n];
        for k in 0..self.lenses {
            for (a, &v) in all_valid.iter_mut().zip(transformed.plane_valid(k)) {
                *a &= v;
            }
        }
        let single = self.sample_sets.len() == 1;
        out.values
            .par_chunks_mut(n)
            .zip(out.valid.par_chunks_mut(n))
            .enumerate()
            .for_each(|(j, (vals, mask))| {
                if single {
                    let t = self.taps[j];
                    fill_plane_uniform(transformed, t, vals, mask);
                } else {
                    for p in 0..n {
                        let t = self.taps[self.set_of[p] as usize * bands + j];
                        let (v, ok) = tap_value(transformed, t, n, p);
                        vals[p] = v;
                        mask[p] = ok;
                    }
                }
            });

        let grid = self.grid.wavelengths();
        let mut wbuf = vec![0.0f64; self.lenses];
        let mut vbuf = vec![0.0f32; self.lenses];
        let mut col = vec![0.0f32; bands];
        let mut col_ok = vec![false; bands];
        for p in (0..n).filter(|&p| !all_valid[p]) {
            let mut m = 0;
            for &(lens, wl) in &self.sample_sets[self.set_of[p] as usize] {
                let i = lens as usize * n + p;
                if transformed.valid[i] {
                    wbuf[m] = wl;
                    vbuf[m] = transformed.values[i];
                    m += 1;
                }
            }
            interpolate_onto(&wbuf[..m], &vbuf[..m], grid, &self.reach, &mut col, &mut col_ok);
            for j in 0..bands {
                out.values[j * n + p] = col[j];
                out.valid[j * n + p] = col_ok[j];
            }
        }
        Ok(out)
    }
}

/// Taps equivalent to [`interpolate_onto`] over the full sample set.
fn band_taps(set: &[(u16, f64)], grid: &[f64], reach: &[f64]) -> Vec<BandTap> {
    let m = set.len();
    let mut s = 0;
    let mut taps = Vec::with_capacity(grid.len());
    for (j, &t) in grid.iter().enumerate() {
        while s < m && set[s].1 < t {
            s += 1;
        }
        let tap = if s < m && set[s].1 == t {
            BandTap { lo: set[s].0, hi: NO_LENS, frac: 0.0 }
        } else if s > 0 && s < m && t - set[s - 1].1 <= reach[j] && set[s].1 - t <= reach[j] {
            let (a, b) = (set[s - 1].1, set[s].1);
            BandTap { lo: set[s - 1].0, hi: set[s].0, frac: (t - a) / (b - a) }
        } else {
            BandTap { lo: NO_LENS, hi: NO_LENS, frac: 0.0 }
        };
        taps.push(tap);
    }
    taps
}

#[inline]
fn lerp_f32(va: f32, vb: f32, f: f64) -> f32 {
    let (va, vb) = (f64::from(va), f64::from(vb));
    (va + f * (vb - va)) as f32
}

#[inline]
fn tap_value(c: &SpectralCube, t: BandTap, n: usize, p: usize) -> (f32, bool) {
    if t.lo == NO_LENS {
        return (0.0, false);
    }
    let a = t.lo as usize * n + p;
    if t.hi == NO_LENS {
        return (c.values[a], c.valid[a]);
    }
    let b = t.hi as usize * n + p;
    (lerp_f32(c.values[a], c.values[b], t.frac), c.valid[a] && c.valid[b])
}

fn fill_plane_uniform(c: &SpectralCube, t: BandTap, vals: &mut [f32], mask: &mut [bool]) {
    if t.lo == NO_LENS {
        vals.fill(0.0);
        mask.fill(false);
        return;
    }
    let (a, am) = (c.plane(t.lo as usize), c.plane_valid(t.lo as usize));
    if t.hi == NO_LENS {
        vals.copy_from_slice(a);
        mask.copy_from_slice(am);
        return;
    }
    let (b, bm) = (c.plane(t.hi as usize), c.plane_valid(t.hi as usize));
    for (((v, &x), &y), f) in vals.iter_mut().zip(a).zip(b).zip(std::iter::repeat(t.frac)) {
        *v = lerp_f32(x, y, f);
    }
    for ((m, &x), &y) in mask.iter_mut().zip(am).zip(bm) {
        *m = x && y;
    }
}

/// Linear interpolation of sorted `(wl, val)` samples onto `grid`. A band is
/// valid when a sample hits it exactly, or when it is bracketed by samples
/// each within `reach[j]` of the band center.
#[inline]
fn interpolate_onto(
    wl: &[f64],
    val: &[f32],
    grid: &[f64],
    reach: &[f64],
    out: &mut [f32],
    out_valid: &mut [bool],
) {
    let m = wl.len();
    let mut s = 0;
    for (j, &t) in grid.iter().enumerate() {
        while s < m && wl[s] < t {
            s += 1;
        }
        if s < m && wl[s] == t {
            out[j] = val[s];
            out_valid[j] = true;
        } else if s > 0 && s < m && t - wl[s - 1] <= reach[j] && wl[s] - t <= reach[j] {
            let (a, b) = (wl[s - 1], wl[s]);
            let f = (t - a) / (b - a);
            let (va, vb) = (f64::from(val[s - 1]), f64::from(val[s]));
            out[j] = (va + f * (vb - va)) as f32;
            out_valid[j] = true;
        } else {
            out[j] = 0.0;
            out_valid[j] = false;
        }
    }
}

/// Interpolate each scene pixel's dispersion samples onto `grid`.
pub fn resample_uniform(
    transformed: &SpectralCube,
    resolved: &ResolvedCalibration,
    grid: &BandGrid,
) -> Result<SpectralCube> {
    ResamplePlan::new(resolved, grid)?.apply(transformed)
}
