//! Scene white reference and reflectance normalization.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::cube::{CubeStage, SpectralCube};
use crate::error::{Error, Result};

pub const MIN_ROI_AREA: usize = 16;
pub const DEFAULT_EPSILON_WHITE: f32 = 1.0;
pub const DEFAULT_MIN_VALID_FRACTION: f64 = 0.25;

/// Rectangle in scene-pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionOfInterest {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_id: Option<u64>,
}

impl RegionOfInterest {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Self {
            x,
            y,
            width,
            height,
            frame_id: None,
        }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn validate(&self, scene_width: usize, scene_height: usize) -> Result<()> {
        if self.area() < MIN_ROI_AREA {
            return Err(Error::RoiOutOfBounds(format!(
                "area {} below minimum {MIN_ROI_AREA}",
                self.area()
            )));
        }
        if self.x + self.width > scene_width || self.y + self.height > scene_height {
            return Err(Error::RoiOutOfBounds(format!(
                "({}, {}) {}x{} exceeds {scene_width}x{scene_height} scene",
                self.x, self.y, self.width, self.height
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct WhiteOptions {
    /// Bands whose median does not exceed this are unusable.
    pub epsilon: f32,
    /// Fraction of roi pixels that must be valid in a band.
    pub min_valid_fraction: f64,
}

impl Default for WhiteOptions {
    fn default() -> Self {
        Self {
            epsilon: DEFAULT_EPSILON_WHITE,
            min_valid_fraction: DEFAULT_MIN_VALID_FRACTION,
        }
    }
}

/// Illuminant spectrum measured on a white reflector, one value per band,
/// optionally with a full spatial flat-field cube.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteReferenceCube {
    pub wavelengths_nm: Vec<f64>,
    pub spectrum: Vec<f32>,
    pub band_valid: Vec<bool>,
    pub spatial: Option<SpectralCube>,
    pub gauze_reflectance_factor: f64,
    pub roi: RegionOfInterest,
    pub frame_id: u64,
    pub acquired_at: Instant,
}

impl WhiteReferenceCube {
    pub fn age(&self) -> Duration {
        self.acquired_at.elapsed()
    }

    pub fn valid_bands(&self) -> usize {
        self.band_valid.iter().filter(|v| **v).count()
    }
}

/// Median of a non-empty slice (mean of the two middle values for even counts).
fn median(values: &mut [f32]) -> f32 {
    let n = values.len();
    let mid = n / 2;
    let (_, hi, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
    let hi = *hi;
    if n % 2 == 1 {
        return hi;
    }
    let lo = values[..mid]
        .iter()
        .copied()
        .max_by(f32::total_cmp)
        .expect("even count has a lower half");
    ((f64::from(lo) + f64::from(hi)) * 0.5) as f32
}

pub fn extract_white_reference(
    cube: &SpectralCube,
    roi: RegionOfInterest,
    gauze_reflectance_factor: f64,
) -> Result<WhiteReferenceCube> {
    extract_white_reference_with(cube, roi, gauze_reflectance_factor, WhiteOptions::default())
}

/// Per band: median of the valid roi pixels divided by the gauze reflectance.
pub fn extract_white_reference_with(
    cube: &SpectralCube,
    roi: RegionOfInterest,
    gauze_reflectance_factor: f64,
    opts: WhiteOptions,
) -> Result<WhiteReferenceCube> {
    if cube.stage != CubeStage::Uniform {
        return Err(Error::invalid("cube.stage", "white reference needs a uniform cube"));
    }
    roi.validate(cube.width, cube.height)?;
    if !(gauze_reflectance_factor > 0.0 && gauze_reflectance_factor <= 1.0) {
        return Err(Error::invalid(
            "gauze_reflectance_factor",
            format!("{gauze_reflectance_factor} not in (0, 1]"),
        ));
    }
    let bands = cube.plane_count();
    let need = (opts.min_valid_fraction * roi.area() as f64).ceil() as usize;
    let mut spectrum = vec![0.0f32; bands];
    let mut band_valid = vec![false; bands];
    let mut buf = Vec::with_capacity(roi.area());
    for b in 0..bands {
        buf.clear();
        let vals = cube.plane(b);
        let mask = cube.plane_valid(b);
        for y in roi.y..roi.y + roi.height {
            let row = y * cube.width;
            for x in roi.x..roi.x + roi.width {
                if mask[row + x] {
                    buf.push(vals[row + x]);
                }
            }
        }
        if buf.is_empty() || buf.len() < need.max(1) {
            continue;
        }
        let m = median(&mut buf);
        if m > opts.epsilon {
            spectrum[b] = (f64::from(m) / gauze_reflectance_factor) as f32;
            band_valid[b] = true;
        }
    }
    if !band_valid.iter().any(|v| *v) {
        return Err(Error::UnusableWhiteReference);
    }
    Ok(WhiteReferenceCube {
        wavelengths_nm: cube.wavelengths_nm.clone(),
        spectrum,
        band_valid,
        spatial: None,
        gauze_reflectance_factor,
        roi,
        frame_id: roi.frame_id.unwrap_or(0),
        acquired_at: Instant::now(),
    })
}

/// Reflectance = radiance / white, valid where both are valid.
pub fn normalize_reflectance(cube: &SpectralCube, white: &WhiteReferenceCube) -> Result<SpectralCube> {
    normalize_reflectance_owned(cube.clone(), white)
}

/// As [`normalize_reflectance`], reusing the input buffers.
pub fn normalize_reflectance_owned(cube: SpectralCube, white: &WhiteReferenceCube) -> Result<SpectralCube> {
    if cube.stage != CubeStage::Uniform {
        return Err(Error::invalid("cube.stage", "normalization needs a uniform cube"));
    }
    if cube.wavelengths_nm != white.wavelengths_nm {
        return Err(Error::BandGridMismatch(format!(
            "cube has {} bands, white reference {}",
            cube.wavelengths_nm.len(),
            white.wavelengths_nm.len()
        )));
    }
    if let Some(s) = &white.spatial {
        if (s.width, s.height) != (cube.width, cube.height) || s.wavelengths_nm != cube.wavelengths_nm {
            return Err(Error::DimensionMismatch {
                expected: format!("{}x{} flat field", cube.width, cube.height),
                actual: format!("{}x{}", s.width, s.height),
            });
        }
    }
    let n = cube.plane_len();
    let mut out = cube;
    out.stage = CubeStage::Reflectance;
    for b in 0..out.plane_count() {
        let vals = &mut out.values[b * n..(b + 1) * n];
        let mask = &mut out.valid[b * n..(b + 1) * n];
        if !white.band_valid[b] {
            vals.fill(0.0);
            mask.fill(false);
            continue;
        }
        match &white.spatial {
            None => {
                let w = white.spectrum[b];
                for (v, m) in vals.iter_mut().zip(mask.iter_mut()) {
                    *v = if *m { *v / w } else { 0.0 };
                }
            }
            Some(s) => {
                let (sv, sm) = (s.plane(b), s.plane_valid(b));
                for i in 0..n {
                    if mask[i] && sm[i] && sv[i] > 0.0 {
                        vals[i] /= sv[i];
                    } else {
                        vals[i] = 0.0;
                        mask[i] = false;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calib::BandGrid;

    fn grid() -> BandGrid {
        BandGrid::uniform(450.0, 850.0, 51).unwrap()
    }

    #[test]
    fn constant_region_gives_constant_reference() {
        let cube = SpectralCube::filled(20, 10, &grid(), 1000.0);
        let w = extract_white_reference(&cube, RegionOfInterest::new(2, 2, 5, 5), 1.0).unwrap();
        assert!(w.spectrum.iter().all(|&v| v == 1000.0));
        assert_eq!(w.valid_bands(), 51);
    }

    #[test]
    fn gauze_factor_divides() {
        let cube = SpectralCube::filled(20, 10, &grid(), 900.0);
        let w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 4, 4), 0.9).unwrap();
        assert!(w.spectrum.iter().all(|&v| (v - 1000.0).abs() < 1e-3));
        assert!(extract_white_reference(&cube, RegionOfInterest::new(0, 0, 4, 4), 0.0).is_err());
        assert!(extract_white_reference(&cube, RegionOfInterest::new(0, 0, 4, 4), 1.5).is_err());
    }

    #[test]
    fn mostly_invalid_band_is_dropped() {
        let mut cube = SpectralCube::filled(10, 10, &grid(), 800.0);
        let roi = RegionOfInterest::new(0, 0, 10, 10);
        // 80 of 100 roi pixels invalid on band 7
        for i in 0..80 {
            cube.set(7, i % 10, i / 10, 4095.0, false);
        }
        let w = extract_white_reference(&cube, roi, 1.0).unwrap();
        let invalid: Vec<usize> = (0..51).filter(|&b| !w.band_valid[b]).collect();
        assert_eq!(invalid, vec![7]);
        // counting oracle: exactly 25 valid pixels is still enough
        for i in 75..80 {
            cube.set(7, i % 10, i / 10, 800.0, true);
        }
        let valid_count = cube.plane_valid(7).iter().filter(|v| **v).count();
        assert_eq!(valid_count, 25);
        assert!(extract_white_reference(&cube, roi, 1.0).unwrap().band_valid[7]);
    }

    #[test]
    fn dark_bands_fall_below_floor() {
        let mut cube = SpectralCube::filled(8, 8, &grid(), 500.0);
        for y in 0..8 {
            for x in 0..8 {
                cube.set(0, x, y, 0.5, true);
            }
        }
        let w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 8, 8), 1.0).unwrap();
        assert!(!w.band_valid[0]);
        assert!(w.band_valid[1]);
    }

    #[test]
    fn all_bands_invalid_is_an_error() {
        let cube = SpectralCube::filled(8, 8, &grid(), 0.0);
        assert!(matches!(
            extract_white_reference(&cube, RegionOfInterest::new(0, 0, 8, 8), 1.0),
            Err(Error::UnusableWhiteReference)
        ));
    }

    #[test]
    fn roi_bounds_and_area() {
        let cube = SpectralCube::filled(8, 8, &grid(), 10.0);
        assert!(matches!(
            extract_white_reference(&cube, RegionOfInterest::new(6, 0, 4, 4), 1.0),
            Err(Error::RoiOutOfBounds(_))
        ));
        assert!(extract_white_reference(&cube, RegionOfInterest::new(0, 0, 3, 5), 1.0).is_err());
    }

    #[test]
    fn median_handles_even_counts() {
        assert_eq!(median(&mut [4.0, 1.0, 3.0, 2.0]), 2.5);
        assert_eq!(median(&mut [5.0, 1.0, 3.0]), 3.0);
    }

    #[test]
    fn self_normalization_is_one() {
        let cube = SpectralCube::filled(6, 6, &grid(), 1234.5);
        let w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 6, 6), 1.0).unwrap();
        let r = normalize_reflectance(&cube, &w).unwrap();
        assert_eq!(r.stage, CubeStage::Reflectance);
        assert!(r.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn zero_radiance_is_zero_reflectance() {
        let white = SpectralCube::filled(6, 6, &grid(), 1000.0);
        let w = extract_white_reference(&white, RegionOfInterest::new(0, 0, 6, 6), 1.0).unwrap();
        let dark = SpectralCube::filled(6, 6, &grid(), 0.0);
        let r = normalize_reflectance(&dark, &w).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert!(r.valid.iter().all(|&v| v));
    }

    #[test]
    fn invalid_white_band_invalidates_plane() {
        let cube = SpectralCube::filled(6, 6, &grid(), 1000.0);
        let mut w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 6, 6), 1.0).unwrap();
        w.band_valid[3] = false;
        let r = normalize_reflectance(&cube, &w).unwrap();
        // mask-propagation oracle: valid(out) = valid(cube) && band_valid(white)
        for b in 0..51 {
            for i in 0..36 {
                assert_eq!(r.valid[b * 36 + i], cube.valid[b * 36 + i] && w.band_valid[b]);
            }
        }
    }

    #[test]
    fn band_grid_mismatch() {
        let cube = SpectralCube::filled(6, 6, &grid(), 1000.0);
        let w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 6, 6), 1.0).unwrap();
        let other = SpectralCube::filled(6, 6, &BandGrid::uniform(450.0, 850.0, 50).unwrap(), 1.0);
        assert!(matches!(normalize_reflectance(&other, &w), Err(Error::BandGridMismatch(_))));
    }

    #[test]
    fn spatial_flat_field() {
        let cube = SpectralCube::filled(4, 4, &grid(), 600.0);
        let mut w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 4, 4), 1.0).unwrap();
        let mut flat = SpectralCube::filled(4, 4, &grid(), 1200.0);
        flat.set(0, 1, 1, 0.0, false);
        w.spatial = Some(flat);
        let r = normalize_reflectance(&cube, &w).unwrap();
        assert_eq!(r.get(0, 0, 0), Some(0.5));
        assert_eq!(r.get(0, 1, 1), None);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn illumination_scale_cancels(
                alpha in 0.05f32..20.0,
                seed in prop::collection::vec(10.0f32..3000.0, 4 * 4 * 6),
            ) {
                let g = BandGrid::uniform(500.0, 600.0, 6).unwrap();
                let mut cube = SpectralCube::spectral(4, 4, CubeStage::Uniform, &g);
                cube.values.copy_from_slice(&seed);
                cube.valid.fill(true);
                let roi = RegionOfInterest::new(0, 0, 4, 4);
                let base = normalize_reflectance(&cube, &extract_white_reference(&cube, roi, 1.0).unwrap()).unwrap();
                let scaled_cube = cube.scaled(alpha);
                let scaled = normalize_reflectance(&scaled_cube, &extract_white_reference(&scaled_cube, roi, 1.0).unwrap()).unwrap();
                for (a, b) in base.values.iter().zip(&scaled.values) {
                    prop_assert!(((a - b) / a).abs() < 1e-6, "{} vs {}", a, b);
                }
            }

            #[test]
            fn median_ignores_minority_outliers(
                c in 1.0f32..4000.0,
                outliers in prop::collection::vec(-1e6f32..1e6, 0..49),
            ) {
                let g = BandGrid::uniform(500.0, 510.0, 2).unwrap();
                let mut cube = SpectralCube::filled(10, 10, &g, c);
                for (i, &o) in outliers.iter().enumerate() {
                    cube.set(0, i % 10, i / 10, o, true);
                    cube.set(1, 9 - i % 10, 9 - i / 10, o.abs(), true);
                }
                let w = extract_white_reference(&cube, RegionOfInterest::new(0, 0, 10, 10), 1.0).unwrap();
                prop_assert_eq!(w.spectrum[0], c);
                prop_assert_eq!(w.spectrum[1], c);
            }

            #[test]
            fn normalize_is_monotone(a in 0.0f32..4000.0, d in 0.0f32..100.0) {
                let g = BandGrid::uniform(500.0, 510.0, 2).unwrap();
                let white = SpectralCube::filled(4, 4, &g, 777.0);
                let w = extract_white_reference(&white, RegionOfInterest::new(0, 0, 4, 4), 1.0).unwrap();
                let lo = normalize_reflectance(&SpectralCube::filled(4, 4, &g, a), &w).unwrap();
                let hi = normalize_reflectance(&SpectralCube::filled(4, 4, &g, a + d), &w).unwrap();
                prop_assert!(hi.values[0] >= lo.values[0]);
            }
        }
    }
}
