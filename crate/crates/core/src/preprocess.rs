//! Reflectivity to rain-rate conversion and morphological clutter removal.

use crate::error::{Error, Result};
use crate::gridio::{GridFrame, Variable};

/// Power-law Z = a·R^b linking linear reflectivity to rain rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZRParams {
    pub a: f64,
    pub b: f64,
}

impl Default for ZRParams {
    /// Marshall–Palmer constants.
    fn default() -> Self {
        ZRParams { a: 200.0, b: 1.6 }
    }
}

impl ZRParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.a > 0.0 && self.b > 0.0) {
            return Err(Error::Config(format!("Z-R parameters must be positive: a={}, b={}", self.a, self.b)));
        }
        Ok(())
    }

    /// Rain rate in mm/h for reflectivity in dBZ.
    pub fn rain_rate(&self, dbz: f64) -> f64 {
        (10f64.powf(dbz / 10.0) / self.a).powf(1.0 / self.b)
    }

    /// Reflectivity in dBZ for a positive rain rate.
    pub fn reflectivity(&self, rain: f64) -> f64 {
        10.0 * (self.a * rain.powf(self.b)).log10()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StructuringElement {
    /// 3×3 square of ones.
    Square3,
    /// 3×3 cross (centre plus 4-neighbours).
    Cross3,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterParams {
    pub rain_threshold_mmh: f64,
    pub erosion_iters: usize,
    pub dilation_iters: usize,
    pub element: StructuringElement,
}

impl Default for ClutterParams {
    fn default() -> Self {
        ClutterParams { rain_threshold_mmh: 0.1, erosion_iters: 3, dilation_iters: 3, element: StructuringElement::Square3 }
    }
}

impl ClutterParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.rain_threshold_mmh > 0.0) {
            return Err(Error::Config(format!("rain threshold must be positive, got {}", self.rain_threshold_mmh)));
        }
        Ok(())
    }
}

fn expect_variable(frame: &GridFrame, want: Variable) -> Result<()> {
    if frame.variable != want {
        return Err(Error::Argument(format!("expected a {want} frame, got {}", frame.variable)));
    }
    Ok(())
}

/// Converts a reflectivity frame to rain rate. Nodata becomes 0 mm/h.
pub fn dbz_to_rain(frame: &GridFrame, params: &ZRParams) -> Result<GridFrame> {
    expect_variable(frame, Variable::ReflectivityDbz)?;
    params.validate()?;
    let values = frame.values.iter().map(|&v| if frame.is_nodata(v) { 0.0 } else { params.rain_rate(v as f64) as f32 }).collect();
    Ok(GridFrame { variable: Variable::RainMmh, values, ..frame.clone() })
}

/// Converts a rain frame back to reflectivity. Zero rain becomes nodata.
pub fn rain_to_dbz(frame: &GridFrame, params: &ZRParams) -> Result<GridFrame> {
    expect_variable(frame, Variable::RainMmh)?;
    params.validate()?;
    let mut values = Vec::with_capacity(frame.values.len());
    for (i, &v) in frame.values.iter().enumerate() {
        if frame.is_nodata(v) || v == 0.0 {
            values.push(frame.nodata);
        } else if v > 0.0 {
            values.push(params.reflectivity(v as f64) as f32);
        } else {
            return Err(Error::Data(format!("negative rain {v} at index {i}")));
        }
    }
    Ok(GridFrame { variable: Variable::ReflectivityDbz, values, ..frame.clone() })
}

/// Row-major binary grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn filled(rows: usize, cols: usize, value: bool) -> Self {
        BinaryMask { rows, cols, data: vec![value; rows * cols] }
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_subset_of(&self, other: &BinaryMask) -> bool {
        self.data.iter().zip(&other.data).all(|(&a, &b)| !a || b)
    }

    /// One erosion step. Pixels outside the grid count as unset.
    pub fn erode(&self, element: StructuringElement) -> BinaryMask {
        self.morph(element, true)
    }

    /// One dilation step. Pixels outside the grid count as unset.
    pub fn dilate(&self, element: StructuringElement) -> BinaryMask {
        self.morph(element, false)
    }

    fn morph(&self, element: StructuringElement, erode: bool) -> BinaryMask {
        const SQUARE: [(isize, isize); 9] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1)];
        const CROSS: [(isize, isize); 5] = [(-1, 0), (0, -1), (0, 0), (0, 1), (1, 0)];
        let offsets: &[(isize, isize)] = match element {
            StructuringElement::Square3 => &SQUARE,
            StructuringElement::Cross3 => &CROSS,
        };
        let (rows, cols) = (self.rows as isize, self.cols as isize);
        let at = |r: isize, c: isize| r >= 0 && c >= 0 && r < rows && c < cols && self.data[(r * cols + c) as usize];
        let mut out = vec![false; self.data.len()];
        for r in 0..rows {
            for c in 0..cols {
                let hit = |&(dr, dc): &(isize, isize)| at(r + dr, c + dc);
                out[(r * cols + c) as usize] = if erode { offsets.iter().all(hit) } else { offsets.iter().any(hit) };
            }
        }
        BinaryMask { rows: self.rows, cols: self.cols, data: out }
    }
}

/// Pixels strictly above `threshold`; nodata never qualifies.
pub fn threshold_mask(frame: &GridFrame, threshold: f64) -> BinaryMask {
    BinaryMask {
        rows: frame.rows,
        cols: frame.cols,
        data: frame.values.iter().map(|&v| !frame.is_nodata(v) && (v as f64) > threshold).collect(),
    }
}

/// Morphological opening of the thresholded rain field.
pub fn clutter_mask(frame: &GridFrame, params: &ClutterParams) -> Result<BinaryMask> {
    expect_variable(frame, Variable::RainMmh)?;
    params.validate()?;
    let mut mask = threshold_mask(frame, params.rain_threshold_mmh);
    for _ in 0..params.erosion_iters {
        mask = mask.erode(params.element);
    }
    for _ in 0..params.dilation_iters {
        mask = mask.dilate(params.element);
    }
    Ok(mask)
}

/// Zeroes every pixel the mask drops. Nodata pixels are left untouched.
pub fn apply_mask(frame: &GridFrame, mask: &BinaryMask) -> Result<GridFrame> {
    expect_variable(frame, Variable::RainMmh)?;
    if (mask.rows, mask.cols) != frame.shape() {
        return Err(Error::Argument(format!("mask {}x{} does not match frame {}x{}", mask.rows, mask.cols, frame.rows, frame.cols)));
    }
    let values = frame.values.iter().zip(&mask.data).map(|(&v, &keep)| if keep || frame.is_nodata(v) { v } else { 0.0 }).collect();
    Ok(frame.with_values(values))
}

/// Centre-crop geometry applied to both rain and ETH frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropSpec {
    pub rows: usize,
    pub cols: usize,
    /// Explicit offsets; `None` selects the floor-rounded centred window.
    pub offsets: Option<(usize, usize)>,
}

impl CropSpec {
    pub fn apply(&self, frame: &GridFrame) -> Result<GridFrame> {
        match self.offsets {
            Some((r, c)) => frame.crop(r, c, self.rows, self.cols),
            None => frame.crop_center(self.rows, self.cols),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreprocessConfig {
    pub zr: ZRParams,
    pub clutter: ClutterParams,
    pub crop: Option<CropSpec>,
}

/// Full chain for one rain-product frame: dBZ conversion (if needed), clutter removal, crop.
pub fn preprocess_rain(frame: &GridFrame, cfg: &PreprocessConfig) -> Result<GridFrame> {
    let rain = match frame.variable {
        Variable::ReflectivityDbz => dbz_to_rain(frame, &cfg.zr)?,
        Variable::RainMmh => frame.clone(),
        Variable::EthKm => return Err(Error::Argument("ETH frame passed as rain".into())),
    };
    let mask = clutter_mask(&rain, &cfg.clutter)?;
    let cleaned = apply_mask(&rain, &mask)?;
    match &cfg.crop {
        Some(c) => c.apply(&cleaned),
        None => Ok(cleaned),
    }
}

/// ETH frames only receive the crop.
pub fn preprocess_eth(frame: &GridFrame, cfg: &PreprocessConfig) -> Result<GridFrame> {
    expect_variable(frame, Variable::EthKm)?;
    match &cfg.crop {
        Some(c) => c.apply(frame),
        None => Ok(frame.clone()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gridio::DEFAULT_NODATA;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dbz(values: Vec<f32>) -> GridFrame {
        GridFrame::new(Variable::ReflectivityDbz, 0, 1, values.len(), values).unwrap()
    }

    #[test]
    fn marshall_palmer_reference_values() {
        // (10^(dBZ/10) / 200)^(1/1.6), evaluated independently
        let zr = ZRParams::default();
        let r23 = (199.526_231_496_887_96_f64 / 200.0).powf(0.625);
        assert!((zr.rain_rate(23.0) - r23).abs() < 1e-12);
        assert!((zr.rain_rate(23.0) - 0.998_519).abs() < 1e-6);
        assert!((zr.rain_rate(7.0) - 0.0998).abs() < 5e-4);
        assert!(zr.rain_rate(7.0) < 0.1);
        assert!((zr.reflectivity(1.0) - 23.0103).abs() < 1e-4);
    }

    #[test]
    fn nodata_maps_to_zero_rain_and_back() {
        let f = dbz(vec![DEFAULT_NODATA, 23.0]);
        let r = dbz_to_rain(&f, &ZRParams::default()).unwrap();
        assert_eq!(r.values[0], 0.0);
        let back = rain_to_dbz(&r, &ZRParams::default()).unwrap();
        assert_eq!(back.values[0], DEFAULT_NODATA);
        assert!((back.values[1] - 23.0).abs() < 1e-4);
    }

    #[test]
    fn wrong_variable_and_negative_rain() {
        let f = dbz(vec![1.0]);
        assert!(matches!(rain_to_dbz(&f, &ZRParams::default()), Err(Error::Argument(_))));
        let mut r = GridFrame::filled(Variable::RainMmh, 0, 1, 2, 1.0);
        r.values[1] = -1.0;
        assert!(matches!(rain_to_dbz(&r, &ZRParams::default()), Err(Error::Data(_))));
    }

    #[test]
    fn conversion_is_monotone() {
        let zr = ZRParams::default();
        let mut prev = zr.rain_rate(-30.0);
        for i in -299..700 {
            let r = zr.rain_rate(i as f64 / 10.0);
            assert!(r > prev);
            prev = r;
        }
    }

    fn rain_grid(rows: usize, cols: usize, values: Vec<f32>) -> GridFrame {
        GridFrame::new(Variable::RainMmh, 0, rows, cols, values).unwrap()
    }

    #[test]
    fn opening_removes_isolated_pixel() {
        let mut f = GridFrame::filled(Variable::RainMmh, 0, 15, 15, 0.0);
        f.values[7 * 15 + 7] = 5.0;
        let m = clutter_mask(&f, &ClutterParams::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn opening_preserves_large_block() {
        let mut f = GridFrame::filled(Variable::RainMmh, 0, 40, 40, 0.0);
        for r in 10..30 {
            for c in 10..30 {
                f.values[r * 40 + c] = 2.0;
            }
        }
        for element in [StructuringElement::Square3, StructuringElement::Cross3] {
            let params = ClutterParams { element, ..Default::default() };
            let m = clutter_mask(&f, &params).unwrap();
            if element == StructuringElement::Square3 {
                assert_eq!(m, threshold_mask(&f, 0.1));
            } else {
                // the diamond element rounds the corners off
                assert!(m.is_subset_of(&threshold_mask(&f, 0.1)));
                assert!(m.count() > 300);
            }
        }
    }

    #[test]
    fn block_touching_border_is_eroded_at_edge() {
        let mut f = GridFrame::filled(Variable::RainMmh, 0, 10, 10, 0.0);
        for r in 0..5 {
            for c in 0..10 {
                f.values[r * 10 + c] = 1.0;
            }
        }
        let m = clutter_mask(&f, &ClutterParams::default()).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn opening_is_idempotent_and_anti_extensive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let params = ClutterParams::default();
        for _ in 0..100 {
            let (rows, cols) = (rng.gen_range(8..40), rng.gen_range(8..40));
            let values: Vec<f32> = (0..rows * cols).map(|_| if rng.gen_bool(0.7) { rng.gen_range(0.0..10.0) } else { 0.0 }).collect();
            let f = rain_grid(rows, cols, values);
            let m = clutter_mask(&f, &params).unwrap();
            assert!(m.is_subset_of(&threshold_mask(&f, params.rain_threshold_mmh)));
            let masked = apply_mask(&f, &m).unwrap();
            assert!(masked.values.iter().zip(&f.values).all(|(a, b)| a <= b));
            assert_eq!(clutter_mask(&masked, &params).unwrap(), m);
        }
    }

    #[test]
    fn apply_mask_semantics() {
        let f = rain_grid(1, 4, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(apply_mask(&f, &BinaryMask::filled(1, 4, true)).unwrap(), f);
        assert!(apply_mask(&f, &BinaryMask::filled(1, 4, false)).unwrap().values.iter().all(|&v| v == 0.0));
        let mixed = BinaryMask { rows: 1, cols: 4, data: vec![true, false, true, false] };
        assert_eq!(apply_mask(&f, &mixed).unwrap().values, vec![1.0, 0.0, 3.0, 0.0]);
        assert!(apply_mask(&f, &BinaryMask::filled(2, 2, true)).is_err());
    }
}
