//! Domain types for RGB-D samples, file ingestion, surface-normal
//! derivation and the synthetic indoor-scene generator.

mod io;
mod normals;
mod synth;

pub use io::{load_manifest, load_manifest_samples, load_sample, read_depth_png, read_rgb_png, save_depth, save_gray, save_rgb, write_manifest, ManifestEntry, DEPTH_SCALE, MAX_DEPTH};
pub use normals::normals_from_depth;
pub use synth::{make_synthetic_scene, SceneConfig};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

fn check_len(context: &str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::Shape {
            context: context.into(),
            expected: expected.to_string(),
            actual: actual.to_string(),
        });
    }
    Ok(())
}

/// `H×W` depth in meters; `0` marks a missing measurement.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> DepthMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Config("depth map dimensions must be positive".into()));
        }
        check_len("depth map", height * width, values.len())?;
        if let Some(&bad) = values.iter().find(|v| !v.is_finite() || **v < T::zero()) {
            return Err(Error::Range {
                context: "depth values must be finite and non-negative".into(),
                value: bad.as_f64(),
                min: 0.0,
                max: f64::INFINITY,
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn filled(height: usize, width: usize, value: T) -> Result<Self> {
        Self::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> T {
        self.values[y * self.width + x]
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn cast<U: Scalar>(&self) -> DepthMap<U> {
        DepthMap {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| U::lit(v.as_f64())).collect(),
        }
    }

    /// Copy of the `h×w` window whose top-left corner is `(y0, x0)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        let mut values = Vec::with_capacity(h * w);
        for y in y0..y0 + h {
            values.extend_from_slice(&self.values[y * self.width + x0..y * self.width + x0 + w]);
        }
        Self {
            height: h,
            width: w,
            values,
        }
    }
}

/// `flags[p]` is true iff the paired depth is positive at `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    pub height: usize,
    pub width: usize,
    pub flags: Vec<bool>,
}

impl ValidityMask {
    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }
}

pub fn validity_mask<T: Scalar>(depth: &DepthMap<T>) -> ValidityMask {
    ValidityMask {
        height: depth.height,
        width: depth.width,
        flags: depth.values.iter().map(|&v| v > T::zero()).collect(),
    }
}

/// Planar `3×H×W` RGB in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RgbImage<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> RgbImage<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_len("rgb image", 3 * height * width, values.len())?;
        if let Some(&bad) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Range {
                context: "rgb channels".into(),
                value: bad.as_f64(),
                min: 0.0,
                max: 1.0,
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            height: h,
            width: w,
            values: crop_planes(&self.values, 3, self.height, self.width, y0, x0, h, w),
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn crop_planes<T: Copy>(v: &[T], c: usize, h: usize, w: usize, y0: usize, x0: usize, ch: usize, cw: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in 0..c {
        for y in y0..y0 + ch {
            let base = (plane * h + y) * w;
            out.extend_from_slice(&v[base + x0..base + x0 + cw]);
        }
    }
    out
}

/// Planar `3×H×W` unit surface normals in camera coordinates
/// (x right, y down, z forward) with a per-pixel validity flag.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
    valid: Vec<bool>,
}

impl<T: Scalar> NormalMap<T> {
    /// Checks that every valid pixel holds a vector of norm `1 ± 1e-4`.
    pub fn new(height: usize, width: usize, values: Vec<T>, valid: Vec<bool>) -> Result<Self> {
        check_len("normal map", 3 * height * width, values.len())?;
        check_len("normal validity", height * width, valid.len())?;
        let hw = height * width;
        for p in 0..hw {
            if !valid[p] {
                continue;
            }
            let n = (0..3).map(|c| values[c * hw + p].as_f64().powi(2)).sum::<f64>().sqrt();
            if !((n - 1.0).abs() <= 1e-4) {
                return Err(Error::Range {
                    context: format!("normal norm at pixel {p}"),
                    value: n,
                    min: 1.0 - 1e-4,
                    max: 1.0 + 1e-4,
                });
            }
        }
        Ok(Self {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn normal(&self, y: usize, x: usize) -> [T; 3] {
        let hw = self.height * self.width;
        let p = y * self.width + x;
        [self.values[p], self.values[hw + p], self.values[2 * hw + p]]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            height: h,
            width: w,
            values: crop_planes(&self.values, 3, self.height, self.width, y0, x0, h, w),
            valid: crop_planes(&self.valid, 1, self.height, self.width, y0, x0, h, w),
        }
    }
}

/// `H×W` occlusion-boundary strength in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryMap<T> {
    height: usize,
    width: usize,
    values: Vec<T>,
}

impl<T: Scalar> BoundaryMap<T> {
    pub fn new(height: usize, width: usize, values: Vec<T>) -> Result<Self> {
        check_len("boundary map", height * width, values.len())?;
        if let Some(&bad) = values.iter().find(|v| !(**v >= T::zero() && **v <= T::one())) {
            return Err(Error::Range {
                context: "boundary values".into(),
                value: bad.as_f64(),
                min: 0.0,
                max: 1.0,
            });
        }
        Ok(Self { height, width, values })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            height: h,
            width: w,
            values: crop_planes(&self.values, 1, self.height, self.width, y0, x0, h, w),
        }
    }
}

/// Pinhole intrinsics in pixels. Pixel `(x, y)` maps to the ray
/// `((x - cx) / fx, (y - cy) / fy, 1)`.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// `fx = fy = W/2`, principal point at the image center.
    pub fn default_for(height: usize, width: usize) -> Self {
        Self {
            fx: 0.5 * width as f64,
            fy: 0.5 * width as f64,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::Config(format!("focal lengths must be positive: fx={}, fy={}", self.fx, self.fy)));
        }
        if !(self.cx > 0.0 && self.cx < width as f64 && self.cy > 0.0 && self.cy < height as f64) {
            return Err(Error::Config(format!(
                "principal point ({}, {}) outside the {height}x{width} image",
                self.cx, self.cy
            )));
        }
        Ok(())
    }

    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> [f64; 3] {
        [(x - self.cx) / self.fx * depth, (y - self.cy) / self.fy * depth, depth]
    }
}

/// One labeled view.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub id: String,
    pub rgb: RgbImage<T>,
    pub raw_depth: DepthMap<T>,
    pub gt_depth: DepthMap<T>,
    pub gt_normals: NormalMap<T>,
    pub gt_boundary: BoundaryMap<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn dims(&self) -> (usize, usize) {
        self.gt_depth.dims()
    }

    /// Shapes agree and raw observations are a subset of ground truth.
    pub fn check_invariants(&self) -> Result<()> {
        let want = self.gt_depth.dims();
        for (name, d) in [
            ("rgb", self.rgb.dims()),
            ("raw_depth", self.raw_depth.dims()),
            ("gt_normals", self.gt_normals.dims()),
            ("gt_boundary", self.gt_boundary.dims()),
        ] {
            if d != want {
                return Err(Error::DimensionMismatch {
                    first_name: "gt_depth".into(),
                    first: want,
                    second_name: name.into(),
                    second: d,
                });
            }
        }
        Ok(())
    }

    /// Fraction of ground-truth-valid pixels missing from the raw depth.
    pub fn hole_fraction(&self) -> f64 {
        let raw = validity_mask(&self.raw_depth);
        let gt = validity_mask(&self.gt_depth);
        let holes = gt.flags.iter().zip(&raw.flags).filter(|(&g, &r)| g && !r).count();
        holes as f64 / gt.flags.len() as f64
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Self {
        Self {
            id: self.id.clone(),
            rgb: self.rgb.crop(y0, x0, h, w),
            raw_depth: self.raw_depth.crop(y0, x0, h, w),
            gt_depth: self.gt_depth.crop(y0, x0, h, w),
            gt_normals: self.gt_normals.crop(y0, x0, h, w),
            gt_boundary: self.gt_boundary.crop(y0, x0, h, w),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Sample<U> {
        let c = |v: &[T]| v.iter().map(|&x| U::lit(x.as_f64())).collect::<Vec<U>>();
        Sample {
            id: self.id.clone(),
            rgb: RgbImage {
                height: self.rgb.height,
                width: self.rgb.width,
                values: c(&self.rgb.values),
            },
            raw_depth: self.raw_depth.cast(),
            gt_depth: self.gt_depth.cast(),
            gt_normals: NormalMap {
                height: self.gt_normals.height,
                width: self.gt_normals.width,
                values: c(&self.gt_normals.values),
                valid: self.gt_normals.valid.clone(),
            },
            gt_boundary: BoundaryMap {
                height: self.gt_boundary.height,
                width: self.gt_boundary.width,
                values: c(&self.gt_boundary.values),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validity_mask_is_positive_predicate() {
        let d = DepthMap::new(1, 4, vec![0.0, 1.2, 0.0, 3.4]).unwrap();
        assert_eq!(validity_mask(&d).flags, vec![false, true, false, true]);
        let zeros = DepthMap::filled(3, 3, 0.0f32).unwrap();
        assert!(validity_mask(&zeros).flags.iter().all(|f| !f));
        let ones = DepthMap::filled(3, 3, 2.0f32).unwrap();
        assert!(validity_mask(&ones).flags.iter().all(|&f| f));
    }

    #[test]
    fn depth_map_rejects_negative_and_nan() {
        assert!(DepthMap::new(1, 2, vec![1.0, -0.1]).is_err());
        assert!(DepthMap::new(1, 2, vec![1.0, f64::NAN]).is_err());
        assert!(DepthMap::new(1, 2, vec![1.0]).is_err());
    }

    #[test]
    fn rgb_and_boundary_ranges_enforced() {
        assert!(RgbImage::new(1, 1, vec![0.0, 0.5, 1.1]).is_err());
        assert!(BoundaryMap::new(1, 2, vec![0.0, 1.5]).is_err());
        assert!(BoundaryMap::new(1, 2, vec![0.0, 1.0]).is_ok());
    }

    #[test]
    fn normal_map_checks_unit_norm_on_valid_pixels_only() {
        let ok = NormalMap::new(1, 2, vec![0.0, 5.0, 0.0, 0.0, -1.0, 0.0], vec![true, false]);
        assert!(ok.is_ok());
        let bad = NormalMap::new(1, 2, vec![0.0, 0.0, 0.0, 0.0, -0.9, 0.0], vec![true, false]);
        assert!(bad.is_err());
    }

    #[test]
    fn intrinsics_validation() {
        let k = CameraIntrinsics::default_for(48, 64);
        assert!(k.validate(48, 64).is_ok());
        assert_eq!((k.fx, k.cx, k.cy), (32.0, 32.0, 24.0));
        let bad = CameraIntrinsics { cx: 64.0, ..k };
        assert!(bad.validate(48, 64).is_err());
    }
}
