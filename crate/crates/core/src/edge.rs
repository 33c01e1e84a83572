//! Sobel occlusion boundaries on depth maps.

use image::GrayImage;

use crate::data::{BoundaryMap, DepthMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sobel response (in meters of accumulated gradient) mapped to 1.0.
pub const DEFAULT_SATURATION: f64 = 1.0;

/// Gradient magnitude `sqrt(gx² + gy²)` of the 3×3 Sobel pair
/// `Gx = [[-1,0,1],[-2,0,2],[-1,0,1]]`, `Gy = Gxᵀ`, with replicated borders.
pub fn sobel_magnitude<T: Scalar>(depth: &DepthMap<T>) -> Result<Vec<T>> {
    let (h, w) = depth.dims();
    if h < 3 || w < 3 {
        return Err(Error::TooSmall {
            context: "sobel".into(),
            height: h,
            width: w,
            min: 3,
        });
    }
    let at = |y: isize, x: isize| depth.at(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize);
    let two = T::lit(2.0);
    let mut out = Vec::with_capacity(h * w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + two * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + two * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + two * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + two * at(y - 1, x) + at(y - 1, x + 1));
            out.push((gx * gx + gy * gy).sqrt());
        }
    }
    Ok(out)
}

/// `min(|∇ Sobel| / saturation, 1)`.
///
/// Holes are treated as literal zeros, so this should only be applied to
/// hole-free depth such as ground truth or network output.
pub fn sobel_boundary<T: Scalar>(depth: &DepthMap<T>, saturation: f64) -> Result<BoundaryMap<T>> {
    if !(saturation > 0.0 && saturation.is_finite()) {
        return Err(Error::Config(format!("sobel saturation must be positive, got {saturation}")));
    }
    let inv = T::lit(1.0 / saturation);
    let values = sobel_magnitude(depth)?
        .into_iter()
        .map(|m| (m * inv).min(T::one()))
        .collect();
    BoundaryMap::new(depth.height(), depth.width(), values)
}

/// Hard `{0, 1}` boundary: 1 where the soft boundary reaches `threshold`.
pub fn binarize<T: Scalar>(boundary: &BoundaryMap<T>, threshold: f64) -> BoundaryMap<T> {
    let t = T::lit(threshold);
    let values = boundary
        .values()
        .iter()
        .map(|&v| if v >= t { T::one() } else { T::zero() })
        .collect();
    BoundaryMap::new(boundary.height(), boundary.width(), values).expect("binary values in range")
}

/// Grayscale rendering of [`sobel_boundary`]: 0 is black, 1 is white.
pub fn boundary_overlay<T: Scalar>(depth: &DepthMap<T>, saturation: f64) -> Result<GrayImage> {
    let b = sobel_boundary(depth, saturation)?;
    Ok(to_gray(b.values(), b.height(), b.width()))
}

/// Maps `[0, 1]` values onto 8-bit gray.
pub fn to_gray<T: Scalar>(values: &[T], h: usize, w: usize) -> GrayImage {
    let raw = values
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    GrayImage::from_raw(w as u32, h as u32, raw).expect("buffer size")
}
