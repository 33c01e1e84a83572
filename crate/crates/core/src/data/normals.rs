use super::{CameraIntrinsics, DepthMap, NormalMap};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Surface normals from central-difference tangents of the back-projected
/// point cloud.
///
/// A pixel is valid only when it and its four neighbours carry depth and the
/// tangents are not parallel. Normals face the camera: `n · P < 0` where
/// `P` is the back-projected point.
pub fn normals_from_depth<T: Scalar>(depth: &DepthMap<T>, intrinsics: &CameraIntrinsics) -> Result<NormalMap<T>> {
    let (h, w) = depth.dims();
    if h < 3 || w < 3 {
        return Err(Error::TooSmall {
            context: "normals_from_depth".into(),
            height: h,
            width: w,
            min: 3,
        });
    }
    intrinsics.validate(h, w)?;
    let hw = h * w;
    let mut values = vec![T::zero(); 3 * hw];
    let mut valid = vec![false; hw];
    let point = |y: usize, x: usize| -> Option<[f64; 3]> {
        let d = depth.at(y, x).as_f64();
        (d > 0.0).then(|| intrinsics.unproject(x as f64, y as f64, d))
    };
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let (Some(c), Some(l), Some(r), Some(u), Some(d)) =
                (point(y, x), point(y, x - 1), point(y, x + 1), point(y - 1, x), point(y + 1, x))
            else {
                continue;
            };
            let tx = [r[0] - l[0], r[1] - l[1], r[2] - l[2]];
            let ty = [d[0] - u[0], d[1] - u[1], d[2] - u[2]];
            let mut n = [
                tx[1] * ty[2] - tx[2] * ty[1],
                tx[2] * ty[0] - tx[0] * ty[2],
                tx[0] * ty[1] - tx[1] * ty[0],
            ];
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            let scale = (tx.iter().map(|v| v * v).sum::<f64>() * ty.iter().map(|v| v * v).sum::<f64>()).sqrt();
            if !(norm > 1e-12 * scale.max(1e-300)) {
                continue;
            }
            if n[0] * c[0] + n[1] * c[1] + n[2] * c[2] > 0.0 {
                n = [-n[0], -n[1], -n[2]];
            }
            let p = y * w + x;
            for k in 0..3 {
                values[k * hw + p] = T::lit(n[k] / norm);
            }
            valid[p] = true;
        }
    }
    NormalMap::new(h, w, values, valid)
}
