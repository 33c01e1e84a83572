//! PNG storage for depth and color, and the tab-separated dataset manifest.
//!
//! Depth is a 16-bit single-channel PNG holding `round(meters * 4000)`.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, GrayImage, ImageBuffer, ImageFormat, Luma, Rgb};

use super::{normals_from_depth, CameraIntrinsics, DepthMap, RgbImage, Sample};
use crate::edge::{sobel_boundary, DEFAULT_SATURATION};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Stored integer units per meter.
pub const DEPTH_SCALE: f64 = 4000.0;
/// Largest representable depth, `65535 / 4000` m.
pub const MAX_DEPTH: f64 = 65535.0 / DEPTH_SCALE;

fn open(path: &Path) -> Result<DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader.with_guessed_format().map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    })
}

fn save_err(path: &Path, e: image::ImageError) -> Error {
    match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::format(path, other.to_string()),
    }
}

pub fn read_depth_png<T: Scalar>(path: impl AsRef<Path>) -> Result<DepthMap<T>> {
    let path = path.as_ref();
    let DynamicImage::ImageLuma16(img) = open(path)? else {
        return Err(Error::format(path, "depth must be a 16-bit single-channel PNG"));
    };
    let (w, h) = img.dimensions();
    let values = img.into_raw().into_iter().map(|v| T::lit(v as f64 / DEPTH_SCALE)).collect();
    DepthMap::new(h as usize, w as usize, values)
}

pub fn read_rgb_png<T: Scalar>(path: impl AsRef<Path>) -> Result<RgbImage<T>> {
    let path = path.as_ref();
    let DynamicImage::ImageRgb8(img) = open(path)? else {
        return Err(Error::format(path, "color must be an 8-bit 3-channel PNG"));
    };
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.into_raw();
    let hw = h * w;
    let mut values = vec![T::zero(); 3 * hw];
    for p in 0..hw {
        for c in 0..3 {
            values[c * hw + p] = T::lit(raw[3 * p + c] as f64 / 255.0);
        }
    }
    RgbImage::new(h, w, values)
}

/// Writes depth as 16-bit PNG. Values below `1/8000` m quantize to 0 and
/// therefore reload as missing.
pub fn save_depth<T: Scalar>(depth: &DepthMap<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut raw = Vec::with_capacity(depth.values().len());
    for &v in depth.values() {
        let m = v.as_f64();
        if !(0.0..=MAX_DEPTH).contains(&m) {
            return Err(Error::Range {
                context: format!("depth to {}", path.display()),
                value: m,
                min: 0.0,
                max: MAX_DEPTH,
            });
        }
        raw.push((m * DEPTH_SCALE).round() as u16);
    }
    let img: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(depth.width() as u32, depth.height() as u32, raw).expect("buffer size");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| save_err(path, e))
}

pub fn save_rgb<T: Scalar>(rgb: &RgbImage<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = rgb.dims();
    let hw = h * w;
    let mut raw = Vec::with_capacity(3 * hw);
    for p in 0..hw {
        for c in 0..3 {
            raw.push((rgb.values()[c * hw + p].as_f64() * 255.0).round().clamp(0.0, 255.0) as u8);
        }
    }
    let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(w as u32, h as u32, raw).expect("buffer size");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| save_err(path, e))
}

pub fn save_gray(image: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    image.save_with_format(path, ImageFormat::Png).map_err(|e| save_err(path, e))
}

/// Loads one RGB / raw-depth / ground-truth triplet. Ground-truth normals
/// come from [`normals_from_depth`] and ground-truth boundaries from
/// [`sobel_boundary`], both applied to the ground-truth depth.
pub fn load_sample<T: Scalar>(
    rgb_path: impl AsRef<Path>,
    raw_path: impl AsRef<Path>,
    gt_path: impl AsRef<Path>,
    intrinsics: Option<&CameraIntrinsics>,
) -> Result<Sample<T>> {
    let rgb: RgbImage<T> = read_rgb_png(rgb_path.as_ref())?;
    let raw_depth: DepthMap<T> = read_depth_png(raw_path.as_ref())?;
    let gt_depth: DepthMap<T> = read_depth_png(gt_path.as_ref())?;
    for (name, dims) in [("raw depth", raw_depth.dims()), ("ground-truth depth", gt_depth.dims())] {
        if dims != rgb.dims() {
            return Err(Error::DimensionMismatch {
                first_name: "rgb".into(),
                first: rgb.dims(),
                second_name: name.into(),
                second: dims,
            });
        }
    }
    let (h, w) = gt_depth.dims();
    let k = intrinsics.copied().unwrap_or_else(|| CameraIntrinsics::default_for(h, w));
    let gt_normals = normals_from_depth(&gt_depth, &k)?;
    let gt_boundary = sobel_boundary(&gt_depth, DEFAULT_SATURATION)?;
    let id = rgb_path
        .as_ref()
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Sample {
        id,
        rgb,
        raw_depth,
        gt_depth,
        gt_normals,
        gt_boundary,
    })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub raw: PathBuf,
    pub gt: PathBuf,
}

/// Parses `rgb<TAB>raw<TAB>gt` lines. Relative paths resolve against the
/// manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::format(
                path,
                format!("line {}: expected 3 tab-separated paths, found {}", lineno + 1, fields.len()),
            ));
        }
        let resolve = |f: &str| {
            let p = Path::new(f.trim());
            if p.is_absolute() {
                p.to_path_buf()
            } else {
                base.join(p)
            }
        };
        out.push(ManifestEntry {
            rgb: resolve(fields[0]),
            raw: resolve(fields[1]),
            gt: resolve(fields[2]),
        });
    }
    Ok(out)
}

/// Loads every triplet listed in a manifest with default intrinsics.
pub fn load_manifest_samples<T: Scalar>(path: impl AsRef<Path>) -> Result<Vec<Sample<T>>> {
    let entries = load_manifest(path.as_ref())?;
    if entries.is_empty() {
        return Err(Error::format(path.as_ref(), "manifest lists no samples"));
    }
    entries.iter().map(|e| load_sample(&e.rgb, &e.raw, &e.gt, None)).collect()
}

pub fn write_manifest(path: impl AsRef<Path>, entries: &[ManifestEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for e in entries {
        text.push_str(&format!("{}\t{}\t{}\n", e.rgb.display(), e.raw.display(), e.gt.display()));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_quantization_examples() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let d = DepthMap::new(1, 4, vec![1.0f64, 0.00012, 2.5, 0.0]).unwrap();
        save_depth(&d, &p).unwrap();
        let back: DepthMap<f64> = read_depth_png(&p).unwrap();
        assert_eq!(back.values()[0], 1.0);
        assert_eq!(back.values()[1], 0.0);
        assert!((back.values()[2] - 2.5).abs() <= 0.00025);
        assert_eq!(back.values()[3], 0.0);
    }

    #[test]
    fn stored_4000_reads_as_one_meter() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_raw(2, 1, vec![4000, 0]).unwrap();
        img.save(&p).unwrap();
        let d: DepthMap<f32> = read_depth_png(&p).unwrap();
        assert_eq!(d.values(), &[1.0, 0.0]);
    }

    #[test]
    fn out_of_range_depth_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let d = DepthMap::new(1, 2, vec![1.0f64, 17.0]).unwrap();
        match save_depth(&d, dir.path().join("x.png")) {
            Err(Error::Range { value, .. }) => assert_eq!(value, 17.0),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn wrong_bit_depth_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rgb.png");
        let img: ImageBuffer<Rgb<u8>, Vec<u8>> = ImageBuffer::from_raw(1, 1, vec![255, 0, 0]).unwrap();
        img.save(&p).unwrap();
        assert!(matches!(read_depth_png::<f32>(&p), Err(Error::Format { .. })));
        let rgb: RgbImage<f32> = read_rgb_png(&p).unwrap();
        assert_eq!(rgb.values(), &[1.0, 0.0, 0.0]);
    }

    #[test]
    fn manifest_round_trip_and_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.txt");
        let entries = vec![ManifestEntry {
            rgb: "a_rgb.png".into(),
            raw: "a_raw.png".into(),
            gt: "a_gt.png".into(),
        }];
        write_manifest(&p, &entries).unwrap();
        let back = load_manifest(&p).unwrap();
        assert_eq!(back[0].rgb, dir.path().join("a_rgb.png"));
        fs::write(&p, "only\ttwo\n").unwrap();
        assert!(matches!(load_manifest(&p), Err(Error::Format { .. })));
    }
}
