//! Piecewise-planar synthetic rooms rendered by ray casting.
//!
//! World axes match the unrotated camera: x right, y down, z forward. The
//! camera sits at the origin; the floor is the plane `y = camera_height`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{BoundaryMap, CameraIntrinsics, DepthMap, NormalMap, RgbImage, Sample};
use crate::edge::sobel_boundary;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub min_boxes: usize,
    pub max_boxes: usize,
    /// Side walls in addition to the back wall (1 or 2).
    pub min_side_walls: usize,
    pub max_side_walls: usize,
    /// Back-wall distance range in meters.
    pub room_depth: (f64, f64),
    pub room_half_width: (f64, f64),
    pub camera_height: (f64, f64),
    pub max_yaw_deg: f64,
    /// Downward tilt range in degrees.
    pub pitch_deg: (f64, f64),
    pub min_blobs: usize,
    pub max_blobs: usize,
    /// Target fraction of pixels removed from the raw depth.
    pub hole_fraction: (f64, f64),
    /// Pixels on the most distant surface deeper than this are dropped.
    pub far_cutoff: f64,
    pub boundary_saturation: f64,
    pub intrinsics: Option<CameraIntrinsics>,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            min_boxes: 1,
            max_boxes: 4,
            min_side_walls: 1,
            max_side_walls: 2,
            room_depth: (4.0, 7.5),
            room_half_width: (1.8, 3.5),
            camera_height: (1.2, 1.7),
            max_yaw_deg: 10.0,
            pitch_deg: (5.0, 15.0),
            min_blobs: 2,
            max_blobs: 6,
            hole_fraction: (0.12, 0.22),
            far_cutoff: 6.0,
            boundary_saturation: crate::edge::DEFAULT_SATURATION,
            intrinsics: None,
        }
    }
}

impl SceneConfig {
    /// Floor and walls only, camera level and facing the back wall.
    pub fn empty_room() -> Self {
        Self {
            min_boxes: 0,
            max_boxes: 0,
            min_side_walls: 2,
            max_side_walls: 2,
            max_yaw_deg: 0.0,
            pitch_deg: (0.0, 0.0),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.min_boxes > self.max_boxes {
            return err("min_boxes exceeds max_boxes".into());
        }
        if !(1..=2).contains(&self.min_side_walls) || !(self.min_side_walls..=2).contains(&self.max_side_walls) {
            return err("side walls must satisfy 1 <= min <= max <= 2".into());
        }
        if self.min_blobs > self.max_blobs {
            return err("min_blobs exceeds max_blobs".into());
        }
        let (lo, hi) = self.hole_fraction;
        if !(0.0..=1.0).contains(&lo) || lo > hi {
            return err(format!("invalid hole fraction range ({lo}, {hi})"));
        }
        if hi > 0.9 {
            return err(format!("hole fraction {hi} exceeds 90%"));
        }
        for (name, (a, b)) in [
            ("room_depth", self.room_depth),
            ("room_half_width", self.room_half_width),
            ("camera_height", self.camera_height),
        ] {
            if !(a > 0.0 && a <= b) {
                return err(format!("{name} range ({a}, {b}) must be positive and ordered"));
            }
        }
        if self.room_depth.0 < 3.0 {
            return err("room_depth must be at least 3 m to fit boxes".into());
        }
        if !(self.max_yaw_deg.abs() <= 15.0 && self.pitch_deg.0 <= self.pitch_deg.1 && self.pitch_deg.1.abs() <= 20.0) {
            return err("camera rotation must stay within yaw 15° and pitch 20°".into());
        }
        if !(self.far_cutoff > 0.0 && self.boundary_saturation > 0.0) {
            return err("far_cutoff and boundary_saturation must be positive".into());
        }
        Ok(())
    }
}

type V3 = [f64; 3];

fn dot(a: V3, b: V3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn norm(a: V3) -> V3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}

/// Row-major 3×3 rotation, camera → world.
struct Rotation([[f64; 3]; 3]);

impl Rotation {
    fn yaw_pitch(yaw: f64, pitch: f64) -> Self {
        let (sy, cy) = yaw.sin_cos();
        let (sp, cp) = pitch.sin_cos();
        let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
        let rx = [[1.0, 0.0, 0.0], [0.0, cp, sp], [0.0, -sp, cp]];
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| ry[i][k] * rx[k][j]).sum();
            }
        }
        Self(m)
    }

    fn apply(&self, v: V3) -> V3 {
        let m = &self.0;
        [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
    }

    fn apply_t(&self, v: V3) -> V3 {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
            m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
            m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
        ]
    }
}

#[derive(Clone, Copy)]
enum Texture {
    Checker(f64),
    Stripes(f64),
    Plain,
}

/// Axis-aligned plane `p[axis] = offset` with an inward normal.
struct Wall {
    axis: usize,
    offset: f64,
    normal: V3,
    color: V3,
    texture: Texture,
}

struct Cuboid {
    min: V3,
    max: V3,
    color: V3,
}

struct Hit {
    t: f64,
    normal: V3,
    surface: usize,
    color: V3,
    texture: Texture,
    point: V3,
}

fn random_color(rng: &mut ChaCha8Rng) -> V3 {
    [rng.gen_range(0.25..0.9), rng.gen_range(0.25..0.9), rng.gen_range(0.25..0.9)]
}

fn range(rng: &mut ChaCha8Rng, (a, b): (f64, f64)) -> f64 {
    if a == b {
        a
    } else {
        rng.gen_range(a..b)
    }
}

fn cast(dir: V3, walls: &[Wall], boxes: &[Cuboid]) -> Option<Hit> {
    let mut best: Option<Hit> = None;
    for (i, w) in walls.iter().enumerate() {
        let d = dir[w.axis];
        if d.abs() < 1e-12 {
            continue;
        }
        let t = w.offset / d;
        if t > 1e-9 && best.as_ref().is_none_or(|b| t < b.t) {
            best = Some(Hit {
                t,
                normal: w.normal,
                surface: i,
                color: w.color,
                texture: w.texture,
                point: [dir[0] * t, dir[1] * t, dir[2] * t],
            });
        }
    }
    for (i, b) in boxes.iter().enumerate() {
        let mut t_enter = f64::NEG_INFINITY;
        let mut t_exit = f64::INFINITY;
        let mut enter_axis = 0;
        let mut hit = true;
        for a in 0..3 {
            if dir[a].abs() < 1e-12 {
                if 0.0 < b.min[a] || 0.0 > b.max[a] {
                    hit = false;
                    break;
                }
                continue;
            }
            let (t1, t2) = (b.min[a] / dir[a], b.max[a] / dir[a]);
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            if lo > t_enter {
                t_enter = lo;
                enter_axis = a;
            }
            t_exit = t_exit.min(hi);
        }
        if !hit || t_enter > t_exit || t_enter <= 1e-9 {
            continue;
        }
        if best.as_ref().is_none_or(|h| t_enter < h.t) {
            let mut normal = [0.0; 3];
            normal[enter_axis] = -dir[enter_axis].signum();
            best = Some(Hit {
                t: t_enter,
                normal,
                surface: walls.len() + i,
                color: b.color,
                texture: Texture::Plain,
                point: [dir[0] * t_enter, dir[1] * t_enter, dir[2] * t_enter],
            });
        }
    }
    best
}

fn texture_factor(tex: Texture, p: V3) -> f64 {
    match tex {
        Texture::Checker(size) => {
            let i = (p[0] / size).floor() as i64 + (p[2] / size).floor() as i64;
            if i.rem_euclid(2) == 0 {
                1.0
            } else {
                0.8
            }
        }
        Texture::Stripes(size) => {
            if ((p[1] / size).floor() as i64).rem_euclid(2) == 0 {
                1.0
            } else {
                0.9
            }
        }
        Texture::Plain => 1.0,
    }
}

/// Renders one labeled synthetic view. The result depends only on the
/// arguments.
pub fn make_synthetic_scene<T: Scalar>(seed: u64, height: usize, width: usize, config: &SceneConfig) -> Result<Sample<T>> {
    if height < 32 || width < 32 {
        return Err(Error::TooSmall {
            context: "synthetic scene".into(),
            height,
            width,
            min: 32,
        });
    }
    config.validate()?;
    let k = config.intrinsics.unwrap_or_else(|| CameraIntrinsics::default_for(height, width));
    k.validate(height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let cam_h = range(&mut rng, config.camera_height);
    let back = range(&mut rng, config.room_depth);
    let half_left = range(&mut rng, config.room_half_width);
    let half_right = range(&mut rng, config.room_half_width);
    let yaw = range(&mut rng, (-config.max_yaw_deg, config.max_yaw_deg)).to_radians();
    let pitch = range(&mut rng, config.pitch_deg).to_radians();
    let rot = Rotation::yaw_pitch(yaw, pitch);

    let mut walls = vec![
        Wall {
            axis: 1,
            offset: cam_h,
            normal: [0.0, -1.0, 0.0],
            color: random_color(&mut rng),
            texture: Texture::Checker(0.5),
        },
        Wall {
            axis: 2,
            offset: back,
            normal: [0.0, 0.0, -1.0],
            color: random_color(&mut rng),
            texture: Texture::Stripes(0.4),
        },
    ];
    let side_walls = rng.gen_range(config.min_side_walls..=config.max_side_walls);
    let (left, right) = if side_walls == 2 {
        (true, true)
    } else {
        // with one side wall, the open side is bounded by a distant wall
        let l = rng.gen_bool(0.5);
        (l, !l)
    };
    let far_side = back * 1.5;
    walls.push(Wall {
        axis: 0,
        offset: if left { -half_left } else { -far_side },
        normal: [1.0, 0.0, 0.0],
        color: random_color(&mut rng),
        texture: Texture::Plain,
    });
    walls.push(Wall {
        axis: 0,
        offset: if right { half_right } else { far_side },
        normal: [-1.0, 0.0, 0.0],
        color: random_color(&mut rng),
        texture: Texture::Plain,
    });

    let n_boxes = rng.gen_range(config.min_boxes..=config.max_boxes);
    let (xmin, xmax) = (walls[2].offset, walls[3].offset);
    let mut boxes = Vec::with_capacity(n_boxes);
    for _ in 0..n_boxes {
        let sx = rng.gen_range(0.4..1.2);
        let sz = rng.gen_range(0.4..1.2);
        let sy = rng.gen_range(0.3..1.5f64).min(cam_h - 0.2);
        let z0 = rng.gen_range(1.5..(back - 0.5 - sz).max(1.6));
        // keep boxes roughly inside the view frustum
        let reach = (z0 * 0.8).min(xmax - 0.1 - sx).min(-xmin - 0.1);
        let x0 = rng.gen_range(-reach.max(0.1)..reach.max(0.2));
        boxes.push(Cuboid {
            min: [x0, cam_h - sy, z0],
            max: [(x0 + sx).min(xmax - 0.05), cam_h, (z0 + sz).min(back - 0.05)],
            color: random_color(&mut rng),
        });
    }

    let light = norm([-0.4, -1.0, -0.6]);
    let hw = height * width;
    let mut depth = vec![0.0f64; hw];
    let mut surface = vec![0usize; hw];
    let mut normals = vec![T::zero(); 3 * hw];
    let mut rgb = vec![T::zero(); 3 * hw];
    for y in 0..height {
        for x in 0..width {
            let d_cam = [(x as f64 - k.cx) / k.fx, (y as f64 - k.cy) / k.fy, 1.0];
            let d_world = rot.apply(d_cam);
            let hit = cast(d_world, &walls, &boxes).expect("closed room always hit");
            let p = y * width + x;
            depth[p] = hit.t;
            surface[p] = hit.surface;
            let mut n_cam = rot.apply_t(hit.normal);
            if dot(n_cam, d_cam) > 0.0 {
                n_cam = [-n_cam[0], -n_cam[1], -n_cam[2]];
            }
            for c in 0..3 {
                normals[c * hw + p] = T::lit(n_cam[c]);
            }
            let lambert = dot(hit.normal, light).max(0.0);
            let shade = (0.35 + 0.65 * lambert) * texture_factor(hit.texture, hit.point) / (1.0 + 0.04 * hit.t);
            for c in 0..3 {
                rgb[c * hw + p] = T::lit((hit.color[c] * shade).clamp(0.0, 1.0));
            }
        }
    }

    let holes = carve_holes(&mut rng, &depth, &surface, height, width, config);
    let raw: Vec<T> = depth
        .iter()
        .zip(&holes)
        .map(|(&d, &hole)| if hole { T::zero() } else { T::lit(d) })
        .collect();

    let gt_depth = DepthMap::new(height, width, depth.iter().map(|&d| T::lit(d)).collect())?;
    let gt_boundary: BoundaryMap<T> = sobel_boundary(&gt_depth, config.boundary_saturation)?;
    Ok(Sample {
        id: format!("synth_{seed:08}"),
        rgb: RgbImage::new(height, width, rgb)?,
        raw_depth: DepthMap::new(height, width, raw)?,
        gt_depth,
        gt_normals: NormalMap::new(height, width, normals, vec![true; hw])?,
        gt_boundary,
    })
}

/// Marks far-surface pixels, then fills the remaining hole budget with the
/// highest-valued pixels of a field of anisotropic Gaussian blobs.
fn carve_holes(
    rng: &mut ChaCha8Rng,
    depth: &[f64],
    surface: &[usize],
    h: usize,
    w: usize,
    config: &SceneConfig,
) -> Vec<bool> {
    let hw = h * w;
    let fraction = range(rng, config.hole_fraction);
    let budget = (fraction * hw as f64).round() as usize;
    let mut holes = vec![false; hw];

    let deepest = (0..hw).max_by(|&a, &b| depth[a].total_cmp(&depth[b])).unwrap_or(0);
    let far_surface = surface[deepest];
    let mut far: Vec<usize> = (0..hw)
        .filter(|&p| surface[p] == far_surface && depth[p] > config.far_cutoff)
        .collect();
    far.sort_by(|&a, &b| depth[b].total_cmp(&depth[a]).then(a.cmp(&b)));
    far.truncate(budget);
    for &p in &far {
        holes[p] = true;
    }

    let n_blobs = rng.gen_range(config.min_blobs..=config.max_blobs);
    let scale = w.min(h) as f64;
    let blobs: Vec<(f64, f64, f64, f64)> = (0..n_blobs)
        .map(|_| {
            (
                rng.gen_range(0.0..w as f64),
                rng.gen_range(0.0..h as f64),
                rng.gen_range(0.04..0.14) * scale,
                rng.gen_range(0.04..0.14) * scale,
            )
        })
        .collect();
    let remaining = budget - far.len();
    if remaining > 0 && !blobs.is_empty() {
        let field = |p: usize| {
            let (x, y) = ((p % w) as f64, (p / w) as f64);
            blobs
                .iter()
                .map(|&(cx, cy, sx, sy)| (-0.5 * (((x - cx) / sx).powi(2) + ((y - cy) / sy).powi(2))).exp())
                .fold(0.0, f64::max)
        };
        let mut cand: Vec<(f64, usize)> = (0..hw).filter(|&p| !holes[p]).map(|p| (field(p), p)).collect();
        cand.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, p) in cand.iter().take(remaining) {
            holes[p] = true;
        }
    }
    holes
}
