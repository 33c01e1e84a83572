//! Windowed SSIM with a uniform box window, plus its exact gradient.
//!
//! This is the single implementation behind both the structural loss term
//! and the evaluation metric.

use crate::scalar::Scalar;

/// Stabilizing constants for unit dynamic range.
pub const SSIM_C1: f64 = 0.0001;
pub const SSIM_C2: f64 = 0.0009;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SsimParams {
    /// Odd box-window side length.
    pub window: usize,
    /// Inputs are multiplied by this before comparison (`1 / depth_norm_max`).
    pub scale: f64,
    pub c1: f64,
    pub c2: f64,
}

impl SsimParams {
    pub fn new(window: usize, depth_norm_max: f64) -> Self {
        Self {
            window,
            scale: 1.0 / depth_norm_max,
            c1: SSIM_C1,
            c2: SSIM_C2,
        }
    }
}

/// Copy of `pred` with every pixel where `gt` is unobserved (`<= 0`) set to
/// the ground-truth value, so SSIM ignores predictions there.
pub fn mask_unobserved<T: Scalar>(pred: &[T], gt: &[T]) -> Vec<T> {
    pred.iter().zip(gt).map(|(&p, &g)| if g > T::zero() { p } else { g }).collect()
}

/// Means of every fully contained `k×k` window, `(h-k+1) × (w-k+1)`.
fn box_mean<T: Scalar>(x: &[T], h: usize, w: usize, k: usize) -> Vec<T> {
    let (hv, wv) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![T::zero(); h * wv];
    for y in 0..h {
        let src = &x[y * w..(y + 1) * w];
        for xo in 0..wv {
            rows[y * wv + xo] = src[xo..xo + k].iter().copied().sum();
        }
    }
    let norm = T::one() / T::lit((k * k) as f64);
    let mut out = vec![T::zero(); hv * wv];
    for yo in 0..hv {
        for xo in 0..wv {
            let mut s = T::zero();
            for dy in 0..k {
                s += rows[(yo + dy) * wv + xo];
            }
            out[yo * wv + xo] = s * norm;
        }
    }
    out
}

/// Adjoint of an un-normalized valid box sum: each pixel receives the sum of
/// the values of all windows that contain it.
fn box_spread<T: Scalar>(a: &[T], h: usize, w: usize, k: usize) -> Vec<T> {
    let (hv, wv) = (h + 1 - k, w + 1 - k);
    let mut cols = vec![T::zero(); h * wv];
    for yo in 0..hv {
        for dy in 0..k {
            let dst = &mut cols[(yo + dy) * wv..(yo + dy + 1) * wv];
            for (d, &v) in dst.iter_mut().zip(&a[yo * wv..(yo + 1) * wv]) {
                *d += v;
            }
        }
    }
    let mut out = vec![T::zero(); h * w];
    for y in 0..h {
        let src = &cols[y * wv..(y + 1) * wv];
        let dst = &mut out[y * w..(y + 1) * w];
        for (xo, &v) in src.iter().enumerate() {
            for d in &mut dst[xo..xo + k] {
                *d += v;
            }
        }
    }
    out
}

struct WindowStats<T> {
    mu_x: Vec<T>,
    mu_y: Vec<T>,
    s_xx: Vec<T>,
    s_yy: Vec<T>,
    s_xy: Vec<T>,
}

fn window_stats<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, k: usize) -> WindowStats<T> {
    let xx: Vec<T> = x.iter().map(|&a| a * a).collect();
    let yy: Vec<T> = y.iter().map(|&a| a * a).collect();
    let xy: Vec<T> = x.iter().zip(y).map(|(&a, &b)| a * b).collect();
    let mu_x = box_mean(x, h, w, k);
    let mu_y = box_mean(y, h, w, k);
    let e_xx = box_mean(&xx, h, w, k);
    let e_yy = box_mean(&yy, h, w, k);
    let e_xy = box_mean(&xy, h, w, k);
    let s_xx = e_xx.iter().zip(&mu_x).map(|(&e, &m)| e - m * m).collect();
    let s_yy = e_yy.iter().zip(&mu_y).map(|(&e, &m)| e - m * m).collect();
    let s_xy = e_xy
        .iter()
        .zip(mu_x.iter().zip(&mu_y))
        .map(|(&e, (&a, &b))| e - a * b)
        .collect();
    WindowStats {
        mu_x,
        mu_y,
        s_xx,
        s_yy,
        s_xy,
    }
}

fn scaled<T: Scalar>(v: &[T], s: T) -> Vec<T> {
    v.iter().map(|&a| a * s).collect()
}

/// Per-window SSIM index map of two `h×w` images.
pub fn ssim_map<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, p: SsimParams) -> Vec<T> {
    assert!(p.window <= h && p.window <= w, "window larger than image");
    let s = T::lit(p.scale);
    let (x, y) = (scaled(x, s), scaled(y, s));
    let st = window_stats(&x, &y, h, w, p.window);
    let (c1, c2) = (T::lit(p.c1), T::lit(p.c2));
    let two = T::lit(2.0);
    (0..st.mu_x.len())
        .map(|i| {
            let (mx, my) = (st.mu_x[i], st.mu_y[i]);
            let a = two * mx * my + c1;
            let b = two * st.s_xy[i] + c2;
            let c = mx * mx + my * my + c1;
            let d = st.s_xx[i] + st.s_yy[i] + c2;
            (a * b) / (c * d)
        })
        .collect()
}

/// Mean SSIM index over all window positions.
pub fn ssim_index<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, p: SsimParams) -> T {
    let map = ssim_map(x, y, h, w, p);
    let n = T::lit(map.len() as f64);
    map.into_iter().sum::<T>() / n
}

/// Gradient of `upstream * ssim_index(x, y)` with respect to `x`.
pub fn ssim_grad_x<T: Scalar>(x: &[T], y: &[T], h: usize, w: usize, p: SsimParams, upstream: T) -> Vec<T> {
    let k = p.window;
    let s = T::lit(p.scale);
    let (xs, ys) = (scaled(x, s), scaled(y, s));
    let st = window_stats(&xs, &ys, h, w, k);
    let (c1, c2) = (T::lit(p.c1), T::lit(p.c2));
    let two = T::lit(2.0);
    let nwin = st.mu_x.len();
    // d mean / d S_w, d S_w / d x_p carries 1/(k*k), and the input scale.
    let coef = upstream * s / (T::lit(nwin as f64) * T::lit((k * k) as f64));
    let mut alpha = vec![T::zero(); nwin];
    let mut beta = vec![T::zero(); nwin];
    let mut gamma = vec![T::zero(); nwin];
    for i in 0..nwin {
        let (mx, my) = (st.mu_x[i], st.mu_y[i]);
        let a = two * mx * my + c1;
        let b = two * st.s_xy[i] + c2;
        let c = mx * mx + my * my + c1;
        let d = st.s_xx[i] + st.s_yy[i] + c2;
        let ssim = (a * b) / (c * d);
        let ds_dmx = two * my * b / (c * d) - ssim * two * mx / c;
        let bt = -two * ssim / d;
        let gm = two * a / (c * d);
        beta[i] = bt * coef;
        gamma[i] = gm * coef;
        alpha[i] = (ds_dmx - bt * mx - gm * my) * coef;
    }
    let sa = box_spread(&alpha, h, w, k);
    let sb = box_spread(&beta, h, w, k);
    let sg = box_spread(&gamma, h, w, k);
    (0..h * w).map(|p| sa[p] + sb[p] * xs[p] + sg[p] * ys[p]).collect()
}
