//! 2-D convolution kernels via im2col + GEMM.
//!
//! Weights are `[Cout, Cin, k, k]`, matricized as `Cout × (Cin·k·k)` with
//! the column index ordered `(cin, ky, kx)`.

use crate::scalar::{gemm, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    /// Zero "same" padding: preserves `H×W` at stride 1, halves it at stride 2.
    pub fn same(kernel: usize, stride: usize, dilation: usize) -> Self {
        Self {
            kernel,
            stride,
            padding: dilation * (kernel - 1) / 2,
            dilation,
        }
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let ho = (h + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        let wo = (w + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (ho, wo)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    /// Stride-1 "same" convolutions with a spatial kernel.
    fn is_shiftable(&self) -> bool {
        self.kernel > 1 && self.stride == 1 && 2 * self.padding == self.dilation * (self.kernel - 1)
    }
}

/// Padded-image layout for the shifted-GEMM path.
///
/// Each image is zero-padded to `hp × wp`. Output pixel `(oy, ox)` is
/// computed at flat column `oy·wp + ox`; for tap `(ky, kx)` the matching
/// input lives at that column plus a constant offset, so every tap is one
/// GEMM over a strided view of the padded image. Columns with `ox >= w`
/// are scratch.
struct Shifted {
    c: usize,
    h: usize,
    w: usize,
    wp: usize,
    plane: usize,
    /// Number of computed columns, `(h-1)·wp + w`.
    cols: usize,
}

impl Shifted {
    fn new(c: usize, h: usize, w: usize, g: ConvGeom) -> Self {
        let (hp, wp) = (h + 2 * g.padding, w + 2 * g.padding);
        Self {
            c,
            h,
            w,
            wp,
            plane: hp * wp,
            cols: (h - 1) * wp + w,
        }
    }

    fn offset(&self, g: ConvGeom, ky: usize, kx: usize) -> usize {
        ky * g.dilation * self.wp + kx * g.dilation
    }

    fn pad<T: Scalar>(&self, img: &[T], pad: usize, out: &mut Vec<T>) {
        out.clear();
        out.resize(self.c * self.plane, T::zero());
        for ci in 0..self.c {
            for y in 0..self.h {
                let d0 = ci * self.plane + (y + pad) * self.wp + pad;
                out[d0..d0 + self.w].copy_from_slice(&img[(ci * self.h + y) * self.w..(ci * self.h + y + 1) * self.w]);
            }
        }
    }
}

fn shifted_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>, g: ConvGeom) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let cout = weight.shape()[0];
    let k = g.kernel;
    let kk = k * k;
    let s = Shifted::new(c, h, w, g);
    let span = h * s.wp;
    let mut out = Tensor::zeros(&[n, cout, h, w]);
    let mut xpad = Vec::new();
    let mut wide = vec![T::zero(); cout * span];
    for i in 0..n {
        s.pad(x.image(i), g.padding, &mut xpad);
        for (o, chunk) in wide.chunks_mut(span).enumerate() {
            chunk.fill(bias.map_or(T::zero(), |b| b.data()[o]));
        }
        for ky in 0..k {
            for kx in 0..k {
                let off = s.offset(g, ky, kx);
                // SAFETY: A is a strided view of `weight` (cout × c), B of
                // `xpad` (c × cols) ending inside each padded plane, C the
                // first `cols` columns of every row of `wide`.
                unsafe {
                    T::gemm_raw(
                        cout,
                        c,
                        s.cols,
                        T::one(),
                        weight.data().as_ptr().add(ky * k + kx),
                        (c * kk) as isize,
                        kk as isize,
                        xpad.as_ptr().add(off),
                        s.plane as isize,
                        1,
                        T::one(),
                        wide.as_mut_ptr(),
                        span as isize,
                        1,
                    );
                }
            }
        }
        let dst = &mut out.data_mut()[i * cout * h * w..(i + 1) * cout * h * w];
        for o in 0..cout {
            for y in 0..h {
                dst[(o * h + y) * w..(o * h + y + 1) * w]
                    .copy_from_slice(&wide[o * span + y * s.wp..o * span + y * s.wp + w]);
            }
        }
    }
    out
}

fn shifted_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (n, c, h, w) = x.dims4();
    let cout = weight.shape()[0];
    let k = g.kernel;
    let kk = k * k;
    let s = Shifted::new(c, h, w, g);
    let span = h * s.wp;
    let mut dw: Tensor<T> = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut xpad = Vec::new();
    let mut gwide = vec![T::zero(); cout * span];
    let mut dxpad = vec![T::zero(); c * s.plane];
    for i in 0..n {
        s.pad(x.image(i), g.padding, &mut xpad);
        let gout = &grad_out.data()[i * cout * h * w..(i + 1) * cout * h * w];
        for o in 0..cout {
            let plane = &gout[o * h * w..(o + 1) * h * w];
            db.data_mut()[o] += plane.iter().copied().sum::<T>();
            for y in 0..h {
                gwide[o * span + y * s.wp..o * span + y * s.wp + w].copy_from_slice(&plane[y * w..(y + 1) * w]);
            }
        }
        if need_input {
            dxpad.fill(T::zero());
        }
        for ky in 0..k {
            for kx in 0..k {
                let off = s.offset(g, ky, kx);
                let tap = ky * k + kx;
                // SAFETY: same views as the forward pass; scratch columns of
                // `gwide` are zero so they contribute nothing.
                unsafe {
                    T::gemm_raw(
                        cout,
                        s.cols,
                        c,
                        T::one(),
                        gwide.as_ptr(),
                        span as isize,
                        1,
                        xpad.as_ptr().add(off),
                        1,
                        s.plane as isize,
                        T::one(),
                        dw.data_mut().as_mut_ptr().add(tap),
                        (c * kk) as isize,
                        kk as isize,
                    );
                    if need_input {
                        T::gemm_raw(
                            c,
                            cout,
                            s.cols,
                            T::one(),
                            weight.data().as_ptr().add(tap),
                            kk as isize,
                            (c * kk) as isize,
                            gwide.as_ptr(),
                            span as isize,
                            1,
                            T::one(),
                            dxpad.as_mut_ptr().add(off),
                            s.plane as isize,
                            1,
                        );
                    }
                }
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
            for ci in 0..c {
                for y in 0..h {
                    let s0 = ci * s.plane + (y + g.padding) * s.wp + g.padding;
                    dst[(ci * h + y) * w..(ci * h + y + 1) * w].copy_from_slice(&dxpad[s0..s0 + w]);
                }
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

/// Unfolds one `[C, H, W]` image into a `(C·k·k) × (Ho·Wo)` matrix.
pub fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, g: ConvGeom, col: &mut Vec<T>) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    col.clear();
    col.resize(c * k * k * ho * wo, T::zero());
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let out = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        // valid ox range: 0 <= ox + dx < w
                        let lo = (-dx).max(0) as usize;
                        let hi = ((w as isize - dx).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let s0 = (lo as isize + dx) as usize;
                            out[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                        }
                    } else {
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                *o = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into an image.
pub fn col2im<T: Scalar>(col: &[T], c: usize, h: usize, w: usize, g: ConvGeom, x: &mut [T]) {
    let (ho, wo) = g.output_size(h, w);
    let k = g.kernel;
    let pad = g.padding as isize;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * ho * wo..(row + 1) * ho * wo];
                let dy = (ky * g.dilation) as isize - pad;
                let dx = (kx * g.dilation) as isize - pad;
                for oy in 0..ho {
                    let iy = (oy * g.stride) as isize + dy;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let s = &src[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let lo = (-dx).max(0) as usize;
                        let hi = ((w as isize - dx).min(wo as isize)).max(0) as usize;
                        if lo < hi {
                            let d0 = (lo as isize + dx) as usize;
                            for (d, &v) in dst[d0..d0 + (hi - lo)].iter_mut().zip(&s[lo..hi]) {
                                *d += v;
                            }
                        }
                    } else {
                        for (ox, &v) in s.iter().enumerate() {
                            let ix = (ox * g.stride) as isize + dx;
                            if ix >= 0 && ix < w as isize {
                                dst[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    if g.is_shiftable() {
        shifted_forward(x, weight, bias, g)
    } else {
        im2col_forward(x, weight, bias, g)
    }
}

fn im2col_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: ConvGeom,
) -> Tensor<T> {
    let (n, c, h, w) = x.dims4();
    let cout = weight.shape()[0];
    let kk = c * g.kernel * g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let p = ho * wo;
    let mut out = Tensor::zeros(&[n, cout, ho, wo]);
    let mut col = Vec::new();
    for i in 0..n {
        let img = x.image(i);
        let dst = &mut out.data_mut()[i * cout * p..(i + 1) * cout * p];
        if let Some(b) = bias {
            for (o, chunk) in dst.chunks_mut(p).enumerate() {
                chunk.fill(b.data()[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, c, h, w, g, &mut col);
            &col
        };
        gemm(cout, kk, p, weight.data(), false, cols, false, beta, dst);
    }
    out
}

pub struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    if g.is_shiftable() {
        shifted_backward(x, weight, grad_out, g, need_input)
    } else {
        im2col_backward(x, weight, grad_out, g, need_input)
    }
}

fn im2col_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    g: ConvGeom,
    need_input: bool,
) -> ConvGrads<T> {
    let (n, c, h, w) = x.dims4();
    let cout = weight.shape()[0];
    let kk = c * g.kernel * g.kernel;
    let (ho, wo) = g.output_size(h, w);
    let p = ho * wo;
    let mut dw = Tensor::zeros(weight.shape());
    let mut db = Tensor::zeros(&[cout]);
    let mut dx = need_input.then(|| Tensor::zeros(x.shape()));
    let mut col = Vec::new();
    let mut dcol = vec![T::zero(); kk * p];
    for i in 0..n {
        let img = x.image(i);
        let gout = &grad_out.data()[i * cout * p..(i + 1) * cout * p];
        for (o, chunk) in gout.chunks(p).enumerate() {
            db.data_mut()[o] += chunk.iter().copied().sum::<T>();
        }
        let cols: &[T] = if g.is_pointwise() {
            img
        } else {
            im2col(img, c, h, w, g, &mut col);
            &col
        };
        gemm(cout, p, kk, gout, false, cols, true, T::one(), dw.data_mut());
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
            if g.is_pointwise() {
                gemm(kk, cout, p, weight.data(), true, gout, false, T::zero(), dst);
            } else {
                gemm(kk, cout, p, weight.data(), true, gout, false, T::zero(), &mut dcol);
                col2im(&dcol, c, h, w, g, dst);
            }
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: db,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct 7-loop convolution, independent of im2col.
    fn direct(x: &Tensor<f64>, wt: &Tensor<f64>, g: ConvGeom) -> Tensor<f64> {
        let (n, c, h, w) = x.dims4();
        let o = wt.shape()[0];
        let k = g.kernel;
        let (ho, wo) = g.output_size(h, w);
        let mut out = Tensor::zeros(&[n, o, ho, wo]);
        for b in 0..n {
            for oc in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut s = 0.0;
                        for ic in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky * g.dilation) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    s += x.data()[((b * c + ic) * h + iy as usize) * w + ix as usize]
                                        * wt.data()[((oc * c + ic) * k + ky) * k + kx];
                                }
                            }
                        }
                        out.data_mut()[((b * o + oc) * ho + oy) * wo + ox] = s;
                    }
                }
            }
        }
        out
    }

    fn pseudo(shape: &[usize], seed: f64) -> Tensor<f64> {
        let len: usize = shape.iter().product();
        Tensor::from_vec(shape, (0..len).map(|i| ((i as f64 + seed) * 0.731).sin()).collect()).unwrap()
    }

    #[test]
    fn forward_matches_direct_loops() {
        for g in [
            ConvGeom::same(3, 1, 1),
            ConvGeom::same(3, 2, 1),
            ConvGeom::same(3, 1, 2),
            ConvGeom::same(1, 1, 1),
            ConvGeom::same(5, 2, 1),
        ] {
            let x = pseudo(&[2, 3, 7, 6], 0.3);
            let wt = pseudo(&[4, 3, g.kernel, g.kernel], 1.7);
            let got = conv2d_forward(&x, &wt, None, g);
            let want = direct(&x, &wt, g);
            assert_eq!(got.shape(), want.shape());
            for (a, b) in got.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12, "{g:?}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let g = ConvGeom::same(3, 2, 1);
        let (c, h, w) = (2, 5, 6);
        let x = pseudo(&[1, c, h, w], 0.1);
        let mut col = Vec::new();
        im2col(x.data(), c, h, w, g, &mut col);
        let y: Vec<f64> = (0..col.len()).map(|i| (i as f64 * 0.29).cos()).collect();
        let lhs: f64 = col.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, g, &mut back);
        let rhs: f64 = x.data().iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn shifted_path_matches_im2col_path() {
        for g in [ConvGeom::same(3, 1, 1), ConvGeom::same(3, 1, 2), ConvGeom::same(5, 1, 1)] {
            assert!(g.is_shiftable());
            let x = pseudo(&[2, 3, 9, 7], 0.4);
            let wt = pseudo(&[4, 3, g.kernel, g.kernel], 2.1);
            let b = pseudo(&[4], 0.9);
            let gout = pseudo(&[2, 4, 9, 7], 3.3);
            let f1 = shifted_forward(&x, &wt, Some(&b), g);
            let f2 = im2col_forward(&x, &wt, Some(&b), g);
            let b1 = shifted_backward(&x, &wt, &gout, g, true);
            let b2 = im2col_backward(&x, &wt, &gout, g, true);
            for (p, q) in [
                (&f1, &f2),
                (&b1.weight, &b2.weight),
                (&b1.bias, &b2.bias),
                (b1.input.as_ref().unwrap(), b2.input.as_ref().unwrap()),
            ] {
                assert_eq!(p.shape(), q.shape());
                for (a, b) in p.data().iter().zip(q.data()) {
                    assert!((a - b).abs() < 1e-10, "{g:?}");
                }
            }
        }
    }

    #[test]
    fn same_padding_preserves_size() {
        let g = ConvGeom::same(3, 1, 1);
        assert_eq!(g.output_size(64, 48), (64, 48));
        let g2 = ConvGeom::same(3, 2, 1);
        assert_eq!(g2.output_size(64, 48), (32, 24));
    }
}
