//! Training objective: masked L1, SSIM, representation and
//! boundary-consistency terms and their weighted sum
//!
//! ```text
//! L = L_SA − λ_S·L_S + λ_BC·L_BC + λ_N·L_N + λ_B·L_B
//! ```
//!
//! Standalone functions act on single maps. [`graph_losses`] records the
//! same terms on a batch for training; per-image means are averaged over
//! the batch.

use serde::{Deserialize, Serialize};

use crate::data::{validity_mask, BoundaryMap, DepthMap, NormalMap, Sample};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::networks::PipelineVars;
use crate::scalar::Scalar;
use crate::ssim::{mask_unobserved, ssim_index, SsimParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_bc: f64,
    pub lambda_n: f64,
    pub lambda_b: f64,
    pub ssim_window: usize,
    /// Depths are divided by this before SSIM.
    pub depth_norm_max: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 0.1,
            lambda_bc: 1.0,
            lambda_n: 0.5,
            lambda_b: 0.5,
            ssim_window: 7,
            depth_norm_max: 16.0,
        }
    }
}

impl LossWeights {
    /// Only the masked L1 term.
    pub fn l1_only() -> Self {
        Self {
            lambda_s: 0.0,
            lambda_bc: 0.0,
            lambda_n: 0.0,
            lambda_b: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_s", self.lambda_s),
            ("lambda_bc", self.lambda_bc),
            ("lambda_n", self.lambda_n),
            ("lambda_b", self.lambda_b),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and non-negative, got {v}")));
            }
        }
        if self.ssim_window < 3 || self.ssim_window % 2 == 0 {
            return Err(Error::Config(format!("ssim_window must be odd and at least 3, got {}", self.ssim_window)));
        }
        if !(self.depth_norm_max.is_finite() && self.depth_norm_max > 0.0) {
            return Err(Error::Config("depth_norm_max must be positive".into()));
        }
        Ok(())
    }

    pub fn ssim_params(&self) -> SsimParams {
        SsimParams::new(self.ssim_window, self.depth_norm_max)
    }
}

/// Unweighted loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_sa: f64,
    pub l_s: f64,
    pub l_bc: f64,
    pub l_n: f64,
    pub l_b: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_sa: f64,
    pub l_s: f64,
    pub l_bc: f64,
    pub l_n: f64,
    pub l_b: f64,
    pub total: f64,
}

impl LossComponents {
    fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("l_sa", self.l_sa),
            ("l_s", self.l_s),
            ("l_bc", self.l_bc),
            ("l_n", self.l_n),
            ("l_b", self.l_b),
        ]
    }
}

/// Weighted combination of the terms. A non-finite term yields
/// [`Error::NonFinite`] with step 0; the trainer substitutes its own step.
pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<LossReport> {
    if let Some((term, _)) = c.named().into_iter().find(|(_, v)| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: term.into(),
            step: 0,
        });
    }
    let total = c.l_sa - w.lambda_s * c.l_s + w.lambda_bc * c.l_bc + w.lambda_n * c.l_n + w.lambda_b * c.l_b;
    Ok(LossReport {
        l_sa: c.l_sa,
        l_s: c.l_s,
        l_bc: c.l_bc,
        l_n: c.l_n,
        l_b: c.l_b,
        total,
    })
}

fn same_dims(a: &str, da: (usize, usize), b: &str, db: (usize, usize)) -> Result<()> {
    if da != db {
        return Err(Error::DimensionMismatch {
            first_name: a.into(),
            first: da,
            second_name: b.into(),
            second: db,
        });
    }
    Ok(())
}

/// Mean absolute error over pixels where `gt > 0`.
pub fn masked_l1<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>) -> Result<T> {
    same_dims("prediction", pred.dims(), "ground truth", gt.dims())?;
    let mut sum = T::zero();
    let mut count = 0usize;
    for (&p, &g) in pred.values().iter().zip(gt.values()) {
        if g > T::zero() {
            sum += (p - g).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::EmptyObservation("masked_l1 ground truth".into()));
    }
    Ok(sum / T::lit(count as f64))
}

/// Mean windowed SSIM index after dividing both maps by `depth_norm_max`.
/// Higher is better. Every window position counts; predictions at pixels
/// without ground truth are replaced by it.
pub fn ssim_loss<T: Scalar>(pred: &DepthMap<T>, gt: &DepthMap<T>, weights: &LossWeights) -> Result<T> {
    same_dims("prediction", pred.dims(), "ground truth", gt.dims())?;
    let (h, w) = pred.dims();
    let p = weights.ssim_params();
    if h < p.window || w < p.window {
        return Err(Error::TooSmall {
            context: "SSIM window".into(),
            height: h,
            width: w,
            min: p.window,
        });
    }
    Ok(ssim_index(&mask_unobserved(pred.values(), gt.values()), gt.values(), h, w, p))
}

/// Maps supervised by a mean squared difference.
pub trait Representation<T> {
    /// Sum of squared per-pixel differences and the number of pixels that
    /// contributed.
    fn squared_error(&self, gt: &Self) -> Result<(T, usize)>;
}

impl<T: Scalar> Representation<T> for NormalMap<T> {
    /// Pixels whose ground-truth normal is invalid are skipped.
    fn squared_error(&self, gt: &Self) -> Result<(T, usize)> {
        same_dims("predicted normals", self.dims(), "ground-truth normals", gt.dims())?;
        let hw = self.height() * self.width();
        let (p, g) = (self.values(), gt.values());
        let mut sum = T::zero();
        let mut count = 0;
        for i in (0..hw).filter(|&i| gt.valid()[i]) {
            for c in 0..3 {
                let d = p[c * hw + i] - g[c * hw + i];
                sum += d * d;
            }
            count += 1;
        }
        Ok((sum, count))
    }
}

impl<T: Scalar> Representation<T> for BoundaryMap<T> {
    fn squared_error(&self, gt: &Self) -> Result<(T, usize)> {
        same_dims("predicted boundary", self.dims(), "ground-truth boundary", gt.dims())?;
        let sum = self.values().iter().zip(gt.values()).map(|(&a, &b)| (a - b) * (a - b)).sum();
        Ok((sum, self.values().len()))
    }
}

/// Mean squared difference of normals (3-vectors) or boundaries.
pub fn representation_loss<T: Scalar, R: Representation<T>>(pred: &R, gt: &R) -> Result<T> {
    let (sum, count) = pred.squared_error(gt)?;
    if count == 0 {
        return Err(Error::EmptyObservation("representation ground truth".into()));
    }
    Ok(sum / T::lit(count as f64))
}

/// Mean absolute difference over all pixels.
pub fn boundary_consistency_loss<T: Scalar>(pred: &BoundaryMap<T>, gt: &BoundaryMap<T>) -> Result<T> {
    same_dims("predicted boundary", pred.dims(), "ground-truth boundary", gt.dims())?;
    let n = pred.values().len();
    let sum: T = pred.values().iter().zip(gt.values()).map(|(&a, &b)| (a - b).abs()).sum();
    Ok(sum / T::lit(n as f64))
}

/// Batched supervision in NCHW layout, with per-pixel averaging weights
/// that turn a plain sum into a batch mean of per-image means.
#[derive(Clone, Debug)]
pub struct Targets<T> {
    pub depth: Tensor<T>,
    pub normals: Tensor<T>,
    pub boundary: Tensor<T>,
    /// `1 / (count_i · N)` where the ground-truth depth is valid, else 0.
    depth_weights: Tensor<T>,
    /// 1 where the ground-truth depth is valid, else 0.
    observed: Tensor<T>,
    /// As above for valid normals, repeated over the three channels.
    normal_weights: Tensor<T>,
    /// `1 / (H·W·N)` everywhere.
    pixel_weights: Tensor<T>,
}

impl<T: Scalar> Targets<T> {
    pub fn new(samples: &[&Sample<T>]) -> Result<Self> {
        let Some(first) = samples.first() else {
            return Err(Error::Usage("empty batch".into()));
        };
        let (h, w) = first.dims();
        let n = samples.len();
        let hw = h * w;
        let nf = T::lit(n as f64);
        let mut depth = Vec::with_capacity(n * hw);
        let mut normals = Vec::with_capacity(3 * n * hw);
        let mut boundary = Vec::with_capacity(n * hw);
        let mut dw = Vec::with_capacity(n * hw);
        let mut nw = Vec::with_capacity(3 * n * hw);
        let mut obs = Vec::with_capacity(n * hw);
        for s in samples {
            same_dims("first sample", (h, w), &s.id, s.dims())?;
            s.check_invariants()?;
            let mask = validity_mask(&s.gt_depth);
            let count = mask.count();
            if count == 0 {
                return Err(Error::EmptyObservation(format!("ground-truth depth of {}", s.id)));
            }
            let wd = T::one() / (T::lit(count as f64) * nf);
            dw.extend(mask.flags.iter().map(|&v| if v { wd } else { T::zero() }));
            obs.extend(mask.flags.iter().map(|&v| if v { T::one() } else { T::zero() }));
            let ncount = s.gt_normals.valid_count();
            if ncount == 0 {
                return Err(Error::EmptyObservation(format!("ground-truth normals of {}", s.id)));
            }
            let wn = T::one() / (T::lit(ncount as f64) * nf);
            for _ in 0..3 {
                nw.extend(s.gt_normals.valid().iter().map(|&v| if v { wn } else { T::zero() }));
            }
            depth.extend_from_slice(s.gt_depth.values());
            normals.extend_from_slice(s.gt_normals.values());
            boundary.extend_from_slice(s.gt_boundary.values());
        }
        let one = [n, 1, h, w];
        let three = [n, 3, h, w];
        Ok(Self {
            depth: Tensor::from_vec(&one, depth)?,
            normals: Tensor::from_vec(&three, normals)?,
            boundary: Tensor::from_vec(&one, boundary)?,
            depth_weights: Tensor::from_vec(&one, dw)?,
            observed: Tensor::from_vec(&one, obs)?,
            normal_weights: Tensor::from_vec(&three, nw)?,
            pixel_weights: Tensor::full(&one, T::one() / T::lit((hw * n) as f64)),
        })
    }
}

/// Graph nodes of every loss term and the weighted total.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_sa: Var,
    pub l_s: Var,
    pub l_n: Var,
    pub l_b: Var,
    /// Absent when the pipeline has no boundary-consistency network.
    pub l_bc: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn components<T: Scalar>(&self, g: &Graph<T>) -> LossComponents {
        let v = |x: Var| g.value(x).data()[0].as_f64();
        LossComponents {
            l_sa: v(self.l_sa),
            l_s: v(self.l_s),
            l_bc: self.l_bc.map_or(0.0, v),
            l_n: v(self.l_n),
            l_b: v(self.l_b),
        }
    }
}

fn weighted_sum<T: Scalar>(g: &mut Graph<T>, x: Var, weights: &Tensor<T>) -> Var {
    let m = g.mul_const(x, weights.clone());
    g.sum(m)
}

/// Records all terms for a pipeline forward pass. Terms with zero weight
/// are still evaluated for reporting but left out of `total`.
pub fn graph_losses<T: Scalar>(g: &mut Graph<T>, out: &PipelineVars, t: &Targets<T>, w: &LossWeights) -> LossVars {
    let d = g.sub_const(out.depth, &t.depth);
    let ad = g.abs(d);
    let l_sa = weighted_sum(g, ad, &t.depth_weights);

    let masked = g.mul_const(out.depth, t.observed.clone());
    let l_s = g.ssim(masked, t.depth.clone(), w.ssim_params());

    let dn = g.sub_const(out.normals, &t.normals);
    let sn = g.square(dn);
    let l_n = weighted_sum(g, sn, &t.normal_weights);

    let db = g.sub_const(out.boundary, &t.boundary);
    let sb = g.square(db);
    let l_b = weighted_sum(g, sb, &t.pixel_weights);

    let l_bc = out.consistency.map(|c| {
        let dc = g.sub_const(c, &t.boundary);
        let ac = g.abs(dc);
        weighted_sum(g, ac, &t.pixel_weights)
    });

    let mut total = l_sa;
    let mut add = |g: &mut Graph<T>, term: Var, lambda: f64| {
        if lambda != 0.0 {
            let s = g.affine(term, T::lit(lambda), T::zero());
            total = g.add(total, s);
        }
    };
    add(g, l_s, -w.lambda_s);
    if let Some(l_bc) = l_bc {
        add(g, l_bc, w.lambda_bc);
    }
    add(g, l_n, w.lambda_n);
    add(g, l_b, w.lambda_b);
    LossVars {
        l_sa,
        l_s,
        l_n,
        l_b,
        l_bc,
        total,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn depth(values: &[f64], h: usize, w: usize) -> DepthMap<f64> {
        DepthMap::new(h, w, values.to_vec()).unwrap()
    }

    #[test]
    fn masked_l1_hand_example() {
        let gt = depth(&[0.0, 1.0, 2.0], 1, 3);
        let pred = depth(&[9.0, 2.0, 2.0], 1, 3);
        assert_eq!(masked_l1(&pred, &gt).unwrap(), 0.5);
        assert_eq!(masked_l1(&gt, &gt).unwrap(), 0.0);
        let empty = depth(&[0.0; 3], 1, 3);
        assert!(matches!(masked_l1(&pred, &empty), Err(Error::EmptyObservation(_))));
    }

    #[test]
    fn representation_hand_examples() {
        let gt = BoundaryMap::new(1, 2, vec![0.0, 1.0]).unwrap();
        let pred = BoundaryMap::new(1, 2, vec![0.5, 0.5]).unwrap();
        assert_eq!(representation_loss(&pred, &gt).unwrap(), 0.25);

        let n = NormalMap::new(1, 1, vec![0.0, 0.0, -1.0], vec![true]).unwrap();
        let flipped = NormalMap::new(1, 1, vec![0.0, 0.0, 1.0], vec![true]).unwrap();
        assert_eq!(representation_loss(&flipped, &n).unwrap(), 4.0);
        let none = NormalMap::new(1, 1, vec![0.0; 3], vec![false]).unwrap();
        assert!(matches!(representation_loss(&n, &none), Err(Error::EmptyObservation(_))));
    }

    #[test]
    fn consistency_is_mean_indicator() {
        let gt: Vec<f64> = (0..100).map(|i| if i % 10 == 0 { 1.0 } else { 0.0 }).collect();
        let gt = BoundaryMap::new(10, 10, gt).unwrap();
        let zero = BoundaryMap::new(10, 10, vec![0.0; 100]).unwrap();
        assert!((boundary_consistency_loss(&zero, &gt).unwrap() - 0.1).abs() < 1e-15);
        assert_eq!(boundary_consistency_loss(&gt, &gt).unwrap(), 0.0);
    }

    #[test]
    fn total_follows_weighted_sum() {
        let c = LossComponents {
            l_sa: 1.0,
            l_s: 0.8,
            l_bc: 0.5,
            l_n: 3.0,
            l_b: 7.0,
        };
        let w = LossWeights {
            lambda_s: 0.1,
            lambda_bc: 0.2,
            lambda_n: 0.0,
            lambda_b: 0.0,
            ..LossWeights::default()
        };
        assert!((total_loss(&c, &w).unwrap().total - 1.02).abs() < 1e-12);
        assert_eq!(total_loss(&c, &LossWeights::l1_only()).unwrap().total, 1.0);
        let bad = LossComponents { l_n: f64::NAN, ..c };
        match total_loss(&bad, &w) {
            Err(Error::NonFinite { term, .. }) => assert_eq!(term, "l_n"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { lambda_s: -1.0, ..LossWeights::default() }.validate().is_err());
        assert!(LossWeights { ssim_window: 4, ..LossWeights::default() }.validate().is_err());
    }
}
