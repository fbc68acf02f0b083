//! Moment-propagating forward pass.
//!
//! Instead of a point activation,每 layer transforms a factorized Gaussian
//! `(mean, var)` pair. Affine layers propagate both moments exactly; ReLU uses
//! the rectified-Gaussian closed form; max-pooling reduces each 2x2 window by
//! iterated pairwise Gaussian-max approximations. Starting from the input and
//! its sensor noise, the pass yields the prediction together with the output
//! variance that noise induces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    self, DropoutConfig, LayerKind, LayerWeights, NetworkGraph,
};
use crate::numerics::{cdf_raw, pdf_raw, GaussianScalar, Tensor};
use crate::predict::MaskSet;

/// Smallest variance ever stored. The ReLU and max rules divide by the
/// standard deviation, so fully deterministic components need a floor; 1e-9 is
/// far below any realistic sensor noise.
pub const VAR_FLOOR: f64 = 1e-9;

/// Factorized Gaussian over an activation tensor: one independent component
/// per element.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianActivation {
    mean: Tensor,
    var: Tensor,
}

impl GaussianActivation {
    /// Builds an activation, flooring the variance elementwise.
    pub fn new(mean: Tensor, var: Tensor) -> Result<Self> {
        if !mean.same_shape(&var) {
            return Err(Error::Shape(format!(
                "mean shape {:?} does not match var shape {:?}",
                mean.shape(),
                var.shape()
            )));
        }
        if !mean.all_finite() || !var.all_finite() {
            return Err(Error::Numeric("non-finite activation moments".into()));
        }
        if var.data().iter().any(|&v| v < 0.0 && v < -1e-12) {
            return Err(Error::Numeric("negative variance".into()));
        }
        let var = var.map(|v| v.max(VAR_FLOOR));
        Ok(GaussianActivation { mean, var })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn var(&self) -> &Tensor {
        &self.var
    }

    pub fn shape(&self) -> &[usize] {
        self.mean.shape()
    }
}

/// Input noise: a single variance broadcast over the input, or one variance
/// per component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum InputNoise {
    Scalar(f64),
    PerComponent(Tensor),
}

impl From<f64> for InputNoise {
    fn from(v: f64) -> Self {
        InputNoise::Scalar(v)
    }
}

impl From<Tensor> for InputNoise {
    fn from(t: Tensor) -> Self {
        InputNoise::PerComponent(t)
    }
}

impl InputNoise {
    /// Expands to a full variance tensor of the given shape.
    pub fn to_tensor(&self, shape: &[usize]) -> Result<Tensor> {
        match self {
            InputNoise::Scalar(v) => {
                if !v.is_finite() || *v < 0.0 {
                    return Err(Error::InvalidArgument(format!(
                        "input noise variance must be finite and >= 0, got {v}"
                    )));
                }
                Tensor::full(shape.to_vec(), *v)
            }
            InputNoise::PerComponent(t) => {
                if t.shape() != shape {
                    return Err(Error::Shape(format!(
                        "noise tensor shape {:?} does not match input {shape:?}",
                        t.shape()
                    )));
                }
                if !t.all_finite() || t.data().iter().any(|&v| v < 0.0) {
                    return Err(Error::InvalidArgument(
                        "input noise variances must be finite and >= 0".into(),
                    ));
                }
                Ok(t.clone())
            }
        }
    }
}

/// Moments of `max(0, X)` for `X ~ N(mean, var)`.
///
/// With `t = mean / sd`: `mean' = mean * cdf(t) + sd * pdf(t)` and
/// `var' = (mean^2 + var) * cdf(t) + mean * sd * pdf(t) - mean'^2`.
pub fn relu_moments(g: GaussianScalar) -> GaussianScalar {
    let sd = g.var.max(VAR_FLOOR).sqrt();
    let t = g.mean / sd;
    let cdf = cdf_raw(t);
    let pdf = pdf_raw(t);
    let mean = g.mean * cdf + sd * pdf;
    let var = (g.mean * g.mean + g.var) * cdf + g.mean * sd * pdf - mean * mean;
    GaussianScalar::new(mean.max(0.0), var).floored(VAR_FLOOR)
}

/// Gaussian approximation of `max(X, Y)` for independent Gaussians
/// (Clark's pairwise moment formulas).
pub fn clark_max(a: GaussianScalar, b: GaussianScalar) -> GaussianScalar {
    let spread_sq = a.var + b.var;
    if spread_sq <= 0.0 {
        let mean = a.mean.max(b.mean);
        let var = if a.mean >= b.mean { a.var } else { b.var };
        return GaussianScalar::new(mean, var).floored(VAR_FLOOR);
    }
    let spread = spread_sq.sqrt();
    let t = (a.mean - b.mean) / spread;
    let cdf = cdf_raw(t);
    let cdf_neg = cdf_raw(-t);
    let pdf = pdf_raw(t);
    let mean = a.mean * cdf + b.mean * cdf_neg + spread * pdf;
    let second = (a.mean * a.mean + a.var) * cdf
        + (b.mean * b.mean + b.var) * cdf_neg
        + (a.mean + b.mean) * spread * pdf;
    GaussianScalar::new(mean, second - mean * mean).floored(VAR_FLOOR)
}

/// Exact moment propagation through a dense, conv2d, or flatten layer.
///
/// `mean' = W mean + b`; `var' = (W * W) var`. Exact for affine maps of
/// independent Gaussians, not an approximation.
pub fn adf_affine(
    kind: &LayerKind,
    weights: Option<&LayerWeights>,
    a: &GaussianActivation,
) -> Result<GaussianActivation> {
    match kind {
        LayerKind::Dense { .. } => {
            let lw = weights.ok_or_else(|| Error::MissingWeight("dense layer".into()))?;
            let mean = model::dense_apply(&lw.weight, Some(&lw.bias), a.mean())?;
            let var = model::dense_apply(&lw.weight.square(), None, a.var())?;
            GaussianActivation::new(mean, var)
        }
        LayerKind::Conv2d { stride, padding, .. } => {
            let lw = weights.ok_or_else(|| Error::MissingWeight("conv2d layer".into()))?;
            let mean = model::conv2d_apply(&lw.weight, Some(&lw.bias), a.mean(), *stride, *padding)?;
            let var = model::conv2d_apply(&lw.weight.square(), None, a.var(), *stride, *padding)?;
            GaussianActivation::new(mean, var)
        }
        LayerKind::Flatten => {
            let n = a.mean().len();
            GaussianActivation::new(a.mean().reshape(vec![n])?, a.var().reshape(vec![n])?)
        }
        other => Err(Error::InvalidArgument(format!(
            "adf_affine does not handle {other:?}"
        ))),
    }
}

/// ReLU moment propagation, componentwise.
pub fn adf_relu(a: &GaussianActivation) -> GaussianActivation {
    let n = a.mean().len();
    let mut mean = Vec::with_capacity(n);
    let mut var = Vec::with_capacity(n);
    for (&m, &v) in a.mean().iter().zip(a.var().iter()) {
        let out = relu_moments(GaussianScalar::new(m, v));
        mean.push(out.mean);
        var.push(out.var);
    }
    let shape = a.shape().to_vec();
    GaussianActivation {
        mean: Tensor::new(shape.clone(), mean).expect("shape preserved"),
        var: Tensor::new(shape, var).expect("shape preserved"),
    }
}

/// 2x2 max-pooling on Gaussian activations.
///
/// Each window reduces by three pairwise maxima, row-major:
/// `max(max(a, b), max(c, d))`, window entries treated as independent.
pub fn adf_maxpool2x2(a: &GaussianActivation) -> Result<GaussianActivation> {
    let (c, h, w) = match a.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(Error::Shape(format!(
                "maxpool2x2 expects [channels, height, width], got {s:?}"
            )))
        }
    };
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Shape(format!("maxpool2x2 needs even spatial dims, got {h}x{w}")));
    }
    let (h_out, w_out) = (h / 2, w / 2);
    let md = a.mean().data();
    let vd = a.var().data();
    let mut mean = vec![0.0; c * h_out * w_out];
    let mut var = vec![0.0; c * h_out * w_out];
    for ch in 0..c {
        for oy in 0..h_out {
            for ox in 0..w_out {
                let at = |dy: usize, dx: usize| {
                    let idx = (ch * h + 2 * oy + dy) * w + 2 * ox + dx;
                    GaussianScalar::new(md[idx], vd[idx])
                };
                let top = clark_max(at(0, 0), at(0, 1));
                let bottom = clark_max(at(1, 0), at(1, 1));
                let out = clark_max(top, bottom);
                let idx = (ch * h_out + oy) * w_out + ox;
                mean[idx] = out.mean;
                var[idx] = out.var;
            }
        }
    }
    GaussianActivation::new(
        Tensor::new(vec![c, h_out, w_out], mean)?,
        Tensor::new(vec![c, h_out, w_out], var)?,
    )
}

/// Dropout with a fixed mask: a deterministic linear map within one sample.
/// Means scale by `mask / (1 - rate)`, variances by its square.
pub fn adf_dropout(
    a: &GaussianActivation,
    site_mask: &Tensor,
    rate: f64,
) -> Result<GaussianActivation> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!("dropout rate {rate} outside [0, 1)")));
    }
    if !a.mean().same_shape(site_mask) {
        return Err(Error::Shape(format!(
            "mask shape {:?} does not match activation {:?}",
            site_mask.shape(),
            a.shape()
        )));
    }
    let scale = 1.0 / (1.0 - rate);
    let mean = model::apply_site_mask(a.mean(), site_mask, scale)?;
    let var_data = a
        .var()
        .data()
        .iter()
        .zip(site_mask.data())
        .map(|(v, m)| v * m * scale * scale)
        .collect();
    let var = Tensor::new(a.shape().to_vec(), var_data)?;
    GaussianActivation::new(mean, var)
}

/// Runs the full moment-propagating pass from `(x, noise)` to the output
/// distribution.
pub fn adf_forward(
    g: &NetworkGraph,
    x: &Tensor,
    noise: &InputNoise,
    mask: Option<&MaskSet>,
    cfg: Option<&DropoutConfig>,
) -> Result<GaussianActivation> {
    if x.shape() != g.input_shape() {
        return Err(Error::Shape(format!(
            "input shape {:?} does not match network input {:?}",
            x.shape(),
            g.input_shape()
        )));
    }
    if mask.is_some() && cfg.is_none() {
        return Err(Error::InvalidArgument(
            "a mask requires a dropout config for the keep scale".into(),
        ));
    }
    if let Some(m) = mask {
        if m.site_count() != g.dropout_site_count() {
            return Err(Error::InvalidArgument(format!(
                "mask has {} sites, graph has {}",
                m.site_count(),
                g.dropout_site_count()
            )));
        }
    }

    let v0 = noise.to_tensor(x.shape())?;
    let mut act = GaussianActivation::new(x.clone(), v0)?;
    let mut site = 0usize;
    for layer in g.layers() {
        act = match &layer.kind {
            LayerKind::Dense { .. } | LayerKind::Conv2d { .. } | LayerKind::Flatten => {
                adf_affine(&layer.kind, g.layer_weights(&layer.name), &act)?
            }
            LayerKind::Relu => adf_relu(&act),
            LayerKind::MaxPool2x2 => adf_maxpool2x2(&act)?,
            LayerKind::Dropout => {
                let out = match mask {
                    Some(m) => adf_dropout(&act, m.site(site)?, cfg.expect("checked above").rate())?,
                    None => act,
                };
                site += 1;
                out
            }
        };
    }
    Ok(act)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_act(mean: f64, var: f64) -> GaussianActivation {
        GaussianActivation::new(Tensor::from_slice(&[mean]), Tensor::from_slice(&[var])).unwrap()
    }

    #[test]
    fn affine_scales_variance_by_squared_weight() {
        let lw = LayerWeights {
            weight: Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
        };
        let a = scalar_act(1.0, 0.25);
        let out = adf_affine(&LayerKind::Dense { in_dim: 1, out_dim: 1 }, Some(&lw), &a).unwrap();
        assert_eq!(out.mean().data(), &[2.0]);
        assert_eq!(out.var().data(), &[1.0]);
    }

    #[test]
    fn affine_sums_independent_variances() {
        let lw = LayerWeights {
            weight: Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap(),
            bias: Tensor::new(vec![1], vec![0.0]).unwrap(),
        };
        let a = GaussianActivation::new(
            Tensor::from_slice(&[1.0, 1.0]),
            Tensor::from_slice(&[1.0, 1.0]),
        )
        .unwrap();
        let out = adf_affine(&LayerKind::Dense { in_dim: 2, out_dim: 1 }, Some(&lw), &a).unwrap();
        assert_eq!(out.mean().data(), &[2.0]);
        assert_eq!(out.var().data(), &[2.0]);
    }

    #[test]
    fn relu_standard_normal_moments() {
        // Closed-form rectified moments of N(0, 1):
        // mean = 1/sqrt(2 pi), var = 1/2 - 1/(2 pi).
        let out = relu_moments(GaussianScalar::new(0.0, 1.0));
        assert!((out.mean - 0.39894228040143268).abs() < 1e-12, "mean {}", out.mean);
        assert!((out.var - 0.34084505690810466).abs() < 1e-12, "var {}", out.var);
    }

    #[test]
    fn relu_identity_far_above_zero() {
        let out = relu_moments(GaussianScalar::new(10.0, 1e-6));
        assert!((out.mean - 10.0).abs() < 1e-9);
        assert!((out.var - 1e-6).abs() < 1e-9);
    }

    #[test]
    fn relu_fully_clipped() {
        let out = relu_moments(GaussianScalar::new(-10.0, 1e-6));
        assert!(out.mean.abs() < 1e-12, "mean {}", out.mean);
        assert_eq!(out.var, VAR_FLOOR);
    }

    #[test]
    fn relu_mean_nonnegative_everywhere() {
        let mut s = crate::rng::Stream::new(3, 0, 0);
        for _ in 0..10_000 {
            let mean = 40.0 * s.next_f64() - 20.0;
            let var = 10.0_f64.powf(6.0 * s.next_f64() - 6.0);
            let out = relu_moments(GaussianScalar::new(mean, var));
            assert!(out.mean >= 0.0, "relu mean negative at ({mean}, {var})");
            assert!(out.var >= VAR_FLOOR);
        }
    }

    #[test]
    fn clark_max_iid_standard_normals() {
        // max of two iid N(0,1): mean 1/sqrt(pi), var 1 - 1/pi.
        let a = GaussianScalar::new(0.0, 1.0);
        let out = clark_max(a, a);
        assert!((out.mean - 0.56418958354775629).abs() < 1e-12, "mean {}", out.mean);
        assert!((out.var - 0.68169011381620933).abs() < 1e-12, "var {}", out.var);
    }

    #[test]
    fn maxpool_degenerate_variances_reduce_to_max() {
        let a = GaussianActivation::new(
            Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
            Tensor::new(vec![1, 2, 2], vec![VAR_FLOOR; 4]).unwrap(),
        )
        .unwrap();
        let out = adf_maxpool2x2(&a).unwrap();
        assert!((out.mean().data()[0] - 4.0).abs() < 1e-6);
        assert!(out.var().data()[0] < 10.0 * VAR_FLOOR);
    }

    #[test]
    fn dropout_examples() {
        let a = scalar_act(3.0, 0.5);
        let ones = Tensor::from_slice(&[1.0]);
        let id = adf_dropout(&a, &ones, 0.0).unwrap();
        assert_eq!(id.mean().data(), &[3.0]);
        assert_eq!(id.var().data(), &[0.5]);

        let zero = Tensor::from_slice(&[0.0]);
        let dropped = adf_dropout(&a, &zero, 0.3).unwrap();
        assert_eq!(dropped.mean().data(), &[0.0]);
        assert_eq!(dropped.var().data(), &[VAR_FLOOR]);

        let half = adf_dropout(&a, &ones, 0.5).unwrap();
        assert_eq!(half.mean().data(), &[6.0]);
        assert_eq!(half.var().data(), &[2.0]);
    }

    #[test]
    fn input_noise_broadcast_and_validation() {
        let n = InputNoise::from(0.5);
        let t = n.to_tensor(&[3]).unwrap();
        assert_eq!(t.data(), &[0.5, 0.5, 0.5]);
        assert!(InputNoise::from(-1.0).to_tensor(&[2]).is_err());
        let bad = InputNoise::from(Tensor::from_slice(&[0.1, 0.2]));
        assert!(bad.to_tensor(&[3]).is_err());
    }
}
