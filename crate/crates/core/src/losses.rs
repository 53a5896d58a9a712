//! Segmentation loss with deep supervision, the two relation consistency
//! losses and the ramp-up schedule that weights the latter.

use alloc::vec;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::relation::{Matrix, RelationMatrix};
use crate::tensor::Tensor;

pub const DICE_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

fn check_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(shape_err(a.len(), b.len()));
    }
    Ok(())
}

/// Soft dice loss `1 - (2 sum(p t) + eps) / (sum p + sum t + eps)`.
pub fn dice_loss(pred: &[f64], target: &[f64], eps: f64) -> Result<f64> {
    Ok(dice_loss_grad(pred, target, eps)?.0)
}

pub fn dice_loss_grad(pred: &[f64], target: &[f64], eps: f64) -> Result<(f64, Vec<f64>)> {
    check_len(pred, target)?;
    let inter: f64 = pred.iter().zip(target).map(|(p, t)| p * t).sum();
    let denom = pred.iter().sum::<f64>() + target.iter().sum::<f64>() + eps;
    let num = 2.0 * inter + eps;
    let loss = 1.0 - num / denom;
    let grad = target.iter().map(|t| -(2.0 * t * denom - num) / (denom * denom)).collect();
    Ok((loss, grad))
}

/// Mean binary cross-entropy on probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn cross_entropy_loss(prob: &[f64], target: &[f64]) -> Result<f64> {
    Ok(cross_entropy_grad(prob, target)?.0)
}

pub fn cross_entropy_grad(prob: &[f64], target: &[f64]) -> Result<(f64, Vec<f64>)> {
    check_len(prob, target)?;
    let n = prob.len() as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(prob.len());
    for (&p, &t) in prob.iter().zip(target) {
        let pc = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        loss -= t * libm::log(pc) + (1.0 - t) * libm::log(1.0 - pc);
        let inside = p > PROB_CLAMP && p < 1.0 - PROB_CLAMP;
        grad.push(if inside { (-t / pc + (1.0 - t) / (1.0 - pc)) / n } else { 0.0 });
    }
    Ok((loss / n, grad))
}

/// Deep-supervision weights: halving per scale, normalized to sum to one.
pub fn deep_supervision_weights(scales: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..scales).map(|s| libm::pow(0.5, s as f64)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Nearest-neighbour downsampling of a full-resolution mask onto `dims`.
pub fn downsample_mask(mask: &Tensor, dims: [usize; 3]) -> Result<Tensor> {
    let mut factor = [1; 3];
    for a in 0..3 {
        if dims[a] == 0 || !mask.dims[a].is_multiple_of(dims[a]) {
            return Err(shape_err(mask.dims, dims));
        }
        factor[a] = mask.dims[a] / dims[a];
    }
    if factor == [1, 1, 1] {
        return Ok(mask.clone());
    }
    let mut out = Tensor::zeros(mask.channels, dims);
    let [_, sh, sw] = mask.dims;
    for c in 0..mask.channels {
        let src = mask.channel(c);
        let mut i = 0;
        let dst = out.channel_mut(c);
        for d in 0..dims[0] {
            for h in 0..dims[1] {
                for w in 0..dims[2] {
                    dst[i] = src[((d * factor[0]) * sh + h * factor[1]) * sw + w * factor[2]];
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Dice + cross-entropy summed over deep-supervision scales. `outputs` are
/// sigmoid probabilities ordered full resolution first; `target` is the
/// full-resolution mask. Returns the loss and its gradient with respect to
/// each output.
pub fn seg_loss_grad(outputs: &[Tensor], target: &Tensor) -> Result<(f64, Vec<Tensor>)> {
    if outputs.is_empty() {
        return Err(Error::Invalid("segmentation loss needs at least one output".into()));
    }
    if outputs[0].dims != target.dims {
        return Err(shape_err(target.dims, outputs[0].dims));
    }
    let weights = deep_supervision_weights(outputs.len());
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(outputs.len());
    for (out, w) in outputs.iter().zip(weights) {
        let t = downsample_mask(target, out.dims)?;
        let (dl, dg) = dice_loss_grad(&out.data, &t.data, DICE_EPS)?;
        let (cl, cg) = cross_entropy_grad(&out.data, &t.data)?;
        total += w * (dl + cl);
        let data = dg.iter().zip(&cg).map(|(a, b)| w * (a + b)).collect();
        grads.push(Tensor { channels: out.channels, dims: out.dims, data });
    }
    Ok((total, grads))
}

pub fn seg_loss(outputs: &[Tensor], target: &Tensor) -> Result<f64> {
    Ok(seg_loss_grad(outputs, target)?.0)
}

fn diff(a: &RelationMatrix, b: &RelationMatrix) -> Result<Vec<f64>> {
    if a.channels() != b.channels() {
        return Err(shape_err(a.channels(), b.channels()));
    }
    Ok(a.values().iter().zip(b.values()).map(|(x, y)| x - y).collect())
}

fn as_matrix(n: usize, data: Vec<f64>) -> Matrix {
    Matrix { rows: n, cols: n, data }
}

/// General relation consistency `lambda_g * |R_aux - R_tgt|^2` and its
/// gradients with respect to both matrices.
pub fn rc_general_grad(r_aux: &RelationMatrix, r_tgt: &RelationMatrix, lambda_g: f64) -> Result<(f64, Matrix, Matrix)> {
    let d = diff(r_aux, r_tgt)?;
    let n = r_aux.channels();
    let loss = lambda_g * d.iter().map(|v| v * v).sum::<f64>();
    let g_aux: Vec<f64> = d.iter().map(|v| 2.0 * lambda_g * v).collect();
    let g_tgt = g_aux.iter().map(|v| -v).collect();
    Ok((loss, as_matrix(n, g_aux), as_matrix(n, g_tgt)))
}

pub fn rc_general_loss(r_aux: &RelationMatrix, r_tgt: &RelationMatrix, lambda_g: f64) -> Result<f64> {
    Ok(rc_general_grad(r_aux, r_tgt, lambda_g)?.0)
}

/// Target relation consistency `-lambda_t * |R_G - R_T|^2`. `floor`, when
/// set, bounds the loss from below; past it the gradient is zero.
pub fn rc_target_grad(
    r_general: &RelationMatrix,
    r_target: &RelationMatrix,
    lambda_t: f64,
    floor: Option<f64>,
) -> Result<(f64, Matrix, Matrix)> {
    let d = diff(r_general, r_target)?;
    let n = r_general.channels();
    let loss = -lambda_t * d.iter().map(|v| v * v).sum::<f64>();
    if let Some(f) = floor {
        if loss < -f.abs() {
            return Ok((-f.abs(), as_matrix(n, vec![0.0; n * n]), as_matrix(n, vec![0.0; n * n])));
        }
    }
    let g_general: Vec<f64> = d.iter().map(|v| -2.0 * lambda_t * v).collect();
    let g_target = g_general.iter().map(|v| -v).collect();
    Ok((loss, as_matrix(n, g_general), as_matrix(n, g_target)))
}

pub fn rc_target_loss(r_general: &RelationMatrix, r_target: &RelationMatrix, lambda_t: f64) -> Result<f64> {
    Ok(rc_target_grad(r_general, r_target, lambda_t, None)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RampForm {
    /// `base * exp(-5 (1 - t/T)^2)`
    #[default]
    Gaussian,
    /// `base * exp(-5 (1 - t/T))`
    Exponential,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RampSchedule {
    pub base: f64,
    pub t_max: u64,
    #[serde(default)]
    pub form: RampForm,
}

impl RampSchedule {
    pub fn new(base: f64, t_max: u64) -> Self {
        Self { base, t_max, form: RampForm::Gaussian }
    }
}

/// Ramp-up coefficient at `step`; steps past `t_max` clamp to it.
pub fn ramp_lambda(step: u64, schedule: &RampSchedule) -> Result<f64> {
    if schedule.t_max == 0 {
        return Err(Error::Config("ramp schedule needs t_max >= 1".into()));
    }
    let t = step.min(schedule.t_max) as f64 / schedule.t_max as f64;
    let x = 1.0 - t;
    let exponent = match schedule.form {
        RampForm::Gaussian => -5.0 * x * x,
        RampForm::Exponential => -5.0 * x,
    };
    Ok(schedule.base * libm::exp(exponent))
}

/// Loss terms of one training step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBundle {
    pub seg: f64,
    pub rc_general: f64,
    pub rc_target: f64,
    pub lambda_g: f64,
    pub lambda_t: f64,
}

impl LossBundle {
    pub fn is_finite(&self) -> bool {
        [self.seg, self.rc_general, self.rc_target, self.lambda_g, self.lambda_t]
            .iter()
            .all(|v| v.is_finite())
    }

    pub fn total(&self) -> f64 {
        self.seg + self.rc_general + self.rc_target
    }
}
