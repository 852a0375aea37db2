//! BCE-Dice training objective.
//!
//! For sample `i` and pixel `j` with `p = σ(logit)`:
//!
//! ```text
//! dice = (1/B) Σ_i (1 − (2 Σ_j y_ij p_ij + ε) / (Σ_j y_ij + Σ_j p_ij + ε))
//! bce  = mean_ij −[y log p + (1 − y) log(1 − p)]
//! ```
//!
//! The multi-class variant replaces the sigmoid by a softmax over classes,
//! averages the Dice term over foreground classes and uses cross-entropy.
//! Both are fused graph operations with closed-form gradients.

use ndarray::{Array3, Ix4};
use serde::{Deserialize, Serialize};

use crate::autograd::{sigmoid, Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{cst, from_vec, Element, Tensor};

/// Smoothing added to the Dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub dice_term: f64,
    pub bce_term: f64,
}

/// `log(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

fn dims4(s: &[usize], what: &str) -> Result<[usize; 4]> {
    <[usize; 4]>::try_from(s).map_err(|_| Error::shape(format!("{what} must be [B, K, H, W], got {s:?}")))
}

/// Binary BCE-Dice on logits `[B, 1, H, W]` against targets in {0, 1} of the same shape.
pub fn bce_dice_loss<T: Element>(g: &Graph<T>, logits: &Var<T>, targets: &Tensor<T>, eps: f64) -> Result<(Var<T>, LossValue)> {
    let [b, k, h, w] = dims4(logits.shape(), "logits")?;
    if k != 1 || targets.shape() != logits.shape() {
        return Err(Error::shape(format!(
            "binary loss expects [B, 1, H, W] logits and equal-shape targets, got {:?} and {:?}",
            logits.shape(),
            targets.shape()
        )));
    }
    if targets.iter().any(|&y| y != T::zero() && y != T::one()) {
        return Err(Error::Input("binary targets must be 0 or 1".into()));
    }
    let n = h * w;
    let z: Vec<f64> = logits.value().iter().map(|&v| v.to_f64()).collect();
    let y: Vec<f64> = targets.iter().map(|&v| v.to_f64()).collect();
    let p: Vec<f64> = z.iter().map(|&v| sigmoid(v)).collect();

    let mut bce = 0.0;
    for (&zj, &yj) in z.iter().zip(&y) {
        bce += softplus(zj) - zj * yj;
    }
    bce /= (b * n) as f64;

    let mut dice = 0.0;
    let mut grad = vec![0.0; b * n];
    for i in 0..b {
        let (ps, ys) = (&p[i * n..(i + 1) * n], &y[i * n..(i + 1) * n]);
        let inter: f64 = ps.iter().zip(ys).map(|(a, b)| a * b).sum();
        let denom = ys.iter().sum::<f64>() + ps.iter().sum::<f64>() + eps;
        let num = 2.0 * inter + eps;
        dice += 1.0 - num / denom;
        for j in 0..n {
            // ∂(1 − num/denom)/∂p_j, chained through σ'
            let dr = (2.0 * ys[j] * denom - num) / (denom * denom);
            let dp = -dr / b as f64;
            grad[i * n + j] = dp * ps[j] * (1.0 - ps[j]);
        }
    }
    dice /= b as f64;
    for j in 0..b * n {
        grad[j] += (p[j] - y[j]) / (b * n) as f64;
    }

    let value = LossValue {
        total: dice + bce,
        dice_term: dice,
        bce_term: bce,
    };
    let shape = logits.shape().to_vec();
    let grad: Tensor<T> = from_vec(&shape, grad.into_iter().map(cst).collect());
    let out = g.custom(ndarray::arr0(cst::<T>(value.total)).into_dyn(), &[logits], move |go| {
        let s = *go.iter().next().expect("scalar seed");
        vec![Some(grad.mapv(|v| v * s))]
    });
    Ok((out, value))
}

/// Multi-class BCE-Dice on logits `[B, K, H, W]` (K ≥ 2) against class ids `[B, H, W]`.
pub fn bce_dice_loss_multiclass<T: Element>(
    g: &Graph<T>,
    logits: &Var<T>,
    targets: &Array3<u8>,
    eps: f64,
) -> Result<(Var<T>, LossValue)> {
    let [b, k, h, w] = dims4(logits.shape(), "logits")?;
    if k < 2 {
        return Err(Error::shape("multi-class loss needs at least two classes"));
    }
    if targets.shape() != [b, h, w] {
        return Err(Error::shape(format!("targets {:?} vs logits {:?}", targets.shape(), logits.shape())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= k) {
        return Err(Error::Input(format!("target class {bad} outside [0, {k})")));
    }
    let n = h * w;
    let zv = logits.value().view().into_dimensionality::<Ix4>().expect("rank 4");
    let tgt = targets.as_slice().expect("contiguous targets");

    // softmax over classes, laid out [b][k][j]
    let mut p = vec![0.0; b * k * n];
    let mut ce = 0.0;
    for i in 0..b {
        for j in 0..n {
            let (r, c) = (j / w, j % w);
            let mx = (0..k).map(|c2| zv[[i, c2, r, c]].to_f64()).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c2| (zv[[i, c2, r, c]].to_f64() - mx).exp()).sum::<f64>().ln();
            for c2 in 0..k {
                p[(i * k + c2) * n + j] = (zv[[i, c2, r, c]].to_f64() - lse).exp();
            }
            let t = tgt[i * n + j] as usize;
            ce += lse - zv[[i, t, r, c]].to_f64();
        }
    }
    ce /= (b * n) as f64;

    // gradient w.r.t. probabilities from the Dice term
    let fg = (k - 1) as f64;
    let mut gp = vec![0.0; b * k * n];
    let mut dice = 0.0;
    for i in 0..b {
        for c2 in 1..k {
            let base = (i * k + c2) * n;
            let ps = &p[base..base + n];
            let mut inter = 0.0;
            let mut ysum = 0.0;
            for j in 0..n {
                if tgt[i * n + j] as usize == c2 {
                    inter += ps[j];
                    ysum += 1.0;
                }
            }
            let denom = ysum + ps.iter().sum::<f64>() + eps;
            let num = 2.0 * inter + eps;
            dice += 1.0 - num / denom;
            for j in 0..n {
                let yj = if tgt[i * n + j] as usize == c2 { 1.0 } else { 0.0 };
                let dr = (2.0 * yj * denom - num) / (denom * denom);
                gp[base + j] = -dr / (b as f64 * fg);
            }
        }
    }
    dice /= b as f64 * fg;

    // chain through the softmax, then add the cross-entropy gradient
    let mut grad = vec![0.0; b * k * n];
    for i in 0..b {
        for j in 0..n {
            let dot: f64 = (0..k).map(|c2| p[(i * k + c2) * n + j] * gp[(i * k + c2) * n + j]).sum();
            let t = tgt[i * n + j] as usize;
            for c2 in 0..k {
                let idx = (i * k + c2) * n + j;
                let y = if c2 == t { 1.0 } else { 0.0 };
                grad[idx] = p[idx] * (gp[idx] - dot) + (p[idx] - y) / (b * n) as f64;
            }
        }
    }

    let value = LossValue {
        total: dice + ce,
        dice_term: dice,
        bce_term: ce,
    };
    let grad: Tensor<T> = from_vec(&[b, k, h, w], grad.into_iter().map(cst).collect());
    let out = g.custom(ndarray::arr0(cst::<T>(value.total)).into_dyn(), &[logits], move |go| {
        let s = *go.iter().next().expect("scalar seed");
        vec![Some(grad.mapv(|v| v * s))]
    });
    Ok((out, value))
}

/// Dispatches on the number of output channels: sigmoid BCE-Dice for one
/// channel (foreground = class id ≥ 1), softmax variant otherwise.
pub fn segmentation_loss<T: Element>(g: &Graph<T>, logits: &Var<T>, masks: &Array3<u8>) -> Result<(Var<T>, LossValue)> {
    let [b, k, h, w] = dims4(logits.shape(), "logits")?;
    if k == 1 {
        if masks.shape() != [b, h, w] {
            return Err(Error::shape(format!("masks {:?} vs logits {:?}", masks.shape(), logits.shape())));
        }
        let y: Tensor<T> = from_vec(
            &[b, 1, h, w],
            masks.iter().map(|&m| if m > 0 { T::one() } else { T::zero() }).collect(),
        );
        bce_dice_loss(g, logits, &y, DICE_EPS)
    } else {
        bce_dice_loss_multiclass(g, logits, masks, DICE_EPS)
    }
}
