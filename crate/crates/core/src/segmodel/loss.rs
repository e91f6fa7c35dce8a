//! Pixel-wise losses on logit grids. Each returns the loss averaged over
//! pixels together with its derivative with respect to the logits.

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Tensor, IGNORE_LABEL};

/// Channel-wise log-softmax at every pixel.
pub fn log_softmax(logits: &Tensor) -> Tensor {
    let n = logits.plane_len();
    let c = logits.channels;
    let mut out = Tensor::zeros(c, logits.height, logits.width);
    for p in 0..n {
        let mut mx = f64::NEG_INFINITY;
        for k in 0..c {
            mx = mx.max(logits.data[k * n + p]);
        }
        let mut s = 0.0;
        for k in 0..c {
            s += (logits.data[k * n + p] - mx).exp();
        }
        let lse = mx + s.ln();
        for k in 0..c {
            out.data[k * n + p] = logits.data[k * n + p] - lse;
        }
    }
    out
}

pub fn softmax(logits: &Tensor) -> Tensor {
    let mut t = log_softmax(logits);
    for v in &mut t.data {
        *v = v.exp();
    }
    t
}

fn channel_of(classes: &[u32], class: u32) -> Option<usize> {
    classes.iter().position(|&c| c == class)
}

/// Cross-entropy against a label map.
///
/// `classes[k]` is the class id of logit channel `k` (background first).
/// Pixels labelled background score the summed probability of background
/// and every class in `fold_into_bg`; with an empty fold set this is plain
/// cross-entropy. Pixels equal to [`IGNORE_LABEL`] are skipped and the mean
/// is taken over the remaining pixels.
pub fn cross_entropy(
    logits: &Tensor,
    classes: &[u32],
    labels: &LabelMap,
    fold_into_bg: &[u32],
) -> Result<(f64, Tensor)> {
    if labels.height != logits.height || labels.width != logits.width {
        return Err(Error::Shape("label map does not match logits".into()));
    }
    let n = logits.plane_len();
    let c = logits.channels;
    let mut bg_set = vec![false; c];
    bg_set[0] = true;
    for &f in fold_into_bg {
        if let Some(k) = channel_of(classes, f) {
            bg_set[k] = true;
        }
    }
    let mut map = [usize::MAX; 256];
    for (k, &cls) in classes.iter().enumerate() {
        map[cls as usize] = k;
    }
    let lp = log_softmax(logits);
    let mut grad = Tensor::zeros(c, logits.height, logits.width);
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        let y = labels.data[p];
        if y == IGNORE_LABEL {
            continue;
        }
        let target = map[y as usize];
        if target == usize::MAX {
            return Err(Error::Shape(format!("label {y} has no logit channel")));
        }
        count += 1;
        if target == 0 {
            let mut q = 0.0;
            for k in 0..c {
                if bg_set[k] {
                    q += lp.data[k * n + p].exp();
                }
            }
            total -= q.ln();
            for k in 0..c {
                let pk = lp.data[k * n + p].exp();
                grad.data[k * n + p] = if bg_set[k] { pk - pk / q } else { pk };
            }
        } else {
            total -= lp.data[target * n + p];
            for k in 0..c {
                let pk = lp.data[k * n + p].exp();
                grad.data[k * n + p] = pk - if k == target { 1.0 } else { 0.0 };
            }
        }
    }
    if count == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / count as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Temperature-scaled distillation from an old model's distribution over
/// `old_classes` into the new model's distribution, measured as
/// `KL(p_old || q_new)` averaged over pixels.
///
/// `q_new` is built from the new model's tempered softmax: each old channel
/// collects the new channel with the same class id; the old background
/// channel additionally collects every class in `fold_into_bg`. New channels
/// outside those groups are left out of the softmax, so with an empty fold
/// set this is plain old-channel distillation. The loss vanishes exactly
/// when the folded new distribution equals the old one.
pub fn distillation(
    new_logits: &Tensor,
    new_classes: &[u32],
    old_logits: &Tensor,
    old_classes: &[u32],
    fold_into_bg: &[u32],
    temperature: f64,
) -> Result<(f64, Tensor)> {
    if !(temperature > 0.0) {
        return Err(Error::Config("temperature must be positive".into()));
    }
    if new_logits.plane_len() != old_logits.plane_len() {
        return Err(Error::Shape("old/new logits differ in spatial size".into()));
    }
    let n = new_logits.plane_len();
    let cn = new_logits.channels;
    // group[k] = index of the old channel that new channel k folds into.
    let mut group = vec![usize::MAX; cn];
    for (j, &oc) in old_classes.iter().enumerate() {
        let k = channel_of(new_classes, oc)
            .ok_or_else(|| Error::Shape(format!("old class {oc} missing from new head")))?;
        group[k] = j;
    }
    for &f in fold_into_bg {
        if let Some(k) = channel_of(new_classes, f) {
            if group[k] == usize::MAX {
                group[k] = 0;
            }
        }
    }
    let co = old_classes.len();
    let mut grad = Tensor::zeros(cn, new_logits.height, new_logits.width);
    let mut total = 0.0;
    let mut s = vec![0.0; cn];
    let mut po = vec![0.0; co];
    let mut q = vec![0.0; co];
    for p in 0..n {
        // tempered old softmax
        let mut mx = f64::NEG_INFINITY;
        for j in 0..co {
            mx = mx.max(old_logits.data[j * n + p] / temperature);
        }
        let mut z = 0.0;
        for j in 0..co {
            po[j] = (old_logits.data[j * n + p] / temperature - mx).exp();
            z += po[j];
        }
        for v in po.iter_mut() {
            *v /= z;
        }
        // tempered new softmax over grouped channels
        let mut mx = f64::NEG_INFINITY;
        for k in 0..cn {
            if group[k] != usize::MAX {
                mx = mx.max(new_logits.data[k * n + p] / temperature);
            }
        }
        let mut z = 0.0;
        for k in 0..cn {
            s[k] = if group[k] != usize::MAX {
                (new_logits.data[k * n + p] / temperature - mx).exp()
            } else {
                0.0
            };
            z += s[k];
        }
        q.fill(0.0);
        for k in 0..cn {
            s[k] /= z;
            if group[k] != usize::MAX {
                q[group[k]] += s[k];
            }
        }
        for j in 0..co {
            if po[j] > 0.0 {
                total += po[j] * (po[j].ln() - q[j].ln());
            }
        }
        for k in 0..cn {
            if group[k] != usize::MAX {
                let j = group[k];
                grad.data[k * n + p] = (s[k] - po[j] * s[k] / q[j]) / temperature;
            }
        }
    }
    let inv = 1.0 / n as f64;
    grad.scale(inv);
    Ok((total * inv, grad))
}

/// Mean squared difference between the first `stored.channels` logit
/// channels and `stored`.
pub fn logit_mse(current: &Tensor, stored: &Tensor) -> Result<(f64, Tensor)> {
    if stored.channels > current.channels || stored.plane_len() != current.plane_len() {
        return Err(Error::Shape("stored logits do not fit current head".into()));
    }
    let m = stored.data.len();
    let mut grad = Tensor::zeros(current.channels, current.height, current.width);
    let mut total = 0.0;
    for i in 0..m {
        let d = current.data[i] - stored.data[i];
        total += d * d;
        grad.data[i] = 2.0 * d / m as f64;
    }
    Ok((total / m as f64, grad))
}

/// Mean squared difference between the softmax over the first
/// `stored.channels` logit channels and stored probabilities.
pub fn softmax_mse(current: &Tensor, stored: &Tensor) -> Result<(f64, Tensor)> {
    if stored.channels > current.channels || stored.plane_len() != current.plane_len() {
        return Err(Error::Shape("stored outputs do not fit current head".into()));
    }
    let n = current.plane_len();
    let c = stored.channels;
    let sub = current.select_channels(&(0..c).collect::<Vec<_>>());
    let p = softmax(&sub);
    let m = (c * n) as f64;
    let mut total = 0.0;
    let mut grad = Tensor::zeros(current.channels, current.height, current.width);
    for px in 0..n {
        // r_k = dL/dp_k ; dL/dz_j = p_j (r_j - sum_k r_k p_k)
        let mut dot = 0.0;
        for k in 0..c {
            let d = p.data[k * n + px] - stored.data[k * n + px];
            total += d * d;
            dot += 2.0 * d / m * p.data[k * n + px];
        }
        for j in 0..c {
            let d = p.data[j * n + px] - stored.data[j * n + px];
            let r = 2.0 * d / m;
            grad.data[j * n + px] = p.data[j * n + px] * (r - dot);
        }
    }
    Ok((total / m, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pixel(vals: &[f64]) -> Tensor {
        Tensor {
            channels: vals.len(),
            height: 1,
            width: 1,
            data: vals.to_vec(),
        }
    }

    #[test]
    fn unbiased_ce_aggregates_old_probability() {
        // probabilities (bg .2, old .5, new .3)
        let logits = pixel(&[0.2f64.ln(), 0.5f64.ln(), 0.3f64.ln()]);
        let lbl = LabelMap::zeros(1, 1);
        let (l, _) = cross_entropy(&logits, &[0, 1, 2], &lbl, &[1]).unwrap();
        assert!((l - (-(0.7f64).ln())).abs() < 1e-12);
        let (plain, _) = cross_entropy(&logits, &[0, 1, 2], &lbl, &[]).unwrap();
        assert!((plain - (-(0.2f64).ln())).abs() < 1e-12);
    }

    #[test]
    fn ce_rejects_unknown_label() {
        let logits = pixel(&[0.0, 0.0]);
        let lbl = LabelMap::from_vec(1, 1, vec![3]).unwrap();
        assert!(cross_entropy(&logits, &[0, 1], &lbl, &[]).is_err());
    }

    #[test]
    fn ignored_pixels_contribute_nothing() {
        let logits = pixel(&[1.0, -1.0]);
        let lbl = LabelMap::from_vec(1, 1, vec![IGNORE_LABEL]).unwrap();
        let (l, g) = cross_entropy(&logits, &[0, 1], &lbl, &[]).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn distillation_two_class_pixel() {
        // old (0,1), new (1,0), T=1: KL(p_old || p_new) evaluated by hand
        // with p_old = (0.2689, 0.7311), p_new = (0.7311, 0.2689).
        let (l, _) = distillation(&pixel(&[1.0, 0.0]), &[0, 1], &pixel(&[0.0, 1.0]), &[0, 1], &[], 1.0).unwrap();
        let a: f64 = 1.0 / (1.0 + 1f64.exp());
        let b = 1.0 - a;
        let expected = a * (a / b).ln() + b * (b / a).ln();
        assert!((l - expected).abs() < 1e-12);
        assert!((l - 0.462_117_157_26).abs() < 1e-9);
    }

    #[test]
    fn distillation_zero_for_identical() {
        let t = pixel(&[0.3, -1.2, 2.0]);
        let (l, g) = distillation(&t, &[0, 1, 2], &t, &[0, 1, 2], &[], 2.0).unwrap();
        assert!(l.abs() < 1e-14);
        assert!(g.data.iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn logit_mse_hand_value() {
        let (l, _) = logit_mse(&pixel(&[0.0, 1.0]), &pixel(&[1.0, 0.0])).unwrap();
        assert!((l - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_mse_against_probabilities() {
        // softmax of a large gap ≈ (1, 0); stored (0.5, 0.5) → 0.25
        let (l, _) = softmax_mse(&pixel(&[60.0, 0.0]), &pixel(&[0.5, 0.5])).unwrap();
        assert!((l - 0.25).abs() < 1e-12);
    }

    fn fd_check(f: impl Fn(&Tensor) -> (f64, Tensor), x: &Tensor) {
        let (_, g) = f(x);
        for i in 0..x.data.len() {
            let mut a = x.clone();
            let mut b = x.clone();
            a.data[i] += 1e-5;
            b.data[i] -= 1e-5;
            let fd = (f(&a).0 - f(&b).0) / 2e-5;
            assert!((fd - g.data[i]).abs() < 1e-7, "i={i} fd={fd} an={}", g.data[i]);
        }
    }

    #[test]
    fn loss_gradients_match_differences() {
        let x = Tensor {
            channels: 3,
            height: 1,
            width: 2,
            data: vec![0.1, -0.4, 0.7, 0.2, -0.3, 0.9],
        };
        let lbl = LabelMap::from_vec(1, 2, vec![0, 2]).unwrap();
        fd_check(|t| cross_entropy(t, &[0, 1, 2], &lbl, &[1]).unwrap(), &x);
        let old = Tensor {
            channels: 2,
            height: 1,
            width: 2,
            data: vec![0.5, -0.2, 0.1, 0.3],
        };
        fd_check(|t| distillation(t, &[0, 1, 2], &old, &[0, 1], &[2], 2.0).unwrap(), &x);
        fd_check(|t| distillation(t, &[0, 1, 2], &old, &[0, 1], &[], 2.0).unwrap(), &x);
        fd_check(|t| logit_mse(t, &old).unwrap(), &x);
        let probs = softmax(&old);
        fd_check(|t| softmax_mse(t, &probs).unwrap(), &x);
    }
}
