//! Class-incremental segmentation methods that model the background shift.
//!
//! MiB folds old classes into background in the cross-entropy and folds new
//! classes into background in the distillation term. PLOP distils pooled
//! intermediate features (POD) and replaces confident background pixels
//! with the old model's old-class predictions.

use super::{add_into, grad_with_taps, items_ce, Env, Family, Hyper, Strategy, TaskContext, TrainItem};
use crate::error::{Error, Result};
use crate::grid::{LabelMap, Tensor, IGNORE_LABEL};
use crate::scenarios::ScenarioKind;
use crate::segmodel::{loss, Segmenter};

// ---- MiB ------------------------------------------------------------------

/// Cross-entropy whose background target absorbs the probability of
/// `old_classes`.
pub fn mib_unbiased_ce(logits: &Tensor, classes: &[u32], labels: &LabelMap, old_classes: &[u32]) -> Result<(f64, Tensor)> {
    loss::cross_entropy(logits, classes, labels, old_classes)
}

/// Distillation over the old model's channels where the new model's
/// background absorbs every class the old model does not know.
pub fn mib_unbiased_kd(
    new_logits: &Tensor,
    new_classes: &[u32],
    old_logits: &Tensor,
    old_classes: &[u32],
    temperature: f64,
) -> Result<(f64, Tensor)> {
    let fresh: Vec<u32> = new_classes
        .iter()
        .copied()
        .filter(|c| *c != 0 && !old_classes.contains(c))
        .collect();
    loss::distillation(new_logits, new_classes, old_logits, old_classes, &fresh, temperature)
}

/// Start the channels of `new_classes` from the background channel: weights
/// copied, and background plus new biases set to `b_bg − ln(|new| + 1)`,
/// so the new classes split the old background probability evenly.
pub fn mib_init_head(model: &mut Segmenter, route: usize, new_classes: &[u32]) -> Result<()> {
    if new_classes.is_empty() {
        return Ok(());
    }
    let (bw, bb) = model
        .head_blocks(route, 0)
        .ok_or_else(|| Error::Protocol("head has no background channel".into()))?;
    let w_bg = model.store().slice(bw).to_vec();
    let b = model.store().slice(bb)[0] - ((new_classes.len() + 1) as f64).ln();
    for &c in new_classes {
        let (w, bi) = model
            .head_blocks(route, c)
            .ok_or_else(|| Error::Protocol(format!("class {c} not registered on the head")))?;
        model.block_mut(w).copy_from_slice(&w_bg);
        model.block_mut(bi)[0] = b;
    }
    model.block_mut(bb)[0] = b;
    Ok(())
}

pub struct Mib {
    hyper: Hyper,
    old: Option<Segmenter>,
}

impl Mib {
    pub fn new(hyper: Hyper) -> Self {
        Self { hyper, old: None }
    }
}

impl Strategy for Mib {
    fn name(&self) -> &'static str {
        "classcl-mib"
    }

    fn family(&self) -> Family {
        Family::ClassSpecific
    }

    fn supports(&self, kind: ScenarioKind) -> bool {
        kind == ScenarioKind::ClassCl
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        let have = model.head_classes(1);
        let fresh: Vec<u32> = ctx.task().label_set.iter().copied().filter(|c| !have.contains(c)).collect();
        if ctx.t >= 2 {
            self.old = Some(model.clone());
        }
        model.ensure_classes(1, &fresh)?;
        if ctx.t >= 2 {
            mib_init_head(model, 1, &fresh)?;
        }
        Ok(())
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        let (l_ce, mut g) = items_ce(model, 1, batch, ctx, true)?;
        let Some(old) = &self.old else {
            return Ok((l_ce, g));
        };
        let old_classes = old.head_classes(1);
        let new_classes = model.head_classes(1);
        let olds: Vec<Tensor> = batch
            .iter()
            .map(|it| old.forward(&it.sample.image, 1))
            .collect::<Result<_>>()?;
        let images: Vec<_> = batch.iter().map(|it| &it.sample.image).collect();
        let t = self.hyper.temperature;
        let (l_kd, g_kd) = grad_with_taps(model, &images, 1, |i, tr| {
            let (l, d) = mib_unbiased_kd(tr.logits(), &new_classes, &olds[i], &old_classes, t)?;
            Ok((l, Some(d), Vec::new()))
        })?;
        let w = self.hyper.mib_kd_weight;
        add_into(&mut g, &g_kd, w);
        Ok((l_ce + w * l_kd, g))
    }
}

// ---- PLOP -----------------------------------------------------------------

/// Pooled embedding of one tap at one scale: for every `s×s` region, the
/// per-channel row means (width pooling) followed by the column means
/// (height pooling). Returns the embedding and, for each entry, the pixel
/// ranges it averages.
fn pod_embed(x: &Tensor, s: usize) -> Result<Vec<(f64, usize, [usize; 4])>> {
    let (h, w) = (x.height, x.width);
    if s == 0 || s > h || s > w {
        return Err(Error::Config(format!("POD scale {s} does not fit a {h}x{w} tap")));
    }
    let mut out = Vec::new();
    for c in 0..x.channels {
        let plane = x.plane(c);
        for ry in 0..s {
            let (y0, y1) = (ry * h / s, (ry + 1) * h / s);
            for rx in 0..s {
                let (x0, x1) = (rx * w / s, (rx + 1) * w / s);
                for y in y0..y1 {
                    let m = plane[y * w + x0..y * w + x1].iter().sum::<f64>() / (x1 - x0) as f64;
                    out.push((m, c, [y, y + 1, x0, x1]));
                }
                for xx in x0..x1 {
                    let m = (y0..y1).map(|y| plane[y * w + xx]).sum::<f64>() / (y1 - y0) as f64;
                    out.push((m, c, [y0, y1, xx, xx + 1]));
                }
            }
        }
    }
    Ok(out)
}

/// Mean over taps and scales of the mean squared difference between the
/// pooled embeddings of old and new features, with the gradient with
/// respect to each new feature map.
pub fn plop_pod_loss(old_feats: &[Tensor], new_feats: &[Tensor], scales: &[usize]) -> Result<(f64, Vec<Tensor>)> {
    if old_feats.len() != new_feats.len() {
        return Err(Error::Shape(format!("{} old taps vs {} new taps", old_feats.len(), new_feats.len())));
    }
    if scales.is_empty() {
        return Err(Error::Config("POD needs at least one scale".into()));
    }
    let terms = (old_feats.len() * scales.len()) as f64;
    let mut total = 0.0;
    let mut grads = Vec::with_capacity(new_feats.len());
    for (o, n) in old_feats.iter().zip(new_feats) {
        if !o.same_shape(n) {
            return Err(Error::Shape("old and new tap shapes differ".into()));
        }
        let mut g = Tensor::zeros(n.channels, n.height, n.width);
        for &s in scales {
            let eo = pod_embed(o, s)?;
            let en = pod_embed(n, s)?;
            let len = en.len() as f64;
            for ((vo, _, _), (vn, c, [y0, y1, x0, x1])) in eo.iter().zip(&en) {
                let d = vn - vo;
                total += d * d / (len * terms);
                let share = 2.0 * d / (len * terms) / ((y1 - y0) * (x1 - x0)) as f64;
                let plane = g.plane_mut(*c);
                for y in *y0..*y1 {
                    for v in &mut plane[y * n.width + x0..y * n.width + x1] {
                        *v += share;
                    }
                }
            }
        }
        grads.push(g);
    }
    Ok((total, grads))
}

/// Shannon entropy (nats) of the softmax at pixel `p`, and its argmax
/// channel.
fn pixel_entropy(logits: &Tensor, p: usize) -> (f64, usize) {
    let n = logits.plane_len();
    let mut mx = f64::NEG_INFINITY;
    let mut arg = 0;
    for k in 0..logits.channels {
        let v = logits.data[k * n + p];
        if v > mx {
            mx = v;
            arg = k;
        }
    }
    let z: f64 = (0..logits.channels).map(|k| (logits.data[k * n + p] - mx).exp()).sum();
    let lz = z.ln();
    let mut h = 0.0;
    for k in 0..logits.channels {
        let lp = logits.data[k * n + p] - mx - lz;
        h -= lp.exp() * lp;
    }
    (h, arg)
}

/// Median old-model entropy over background-labelled pixels.
pub fn plop_entropy_threshold(old_logits: &[Tensor], labels: &[&LabelMap]) -> Result<f64> {
    if old_logits.len() != labels.len() {
        return Err(Error::Shape("one label map per old output expected".into()));
    }
    let mut hs = Vec::new();
    for (lg, lb) in old_logits.iter().zip(labels) {
        if lg.plane_len() != lb.data.len() {
            return Err(Error::Shape("label map does not match old output".into()));
        }
        for (p, &y) in lb.data.iter().enumerate() {
            if y == 0 {
                hs.push(pixel_entropy(lg, p).0);
            }
        }
    }
    if hs.is_empty() {
        return Ok(f64::INFINITY);
    }
    hs.sort_by(f64::total_cmp);
    let m = hs.len() / 2;
    Ok(if hs.len() % 2 == 1 { hs[m] } else { 0.5 * (hs[m - 1] + hs[m]) })
}

/// Background pixels where the old model predicts an old class: that class
/// when its entropy is below `threshold`, ignored otherwise. Pixels the old
/// model calls background and all foreground labels are kept.
pub fn plop_pseudo_label(old_logits: &Tensor, old_classes: &[u32], labels: &LabelMap, threshold: f64) -> Result<LabelMap> {
    if old_logits.channels != old_classes.len() || old_logits.plane_len() != labels.data.len() {
        return Err(Error::Shape("old output does not match its classes or the label map".into()));
    }
    let mut out = labels.clone();
    for (p, y) in out.data.iter_mut().enumerate() {
        if *y != 0 {
            continue;
        }
        let (h, k) = pixel_entropy(old_logits, p);
        if old_classes[k] == 0 {
            continue;
        }
        *y = if h < threshold { old_classes[k] as u8 } else { IGNORE_LABEL };
    }
    Ok(out)
}

pub struct Plop {
    hyper: Hyper,
    old: Option<Segmenter>,
    threshold: Option<f64>,
}

impl Plop {
    pub fn new(hyper: Hyper) -> Self {
        Self {
            hyper,
            old: None,
            threshold: None,
        }
    }

    pub fn threshold(&self) -> Option<f64> {
        self.threshold
    }
}

impl Strategy for Plop {
    fn name(&self) -> &'static str {
        "classcl-plop"
    }

    fn family(&self) -> Family {
        Family::ClassSpecific
    }

    fn supports(&self, kind: ScenarioKind) -> bool {
        kind == ScenarioKind::ClassCl
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        if ctx.t >= 2 {
            self.old = Some(model.clone());
        }
        self.threshold = None;
        model.ensure_classes(1, &ctx.task().label_set)
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        let Some(old) = &self.old else {
            return items_ce(model, 1, batch, ctx, false);
        };
        let old_classes = old.head_classes(1);
        let taps = model.arch().depth_taps();
        let mut old_out = Vec::with_capacity(batch.len());
        for it in batch {
            let tr = old.trace(&it.sample.image, 1)?;
            let feats: Vec<Tensor> = taps.iter().map(|&l| tr.tap(l).clone()).collect();
            old_out.push((tr.logits().clone(), feats));
        }
        let threshold = match self.threshold {
            Some(t) => t,
            None => {
                let logits: Vec<Tensor> = old_out.iter().map(|o| o.0.clone()).collect();
                let labels: Vec<&LabelMap> = batch.iter().map(|it| &it.sample.label).collect();
                let t = plop_entropy_threshold(&logits, &labels)?;
                self.threshold = Some(t);
                t
            }
        };
        let pseudo: Vec<LabelMap> = batch
            .iter()
            .zip(&old_out)
            .map(|(it, o)| plop_pseudo_label(&o.0, &old_classes, &it.sample.label, threshold))
            .collect::<Result<_>>()?;
        let classes = model.head_classes(1);
        let images: Vec<_> = batch.iter().map(|it| &it.sample.image).collect();
        let w = self.hyper.plop_pod_weight;
        let scales = self.hyper.plop_scales.clone();
        grad_with_taps(model, &images, 1, |i, tr| {
            let (l_ce, d) = loss::cross_entropy(tr.logits(), &classes, &pseudo[i], &[])?;
            let new_feats: Vec<Tensor> = taps.iter().map(|&l| tr.tap(l).clone()).collect();
            let (l_pod, mut dt) = plop_pod_loss(&old_out[i].1, &new_feats, &scales)?;
            dt.iter_mut().for_each(|t| t.scale(w));
            Ok((l_ce + w * l_pod, Some(d), taps.iter().copied().zip(dt).collect()))
        })
    }
}
