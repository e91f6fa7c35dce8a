//! Weight regularization (EWC, SI) and output distillation (LwF).

use rand::seq::SliceRandom;

use super::{add_into, fit_len, items_ce, Env, Family, Hyper, Strategy, TaskContext, TrainItem};
use crate::error::{Error, Result};
use crate::grid::Tensor;
use crate::segmodel::{loss, Segmenter};

// ---- EWC ------------------------------------------------------------------

/// Mean of squared gradients, one gradient per sample.
pub fn fisher_from_grads(grads: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = grads.first().ok_or_else(|| Error::Config("Fisher estimate needs at least one sample".into()))?;
    let mut f = vec![0.0; first.len()];
    for g in grads {
        if g.len() != f.len() {
            return Err(Error::Shape("per-sample gradients differ in length".into()));
        }
        for (a, b) in f.iter_mut().zip(g) {
            *a += b * b;
        }
    }
    let n = grads.len() as f64;
    f.iter_mut().for_each(|v| *v /= n);
    Ok(f)
}

/// Empirical Fisher diagonal from per-sample cross-entropy gradients with
/// ground-truth labels, over `n_samples` items drawn without replacement.
pub fn ewc_estimate_fisher(
    model: &Segmenter,
    route: usize,
    items: &[TrainItem],
    n_samples: usize,
    ctx: &TaskContext,
    env: &mut Env,
) -> Result<Vec<f64>> {
    if items.is_empty() || n_samples == 0 {
        return Err(Error::Config("Fisher estimate needs at least one sample".into()));
    }
    let mut pick: Vec<&TrainItem> = items.iter().collect();
    pick.shuffle(&mut env.rng);
    pick.truncate(n_samples.min(items.len()));
    let mut grads = Vec::with_capacity(pick.len());
    for it in pick {
        grads.push(items_ce(model, route, std::slice::from_ref(it), ctx, true)?.1);
    }
    fisher_from_grads(&grads)
}

/// `(λ/2)·Σ F_j (θ_j − θ*_j)²` and its gradient. Coordinates past the end
/// of `anchor`/`fisher` (parameters added later) carry no penalty.
pub fn ewc_penalty(theta: &[f64], anchor: &[f64], fisher: &[f64], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if anchor.len() != fisher.len() || anchor.len() > theta.len() {
        return Err(Error::Shape(format!(
            "EWC state lengths θ*={} F={} do not fit θ={}",
            anchor.len(),
            fisher.len(),
            theta.len()
        )));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut pen = 0.0;
    for j in 0..anchor.len() {
        let d = theta[j] - anchor[j];
        pen += fisher[j] * d * d;
        grad[j] = lambda * fisher[j] * d;
    }
    Ok((0.5 * lambda * pen, grad))
}

pub struct Ewc {
    hyper: Hyper,
    /// `(θ*, F)` pairs: one running pair when online, one per task otherwise.
    anchors: Vec<(Vec<f64>, Vec<f64>)>,
}

impl Ewc {
    pub fn new(hyper: Hyper) -> Self {
        Self {
            hyper,
            anchors: Vec::new(),
        }
    }

    pub fn anchors(&self) -> &[(Vec<f64>, Vec<f64>)] {
        &self.anchors
    }
}

impl Strategy for Ewc {
    fn name(&self) -> &'static str {
        "regu-ewc"
    }

    fn family(&self) -> Family {
        Family::Regularization
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        let (mut l, mut g) = items_ce(model, 1, batch, ctx, true)?;
        for (anchor, fisher) in &self.anchors {
            let (p, pg) = ewc_penalty(model.params(), anchor, fisher, self.hyper.ewc_lambda)?;
            l += p;
            add_into(&mut g, &pg, 1.0);
        }
        Ok((l, g))
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        let items = ctx.current_items();
        let f = ewc_estimate_fisher(model, 1, &items, self.hyper.ewc_samples, ctx, env)?;
        let theta = model.get_params();
        if self.hyper.ewc_online {
            match self.anchors.first_mut() {
                Some((anchor, fisher)) => {
                    fit_len(fisher, f.len());
                    add_into(fisher, &f, 1.0);
                    *anchor = theta;
                }
                None => self.anchors.push((theta, f)),
            }
        } else {
            self.anchors.push((theta, f));
        }
        Ok(())
    }
}

// ---- SI -------------------------------------------------------------------

/// Path-integral importance state.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SiState {
    pub omega: Vec<f64>,
    pub big_omega: Vec<f64>,
    pub anchor: Vec<f64>,
    pub c: f64,
    pub xi: f64,
}

impl SiState {
    pub fn new(theta: &[f64], c: f64, xi: f64) -> Self {
        Self {
            omega: vec![0.0; theta.len()],
            big_omega: vec![0.0; theta.len()],
            anchor: theta.to_vec(),
            c,
            xi,
        }
    }

    fn grow(&mut self, n: usize) {
        fit_len(&mut self.omega, n);
        fit_len(&mut self.big_omega, n);
        if self.anchor.len() < n {
            self.anchor.resize(n, 0.0);
        }
    }
}

/// `ω_j ← ω_j − g_j·Δθ_j` for one optimizer step.
pub fn si_update(state: &mut SiState, g: &[f64], dtheta: &[f64]) -> Result<()> {
    if g.len() != dtheta.len() {
        return Err(Error::Shape("SI step: gradient and update differ in length".into()));
    }
    state.grow(g.len());
    for ((w, gi), di) in state.omega.iter_mut().zip(g).zip(dtheta) {
        *w -= gi * di;
    }
    Ok(())
}

/// Fold the task's path integral into Ω, reset ω, and move the anchor to
/// `theta_end`. Negative contributions are dropped so Ω stays nonnegative.
pub fn si_consolidate(state: &mut SiState, theta_end: &[f64]) {
    state.grow(theta_end.len());
    for j in 0..theta_end.len() {
        let d = theta_end[j] - state.anchor[j];
        let inc = state.omega[j] / (d * d + state.xi);
        state.big_omega[j] += inc.max(0.0);
        state.omega[j] = 0.0;
    }
    state.anchor = theta_end.to_vec();
}

/// `c·Σ_j Ω_j (θ_j − θ*_j)²` and its gradient.
pub fn si_penalty(theta: &[f64], state: &SiState) -> Result<(f64, Vec<f64>)> {
    if state.anchor.len() > theta.len() || state.big_omega.len() != state.anchor.len() {
        return Err(Error::Shape("SI state does not fit the parameter vector".into()));
    }
    let mut grad = vec![0.0; theta.len()];
    let mut pen = 0.0;
    for j in 0..state.anchor.len() {
        let d = theta[j] - state.anchor[j];
        pen += state.big_omega[j] * d * d;
        grad[j] = 2.0 * state.c * state.big_omega[j] * d;
    }
    Ok((state.c * pen, grad))
}

pub struct Si {
    hyper: Hyper,
    state: Option<SiState>,
    /// Parameters and task-loss gradient at the previous step; the step's
    /// contribution to ω is settled when the next step (or task end) sees
    /// the updated parameters.
    pending: Option<(Vec<f64>, Vec<f64>)>,
}

impl Si {
    pub fn new(hyper: Hyper) -> Self {
        Self {
            hyper,
            state: None,
            pending: None,
        }
    }

    pub fn state(&self) -> Option<&SiState> {
        self.state.as_ref()
    }

    fn settle(&mut self, theta: &[f64]) -> Result<()> {
        if let (Some((prev, g)), Some(state)) = (self.pending.take(), self.state.as_mut()) {
            let d: Vec<f64> = theta.iter().zip(&prev).map(|(a, b)| a - b).collect();
            si_update(state, &g, &d)?;
        }
        Ok(())
    }
}

impl Strategy for Si {
    fn name(&self) -> &'static str {
        "regu-si"
    }

    fn family(&self) -> Family {
        Family::Regularization
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        model.ensure_classes(1, &ctx.task().label_set)?;
        let theta = model.params();
        match &mut self.state {
            None => self.state = Some(SiState::new(theta, self.hyper.si_c, self.hyper.si_xi)),
            Some(s) => s.grow(theta.len()),
        }
        self.pending = None;
        Ok(())
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        self.settle(model.params())?;
        let (l, g_task) = items_ce(model, 1, batch, ctx, true)?;
        let state = self
            .state
            .as_ref()
            .ok_or_else(|| Error::Protocol("SI loss before on_task_start".into()))?;
        let (p, pg) = si_penalty(model.params(), state)?;
        let mut g = g_task.clone();
        add_into(&mut g, &pg, 1.0);
        self.pending = Some((model.get_params(), g_task));
        Ok((l + p, g))
    }

    fn on_task_end(&mut self, model: &mut Segmenter, _ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        self.settle(model.params())?;
        let state = self
            .state
            .as_mut()
            .ok_or_else(|| Error::Protocol("SI task end before on_task_start".into()))?;
        si_consolidate(state, model.params());
        Ok(())
    }
}

// ---- LwF ------------------------------------------------------------------

/// Tempered distillation from the old model over its own channels; 0 when
/// there are no old channels.
pub fn lwf_distill_loss(
    new_logits: &Tensor,
    new_classes: &[u32],
    old_logits: &Tensor,
    old_classes: &[u32],
    temperature: f64,
) -> Result<(f64, Tensor)> {
    if old_classes.is_empty() {
        return Ok((0.0, Tensor::zeros(new_logits.channels, new_logits.height, new_logits.width)));
    }
    loss::distillation(new_logits, new_classes, old_logits, old_classes, &[], temperature)
}

pub struct Lwf {
    hyper: Hyper,
    old: Option<Segmenter>,
}

impl Lwf {
    pub fn new(hyper: Hyper) -> Self {
        Self { hyper, old: None }
    }
}

impl Strategy for Lwf {
    fn name(&self) -> &'static str {
        "regu-lwf"
    }

    fn family(&self) -> Family {
        Family::Regularization
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        if ctx.t >= 2 {
            self.old = Some(model.clone());
        }
        model.ensure_classes(1, &ctx.task().label_set)
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
        let (l_kd, g_kd) = super::grad_with_taps(model, &images, 1, |i, tr| {
            let (l, d) = lwf_distill_loss(tr.logits(), &new_classes, &olds[i], &old_classes, t)?;
            Ok((l, Some(d), Vec::new()))
        })?;
        add_into(&mut g, &g_kd, self.hyper.lwf_weight);
        Ok((l_ce + self.hyper.lwf_weight * l_kd, g))
    }
}
