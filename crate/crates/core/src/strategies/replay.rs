//! Replay and gradient-constraint methods: ER, GSS, GEM, AGEM, DER/DER++,
//! FDR. GPM lives in its own module.

use nalgebra::{DMatrix, DVector};

use super::{add_into, items_ce, labelled_ce, Env, Family, Strategy, TaskContext, TrainItem};
use crate::buffers::{BufferEntry, InsertionPolicy, ReplayBuffer};
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};
use crate::segmodel::{loss, Segmenter};

/// Stopping tolerance of the GEM dual solver.
pub const GEM_TOL: f64 = 1e-6;
pub const GEM_MAX_ITER: usize = 10_000;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Single-constraint projection: `g` when it does not conflict with
/// `g_ref` (or `g_ref = 0`), otherwise the nearest vector with
/// `g'ᵀg_ref = 0`.
pub fn agem_project(g: &[f64], g_ref: &[f64]) -> Result<Vec<f64>> {
    if g.len() != g_ref.len() {
        return Err(Error::Shape(format!("g has {} entries, g_ref {}", g.len(), g_ref.len())));
    }
    let d = dot(g, g_ref);
    let rr = dot(g_ref, g_ref);
    if d >= 0.0 || rr == 0.0 {
        return Ok(g.to_vec());
    }
    let s = d / rr;
    Ok(g.iter().zip(g_ref).map(|(a, b)| a - s * b).collect())
}

/// Nearest `g'` to `g` with `g'ᵀg_k ≥ γ` for every row `g_k`, through the
/// dual `g' = g + Gᵀv`, `v ≥ 0`. The dual is solved by accelerated
/// projected gradient steps of size `1/‖GGᵀ‖_F`; every few iterations the
/// current support is tried as the exact active set.
pub fn gem_project(g: &[f64], rows: &[Vec<f64>], margin: f64) -> Result<Vec<f64>> {
    if let Some(r) = rows.iter().find(|r| r.len() != g.len()) {
        return Err(Error::Shape(format!("constraint row has {} entries, g {}", r.len(), g.len())));
    }
    let k = rows.len();
    let gg: Vec<f64> = rows.iter().map(|r| dot(r, g)).collect();
    if gg.iter().all(|&v| v >= margin) {
        return Ok(g.to_vec());
    }
    let a = DMatrix::from_fn(k, k, |i, j| dot(&rows[i], &rows[j]));
    let norm = a.norm();
    if norm == 0.0 {
        // every row is zero: constraints read 0 ≥ γ
        return Err(Error::Convergence {
            iterations: 0,
            residual: margin,
        });
    }
    let b = DVector::from_iterator(k, gg.iter().map(|v| v - margin));
    // dual objective ½vᵀAv + bᵀv, minimised over v ≥ 0
    let kkt = |v: &DVector<f64>| {
        let grad = &a * v + &b;
        (0..k).map(|i| (v[i] - (v[i] - grad[i]).max(0.0)).abs()).fold(0.0, f64::max)
    };
    let eta = 1.0 / norm;
    let mut v = DVector::zeros(k);
    let mut y = v.clone();
    let mut step = 1.0f64;
    let mut residual = kkt(&v);
    let mut iterations = 0;
    while residual > GEM_TOL && iterations < GEM_MAX_ITER {
        iterations += 1;
        let grad = &a * &y + &b;
        let next = (&y - grad * eta).map(|x| x.max(0.0));
        let step_next = 0.5 * (1.0 + (1.0 + 4.0 * step * step).sqrt());
        let momentum = (step - 1.0) / step_next;
        // restart when the objective direction turns uphill
        if (&next - &v).dot(&(&a * &next + &b)) > 0.0 {
            y = next.clone();
            step = 1.0;
        } else {
            y = &next + (&next - &v) * momentum;
            step = step_next;
        }
        v = next;
        residual = kkt(&v);
        if residual > GEM_TOL && iterations % 25 == 0 {
            if let Some(exact) = active_set_solution(&a, &b, &v) {
                let r = kkt(&exact);
                if r < residual {
                    v = exact;
                    y = v.clone();
                    residual = r;
                }
            }
        }
    }
    let mut out = g.to_vec();
    for (r, &vi) in rows.iter().zip(v.iter()) {
        if vi != 0.0 {
            add_into(&mut out, r, vi);
        }
    }
    let worst = rows.iter().map(|r| dot(&out, r) - margin).fold(f64::INFINITY, f64::min);
    if residual > GEM_TOL || worst < -GEM_TOL {
        return Err(Error::Convergence {
            iterations,
            residual: residual.max(-worst),
        });
    }
    Ok(out)
}

/// Solve `A_SS v_S = −b_S` on the support `S` of `v` (least squares when
/// `A_SS` is singular), zero elsewhere; `None` when the solution leaves the
/// nonnegative orthant.
fn active_set_solution(a: &DMatrix<f64>, b: &DVector<f64>, v: &DVector<f64>) -> Option<DVector<f64>> {
    let support: Vec<usize> = (0..v.len()).filter(|&i| v[i] > 0.0).collect();
    if support.is_empty() {
        return None;
    }
    let sub = a.select_rows(&support).select_columns(&support);
    let rhs = -b.select_rows(&support);
    let sol = sub.svd(true, true).solve(&rhs, 1e-12).ok()?;
    if sol.iter().any(|&x| x < 0.0) {
        return None;
    }
    let mut full = DVector::zeros(v.len());
    for (i, &s) in support.iter().enumerate() {
        full[s] = sol[i];
    }
    Some(full)
}

/// `α·MSE(logits, stored logits)` on `logit_batch` plus `β·CE` on
/// `label_batch`, each averaged over its batch.
pub fn der_loss(
    model: &Segmenter,
    logit_batch: &[&BufferEntry],
    label_batch: &[&BufferEntry],
    alpha: f64,
    beta: f64,
    ctx: &TaskContext,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.num_params()];
    let mut total = 0.0;
    if alpha != 0.0 && !logit_batch.is_empty() {
        let stored: Vec<_> = logit_batch
            .iter()
            .map(|e| {
                e.stored_logits
                    .as_ref()
                    .ok_or_else(|| Error::Config("buffer entry carries no stored logits".into()))
            })
            .collect::<Result<_>>()?;
        let images: Vec<&Image> = logit_batch.iter().map(|e| &e.image).collect();
        let (l, g) = super::grad_with_taps(model, &images, 1, |i, tr| {
            let (l, d) = loss::logit_mse(tr.logits(), stored[i])?;
            Ok((l, Some(d), Vec::new()))
        })?;
        total += alpha * l;
        add_into(&mut grad, &g, alpha);
    }
    if beta != 0.0 && !label_batch.is_empty() {
        let data: Vec<(&Image, &LabelMap, usize)> = label_batch.iter().map(|e| (&e.image, &e.label, e.source_task)).collect();
        let (l, g) = labelled_ce(model, 1, &data, ctx, true)?;
        total += beta * l;
        add_into(&mut grad, &g, beta);
    }
    Ok((total, grad))
}

/// `λ_f·` mean squared distance between current softmax outputs and the
/// stored ones.
pub fn fdr_loss(model: &Segmenter, batch: &[&BufferEntry], lambda: f64) -> Result<(f64, Vec<f64>)> {
    if lambda == 0.0 || batch.is_empty() {
        return Ok((0.0, vec![0.0; model.num_params()]));
    }
    let stored: Vec<_> = batch
        .iter()
        .map(|e| {
            e.stored_output
                .as_ref()
                .ok_or_else(|| Error::Config("buffer entry carries no stored outputs".into()))
        })
        .collect::<Result<_>>()?;
    let images: Vec<&Image> = batch.iter().map(|e| &e.image).collect();
    let (l, mut g) = super::grad_with_taps(model, &images, 1, |i, tr| {
        let (l, d) = loss::softmax_mse(tr.logits(), stored[i])?;
        Ok((l, Some(d), Vec::new()))
    })?;
    g.iter_mut().for_each(|v| *v *= lambda);
    Ok((lambda * l, g))
}

/// What a reservoir insertion stores besides image and label.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Stored {
    Nothing,
    Logits,
    Output,
}

/// Buffer plus the global count of offered samples.
struct Memory {
    buffer: ReplayBuffer,
    seen: usize,
}

impl Memory {
    fn new(capacity: usize, policy: InsertionPolicy) -> Self {
        Self {
            buffer: ReplayBuffer::new(capacity, policy),
            seen: 0,
        }
    }

    /// Offer every training sample of the current task to the reservoir,
    /// capturing stored outputs from the end-of-task model.
    fn absorb_task(&mut self, model: &Segmenter, ctx: &TaskContext, env: &mut Env, stored: Stored) -> Result<()> {
        for it in ctx.current_items() {
            self.seen += 1;
            let entry = BufferEntry::new(it.sample.image.clone(), it.sample.label.clone(), it.task, it.index);
            if let Some(slot) = self.buffer.reservoir_insert(entry, self.seen, &mut env.rng) {
                if stored != Stored::Nothing {
                    let logits = model.forward(&it.sample.image, 1)?;
                    let e = &mut self.buffer.entries[slot];
                    e.stored_classes = model.head_classes(1);
                    if stored == Stored::Logits {
                        e.stored_logits = Some(logits);
                    } else {
                        e.stored_output = Some(loss::softmax(&logits));
                    }
                }
            }
        }
        Ok(())
    }

    fn draw(&self, k: usize, env: &mut Env) -> Vec<&BufferEntry> {
        self.buffer
            .sample_batch(k, &mut env.rng, &mut env.ledger)
            .into_iter()
            .map(|i| &self.buffer.entries[i])
            .collect()
    }

    fn replay_ce(&self, model: &Segmenter, k: usize, ctx: &TaskContext, env: &mut Env) -> Result<Option<(f64, Vec<f64>)>> {
        let batch = self.draw(k, env);
        if batch.is_empty() {
            return Ok(None);
        }
        let data: Vec<(&Image, &LabelMap, usize)> = batch.iter().map(|e| (&e.image, &e.label, e.source_task)).collect();
        labelled_ce(model, 1, &data, ctx, true).map(Some)
    }
}

fn replay_batch(env: &Env) -> usize {
    env.batch_size
}

macro_rules! buffer_accessor {
    ($t:ty) => {
        impl $t {
            pub fn buffer(&self) -> &ReplayBuffer {
                &self.mem.buffer
            }
        }
    };
}

// ---- ER -------------------------------------------------------------------

/// Experience replay: current batch plus an equally sized buffer batch.
pub struct Er {
    mem: Memory,
}

impl Er {
    pub fn new(capacity: usize) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Reservoir),
        }
    }
}
buffer_accessor!(Er);

fn ce_plus_replay(mem: &Memory, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
    let (mut l, mut g) = items_ce(model, 1, batch, ctx, true)?;
    if let Some((lr, gr)) = mem.replay_ce(model, replay_batch(env), ctx, env)? {
        l += lr;
        add_into(&mut g, &gr, 1.0);
    }
    Ok((l, g))
}

impl Strategy for Er {
    fn name(&self) -> &'static str {
        "repl-er"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
        ce_plus_replay(&self.mem, model, batch, ctx, env)
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        self.mem.absorb_task(model, ctx, env, Stored::Nothing)
    }
}

// ---- GSS ------------------------------------------------------------------

/// Replay with gradient-based sample selection: the buffer favours samples
/// whose gradients point in directions not already covered.
pub struct Gss {
    mem: Memory,
    /// Gradient of each buffer entry at the time it was inserted.
    grads: Vec<Vec<f64>>,
}

impl Gss {
    pub fn new(capacity: usize) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Gss),
            grads: Vec::new(),
        }
    }
}
buffer_accessor!(Gss);

impl Strategy for Gss {
    fn name(&self) -> &'static str {
        "repl-gss"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
        ce_plus_replay(&self.mem, model, batch, ctx, env)
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        let n = model.num_params();
        for g in &mut self.grads {
            super::fit_len(g, n);
        }
        for it in ctx.current_items() {
            let g = items_ce(model, 1, std::slice::from_ref(&it), ctx, true)?.1;
            let subset: Vec<Vec<f64>> = self
                .mem
                .buffer
                .gss_subset(&mut env.rng)
                .into_iter()
                .map(|i| self.grads[i].clone())
                .collect();
            let entry = BufferEntry::new(it.sample.image.clone(), it.sample.label.clone(), it.task, it.index);
            if let Some(slot) = self.mem.buffer.gss_insert(entry, &g, &subset, &mut env.rng)? {
                if slot == self.grads.len() {
                    self.grads.push(g);
                } else {
                    self.grads[slot] = g;
                }
            }
        }
        Ok(())
    }
}

// ---- GEM ------------------------------------------------------------------

/// Gradient episodic memory: one non-interference constraint per earlier
/// task, from the gradient on that task's buffer entries.
pub struct Gem {
    mem: Memory,
    margin: f64,
}

impl Gem {
    pub fn new(capacity: usize, margin: f64) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Reservoir),
            margin,
        }
    }
}
buffer_accessor!(Gem);

impl Strategy for Gem {
    fn name(&self) -> &'static str {
        "repl-gem"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, 1, batch, ctx, true)
    }

    fn adjust_gradient(&mut self, model: &Segmenter, g: &mut [f64], ctx: &TaskContext, env: &mut Env) -> Result<()> {
        let mut rows = Vec::new();
        for k in 1..ctx.t {
            let entries: Vec<&BufferEntry> = self.mem.buffer.entries.iter().filter(|e| e.source_task == k).collect();
            if entries.is_empty() {
                continue;
            }
            for e in &entries {
                env.ledger.record(e.source_task, e.sample_index, true);
            }
            let data: Vec<(&Image, &LabelMap, usize)> = entries.iter().map(|e| (&e.image, &e.label, e.source_task)).collect();
            rows.push(labelled_ce(model, 1, &data, ctx, true)?.1);
        }
        if rows.is_empty() {
            return Ok(());
        }
        let projected = gem_project(g, &rows, self.margin)?;
        g.copy_from_slice(&projected);
        Ok(())
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        self.mem.absorb_task(model, ctx, env, Stored::Nothing)
    }
}

// ---- AGEM -----------------------------------------------------------------

/// Averaged GEM: a single constraint from the gradient on a random buffer
/// batch.
pub struct Agem {
    mem: Memory,
}

impl Agem {
    pub fn new(capacity: usize) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Reservoir),
        }
    }
}
buffer_accessor!(Agem);

impl Strategy for Agem {
    fn name(&self) -> &'static str {
        "repl-agem"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, 1, batch, ctx, true)
    }

    fn adjust_gradient(&mut self, model: &Segmenter, g: &mut [f64], ctx: &TaskContext, env: &mut Env) -> Result<()> {
        if let Some((_, g_ref)) = self.mem.replay_ce(model, replay_batch(env), ctx, env)? {
            let p = agem_project(g, &g_ref)?;
            g.copy_from_slice(&p);
        }
        Ok(())
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        self.mem.absorb_task(model, ctx, env, Stored::Nothing)
    }
}

// ---- DER / DER++ ----------------------------------------------------------

/// Dark experience replay: match stored logits on buffer samples; DER++
/// (`β > 0`) also replays their labels.
pub struct Der {
    mem: Memory,
    alpha: f64,
    beta: f64,
}

impl Der {
    pub fn new(capacity: usize, alpha: f64, beta: f64) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Reservoir),
            alpha,
            beta,
        }
    }
}
buffer_accessor!(Der);

impl Strategy for Der {
    fn name(&self) -> &'static str {
        if self.beta > 0.0 {
            "repl-derpp"
        } else {
            "repl-der"
        }
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
        let (mut l, mut g) = items_ce(model, 1, batch, ctx, true)?;
        let k = replay_batch(env);
        let first = self.mem.draw(k, env);
        let second = if self.beta > 0.0 { self.mem.draw(k, env) } else { Vec::new() };
        let (ld, gd) = der_loss(model, &first, &second, self.alpha, self.beta, ctx)?;
        l += ld;
        add_into(&mut g, &gd, 1.0);
        Ok((l, g))
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        self.mem.absorb_task(model, ctx, env, Stored::Logits)
    }
}

// ---- FDR ------------------------------------------------------------------

/// Function distance regularization on stored softmax outputs.
pub struct Fdr {
    mem: Memory,
    lambda: f64,
}

impl Fdr {
    pub fn new(capacity: usize, lambda: f64) -> Self {
        Self {
            mem: Memory::new(capacity, InsertionPolicy::Reservoir),
            lambda,
        }
    }
}
buffer_accessor!(Fdr);

impl Strategy for Fdr {
    fn name(&self) -> &'static str {
        "repl-fdr"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn uses_buffer(&self) -> bool {
        true
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
        let (mut l, mut g) = items_ce(model, 1, batch, ctx, true)?;
        let replay = self.mem.draw(replay_batch(env), env);
        let (lf, gf) = fdr_loss(model, &replay, self.lambda)?;
        l += lf;
        add_into(&mut g, &gf, 1.0);
        Ok((l, g))
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        self.mem.absorb_task(model, ctx, env, Stored::Output)
    }
}
