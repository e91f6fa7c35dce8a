//! Continual-learning strategies as hooks around a plain SGD loop.
//!
//! Every method implements [`Strategy`]. The training loop calls
//! [`Strategy::on_task_start`], then for each minibatch [`Strategy::loss`]
//! followed by [`Strategy::adjust_gradient`], then
//! [`Strategy::on_task_end`]. Strategies are created by canonical name
//! through [`create`].
//!
//! | family          | names |
//! |-----------------|-------|
//! | regularization  | `regu-ewc`, `regu-si`, `regu-lwf` |
//! | replay          | `repl-er`, `repl-gss`, `repl-gem`, `repl-gpm`, `repl-agem`, `repl-der`, `repl-derpp`, `repl-fdr` |
//! | isolation       | `pariso-pnn`, `pariso-dan` |
//! | class-specific  | `classcl-plop`, `classcl-mib` |
//! | bounds          | `non-cl`, `jointtrain` |

mod bounds;
mod classcl;
mod gpm;
mod isolation;
mod regularization;
mod replay;

use serde::{Deserialize, Serialize};

use crate::buffers::ReplayLedger;
use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, Tensor};
use crate::scenarios::{Sample, ScenarioKind, Task, TaskStream};
use crate::seeding::Rng;
use crate::segmodel::{loss, Segmenter, Trace};

pub use bounds::{JointTrain, NonCl};
pub use classcl::{
    mib_init_head, mib_unbiased_ce, mib_unbiased_kd, plop_entropy_threshold, plop_pod_loss, plop_pseudo_label, Mib,
    Plop,
};
pub use gpm::{gpm_project, gpm_update_memory, im2col, Gpm, GpmMemory};
pub use isolation::{Dan, Pnn};
pub use regularization::{
    ewc_estimate_fisher, ewc_penalty, fisher_from_grads, lwf_distill_loss, si_consolidate, si_penalty, si_update, Ewc,
    Lwf, Si, SiState,
};
pub use replay::{agem_project, der_loss, fdr_loss, gem_project, Agem, Der, Er, Fdr, Gem, Gss, GEM_MAX_ITER, GEM_TOL};

/// Canonical strategy names in table order.
pub const STRATEGY_NAMES: [&str; 17] = [
    "regu-ewc",
    "regu-si",
    "regu-lwf",
    "repl-er",
    "repl-gss",
    "repl-gem",
    "repl-gpm",
    "repl-agem",
    "repl-der",
    "repl-derpp",
    "repl-fdr",
    "pariso-pnn",
    "pariso-dan",
    "classcl-plop",
    "classcl-mib",
    "non-cl",
    "jointtrain",
];

/// Hyperparameters of every strategy; each strategy reads its own fields.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyper {
    pub ewc_lambda: f64,
    pub ewc_samples: usize,
    /// One running anchor and summed Fisher (true) or one anchor per task.
    pub ewc_online: bool,
    pub si_c: f64,
    pub si_xi: f64,
    pub temperature: f64,
    pub lwf_weight: f64,
    pub der_alpha: f64,
    pub derpp_alpha: f64,
    pub derpp_beta: f64,
    pub fdr_lambda: f64,
    pub gem_margin: f64,
    pub gpm_threshold: f64,
    /// Training samples per task used to build GPM representations.
    pub gpm_samples: usize,
    /// Column cap of each GPM representation matrix.
    pub gpm_max_columns: usize,
    pub mib_kd_weight: f64,
    pub plop_pod_weight: f64,
    /// POD pyramid: a scale `s` pools over an `s×s` grid of regions.
    pub plop_scales: Vec<usize>,
}

impl Default for Hyper {
    fn default() -> Self {
        Self {
            ewc_lambda: 1000.0,
            ewc_samples: 50,
            ewc_online: true,
            si_c: 0.5,
            si_xi: 1e-3,
            temperature: 2.0,
            lwf_weight: 1.0,
            der_alpha: 0.5,
            derpp_alpha: 0.5,
            derpp_beta: 0.5,
            fdr_lambda: 1.0,
            gem_margin: 0.0,
            gpm_threshold: 0.95,
            gpm_samples: 16,
            gpm_max_columns: 1024,
            mib_kd_weight: 1.0,
            plop_pod_weight: 1.0,
            plop_scales: vec![1, 2],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Regularization,
    Replay,
    Isolation,
    ClassSpecific,
    Bound,
}

/// Where the training loop stands: the stream and the current task
/// position `t` (1-based).
#[derive(Clone, Copy, Debug)]
pub struct TaskContext<'a> {
    pub stream: &'a TaskStream,
    pub t: usize,
}

impl<'a> TaskContext<'a> {
    pub fn new(stream: &'a TaskStream, t: usize) -> Self {
        Self { stream, t }
    }

    pub fn task(&self) -> &'a Task {
        &self.stream.tasks[self.t - 1]
    }

    pub fn kind(&self) -> ScenarioKind {
        self.stream.kind
    }

    pub fn label_set(&self, task: usize) -> &'a [u32] {
        &self.stream.tasks[task - 1].label_set
    }

    /// Classes of tasks before the current one.
    pub fn old_classes(&self) -> Vec<u32> {
        let mut v: Vec<u32> = self.stream.tasks[..self.t - 1]
            .iter()
            .flat_map(|t| t.label_set.iter().copied())
            .filter(|c| !self.task().label_set.contains(c))
            .collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    /// Training split of the current task as loop items.
    pub fn current_items(&self) -> Vec<TrainItem<'a>> {
        self.task()
            .train
            .iter()
            .enumerate()
            .map(|(index, sample)| TrainItem {
                task: self.t,
                index,
                sample,
            })
            .collect()
    }
}

/// One training sample with its task position and index in that task's
/// training split.
#[derive(Clone, Copy, Debug)]
pub struct TrainItem<'a> {
    pub task: usize,
    pub index: usize,
    pub sample: &'a Sample,
}

/// Mutable per-run resources shared with the strategy.
#[derive(Clone, Debug)]
pub struct Env {
    pub rng: Rng,
    pub ledger: ReplayLedger,
    pub batch_size: usize,
    pub seed: u64,
}

impl Env {
    pub fn new(seed: u64, batch_size: usize) -> Self {
        Self {
            rng: crate::seeding::stream(seed, "strategy", 0),
            ledger: ReplayLedger::new(),
            batch_size,
            seed,
        }
    }
}

pub trait Strategy {
    fn name(&self) -> &'static str;

    fn family(&self) -> Family;

    /// Scenario compatibility, checked before a run starts.
    fn supports(&self, _kind: ScenarioKind) -> bool {
        true
    }

    /// Whether the method keeps a replay buffer (buffer sweeps need one).
    fn uses_buffer(&self) -> bool {
        false
    }

    /// Head/column used for task `task` at training and test time.
    fn route(&self, _task: usize) -> usize {
        1
    }

    /// Prepare the model for task `ctx.t`. The default registers the task's
    /// classes on the shared head.
    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        model.ensure_classes(self.route(ctx.t), &ctx.task().label_set)
    }

    /// Samples the loop iterates over for task `ctx.t`.
    fn training_items<'a>(&self, ctx: &TaskContext<'a>) -> Vec<TrainItem<'a>> {
        ctx.current_items()
    }

    /// Mean loss on `batch` and its gradient with respect to all parameters.
    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)>;

    /// Modify the gradient before the update.
    fn adjust_gradient(&mut self, _model: &Segmenter, _g: &mut [f64], _ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        Ok(())
    }

    fn on_task_end(&mut self, _model: &mut Segmenter, _ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        Ok(())
    }
}

/// Build a strategy by canonical name.
pub fn create(name: &str, hyper: &Hyper, capacity: usize) -> Result<Box<dyn Strategy>> {
    Ok(match name {
        "regu-ewc" => Box::new(Ewc::new(hyper.clone())),
        "regu-si" => Box::new(Si::new(hyper.clone())),
        "regu-lwf" => Box::new(Lwf::new(hyper.clone())),
        "repl-er" => Box::new(Er::new(capacity)),
        "repl-gss" => Box::new(Gss::new(capacity)),
        "repl-gem" => Box::new(Gem::new(capacity, hyper.gem_margin)),
        "repl-gpm" => Box::new(Gpm::new(hyper.clone())?),
        "repl-agem" => Box::new(Agem::new(capacity)),
        "repl-der" => Box::new(Der::new(capacity, hyper.der_alpha, 0.0)),
        "repl-derpp" => Box::new(Der::new(capacity, hyper.derpp_alpha, hyper.derpp_beta)),
        "repl-fdr" => Box::new(Fdr::new(capacity, hyper.fdr_lambda)),
        "pariso-pnn" => Box::new(Pnn),
        "pariso-dan" => Box::new(Dan),
        "classcl-plop" => Box::new(Plop::new(hyper.clone())),
        "classcl-mib" => Box::new(Mib::new(hyper.clone())),
        "non-cl" => Box::new(NonCl),
        "jointtrain" => Box::new(JointTrain),
        _ => {
            return Err(Error::Config(format!(
                "unknown strategy '{name}'; expected one of {}",
                STRATEGY_NAMES.join(", ")
            )))
        }
    })
}

// ---- shared loss plumbing -------------------------------------------------

/// Classes merged into background for a sample of task `task`: in class-cl
/// with the unbiased loss, every head class outside the task's own group.
pub(crate) fn fold_for(model: &Segmenter, route: usize, ctx: &TaskContext, task: usize, unbiased: bool) -> Vec<u32> {
    if !unbiased || ctx.kind() != ScenarioKind::ClassCl {
        return Vec::new();
    }
    let own = ctx.label_set(task);
    model
        .head_classes(route)
        .into_iter()
        .filter(|&c| c != 0 && !own.contains(&c))
        .collect()
}

/// Cross-entropy over training items, unbiased in class-cl when requested.
pub(crate) fn items_ce(
    model: &Segmenter,
    route: usize,
    items: &[TrainItem],
    ctx: &TaskContext,
    unbiased: bool,
) -> Result<(f64, Vec<f64>)> {
    let classes = model.head_classes(route);
    let folds: Vec<Vec<u32>> = items.iter().map(|it| fold_for(model, route, ctx, it.task, unbiased)).collect();
    let images: Vec<&Image> = items.iter().map(|it| &it.sample.image).collect();
    let mut err = None;
    let out = model.grad_params(&images, route, |i, logits| {
        match loss::cross_entropy(logits, &classes, &items[i].sample.label, &folds[i]) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                (0.0, Tensor::zeros(logits.channels, logits.height, logits.width))
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Cross-entropy over `(image, label, source task)` triples.
pub(crate) fn labelled_ce(
    model: &Segmenter,
    route: usize,
    data: &[(&Image, &LabelMap, usize)],
    ctx: &TaskContext,
    unbiased: bool,
) -> Result<(f64, Vec<f64>)> {
    let classes = model.head_classes(route);
    let images: Vec<&Image> = data.iter().map(|d| d.0).collect();
    let folds: Vec<Vec<u32>> = data.iter().map(|d| fold_for(model, route, ctx, d.2, unbiased)).collect();
    let mut err = None;
    let out = model.grad_params(&images, route, |i, logits| {
        match loss::cross_entropy(logits, &classes, data[i].1, &folds[i]) {
            Ok(v) => v,
            Err(e) => {
                err.get_or_insert(e);
                (0.0, Tensor::zeros(logits.channels, logits.height, logits.width))
            }
        }
    })?;
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// Mean loss and gradient where each image's loss may depend on its logits
/// and taps. `per_image` returns `(loss, dlogits, dtaps)`.
pub(crate) fn grad_with_taps<F>(model: &Segmenter, images: &[&Image], route: usize, mut per_image: F) -> Result<(f64, Vec<f64>)>
where
    F: FnMut(usize, &Trace) -> Result<(f64, Option<Tensor>, Vec<(usize, Tensor)>)>,
{
    let mut grad = vec![0.0; model.num_params()];
    if images.is_empty() {
        return Ok((0.0, grad));
    }
    let mut total = 0.0;
    for (i, img) in images.iter().enumerate() {
        let tr = model.trace(img, route)?;
        let (l, dl, dt) = per_image(i, &tr)?;
        if !l.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {l} on item {i}")));
        }
        total += l;
        let g = tr.backward(dl, dt);
        add_into(&mut grad, &g, 1.0);
    }
    let n = images.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

pub(crate) fn add_into(acc: &mut [f64], g: &[f64], w: f64) {
    for (a, b) in acc.iter_mut().zip(g) {
        *a += w * b;
    }
}

/// Extend a per-parameter vector with zeros after head growth.
pub(crate) fn fit_len(v: &mut Vec<f64>, n: usize) {
    if v.len() < n {
        v.resize(n, 0.0);
    }
}

#[cfg(test)]
mod tests;
