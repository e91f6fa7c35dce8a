//! Experiment orchestration.
//!
//! [`run_experiment`] trains one strategy over a task stream for every
//! configured seed, fills the accuracy matrix after each task, computes the
//! metrics, and persists every artifact under
//! `out_dir/<config-hash>/<seed>/`. Sweeps and reports build on it.

mod config;
mod persist;
mod report;
mod sweep;

use std::time::Instant;

use rand::seq::SliceRandom;

use crate::buffers::ReplayAccounting;
use crate::error::{Error, Result};
use crate::grid::{argmax_labels, LabelMap};
use crate::metrics::{mean_class_dice, wcd, AccuracyMatrix, MetricReport, NcReference, RunMetrics};
use crate::scenarios::{ScenarioKind, TaskStream};
use crate::seeding;
use crate::segmodel::{ArchConfig, ParamTrace, Segmenter};
use crate::strategies::{self, Env, NonCl, Strategy, TaskContext};

pub use config::{ExperimentConfig, ModelSpec, Optimizer, ScenarioSpec, StrategySpec, TaskOrder};
pub use persist::{load_records, nc_cache_path, seed_dir, LoadedRun};
pub use report::{emit_report, report_columns, ReportRow};
pub use sweep::{order_label, sweep_buffer, sweep_order, BufferSweep, OrderSweep};

/// Everything one seed of an experiment produced.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedRun {
    pub seed: u64,
    /// Stream position `k` holds the originally generated task `order[k]`.
    pub order: Vec<usize>,
    pub matrix: AccuracyMatrix,
    pub params: ParamTrace,
    pub replay: ReplayAccounting,
    pub nc: Option<NcReference>,
    pub wcd: Option<f64>,
    pub metrics: RunMetrics,
    /// Wall-clock seconds per task; not part of the record digest.
    pub task_seconds: Vec<f64>,
    /// Whether the single-task references came from the cache.
    pub nc_cached: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentRecord {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub runs: Vec<SeedRun>,
    pub report: MetricReport,
}

impl ExperimentRecord {
    pub fn scenario(&self) -> ScenarioKind {
        self.config.scenario.kind
    }

    /// Digest over the persisted deterministic artifacts of every seed.
    pub fn digest(&self) -> Result<String> {
        persist::record_digest(self)
    }
}

/// Train and evaluate every seed of `config`, persisting the artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentRecord> {
    config.validate()?;
    let hash = config.hash()?;
    let mut runs = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let run = run_seed(config, seed)?;
        persist::write_run(config, &hash, &run)?;
        runs.push(run);
    }
    let report = MetricReport::aggregate(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
    Ok(ExperimentRecord {
        config: config.clone(),
        config_hash: hash,
        runs,
        report,
    })
}

fn arch_for(stream: &TaskStream, model: &ModelSpec) -> Result<ArchConfig> {
    let first = stream
        .tasks
        .first()
        .and_then(|t| t.train.first())
        .ok_or_else(|| Error::Config("stream has no training samples".into()))?;
    let arch = ArchConfig {
        height: first.image.height,
        width: first.image.width,
        levels: model.levels,
        base_width: model.base_width,
    };
    arch.validate()?;
    Ok(arch)
}

/// One seed: build and order the stream, train task by task, evaluate.
pub fn run_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedRun> {
    run_seed_observed(config, seed, |_| Ok(()))
}

/// State handed to an observer after each task of a seed run.
pub struct TaskSnapshot<'a> {
    /// Tasks completed so far.
    pub t: usize,
    pub model: &'a Segmenter,
    pub strategy: &'a dyn Strategy,
    pub stream: &'a TaskStream,
}

/// [`run_seed`] with `observe` called after every task's evaluation.
pub fn run_seed_observed(
    config: &ExperimentConfig,
    seed: u64,
    mut observe: impl FnMut(&TaskSnapshot) -> Result<()>,
) -> Result<SeedRun> {
    let base = config.scenario.build(seed)?;
    let n = base.n_tasks();
    let order = match &config.order {
        Some(o) => o.resolve(n)?,
        None => (1..=n).collect(),
    };
    let stream = base.permute(&order)?;
    let arch = arch_for(&stream, &config.model)?;
    let mut strategy = strategies::create(&config.strategy.name, &config.strategy.params, config.capacity)?;
    if !strategy.supports(stream.kind) {
        return Err(Error::Config(format!(
            "strategy {} does not apply to {} streams",
            config.strategy.name, stream.kind
        )));
    }

    let mut model = Segmenter::new(arch, &stream.tasks[0].label_set, seed)?;
    let mut env = Env::new(seed, config.optimizer.batch_size);
    for task in &stream.tasks {
        env.ledger.register_task(task.id, task.train.len());
    }
    let mut rows = vec![evaluate_row(&model, strategy.as_ref(), &stream)?];
    let mut params = ParamTrace::default();
    let mut task_seconds = Vec::with_capacity(n);
    for t in 1..=n {
        let start = Instant::now();
        let ctx = TaskContext::new(&stream, t);
        strategy.on_task_start(&mut model, &ctx, &mut env)?;
        let mut rng = seeding::stream(seed, "batches", t as u64);
        train_task(&mut model, strategy.as_mut(), &ctx, &mut env, config, &mut rng)?;
        strategy.on_task_end(&mut model, &ctx, &mut env)?;
        params.record(model.body_params());
        rows.push(evaluate_row(&model, strategy.as_ref(), &stream)?);
        task_seconds.push(start.elapsed().as_secs_f64());
        observe(&TaskSnapshot {
            t,
            model: &model,
            strategy: strategy.as_ref(),
            stream: &stream,
        })?;
    }
    let matrix = AccuracyMatrix::from_rows(rows)?;
    let whole = if stream.kind == ScenarioKind::ClassCl {
        Some(whole_class_dice(&model, &stream)?)
    } else {
        None
    };
    let (nc, nc_cached) = if n >= 2 {
        let (by_origin, cached) = load_or_train_nc(config, seed, &base)?;
        let d_nc = order.iter().map(|&o| by_origin[o - 1]).collect();
        (Some(NcReference { d_nc }), cached)
    } else {
        (None, false)
    };
    let replay = env.ledger.snapshot();
    let metrics = RunMetrics::compute(stream.kind, &matrix, nc.as_ref(), &params, &replay, whole)?;
    Ok(SeedRun {
        seed,
        order,
        matrix,
        params,
        replay,
        nc,
        wcd: whole,
        metrics,
        task_seconds,
        nc_cached,
    })
}

/// `epochs` passes of minibatch SGD over the strategy's training items.
fn train_task(
    model: &mut Segmenter,
    strategy: &mut dyn Strategy,
    ctx: &TaskContext,
    env: &mut Env,
    config: &ExperimentConfig,
    rng: &mut seeding::Rng,
) -> Result<()> {
    let mut items = strategy.training_items(ctx);
    let bs = config.optimizer.batch_size;
    for _ in 0..config.epochs {
        items.shuffle(rng);
        for batch in items.chunks(bs) {
            let (loss, mut g) = strategy.loss(model, batch, ctx, env)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "{} loss diverged to {loss} on task {}",
                    strategy.name(),
                    ctx.t
                )));
            }
            strategy.adjust_gradient(model, &mut g, ctx, env)?;
            model.sgd_step(&g, config.optimizer.lr)?;
        }
    }
    Ok(())
}

/// Test-set Dice of task `i` on its own route, with predictions restricted
/// to background and the task's classes (task identity is known).
pub fn task_dice(model: &Segmenter, route: usize, stream: &TaskStream, i: usize) -> Result<f64> {
    let task = &stream.tasks[i - 1];
    let head = model.head_classes(route);
    let keep: Vec<usize> = (0..head.len())
        .filter(|&k| head[k] == 0 || task.label_set.contains(&head[k]))
        .collect();
    let classes: Vec<u32> = keep.iter().map(|&k| head[k]).collect();
    let mut preds = Vec::with_capacity(task.test.len());
    let mut truths = Vec::with_capacity(task.test.len());
    for s in &task.test {
        let logits = model.forward(&s.image, route)?;
        preds.push(argmax_labels(&logits.select_channels(&keep), &classes));
        truths.push(s.label.clone());
    }
    mean_class_dice(&preds, &truths, &task.label_set)
}

fn evaluate_row(model: &Segmenter, strategy: &dyn Strategy, stream: &TaskStream) -> Result<Vec<f64>> {
    (1..=stream.n_tasks())
        .map(|i| task_dice(model, strategy.route(i), stream, i))
        .collect()
}

/// Whole-class Dice over every task's test set, predicting among all
/// classes at once against the full annotation.
pub fn whole_class_dice(model: &Segmenter, stream: &TaskStream) -> Result<f64> {
    let classes: Vec<u32> = stream.full_label_set.iter().copied().filter(|&c| c != 0).collect();
    let mut preds = Vec::new();
    let mut truths: Vec<LabelMap> = Vec::new();
    for task in &stream.tasks {
        for s in &task.test {
            let (scores, ids) = model.all_class_scores(&s.image)?;
            preds.push(argmax_labels(&scores, &ids));
            truths.push(s.full_label.clone().unwrap_or_else(|| s.label.clone()));
        }
    }
    wcd(&preds, &truths, &classes, stream.kind)
}

/// Single-task reference Dice `d_i^NC` for every task of `base`, indexed
/// by original task position: a fresh model trained with plain
/// cross-entropy on task `i` alone under the same budget.
pub fn train_nc(config: &ExperimentConfig, seed: u64, base: &TaskStream) -> Result<Vec<f64>> {
    let arch = arch_for(base, &config.model)?;
    let mut out = Vec::with_capacity(base.n_tasks());
    for task in &base.tasks {
        let mut solo = task.clone();
        solo.id = 1;
        let stream = TaskStream {
            kind: base.kind,
            tasks: vec![solo],
            full_label_set: base.full_label_set.clone(),
        };
        let mut model = Segmenter::new(arch.clone(), &task.label_set, seed)?;
        let mut env = Env::new(seed, config.optimizer.batch_size);
        let mut strategy = NonCl;
        let ctx = TaskContext::new(&stream, 1);
        strategy.on_task_start(&mut model, &ctx, &mut env)?;
        let mut rng = seeding::stream(seed, "nc-batches", task.origin as u64);
        train_task(&mut model, &mut strategy, &ctx, &mut env, config, &mut rng)?;
        out.push(task_dice(&model, 1, &stream, 1)?);
    }
    Ok(out)
}

/// References for one seed, from the cache when present. A cached
/// reference trained under a different budget is a fairness violation.
pub fn load_or_train_nc(config: &ExperimentConfig, seed: u64, base: &TaskStream) -> Result<(Vec<f64>, bool)> {
    if let Some(entry) = persist::read_nc_cache(config, seed)? {
        entry.check_budget(config)?;
        if entry.d_nc.len() != base.n_tasks() {
            return Err(Error::Config("cached single-task references do not match the stream length".into()));
        }
        return Ok((entry.d_nc, true));
    }
    let d = train_nc(config, seed, base)?;
    persist::write_nc_cache(config, seed, &d)?;
    Ok((d, false))
}

/// Train and cache the single-task references for every seed,
/// overwriting any cached entry.
pub fn run_nc_reference(config: &ExperimentConfig) -> Result<Vec<(u64, NcReference)>> {
    config.validate()?;
    let mut out = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let base = config.scenario.build(seed)?;
        let d = train_nc(config, seed, &base)?;
        persist::write_nc_cache(config, seed, &d)?;
        out.push((seed, NcReference { d_nc: d }));
    }
    Ok(out)
}
