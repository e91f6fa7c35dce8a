//! Parameter isolation: one route per task, earlier routes frozen.

use super::{items_ce, Env, Family, Strategy, TaskContext, TrainItem};
use crate::error::Result;
use crate::segmodel::Segmenter;

/// Progressive columns with lateral adapters; task `i` is served by
/// column `i`.
#[derive(Clone, Copy, Debug, Default)]
pub struct Pnn;

impl Strategy for Pnn {
    fn name(&self) -> &'static str {
        "pariso-pnn"
    }

    fn family(&self) -> Family {
        Family::Isolation
    }

    fn route(&self, task: usize) -> usize {
        task
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        if ctx.t == 1 {
            model.ensure_classes(1, &ctx.task().label_set)
        } else {
            model.add_progressive_column(&ctx.task().label_set)
        }
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, ctx.t, batch, ctx, true)
    }
}

/// Frozen base network recombined per task by 1×1 controllers.
#[derive(Clone, Copy, Debug, Default)]
pub struct Dan;

impl Strategy for Dan {
    fn name(&self) -> &'static str {
        "pariso-dan"
    }

    fn family(&self) -> Family {
        Family::Isolation
    }

    fn route(&self, task: usize) -> usize {
        task
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        if ctx.t == 1 {
            model.ensure_classes(1, &ctx.task().label_set)
        } else {
            model.add_controllers(&ctx.task().label_set)
        }
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, ctx.t, batch, ctx, true)
    }
}
