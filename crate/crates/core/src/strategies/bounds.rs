//! Reference bounds: sequential fine-tuning and cumulative joint training.

use super::{items_ce, Env, Family, Strategy, TaskContext, TrainItem};
use crate::error::Result;
use crate::segmodel::Segmenter;

/// Plain sequential fine-tuning with ordinary cross-entropy.
#[derive(Clone, Copy, Debug, Default)]
pub struct NonCl;

impl Strategy for NonCl {
    fn name(&self) -> &'static str {
        "non-cl"
    }

    fn family(&self) -> Family {
        Family::Bound
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, 1, batch, ctx, false)
    }
}

/// Training at step `t` runs over the pooled training data of tasks
/// `1..=t`; the model after the last task has seen the full union.
#[derive(Clone, Copy, Debug, Default)]
pub struct JointTrain;

impl Strategy for JointTrain {
    fn name(&self) -> &'static str {
        "jointtrain"
    }

    fn family(&self) -> Family {
        Family::Bound
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        let mut all: Vec<u32> = ctx.stream.tasks[..ctx.t].iter().flat_map(|t| t.label_set.iter().copied()).collect();
        all.sort_unstable();
        all.dedup();
        model.ensure_classes(1, &all)
    }

    fn training_items<'a>(&self, ctx: &TaskContext<'a>) -> Vec<TrainItem<'a>> {
        ctx.stream.tasks[..ctx.t]
            .iter()
            .enumerate()
            .flat_map(|(j, task)| {
                task.train.iter().enumerate().map(move |(index, sample)| TrainItem {
                    task: j + 1,
                    index,
                    sample,
                })
            })
            .collect()
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, env: &mut Env) -> Result<(f64, Vec<f64>)> {
        for it in batch.iter().filter(|it| it.task < ctx.t) {
            env.ledger.record(it.task, it.index, true);
        }
        items_ce(model, 1, batch, ctx, true)
    }
}
