//! Gradient projection memory.
//!
//! After each task the input activations of every weight stage are
//! summarised by an orthonormal basis `M_l` of their dominant subspace.
//! Later gradients of that stage's weights have each output row projected
//! onto the orthogonal complement, `g ← g − M_l M_lᵀ g`, so updates leave
//! the responses to old inputs unchanged to first order.

use nalgebra::{DMatrix, DVector};
use rand::seq::{index, SliceRandom};

use super::{items_ce, Env, Family, Hyper, Strategy, TaskContext, TrainItem};
use crate::error::{Error, Result};
use crate::grid::{Image, Tensor};
use crate::segmodel::Segmenter;

/// Patch matrix of a same-padded `k×k` window: rows are
/// `(channel, ky, kx)` in weight order, columns are pixel positions.
pub fn im2col(x: &Tensor, k: usize) -> DMatrix<f64> {
    let (c, h, w) = (x.channels, x.height, x.width);
    let pad = (k / 2) as isize;
    let mut m = DMatrix::zeros(c * k * k, h * w);
    for i in 0..c {
        let plane = x.plane(i);
        for ky in 0..k {
            for kx in 0..k {
                let row = (i * k + ky) * k + kx;
                for y in 0..h {
                    let sy = y as isize + ky as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        m[(row, y * w + xx)] = plane[sy as usize * w + sx as usize];
                    }
                }
            }
        }
    }
    m
}

/// Per-stage orthonormal bases.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GpmMemory {
    pub bases: Vec<DMatrix<f64>>,
}

impl GpmMemory {
    /// Largest `|MᵀM − I|` entry over all stages.
    pub fn orthonormality_error(&self) -> f64 {
        self.bases
            .iter()
            .map(|m| {
                let g = m.transpose() * m;
                let id = DMatrix::<f64>::identity(m.ncols(), m.ncols());
                (g - id).amax()
            })
            .fold(0.0, f64::max)
    }
}

/// Extend each stage basis with the leading left singular vectors of the
/// part of `R_l` outside the basis, until the basis captures a `threshold`
/// fraction of `‖R_l‖²`.
pub fn gpm_update_memory(mem: &mut GpmMemory, reps: &[DMatrix<f64>], threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::Config(format!("GPM threshold {threshold} outside (0, 1]")));
    }
    if mem.bases.is_empty() {
        mem.bases = reps.iter().map(|r| DMatrix::zeros(r.nrows(), 0)).collect();
    }
    if mem.bases.len() != reps.len() {
        return Err(Error::Shape(format!("{} representation matrices for {} stages", reps.len(), mem.bases.len())));
    }
    for (m, r) in mem.bases.iter_mut().zip(reps) {
        if m.nrows() != r.nrows() {
            return Err(Error::Shape(format!("representation has {} rows, basis {}", r.nrows(), m.nrows())));
        }
        let total = r.norm_squared();
        if total == 0.0 || m.ncols() == m.nrows() {
            continue;
        }
        let proj = &*m * (m.transpose() * r);
        let mut captured = proj.norm_squared();
        if captured >= threshold * total {
            continue;
        }
        let resid = r - proj;
        let svd = resid.svd(true, false);
        let u = svd.u.expect("left singular vectors requested");
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
        let mut fresh: Vec<DVector<f64>> = Vec::new();
        for j in order {
            if captured >= threshold * total || m.ncols() + fresh.len() >= m.nrows() {
                break;
            }
            let s = svd.singular_values[j];
            if s * s <= 1e-12 * total {
                break;
            }
            captured += s * s;
            let mut v = u.column(j).into_owned();
            // re-orthogonalise against the basis and earlier picks
            for _ in 0..2 {
                for c in m.column_iter() {
                    let d = c.dot(&v);
                    v -= c * d;
                }
                for c in &fresh {
                    let d = c.dot(&v);
                    v -= c * d;
                }
            }
            let n = v.norm();
            if n > 1e-10 {
                fresh.push(v / n);
            }
        }
        if !fresh.is_empty() {
            let old = m.ncols();
            let mut grown = m.clone().resize_horizontally(old + fresh.len(), 0.0);
            for (j, v) in fresh.into_iter().enumerate() {
                grown.set_column(old + j, &v);
            }
            *m = grown;
        }
    }
    Ok(())
}

/// `g − M Mᵀ g`.
pub fn gpm_project(basis: &DMatrix<f64>, g: &[f64]) -> Result<Vec<f64>> {
    if basis.nrows() != g.len() {
        return Err(Error::Shape(format!("gradient row has {} entries, basis {}", g.len(), basis.nrows())));
    }
    if basis.ncols() == 0 {
        return Ok(g.to_vec());
    }
    let v = DVector::from_column_slice(g);
    let out = &v - basis * (basis.transpose() * &v);
    Ok(out.as_slice().to_vec())
}

/// Weight blocks of one stage and the length of each weight row.
#[derive(Clone, Debug, PartialEq)]
struct StageLayout {
    blocks: Vec<usize>,
    fan_in: usize,
}

pub struct Gpm {
    hyper: Hyper,
    memory: GpmMemory,
    layout: Vec<StageLayout>,
}

impl Gpm {
    pub fn new(hyper: Hyper) -> Result<Self> {
        if !(hyper.gpm_threshold > 0.0 && hyper.gpm_threshold <= 1.0) {
            return Err(Error::Config(format!("GPM threshold {} outside (0, 1]", hyper.gpm_threshold)));
        }
        Ok(Self {
            hyper,
            memory: GpmMemory::default(),
            layout: Vec::new(),
        })
    }

    pub fn memory(&self) -> &GpmMemory {
        &self.memory
    }

    fn refresh_layout(&mut self, model: &Segmenter) -> Result<()> {
        let arch = model.arch();
        let probe = Image::zeros(arch.height, arch.width);
        let tr = model.trace(&probe, 1)?;
        self.layout = tr
            .stages()
            .iter()
            .map(|s| StageLayout {
                blocks: s.weights.clone(),
                fan_in: tr.value(s.input).channels * s.k * s.k,
            })
            .collect();
        Ok(())
    }
}

impl Strategy for Gpm {
    fn name(&self) -> &'static str {
        "repl-gpm"
    }

    fn family(&self) -> Family {
        Family::Replay
    }

    fn on_task_start(&mut self, model: &mut Segmenter, ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        model.ensure_classes(1, &ctx.task().label_set)?;
        self.refresh_layout(model)
    }

    fn loss(&mut self, model: &Segmenter, batch: &[TrainItem], ctx: &TaskContext, _env: &mut Env) -> Result<(f64, Vec<f64>)> {
        items_ce(model, 1, batch, ctx, true)
    }

    fn adjust_gradient(&mut self, model: &Segmenter, g: &mut [f64], _ctx: &TaskContext, _env: &mut Env) -> Result<()> {
        if self.memory.bases.is_empty() {
            return Ok(());
        }
        let store = model.store();
        for (stage, basis) in self.layout.iter().zip(&self.memory.bases) {
            if basis.ncols() == 0 {
                continue;
            }
            for &b in &stage.blocks {
                let blk = &store.blocks()[b];
                for row in g[blk.offset..blk.offset + blk.len].chunks_mut(stage.fan_in) {
                    let p = gpm_project(basis, row)?;
                    row.copy_from_slice(&p);
                }
            }
        }
        Ok(())
    }

    fn on_task_end(&mut self, model: &mut Segmenter, ctx: &TaskContext, env: &mut Env) -> Result<()> {
        let mut items = ctx.current_items();
        items.shuffle(&mut env.rng);
        items.truncate(self.hyper.gpm_samples.max(1));
        let mut per_stage: Vec<Vec<DMatrix<f64>>> = Vec::new();
        for it in &items {
            env.ledger.record(it.task, it.index, false);
            let tr = model.trace(&it.sample.image, 1)?;
            if per_stage.is_empty() {
                per_stage = vec![Vec::new(); tr.stages().len()];
            }
            for (l, s) in tr.stages().iter().enumerate() {
                per_stage[l].push(im2col(tr.value(s.input), s.k));
            }
        }
        let cap = self.hyper.gpm_max_columns.max(1);
        let mut reps = Vec::with_capacity(per_stage.len());
        for mats in per_stage {
            let rows = mats[0].nrows();
            let total: usize = mats.iter().map(|m| m.ncols()).sum();
            let mut full = DMatrix::zeros(rows, total);
            let mut c0 = 0;
            for m in &mats {
                full.columns_mut(c0, m.ncols()).copy_from(m);
                c0 += m.ncols();
            }
            if total > cap {
                let mut keep = index::sample(&mut env.rng, total, cap).into_vec();
                keep.sort_unstable();
                full = full.select_columns(&keep);
            }
            reps.push(full);
        }
        gpm_update_memory(&mut self.memory, &reps, self.hyper.gpm_threshold)?;
        self.refresh_layout(model)
    }
}
