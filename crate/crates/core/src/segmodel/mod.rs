//! Encoder–decoder segmenter with flat parameter/gradient access.
//!
//! The network is a U-shaped stack: `levels` encoder stages (3×3 conv +
//! ReLU, widths `w, 2w, 4w, ...`, 2×2 max-pool between them), a bottleneck,
//! mirrored decoder stages fed by nearest upsampling concatenated with the
//! matching encoder output, and a 1×1 head with one channel per registered
//! class (channel 0 is always background).
//!
//! Three topologies share this building block:
//!
//! * a single column (every strategy except parameter isolation);
//! * progressive columns, one per task, with zero-initialised lateral
//!   adapters from every earlier column's taps;
//! * a frozen base column recombined per task by controller matrices.
//!
//! Every computation goes through a [`tape::Tape`], so gradients with
//! respect to all trainable parameters are exact for any loss that supplies
//! its derivative with respect to the logits and, optionally, the taps.

pub mod loss;
pub mod params;
pub mod tape;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grid::{Image, Tensor};
use crate::seeding;

pub use params::{Block, BlockRole, ParamStore};
use tape::{Tape, Var};

/// Model size recorded after each completed task, `Param(θ_t)` for
/// `t = 1..=T`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamTrace {
    pub per_task_counts: Vec<usize>,
}

impl ParamTrace {
    pub fn record(&mut self, count: usize) {
        self.per_task_counts.push(count);
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub height: usize,
    pub width: usize,
    /// Number of encoder levels (pooling steps before the bottleneck).
    pub levels: usize,
    /// Channel width of the first encoder level; doubles per level.
    pub base_width: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            levels: 4,
            base_width: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_width == 0 {
            return Err(Error::Config("levels and base_width must be positive".into()));
        }
        let div = 1usize << self.levels;
        if self.height % div != 0 || self.width % div != 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be a positive multiple of {div} for {} levels",
                self.height, self.width, self.levels
            )));
        }
        Ok(())
    }

    fn level_width(&self, l: usize) -> usize {
        self.base_width << l
    }

    /// Tap indices exposed by [`Segmenter::features`]: one per encoder level,
    /// then the bottleneck.
    pub fn depth_taps(&self) -> Vec<usize> {
        (0..=self.levels).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Stage {
    w: usize,
    b: usize,
    cout: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct HeadChannel {
    class: u32,
    w: usize,
    b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Column {
    enc: Vec<Stage>,
    bottleneck: Stage,
    dec: Vec<Stage>,
    head: Vec<HeadChannel>,
}

impl Column {
    /// Encoder stages followed by the bottleneck, i.e. one stage per tap.
    fn tap_stages(&self) -> impl Iterator<Item = &Stage> {
        self.enc.iter().chain(std::iter::once(&self.bottleneck))
    }

    fn conv_stages(&self) -> impl Iterator<Item = &Stage> {
        self.tap_stages().chain(self.dec.iter())
    }
}

/// Per-task controller set recombining frozen base filters.
#[derive(Clone, Debug, PartialEq)]
struct Controllers {
    /// `(matrix block, bias block)` for each conv stage in
    /// [`Column::conv_stages`] order.
    stages: Vec<(usize, usize)>,
    head: Vec<HeadChannel>,
}

#[derive(Clone, Debug, PartialEq)]
enum Topology {
    Single,
    /// `adapters[c][j][l]`: 1×1 block carrying tap `l` of column `j` into
    /// column `c`'s pre-activation at the same tap.
    Progressive { adapters: Vec<Vec<Vec<usize>>> },
    Controlled { tasks: Vec<Controllers> },
}

/// A weight stage and the activation it consumes; used by subspace
/// projection methods.
#[derive(Clone, Debug)]
pub struct StageInput {
    /// Weight blocks whose rows act on patches of `input` (`k×k` windows).
    pub weights: Vec<usize>,
    pub input: Var,
    pub k: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segmenter {
    arch: ArchConfig,
    store: ParamStore,
    columns: Vec<Column>,
    topology: Topology,
    seed: u64,
    draws: u64,
}

/// Recorded forward pass, ready for [`Trace::backward`].
#[derive(Debug)]
pub struct Trace<'a> {
    tape: Tape<'a>,
    logits: Var,
    taps: Vec<Var>,
    stages: Vec<StageInput>,
    classes: Vec<u32>,
}

impl<'a> Trace<'a> {
    pub fn logits(&self) -> &Tensor {
        self.tape.value(self.logits)
    }

    /// Class id carried by each logit channel.
    pub fn classes(&self) -> &[u32] {
        &self.classes
    }

    pub fn tap(&self, l: usize) -> &Tensor {
        self.tape.value(self.taps[l])
    }

    pub fn n_taps(&self) -> usize {
        self.taps.len()
    }

    pub fn stages(&self) -> &[StageInput] {
        &self.stages
    }

    pub fn value(&self, v: Var) -> &Tensor {
        self.tape.value(v)
    }

    /// Gradient of a loss whose derivative w.r.t. the logits is `dlogits`
    /// and w.r.t. tap `l` is the paired tensor.
    pub fn backward(&self, dlogits: Option<Tensor>, dtaps: Vec<(usize, Tensor)>) -> Vec<f64> {
        let mut seeds = Vec::with_capacity(1 + dtaps.len());
        if let Some(d) = dlogits {
            seeds.push((self.logits, d));
        }
        for (l, d) in dtaps {
            seeds.push((self.taps[l], d));
        }
        self.tape.backward(seeds)
    }
}

impl Segmenter {
    /// Freshly initialised single-column model with head channels for
    /// background plus `classes`.
    pub fn new(arch: ArchConfig, classes: &[u32], seed: u64) -> Result<Self> {
        arch.validate()?;
        check_new_classes(&[], classes)?;
        let mut m = Self {
            arch,
            store: ParamStore::default(),
            columns: Vec::new(),
            topology: Topology::Single,
            seed,
            draws: 0,
        };
        let col = m.build_column(classes);
        m.columns.push(col);
        Ok(m)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.len()
    }

    /// Parameter count used for growth accounting: all blocks except
    /// classification-head channels.
    pub fn body_params(&self) -> usize {
        self.store.body_len()
    }

    pub fn params(&self) -> &[f64] {
        self.store.values()
    }

    /// `θ ← θ − lr·g` on trainable blocks; frozen blocks are left alone.
    pub fn sgd_step(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.store.len() {
            return Err(Error::Shape(format!(
                "gradient has {} entries, model has {} parameters",
                grad.len(),
                self.store.len()
            )));
        }
        if let Some(bad) = grad.iter().find(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient entry {bad}")));
        }
        for b in 0..self.store.blocks.len() {
            let blk = self.store.blocks[b].clone();
            if blk.frozen {
                continue;
            }
            let g = &grad[blk.offset..blk.offset + blk.len];
            for (v, gi) in self.store.values[blk.offset..blk.offset + blk.len].iter_mut().zip(g) {
                *v -= lr * gi;
            }
        }
        Ok(())
    }

    pub fn get_params(&self) -> Vec<f64> {
        self.store.values().to_vec()
    }

    pub fn set_params(&mut self, v: &[f64]) -> Result<()> {
        if v.len() != self.store.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} entries, model has {}",
                v.len(),
                self.store.len()
            )));
        }
        self.store.values.copy_from_slice(v);
        Ok(())
    }

    pub fn trainable_mask(&self) -> Vec<f64> {
        self.store.trainable_mask()
    }

    /// Number of task routes (columns or controller sets) the model holds.
    pub fn n_routes(&self) -> usize {
        match &self.topology {
            Topology::Single => 1,
            Topology::Progressive { .. } => self.columns.len(),
            Topology::Controlled { tasks } => 1 + tasks.len(),
        }
    }

    pub fn is_single(&self) -> bool {
        matches!(self.topology, Topology::Single)
    }

    fn clamp_route(&self, route: usize) -> usize {
        route.clamp(1, self.n_routes())
    }

    fn head_of(&self, route: usize) -> &[HeadChannel] {
        let r = self.clamp_route(route);
        match &self.topology {
            Topology::Single => &self.columns[0].head,
            Topology::Progressive { .. } => &self.columns[r - 1].head,
            Topology::Controlled { tasks } => {
                if r == 1 {
                    &self.columns[0].head
                } else {
                    &tasks[r - 2].head
                }
            }
        }
    }

    /// Class ids of the head used for `route` (1-based task id), background
    /// first. Routes past the newest column fall back to the newest one.
    pub fn head_classes(&self, route: usize) -> Vec<u32> {
        self.head_of(route).iter().map(|h| h.class).collect()
    }

    /// Every class id registered on any head, ascending, without background.
    pub fn registered_classes(&self) -> Vec<u32> {
        let mut all: Vec<u32> = (1..=self.n_routes())
            .flat_map(|r| self.head_classes(r))
            .filter(|&c| c != 0)
            .collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    // ---- initialisation -------------------------------------------------

    fn he_init(&mut self, fan_in: usize, len: usize) -> Vec<f64> {
        let mut rng = seeding::stream(self.seed, "segmodel-init", self.draws);
        self.draws += 1;
        let sd = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("finite std");
        (0..len).map(|_| normal.sample(&mut rng)).collect()
    }

    fn conv_stage(&mut self, cin: usize, cout: usize) -> Stage {
        let init = self.he_init(cin * 9, cout * cin * 9);
        let w = self.store.push(BlockRole::ConvWeight, init);
        let b = self.store.push(BlockRole::ConvBias, vec![0.0; cout]);
        Stage { w, b, cout }
    }

    fn head_channel(&mut self, class: u32) -> HeadChannel {
        let cin = self.arch.base_width;
        let init = self.he_init(cin, cin);
        let w = self.store.push(BlockRole::HeadWeight, init);
        let b = self.store.push(BlockRole::HeadBias, vec![0.0]);
        HeadChannel { class, w, b }
    }

    fn build_column(&mut self, classes: &[u32]) -> Column {
        let levels = self.arch.levels;
        let mut enc = Vec::with_capacity(levels);
        let mut cin = 1;
        for l in 0..levels {
            let cout = self.arch.level_width(l);
            enc.push(self.conv_stage(cin, cout));
            cin = cout;
        }
        let bottleneck = self.conv_stage(cin, cin);
        let mut dec_rev = Vec::with_capacity(levels);
        let mut below = cin;
        for l in (0..levels).rev() {
            let skip = self.arch.level_width(l);
            dec_rev.push(self.conv_stage(below + skip, skip));
            below = skip;
        }
        dec_rev.reverse();
        let mut head = vec![self.head_channel(0)];
        for &c in classes {
            head.push(self.head_channel(c));
        }
        Column {
            enc,
            bottleneck,
            dec: dec_rev,
            head,
        }
    }

    // ---- growth ---------------------------------------------------------

    /// Register new classes on the newest head. Existing channels and all
    /// other parameters are untouched; new channels are appended.
    pub fn expand_head(&mut self, new_classes: &[u32]) -> Result<()> {
        let route = self.n_routes();
        self.expand_route_head(route, new_classes)
    }

    fn expand_route_head(&mut self, route: usize, new_classes: &[u32]) -> Result<()> {
        let existing: Vec<u32> = self.head_classes(route);
        check_new_classes(&existing, new_classes)?;
        let fresh: Vec<HeadChannel> = new_classes.iter().map(|&c| self.head_channel(c)).collect();
        let r = self.clamp_route(route);
        let head = match &mut self.topology {
            Topology::Single => &mut self.columns[0].head,
            Topology::Progressive { .. } => &mut self.columns[r - 1].head,
            Topology::Controlled { tasks } => {
                if r == 1 {
                    &mut self.columns[0].head
                } else {
                    &mut tasks[r - 2].head
                }
            }
        };
        head.extend(fresh);
        Ok(())
    }

    /// Make sure `route`'s head carries every class in `classes`, adding the
    /// missing ones.
    pub fn ensure_classes(&mut self, route: usize, classes: &[u32]) -> Result<()> {
        let have = self.head_classes(route);
        let missing: Vec<u32> = classes.iter().copied().filter(|c| !have.contains(c)).collect();
        if missing.is_empty() {
            return Ok(());
        }
        self.expand_route_head(route, &missing)
    }

    /// `(weight, bias)` blocks of the head channel carrying `class` on
    /// `route`.
    pub fn head_blocks(&self, route: usize, class: u32) -> Option<(usize, usize)> {
        self.head_of(route)
            .iter()
            .find(|h| h.class == class)
            .map(|h| (h.w, h.b))
    }

    pub fn block_mut(&mut self, block: usize) -> &mut [f64] {
        self.store.slice_mut(block)
    }

    /// Freeze every block currently in the model.
    pub fn freeze_all(&mut self) {
        for b in 0..self.store.blocks().len() {
            self.store.freeze(b);
        }
    }

    /// Freeze everything and add a new column for the next task, with
    /// zero-initialised lateral adapters from every earlier column.
    pub fn add_progressive_column(&mut self, classes: &[u32]) -> Result<()> {
        match self.topology {
            Topology::Single => {
                self.topology = Topology::Progressive {
                    adapters: vec![Vec::new()],
                }
            }
            Topology::Progressive { .. } => {}
            Topology::Controlled { .. } => {
                return Err(Error::Protocol("cannot mix progressive columns with controllers".into()))
            }
        }
        check_new_classes(&[], classes)?;
        self.freeze_all();
        let col = self.build_column(classes);
        let prev = self.columns.len();
        let widths: Vec<usize> = (0..self.arch.levels)
            .map(|l| self.arch.level_width(l))
            .chain(std::iter::once(self.arch.level_width(self.arch.levels - 1)))
            .collect();
        let mut lateral = Vec::with_capacity(prev);
        for _ in 0..prev {
            let per_tap = widths
                .iter()
                .map(|&c| self.store.push(BlockRole::Adapter, vec![0.0; c * c]))
                .collect();
            lateral.push(per_tap);
        }
        self.columns.push(col);
        if let Topology::Progressive { adapters } = &mut self.topology {
            adapters.push(lateral);
        }
        Ok(())
    }

    /// Freeze everything and add a controller set for the next task.
    /// Controllers start at the identity with the base biases, so the new
    /// route initially reproduces the base network's features.
    pub fn add_controllers(&mut self, classes: &[u32]) -> Result<()> {
        match self.topology {
            Topology::Single => self.topology = Topology::Controlled { tasks: Vec::new() },
            Topology::Controlled { .. } => {}
            Topology::Progressive { .. } => {
                return Err(Error::Protocol("cannot mix controllers with progressive columns".into()))
            }
        }
        check_new_classes(&[], classes)?;
        self.freeze_all();
        let base: Vec<Stage> = self.columns[0].conv_stages().cloned().collect();
        let mut stages = Vec::with_capacity(base.len());
        for s in &base {
            let mut eye = vec![0.0; s.cout * s.cout];
            for i in 0..s.cout {
                eye[i * s.cout + i] = 1.0;
            }
            let c = self.store.push(BlockRole::Controller, eye);
            let bias = self.store.slice(s.b).to_vec();
            let b = self.store.push(BlockRole::ControllerBias, bias);
            stages.push((c, b));
        }
        let mut head = vec![self.head_channel(0)];
        for &c in classes {
            head.push(self.head_channel(c));
        }
        if let Topology::Controlled { tasks } = &mut self.topology {
            tasks.push(Controllers { stages, head });
        }
        Ok(())
    }

    // ---- forward --------------------------------------------------------

    fn check_input(&self, image: &Image) -> Result<()> {
        if image.height != self.arch.height || image.width != self.arch.width {
            return Err(Error::Shape(format!(
                "image {}x{} does not match model input {}x{}",
                image.height, image.width, self.arch.height, self.arch.width
            )));
        }
        Ok(())
    }

    /// Record a forward pass for task `route` (1-based).
    pub fn trace(&self, image: &Image, route: usize) -> Result<Trace<'_>> {
        self.check_input(image)?;
        let route = self.clamp_route(route);
        let mut tape = Tape::new(&self.store);
        let x = tape.input(Tensor::from_image(image));
        let out = match &self.topology {
            Topology::Single => self.column_pass(&mut tape, 0, x, &[], None),
            Topology::Progressive { adapters } => {
                let mut lateral: Vec<Vec<Var>> = Vec::with_capacity(route);
                for j in 0..route - 1 {
                    let o = self.column_pass(&mut tape, j, x, &lateral, Some(&adapters[j]));
                    lateral.push(o.taps);
                }
                self.column_pass(&mut tape, route - 1, x, &lateral, Some(&adapters[route - 1]))
            }
            Topology::Controlled { tasks } => {
                if route == 1 {
                    self.column_pass(&mut tape, 0, x, &[], None)
                } else {
                    self.controlled_pass(&mut tape, x, &tasks[route - 2])
                }
            }
        };
        let classes = self.head_classes(route);
        Ok(Trace {
            tape,
            logits: out.logits,
            taps: out.taps,
            stages: out.stages,
            classes,
        })
    }

    fn column_pass(
        &self,
        tape: &mut Tape<'_>,
        c: usize,
        x: Var,
        lateral: &[Vec<Var>],
        adapters: Option<&Vec<Vec<usize>>>,
    ) -> PassOut {
        let col = &self.columns[c];
        let mut stages = Vec::new();
        let mut taps = Vec::with_capacity(self.arch.levels + 1);
        let mut input = x;
        for (l, s) in col.tap_stages().enumerate() {
            if l > 0 {
                input = tape.maxpool(taps[l - 1]);
            }
            stages.push(StageInput {
                weights: vec![s.w],
                input,
                k: 3,
            });
            let mut pre = tape.conv(input, s.w, Some(s.b), s.cout, 3);
            for (j, lat) in lateral.iter().enumerate() {
                let a = adapters.expect("adapters for lateral input")[j][l];
                let side = tape.conv(lat[l], a, None, s.cout, 1);
                pre = tape.add(pre, side);
            }
            taps.push(tape.relu(pre));
        }
        let logits = self.decode(tape, col, &taps, &mut stages, |tape, s, inp| {
            let pre = tape.conv(inp, s.w, Some(s.b), s.cout, 3);
            tape.relu(pre)
        }, &col.head);
        PassOut {
            logits,
            taps,
            stages,
        }
    }

    fn controlled_pass(&self, tape: &mut Tape<'_>, x: Var, ctl: &Controllers) -> PassOut {
        let base = &self.columns[0];
        let mut stages = Vec::new();
        let mut taps = Vec::with_capacity(self.arch.levels + 1);
        let mut input = x;
        let levels = self.arch.levels;
        for (l, s) in base.tap_stages().enumerate() {
            if l > 0 {
                input = tape.maxpool(taps[l - 1]);
            }
            let (cm, cb) = ctl.stages[l];
            let filt = tape.conv(input, s.w, None, s.cout, 3);
            stages.push(StageInput {
                weights: vec![cm],
                input: filt,
                k: 1,
            });
            let pre = tape.conv(filt, cm, Some(cb), s.cout, 1);
            taps.push(tape.relu(pre));
        }
        let dec_ctl = &ctl.stages[levels + 1..];
        let mut prev = taps[levels];
        for l in (0..levels).rev() {
            let s = &base.dec[l];
            let up = tape.upsample(prev);
            let cat = tape.concat(up, taps[l]);
            let filt = tape.conv(cat, s.w, None, s.cout, 3);
            let (cm, cb) = dec_ctl[l];
            stages.push(StageInput {
                weights: vec![cm],
                input: filt,
                k: 1,
            });
            let pre = tape.conv(filt, cm, Some(cb), s.cout, 1);
            prev = tape.relu(pre);
        }
        let logits = self.head_pass(tape, prev, &ctl.head, &mut stages);
        PassOut {
            logits,
            taps,
            stages,
        }
    }

    fn decode(
        &self,
        tape: &mut Tape<'_>,
        col: &Column,
        taps: &[Var],
        stages: &mut Vec<StageInput>,
        stage_fn: impl Fn(&mut Tape<'_>, &Stage, Var) -> Var,
        head: &[HeadChannel],
    ) -> Var {
        let levels = self.arch.levels;
        let mut prev = taps[levels];
        for l in (0..levels).rev() {
            let s = &col.dec[l];
            let up = tape.upsample(prev);
            let cat = tape.concat(up, taps[l]);
            stages.push(StageInput {
                weights: vec![s.w],
                input: cat,
                k: 3,
            });
            prev = stage_fn(tape, s, cat);
        }
        self.head_pass(tape, prev, head, stages)
    }

    fn head_pass(&self, tape: &mut Tape<'_>, x: Var, head: &[HeadChannel], stages: &mut Vec<StageInput>) -> Var {
        stages.push(StageInput {
            weights: head.iter().map(|h| h.w).collect(),
            input: x,
            k: 1,
        });
        tape.head(x, head.iter().map(|h| (h.w, h.b)).collect())
    }

    /// Logits `C×H×W` for task `route`; channel order as in
    /// [`Segmenter::head_classes`].
    pub fn forward(&self, image: &Image, route: usize) -> Result<Tensor> {
        Ok(self.trace(image, route)?.logits().clone())
    }

    /// Activations at the requested taps (see [`ArchConfig::depth_taps`]).
    pub fn features(&self, image: &Image, route: usize, taps: &[usize]) -> Result<Vec<Tensor>> {
        if let Some(&bad) = taps.iter().find(|&&t| t > self.arch.levels) {
            return Err(Error::Config(format!(
                "unknown tap {bad}; model exposes taps 0..={}",
                self.arch.levels
            )));
        }
        if taps.is_empty() {
            return Ok(Vec::new());
        }
        let tr = self.trace(image, route)?;
        Ok(taps.iter().map(|&t| tr.tap(t).clone()).collect())
    }

    /// Mean loss and mean parameter gradient over `images`, where
    /// `per_image` maps `(index, logits)` to `(loss, dloss/dlogits)`.
    pub fn grad_params<F>(&self, images: &[&Image], route: usize, mut per_image: F) -> Result<(f64, Vec<f64>)>
    where
        F: FnMut(usize, &Tensor) -> (f64, Tensor),
    {
        let mut total = 0.0;
        let mut grad = vec![0.0; self.num_params()];
        if images.is_empty() {
            return Ok((0.0, grad));
        }
        for (i, img) in images.iter().enumerate() {
            let tr = self.trace(img, route)?;
            let (l, d) = per_image(i, tr.logits());
            if !l.is_finite() {
                return Err(Error::Numeric(format!("non-finite loss {l} on item {i}")));
            }
            total += l;
            let g = tr.backward(Some(d), Vec::new());
            for (a, b) in grad.iter_mut().zip(&g) {
                *a += b;
            }
        }
        let n = images.len() as f64;
        for g in &mut grad {
            *g /= n;
        }
        Ok((total / n, grad))
    }

    /// Scores over background plus every registered class, for whole-class
    /// evaluation. A single head returns its logits. Multi-route models
    /// return per-route log-probabilities: each class takes the newest
    /// route that owns it, background takes the minimum over routes.
    pub fn all_class_scores(&self, image: &Image) -> Result<(Tensor, Vec<u32>)> {
        if self.is_single() {
            let tr = self.trace(image, 1)?;
            return Ok((tr.logits().clone(), tr.classes().to_vec()));
        }
        let classes: Vec<u32> = std::iter::once(0).chain(self.registered_classes()).collect();
        let mut out = Tensor::zeros(classes.len(), self.arch.height, self.arch.width);
        let n = out.plane_len();
        out.plane_mut(0).fill(f64::INFINITY);
        for r in 1..=self.n_routes() {
            let tr = self.trace(image, r)?;
            let lp = loss::log_softmax(tr.logits());
            for (ch, &cls) in tr.classes().iter().enumerate() {
                let dst = classes.iter().position(|&c| c == cls).expect("registered");
                let src = &lp.data[ch * n..(ch + 1) * n];
                if cls == 0 {
                    for (d, s) in out.plane_mut(0).iter_mut().zip(src) {
                        *d = d.min(*s);
                    }
                } else {
                    out.plane_mut(dst).copy_from_slice(src);
                }
            }
        }
        Ok((out, classes))
    }

    /// SHA-256 over the values of the given blocks; used to check that
    /// frozen parameters stay byte-identical.
    pub fn blocks_digest(&self, blocks: impl IntoIterator<Item = usize>) -> String {
        let mut h = Sha256::new();
        for b in blocks {
            for v in self.store.slice(b) {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Digest of every frozen block.
    pub fn frozen_digest(&self) -> String {
        let frozen: Vec<usize> = (0..self.store.blocks().len())
            .filter(|&b| self.store.is_frozen(b))
            .collect();
        self.blocks_digest(frozen)
    }
}

struct PassOut {
    logits: Var,
    taps: Vec<Var>,
    stages: Vec<StageInput>,
}

fn check_new_classes(existing: &[u32], new: &[u32]) -> Result<()> {
    for (i, &c) in new.iter().enumerate() {
        if c == 0 || existing.contains(&c) || new[..i].contains(&c) {
            return Err(Error::Registration(c));
        }
        if c >= 255 {
            return Err(Error::Config(format!("class id {c} exceeds the 8-bit label range")));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
