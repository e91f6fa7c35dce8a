//! Replay memory and replay-provenance accounting.
//!
//! A [`ReplayBuffer`] holds at most `capacity` past samples, filled either
//! by reservoir sampling or by gradient-based sample selection (GSS). Every
//! time a past sample contributes to training, directly or through stored
//! outputs, the [`ReplayLedger`] records its identity so the data replay
//! ratio can be computed from distinct-sample counts.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap, Tensor};
use crate::metrics::{csv_err, parse_field};
use crate::scenarios::imageio;

pub const DEFAULT_CAPACITY: usize = 32;
/// Buffer gradients compared against a GSS candidate.
pub const GSS_SUBSET: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InsertionPolicy {
    Reservoir,
    Gss,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferEntry {
    pub image: Image,
    pub label: LabelMap,
    /// Stream position (1-based) of the task the sample came from.
    pub source_task: usize,
    /// Index of the sample within its task's training split.
    pub sample_index: usize,
    /// Logits at insertion time, over `stored_classes` channels.
    pub stored_logits: Option<Tensor>,
    /// Softmax output at insertion time, over `stored_classes` channels.
    pub stored_output: Option<Tensor>,
    pub stored_classes: Vec<u32>,
    /// GSS diversity score; 0 under reservoir insertion.
    pub score: f64,
}

impl BufferEntry {
    pub fn new(image: Image, label: LabelMap, source_task: usize, sample_index: usize) -> Self {
        Self {
            image,
            label,
            source_task,
            sample_index,
            stored_logits: None,
            stored_output: None,
            stored_classes: Vec::new(),
            score: 0.0,
        }
    }

    pub fn key(&self) -> (usize, usize) {
        (self.source_task, self.sample_index)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub entries: Vec<BufferEntry>,
    pub policy: InsertionPolicy,
}

/// Cosine similarity; 0 when either vector has zero norm.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let (mut ab, mut aa, mut bb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    if aa == 0.0 || bb == 0.0 {
        return 0.0;
    }
    ab / (aa.sqrt() * bb.sqrt())
}

impl ReplayBuffer {
    pub fn new(capacity: usize, policy: InsertionPolicy) -> Self {
        Self {
            capacity,
            entries: Vec::with_capacity(capacity),
            policy,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    /// Reservoir sampling; `stream_index` is the 1-based count of samples
    /// offered so far, this one included. Returns the slot written, if any.
    pub fn reservoir_insert<R: Rng>(&mut self, entry: BufferEntry, stream_index: usize, rng: &mut R) -> Option<usize> {
        if self.capacity == 0 {
            return None;
        }
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Some(self.entries.len() - 1);
        }
        let j = rng.random_range(0..stream_index.max(1));
        if j < self.capacity {
            self.entries[j] = entry;
            Some(j)
        } else {
            None
        }
    }

    /// Indices of the stored entries whose gradients score a GSS candidate.
    pub fn gss_subset<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let k = GSS_SUBSET.min(self.entries.len());
        let mut idx = index::sample(rng, self.entries.len(), k).into_vec();
        idx.sort_unstable();
        idx
    }

    /// Greedy GSS insertion. The candidate's score is its maximum cosine
    /// similarity to `subset_grads`. A full buffer picks a victim with
    /// probability proportional to the stored (positive part of) scores and
    /// swaps it out only when the candidate scores lower. Returns the slot
    /// written, if any.
    pub fn gss_insert<R: Rng>(
        &mut self,
        mut entry: BufferEntry,
        grad: &[f64],
        subset_grads: &[Vec<f64>],
        rng: &mut R,
    ) -> Result<Option<usize>> {
        if self.capacity == 0 {
            return Ok(None);
        }
        if let Some(bad) = subset_grads.iter().find(|g| g.len() != grad.len()) {
            return Err(Error::Shape(format!(
                "candidate gradient has length {}, buffer gradient {}",
                grad.len(),
                bad.len()
            )));
        }
        let score = subset_grads
            .iter()
            .map(|g| cosine(grad, g))
            .fold(None, |m: Option<f64>, c| Some(m.map_or(c, |m| m.max(c))))
            .unwrap_or(0.0);
        entry.score = score;
        if self.entries.len() < self.capacity {
            self.entries.push(entry);
            return Ok(Some(self.entries.len() - 1));
        }
        let weights: Vec<f64> = self.entries.iter().map(|e| e.score.max(0.0)).collect();
        let total: f64 = weights.iter().sum();
        let victim = if total > 0.0 {
            let mut u = rng.random_range(0.0..total);
            let mut pick = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                if u < *w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        } else {
            rng.random_range(0..self.entries.len())
        };
        if score < self.entries[victim].score {
            self.entries[victim] = entry;
            Ok(Some(victim))
        } else {
            Ok(None)
        }
    }

    /// Draw `k` entries uniformly without replacement (capped at the buffer
    /// size) and record their provenance. Returns indices into `entries`;
    /// empty when the buffer is empty.
    pub fn sample_batch<R: Rng>(&self, k: usize, rng: &mut R, ledger: &mut ReplayLedger) -> Vec<usize> {
        let k = k.min(self.entries.len());
        if k == 0 {
            return Vec::new();
        }
        let idx = index::sample(rng, self.entries.len(), k).into_vec();
        for &i in &idx {
            let e = &self.entries[i];
            ledger.record(e.source_task, e.sample_index, true);
        }
        idx
    }

    /// Write every entry as `entry_NNN.csb` plus `entry_NNN_label.png`, and
    /// an `index.csv` with provenance and scores.
    pub fn export(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let index_path = dir.join("index.csv");
        let mut w = csv::Writer::from_path(&index_path).map_err(|e| csv_err(&index_path, e))?;
        w.write_record(["entry", "source_task", "sample_index", "score", "has_logits", "has_output"])
            .map_err(|e| csv_err(&index_path, e))?;
        for (k, e) in self.entries.iter().enumerate() {
            imageio::write_raw(&dir.join(format!("entry_{k:03}.csb")), &e.image)?;
            imageio::write_label(&dir.join(format!("entry_{k:03}_label.png")), &e.label)?;
            w.write_record([
                k.to_string(),
                e.source_task.to_string(),
                e.sample_index.to_string(),
                e.score.to_string(),
                e.stored_logits.is_some().to_string(),
                e.stored_output.is_some().to_string(),
            ])
            .map_err(|e| csv_err(&index_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&index_path, e))
    }
}

/// Running record of which past training samples were used to produce
/// replay information, per source task.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayLedger {
    used: Vec<BTreeSet<usize>>,
    n_train: Vec<usize>,
    raw: bool,
}

impl ReplayLedger {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register task `t` (1-based, in stream order) with its training size.
    pub fn register_task(&mut self, t: usize, n_train: usize) {
        if self.n_train.len() < t {
            self.n_train.resize(t, 0);
            self.used.resize(t, BTreeSet::new());
        }
        self.n_train[t - 1] = n_train;
    }

    /// Mark sample `index` of task `t` as used; `raw` when the image itself
    /// is fed to the model again.
    pub fn record(&mut self, t: usize, index: usize, raw: bool) {
        if self.used.len() < t {
            self.used.resize(t, BTreeSet::new());
            self.n_train.resize(t, 0);
        }
        self.used[t - 1].insert(index);
        self.raw |= raw;
    }

    pub fn snapshot(&self) -> ReplayAccounting {
        ReplayAccounting {
            n_replay: self.used.iter().map(BTreeSet::len).collect(),
            n_train: self.n_train.clone(),
            raw_flag: self.raw,
        }
    }
}

/// Inputs of the data replay ratio: distinct replayed samples and training
/// set size per task, plus whether raw images were replayed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayAccounting {
    pub n_replay: Vec<usize>,
    pub n_train: Vec<usize>,
    pub raw_flag: bool,
}

/// Free-function form of [`ReplayLedger::snapshot`].
pub fn accounting_snapshot(ledger: &ReplayLedger) -> ReplayAccounting {
    ledger.snapshot()
}

impl ReplayAccounting {
    /// CSV with header `task,n_replay,n_train,raw`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        w.write_record(["task", "n_replay", "n_train", "raw"]).map_err(|e| csv_err(path, e))?;
        for (k, (r, n)) in self.n_replay.iter().zip(&self.n_train).enumerate() {
            w.write_record([(k + 1).to_string(), r.to_string(), n.to_string(), self.raw_flag.to_string()])
                .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut acc = ReplayAccounting::default();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            acc.n_replay.push(parse_field(path, &rec, 1)?);
            acc.n_train.push(parse_field(path, &rec, 2)?);
            acc.raw_flag = parse_field(path, &rec, 3)?;
        }
        Ok(acc)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeding;

    fn entry(t: usize, i: usize) -> BufferEntry {
        BufferEntry::new(Image::zeros(2, 2), LabelMap::zeros(2, 2), t, i)
    }

    #[test]
    fn reservoir_fill_phase_keeps_everything() {
        let mut b = ReplayBuffer::new(32, InsertionPolicy::Reservoir);
        let mut rng = seeding::stream(0, "t", 0);
        for i in 0..32 {
            b.reservoir_insert(entry(1, i), i + 1, &mut rng);
        }
        assert_eq!(b.len(), 32);
        assert!(b.entries.iter().enumerate().all(|(i, e)| e.sample_index == i));
        for i in 32..500 {
            b.reservoir_insert(entry(1, i), i + 1, &mut rng);
            assert!(b.len() <= 32);
        }
    }

    #[test]
    fn reservoir_capacity_one_keeps_second_half_the_time() {
        let mut rng = seeding::stream(1, "t", 0);
        let trials = 10_000;
        let mut kept = 0;
        for _ in 0..trials {
            let mut b = ReplayBuffer::new(1, InsertionPolicy::Reservoir);
            b.reservoir_insert(entry(1, 0), 1, &mut rng);
            b.reservoir_insert(entry(1, 1), 2, &mut rng);
            kept += (b.entries[0].sample_index == 1) as usize;
        }
        let p = kept as f64 / trials as f64;
        assert!((p - 0.5).abs() < 0.05, "{p}");
    }

    #[test]
    fn reservoir_inclusion_probability_is_capacity_over_n() {
        let mut rng = seeding::stream(2, "t", 0);
        let (cap, n, trials) = (4, 20, 5000);
        let mut hits = vec![0usize; n];
        for _ in 0..trials {
            let mut b = ReplayBuffer::new(cap, InsertionPolicy::Reservoir);
            for i in 0..n {
                b.reservoir_insert(entry(1, i), i + 1, &mut rng);
            }
            for e in &b.entries {
                hits[e.sample_index] += 1;
            }
        }
        for h in hits {
            let p = h as f64 / trials as f64;
            assert!((p - 0.2).abs() < 0.03, "{p}");
        }
    }

    #[test]
    fn cosine_examples() {
        assert!((cosine(&[1.0, 0.0], &[1.0, 1.0]) - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn gss_empty_buffer_always_inserts() {
        let mut b = ReplayBuffer::new(2, InsertionPolicy::Gss);
        let mut rng = seeding::stream(3, "t", 0);
        assert_eq!(b.gss_insert(entry(1, 0), &[1.0, 0.0], &[], &mut rng).unwrap(), Some(0));
        assert_eq!(b.entries[0].score, 0.0);
        assert_eq!(b.gss_insert(entry(1, 1), &[1.0, 0.0], &[vec![1.0, 1.0]], &mut rng).unwrap(), Some(1));
        assert!((b.entries[1].score - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-12);
    }

    #[test]
    fn gss_prefers_orthogonal_candidate() {
        let mut b = ReplayBuffer::new(3, InsertionPolicy::Gss);
        let mut rng = seeding::stream(4, "t", 0);
        let g = vec![1.0, 0.0];
        b.gss_insert(entry(1, 0), &g, &[], &mut rng).unwrap();
        for i in 1..3 {
            b.gss_insert(entry(1, i), &g, &[g.clone()], &mut rng).unwrap();
        }
        // entries 1 and 2 have score 1; entry 0 score 0 is never drawn
        let accepted = b
            .gss_insert(entry(1, 9), &[0.0, 1.0], &[g.clone(), g.clone()], &mut rng)
            .unwrap();
        assert!(matches!(accepted, Some(1) | Some(2)));
        assert_eq!(b.len(), 3);
        assert!(b.entries.iter().any(|e| e.sample_index == 9));
        assert!(b.gss_insert(entry(1, 10), &[1.0], &[g], &mut rng).is_err());
    }

    #[test]
    fn sample_batch_bounds_and_uniformity() {
        let mut b = ReplayBuffer::new(4, InsertionPolicy::Reservoir);
        let mut rng = seeding::stream(5, "t", 0);
        for i in 0..4 {
            b.reservoir_insert(entry(1, i), i + 1, &mut rng);
        }
        let mut ledger = ReplayLedger::new();
        assert!(b.sample_batch(0, &mut rng, &mut ledger).is_empty());
        let mut all = b.sample_batch(10, &mut rng, &mut ledger);
        all.sort_unstable();
        assert_eq!(all, vec![0, 1, 2, 3]);
        let mut counts = [0usize; 4];
        let draws = 10_000;
        for _ in 0..draws {
            counts[b.sample_batch(1, &mut rng, &mut ledger)[0]] += 1;
        }
        for c in counts {
            assert!((c as f64 / draws as f64 - 0.25).abs() < 0.02);
        }
        let empty = ReplayBuffer::new(4, InsertionPolicy::Reservoir);
        assert!(empty.sample_batch(3, &mut rng, &mut ledger).is_empty());
    }

    #[test]
    fn ledger_counts_distinct_samples() {
        let mut l = ReplayLedger::new();
        l.register_task(1, 100);
        l.register_task(2, 100);
        assert_eq!(l.snapshot().n_replay, vec![0, 0]);
        for _ in 0..3 {
            l.record(1, 7, false);
        }
        l.record(1, 8, false);
        let s = accounting_snapshot(&l);
        assert_eq!(s.n_replay, vec![2, 0]);
        assert!(!s.raw_flag);
        l.record(2, 1, true);
        assert!(l.snapshot().raw_flag);
    }

    #[test]
    fn accounting_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("replay.csv");
        let acc = ReplayAccounting {
            n_replay: vec![10, 5, 0],
            n_train: vec![100, 100, 90],
            raw_flag: true,
        };
        acc.write_csv(&p).unwrap();
        assert_eq!(ReplayAccounting::read_csv(&p).unwrap(), acc);
    }

    #[test]
    fn export_writes_readable_entries() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ReplayBuffer::new(2, InsertionPolicy::Reservoir);
        let mut rng = seeding::stream(6, "t", 0);
        let img = Image::from_vec(2, 2, vec![0.5, -1.0, 2.0, 0.0]).unwrap();
        let lbl = LabelMap::from_vec(2, 2, vec![0, 1, 1, 0]).unwrap();
        b.reservoir_insert(BufferEntry::new(img.clone(), lbl.clone(), 1, 3), 1, &mut rng);
        b.export(dir.path()).unwrap();
        assert_eq!(imageio::read_image(&dir.path().join("entry_000.csb")).unwrap(), img);
        assert_eq!(imageio::read_label(&dir.path().join("entry_000_label.png")).unwrap(), lbl);
    }
}
