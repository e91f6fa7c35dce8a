//! Task streams for the three continual segmentation scenarios.
//!
//! | scenario  | label sets across tasks | image distribution across tasks |
//! |-----------|-------------------------|---------------------------------|
//! | domain-cl | identical               | pairwise distinct               |
//! | class-cl  | disjoint                | identical                       |
//! | organ-cl  | disjoint                | pairwise distinct               |
//!
//! Streams come from the seeded generators in [`synth`] or from an on-disk
//! manifest ([`manifest`]). Either way [`TaskStream::check_laws`] enforces
//! the table above.

pub mod imageio;
pub mod manifest;
pub mod synth;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Image, LabelMap};

pub use manifest::ingest_dataset;
pub use synth::{make_class_cl, make_domain_cl, make_organ_cl, SynthOptions};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ScenarioKind {
    #[serde(rename = "domain-cl")]
    DomainCl,
    #[serde(rename = "class-cl")]
    ClassCl,
    #[serde(rename = "organ-cl")]
    OrganCl,
}

impl ScenarioKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScenarioKind::DomainCl => "domain-cl",
            ScenarioKind::ClassCl => "class-cl",
            ScenarioKind::OrganCl => "organ-cl",
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "domain-cl" | "domaincl" | "domain" => Ok(ScenarioKind::DomainCl),
            "class-cl" | "classcl" | "class" => Ok(ScenarioKind::ClassCl),
            "organ-cl" | "organcl" | "organ" => Ok(ScenarioKind::OrganCl),
            _ => Err(Error::Config(format!("unknown scenario kind '{s}'"))),
        }
    }
}

/// Identity of a sample independent of task order: the task it was
/// generated for (before any permutation) and its index within that task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SampleId {
    pub origin: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: SampleId,
    pub image: Image,
    /// Labels visible to the task: only the task's classes, rest background.
    pub label: LabelMap,
    /// All structures annotated; kept for whole-class evaluation.
    pub full_label: Option<LabelMap>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Task {
    /// 1-based position in the stream.
    pub id: usize,
    /// Position in the stream as originally built; stable under permutation.
    pub origin: usize,
    pub label_set: Vec<u32>,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
    /// Opaque identifier of the image distribution.
    pub distribution_tag: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TaskStream {
    pub kind: ScenarioKind,
    pub tasks: Vec<Task>,
    pub full_label_set: Vec<u32>,
}

/// Train/val/test sizes for `n` cases: 60/15/25 with rounding, test takes
/// the remainder.
pub fn split_sizes(n: usize) -> Result<(usize, usize, usize)> {
    let train = (0.60 * n as f64).round() as usize;
    let val = (0.15 * n as f64).round() as usize;
    let test = n.saturating_sub(train + val);
    if train == 0 || val == 0 || test == 0 {
        return Err(Error::Config(format!(
            "{n} cases cannot fill a 60/15/25 split with nonempty parts"
        )));
    }
    Ok((train, val, test))
}

/// Split samples in order into train/val/test.
pub(crate) fn split(mut samples: Vec<Sample>) -> Result<(Vec<Sample>, Vec<Sample>, Vec<Sample>)> {
    let (tr, va, _) = split_sizes(samples.len())?;
    let test = samples.split_off(tr + va);
    let val = samples.split_off(tr);
    Ok((samples, val, test))
}

impl TaskStream {
    pub fn n_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Verify label-map contents, split disjointness, and the scenario's
    /// label-set / distribution laws.
    pub fn check_laws(&self) -> Result<()> {
        if self.tasks.is_empty() {
            return Err(Error::Scenario("stream has no tasks".into()));
        }
        for (k, t) in self.tasks.iter().enumerate() {
            if t.id != k + 1 {
                return Err(Error::Scenario(format!("task at position {} has id {}", k + 1, t.id)));
            }
            if t.label_set.is_empty() {
                return Err(Error::Scenario(format!("task {} has an empty label set", t.id)));
            }
            let mut ids = BTreeSet::new();
            for s in t.train.iter().chain(&t.val).chain(&t.test) {
                if !ids.insert(s.id) {
                    return Err(Error::Scenario(format!("task {}: sample {:?} appears twice", t.id, s.id)));
                }
                if let Some(bad) = s
                    .label
                    .data
                    .iter()
                    .find(|&&v| v != 0 && !t.label_set.contains(&(v as u32)))
                {
                    return Err(Error::Scenario(format!(
                        "task {}: label {bad} outside its label set {:?}",
                        t.id, t.label_set
                    )));
                }
            }
        }
        let n = self.tasks.len();
        for a in 0..n {
            for b in a + 1..n {
                let (ta, tb) = (&self.tasks[a], &self.tasks[b]);
                let sa: BTreeSet<u32> = ta.label_set.iter().copied().collect();
                let sb: BTreeSet<u32> = tb.label_set.iter().copied().collect();
                let same_labels = sa == sb;
                let disjoint = sa.is_disjoint(&sb);
                let same_dist = ta.distribution_tag == tb.distribution_tag;
                let ok = match self.kind {
                    ScenarioKind::DomainCl => same_labels && !same_dist,
                    ScenarioKind::ClassCl => disjoint && same_dist,
                    ScenarioKind::OrganCl => disjoint && !same_dist,
                };
                if !ok {
                    return Err(Error::Scenario(format!(
                        "{} law violated between tasks {} and {} (labels {:?} vs {:?}, distributions '{}' vs '{}')",
                        self.kind, ta.id, tb.id, ta.label_set, tb.label_set, ta.distribution_tag, tb.distribution_tag
                    )));
                }
            }
        }
        let union: BTreeSet<u32> = self.tasks.iter().flat_map(|t| t.label_set.iter().copied()).collect();
        let full: BTreeSet<u32> = self.full_label_set.iter().copied().collect();
        if union != full {
            return Err(Error::Scenario(format!(
                "full label set {:?} differs from the union of task label sets {:?}",
                self.full_label_set, union
            )));
        }
        Ok(())
    }

    /// Reorder tasks: position `k` receives the task currently at
    /// `order[k]` (1-based). Ids are reassigned to positions; contents are
    /// untouched.
    pub fn permute(&self, order: &[usize]) -> Result<TaskStream> {
        let n = self.tasks.len();
        let mut seen = vec![false; n];
        if order.len() != n {
            return Err(Error::Config(format!("order has {} entries for {n} tasks", order.len())));
        }
        for &o in order {
            if o == 0 || o > n || seen[o - 1] {
                return Err(Error::Config(format!("{order:?} is not a permutation of 1..={n}")));
            }
            seen[o - 1] = true;
        }
        let tasks = order
            .iter()
            .enumerate()
            .map(|(k, &o)| {
                let mut t = self.tasks[o - 1].clone();
                t.id = k + 1;
                t
            })
            .collect();
        Ok(TaskStream {
            kind: self.kind,
            tasks,
            full_label_set: self.full_label_set.clone(),
        })
    }
}

/// Free-function form of [`TaskStream::permute`].
pub fn permute(stream: &TaskStream, order: &[usize]) -> Result<TaskStream> {
    stream.permute(order)
}

/// `n` seeded random permutations of `1..=n_tasks`.
pub fn random_orders(n_tasks: usize, n: usize, seed: u64) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    (0..n as u64)
        .map(|k| {
            let mut rng = crate::seeding::stream(seed, "task-order", k);
            let mut o: Vec<usize> = (1..=n_tasks).collect();
            o.shuffle(&mut rng);
            o
        })
        .collect()
}

#[cfg(test)]
mod tests;
