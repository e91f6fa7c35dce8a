//! Manifest ingestion for externally prepared datasets.
//!
//! A manifest is a TOML tree. Paths are relative to the manifest's
//! directory; cases are split 60/15/25 in listed order.
//!
//! ```toml
//! scenario = "domain-cl"
//!
//! [[task]]
//! id = 1
//! label_set = [1]
//! distribution = "site-a"
//! cases = [
//!   ["a/img_000.png", "a/lbl_000.png"],
//!   ["a/img_001.csb", "a/lbl_001.png"],
//! ]
//! ```
//!
//! Each image is standardized to zero mean and unit variance. For
//! `class-cl`, label maps may carry every structure: the task's view keeps
//! only its `label_set` and the full map is retained for whole-class
//! evaluation.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use super::imageio::{read_image, read_label};
use super::{split, Sample, SampleId, ScenarioKind, Task, TaskStream};
use crate::error::{Error, Result};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    scenario: ScenarioKind,
    #[serde(rename = "task")]
    tasks: Vec<TaskEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TaskEntry {
    id: usize,
    label_set: Vec<u32>,
    distribution: Option<String>,
    cases: Vec<(PathBuf, PathBuf)>,
}

fn ingest_err(entry: impl Into<String>, reason: impl ToString) -> Error {
    Error::Ingestion {
        entry: entry.into(),
        reason: reason.to_string(),
    }
}

/// Build a validated task stream from a manifest file.
pub fn ingest_dataset(manifest_path: &Path) -> Result<TaskStream> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| ingest_err(manifest_path.display().to_string(), e))?;
    let manifest: Manifest = toml::from_str(&text).map_err(|e| ingest_err(manifest_path.display().to_string(), e))?;
    let root = manifest_path.parent().unwrap_or(Path::new("."));
    let kind = manifest.scenario;
    if manifest.tasks.is_empty() {
        return Err(ingest_err("manifest", "no [[task]] entries"));
    }

    let mut tasks = Vec::with_capacity(manifest.tasks.len());
    let mut full_label_set: Vec<u32> = Vec::new();
    let mut shape: Option<(usize, usize)> = None;
    for (pos, entry) in manifest.tasks.iter().enumerate() {
        let where_task = format!("task {}", entry.id);
        if entry.id != pos + 1 {
            return Err(ingest_err(where_task, format!("ids must be 1..T in order, expected {}", pos + 1)));
        }
        if entry.label_set.is_empty() || entry.label_set.iter().any(|&c| c == 0 || c >= 255) {
            return Err(ingest_err(where_task, "label_set must be nonempty class ids in 1..=254"));
        }
        for &c in &entry.label_set {
            if !full_label_set.contains(&c) {
                full_label_set.push(c);
            }
        }
        let mut samples = Vec::with_capacity(entry.cases.len());
        for (k, (img_rel, lbl_rel)) in entry.cases.iter().enumerate() {
            let where_case = format!("task {} case {} ({})", entry.id, k + 1, img_rel.display());
            let mut image = read_image(&root.join(img_rel)).map_err(|e| ingest_err(&where_case, e))?;
            let full = read_label(&root.join(lbl_rel)).map_err(|e| ingest_err(&where_case, e))?;
            if (image.height, image.width) != (full.height, full.width) {
                return Err(ingest_err(where_case, "image and label dimensions differ"));
            }
            match shape {
                None => shape = Some((image.height, image.width)),
                Some(s) if s != (image.height, image.width) => {
                    return Err(ingest_err(where_case, format!("expected {}x{} like the first case", s.0, s.1)))
                }
                _ => {}
            }
            image.standardize();
            let (label, full_label) = if kind == ScenarioKind::ClassCl {
                (full.restrict_to(&entry.label_set), Some(full))
            } else {
                if let Some(bad) = full.data.iter().find(|&&v| v != 0 && !entry.label_set.contains(&(v as u32))) {
                    return Err(ingest_err(where_case, format!("label {bad} outside declared set {:?}", entry.label_set)));
                }
                (full, None)
            };
            samples.push(Sample {
                id: SampleId { origin: entry.id, index: k },
                image,
                label,
                full_label,
            });
        }
        let (train, val, test) = split(samples).map_err(|e| ingest_err(format!("task {}", entry.id), e))?;
        tasks.push(Task {
            id: entry.id,
            origin: entry.id,
            label_set: entry.label_set.clone(),
            train,
            val,
            test,
            distribution_tag: entry
                .distribution
                .clone()
                .unwrap_or_else(|| if kind == ScenarioKind::ClassCl { "shared".into() } else { format!("task-{}", entry.id) }),
        });
    }
    if kind == ScenarioKind::ClassCl {
        // full maps may only use classes some task declares
        for t in &tasks {
            for s in t.train.iter().chain(&t.val).chain(&t.test) {
                let full = s.full_label.as_ref().expect("class-cl keeps full labels");
                if let Some(bad) = full.data.iter().find(|&&v| v != 0 && !full_label_set.contains(&(v as u32))) {
                    return Err(ingest_err(
                        format!("task {} case {}", t.id, s.id.index + 1),
                        format!("label {bad} is not declared by any task"),
                    ));
                }
            }
        }
    }
    full_label_set.sort_unstable();
    let stream = TaskStream {
        kind,
        tasks,
        full_label_set,
    };
    stream
        .check_laws()
        .map_err(|e| ingest_err(manifest_path.display().to_string(), e))?;
    Ok(stream)
}
