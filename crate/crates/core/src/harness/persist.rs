//! On-disk layout of experiment artifacts:
//!
//! ```text
//! out_dir/<config-hash>/<seed>/matrix.csv
//!                              params.csv
//!                              replay.csv
//!                              nc.csv        (T ≥ 2)
//!                              wcd.csv       (class-cl)
//!                              metrics.json
//!                              config.snapshot
//!                              timing.csv
//! out_dir/nc-cache/<scenario-key>/<seed>.json
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::short_digest;
use super::{ExperimentConfig, ExperimentRecord, ModelSpec, ScenarioSpec, SeedRun};
use crate::buffers::ReplayAccounting;
use crate::error::{Error, Result};
use crate::metrics::{csv_err, parse_field, AccuracyMatrix, MetricReport, NcReference, RunMetrics};
use crate::segmodel::ParamTrace;

/// Files that enter the record digest, in digest order.
const DIGEST_FILES: [&str; 7] = [
    "config.snapshot",
    "matrix.csv",
    "params.csv",
    "replay.csv",
    "nc.csv",
    "wcd.csv",
    "metrics.json",
];

pub fn seed_dir(out_dir: &Path, hash: &str, seed: u64) -> PathBuf {
    out_dir.join(hash).join(seed.to_string())
}

fn write_str(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_rows(path: &Path, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(&r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_column<T: std::str::FromStr>(path: &Path, col: usize) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.records()
        .map(|rec| {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            parse_field(path, &rec, col)
        })
        .collect()
}

pub(crate) fn write_run(config: &ExperimentConfig, hash: &str, run: &SeedRun) -> Result<()> {
    let dir = seed_dir(&config.out_dir, hash, run.seed);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    // location-free, so a record digests identically wherever it is written
    let mut snapshot = config.clone();
    snapshot.out_dir = PathBuf::from(".");
    write_str(&dir.join("config.snapshot"), &snapshot.to_toml()?)?;
    run.matrix.write_csv(&dir.join("matrix.csv"))?;
    write_rows(
        &dir.join("params.csv"),
        &["task", "params"],
        run.params
            .per_task_counts
            .iter()
            .enumerate()
            .map(|(t, c)| vec![(t + 1).to_string(), c.to_string()]),
    )?;
    run.replay.write_csv(&dir.join("replay.csv"))?;
    if let Some(nc) = &run.nc {
        write_rows(
            &dir.join("nc.csv"),
            &["task", "d_nc"],
            nc.d_nc.iter().enumerate().map(|(t, d)| vec![(t + 1).to_string(), d.to_string()]),
        )?;
    }
    if let Some(w) = run.wcd {
        write_rows(&dir.join("wcd.csv"), &["wcd"], [vec![w.to_string()]])?;
    }
    write_str(&dir.join("metrics.json"), &serde_json::to_string_pretty(&run.metrics)?)?;
    write_rows(
        &dir.join("timing.csv"),
        &["task", "seconds"],
        run.task_seconds
            .iter()
            .enumerate()
            .map(|(t, s)| vec![(t + 1).to_string(), s.to_string()]),
    )
}

pub(crate) fn record_digest(record: &ExperimentRecord) -> Result<String> {
    let mut h = Sha256::new();
    for run in &record.runs {
        let dir = seed_dir(&record.config.out_dir, &record.config_hash, run.seed);
        h.update(run.seed.to_le_bytes());
        for name in DIGEST_FILES {
            let p = dir.join(name);
            if p.exists() {
                h.update(name.as_bytes());
                h.update(fs::read(&p).map_err(|e| Error::io(&p, e))?);
            }
        }
    }
    Ok(hex::encode(h.finalize()))
}

// ---- single-task reference cache ------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct NcCacheEntry {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Indexed by original task position.
    pub d_nc: Vec<f64>,
}

impl NcCacheEntry {
    pub fn check_budget(&self, config: &ExperimentConfig) -> Result<()> {
        if self.epochs != config.epochs
            || self.lr != config.optimizer.lr
            || self.batch_size != config.optimizer.batch_size
        {
            return Err(Error::Config(format!(
                "fairness: cached single-task references used epochs={} lr={} batch={}, \
                 this run uses epochs={} lr={} batch={}; rerun nc-ref",
                self.epochs, self.lr, self.batch_size, config.epochs, config.optimizer.lr, config.optimizer.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Serialize)]
struct NcKey<'a> {
    scenario: &'a ScenarioSpec,
    model: &'a ModelSpec,
}

/// Cache file of the single-task references for `seed`; shared by every
/// strategy run on the same scenario and model.
pub fn nc_cache_path(config: &ExperimentConfig, seed: u64) -> Result<PathBuf> {
    let key = toml::to_string(&NcKey {
        scenario: &config.scenario,
        model: &config.model,
    })
    .map_err(|e| Error::Config(e.to_string()))?;
    Ok(config
        .out_dir
        .join("nc-cache")
        .join(short_digest(key.as_bytes()))
        .join(format!("{seed}.json")))
}

pub(crate) fn read_nc_cache(config: &ExperimentConfig, seed: u64) -> Result<Option<NcCacheEntry>> {
    let p = nc_cache_path(config, seed)?;
    if !p.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    Ok(Some(serde_json::from_str(&text)?))
}

pub(crate) fn write_nc_cache(config: &ExperimentConfig, seed: u64, d_nc: &[f64]) -> Result<()> {
    let p = nc_cache_path(config, seed)?;
    let dir = p.parent().expect("cache file has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let entry = NcCacheEntry {
        epochs: config.epochs,
        lr: config.optimizer.lr,
        batch_size: config.optimizer.batch_size,
        d_nc: d_nc.to_vec(),
    };
    write_str(&p, &serde_json::to_string_pretty(&entry)?)
}

// ---- loading ----------------------------------------------------------------

/// A persisted experiment: metrics recomputed from the stored CSV
/// artifacts, next to the metrics the run wrote at the time.
#[derive(Clone, Debug, PartialEq)]
pub struct LoadedRun {
    pub record: ExperimentRecord,
    pub stored: Vec<RunMetrics>,
}

fn load_seed(dir: &Path) -> Result<(ExperimentConfig, SeedRun, RunMetrics)> {
    let snap = dir.join("config.snapshot");
    let text = fs::read_to_string(&snap).map_err(|e| Error::io(&snap, e))?;
    let config = ExperimentConfig::from_toml(&text)?;
    let seed: u64 = dir
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.parse().ok())
        .ok_or_else(|| Error::Config(format!("{} is not a seed directory", dir.display())))?;
    let matrix = AccuracyMatrix::read_csv(&dir.join("matrix.csv"))?;
    let params = ParamTrace {
        per_task_counts: read_column(&dir.join("params.csv"), 1)?,
    };
    let replay = ReplayAccounting::read_csv(&dir.join("replay.csv"))?;
    let nc_path = dir.join("nc.csv");
    let nc = if nc_path.exists() {
        Some(NcReference {
            d_nc: read_column(&nc_path, 1)?,
        })
    } else {
        None
    };
    let wcd_path = dir.join("wcd.csv");
    let wcd = if wcd_path.exists() {
        read_column::<f64>(&wcd_path, 0)?.first().copied()
    } else {
        None
    };
    let timing = dir.join("timing.csv");
    let task_seconds = if timing.exists() { read_column(&timing, 1)? } else { Vec::new() };
    let metrics = RunMetrics::compute(config.scenario.kind, &matrix, nc.as_ref(), &params, &replay, wcd)?;
    let mpath = dir.join("metrics.json");
    let stored: RunMetrics =
        serde_json::from_str(&fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?)?;
    let n = matrix.n_tasks();
    let order = match &config.order {
        Some(o) => o.resolve(n)?,
        None => (1..=n).collect(),
    };
    let run = SeedRun {
        seed,
        order,
        matrix,
        params,
        replay,
        nc,
        wcd,
        metrics,
        task_seconds,
        nc_cached: true,
    };
    Ok((config, run, stored))
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

/// Every experiment persisted under `out_dir`, with metrics recomputed from
/// the CSV artifacts.
pub fn load_records(out_dir: &Path) -> Result<Vec<LoadedRun>> {
    let mut out = Vec::new();
    for hash_dir in sorted_subdirs(out_dir)? {
        let mut seeds: Vec<PathBuf> = sorted_subdirs(&hash_dir)?
            .into_iter()
            .filter(|p| p.join("config.snapshot").exists())
            .collect();
        if seeds.is_empty() {
            continue;
        }
        seeds.sort_by_key(|p| p.file_name().and_then(|n| n.to_str()).and_then(|n| n.parse::<u64>().ok()));
        let mut config = None;
        let mut runs = Vec::new();
        let mut stored = Vec::new();
        for s in seeds {
            let (c, run, m) = load_seed(&s)?;
            config.get_or_insert(c);
            runs.push(run);
            stored.push(m);
        }
        let mut config = config.expect("at least one seed");
        config.out_dir = out_dir.to_path_buf();
        config.seeds = runs.iter().map(|r| r.seed).collect();
        let report = MetricReport::aggregate(&runs.iter().map(|r| r.metrics.clone()).collect::<Vec<_>>());
        let config_hash = hash_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or_default()
            .to_string();
        out.push(LoadedRun {
            record: ExperimentRecord {
                config,
                config_hash,
                runs,
                report,
            },
            stored,
        });
    }
    Ok(out)
}
