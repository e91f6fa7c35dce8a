//! Dice, the accuracy matrix, and the continual-learning summary metrics.
//!
//! Every metric is a pure function of an [`AccuracyMatrix`], a
//! [`ParamTrace`], a [`ReplayAccounting`], or per-case label maps. Ratios
//! divide by diagonal or reference Dice values; anything at or below
//! [`EPS_DIV`] is reported as [`Error::Degenerate`] rather than clamped.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::buffers::ReplayAccounting;
use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::scenarios::ScenarioKind;
pub use crate::segmodel::ParamTrace;

/// Guard for ratio denominators.
pub const EPS_DIV: f64 = 1e-6;

/// Dice overlap of `class` between two label maps. Both masks empty gives
/// 1, exactly one empty gives 0.
pub fn dice(pred: &LabelMap, truth: &LabelMap, class: u32) -> Result<f64> {
    pred.same_shape(truth, "dice")?;
    let c = class as u8;
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (ip, it) = (p == c, t == c);
        a += ip as usize;
        b += it as usize;
        both += (ip && it) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Mean over `classes` of the mean-over-cases Dice.
pub fn mean_class_dice(preds: &[LabelMap], truths: &[LabelMap], classes: &[u32]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} ground truths",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() || classes.is_empty() {
        return Err(Error::Shape("no cases or no classes to score".into()));
    }
    let mut total = 0.0;
    for &c in classes {
        let mut s = 0.0;
        for (p, t) in preds.iter().zip(truths) {
            s += dice(p, t, c)?;
        }
        total += s / preds.len() as f64;
    }
    Ok(total / classes.len() as f64)
}

/// `(T+1)×T` Dice grid: row `t` is the model after task `t` (row 0 is the
/// untrained model), column `i` is task `i`'s test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    n_tasks: usize,
    values: Vec<f64>,
}

impl AccuracyMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n_tasks = rows.first().map_or(0, |r| r.len());
        if n_tasks == 0 {
            return Err(Error::Shape("accuracy matrix needs at least one task".into()));
        }
        if rows.len() != n_tasks + 1 {
            return Err(Error::IncompleteMatrix(format!(
                "{} rows for {n_tasks} tasks (expected {})",
                rows.len(),
                n_tasks + 1
            )));
        }
        let mut values = Vec::with_capacity(rows.len() * n_tasks);
        for (t, r) in rows.iter().enumerate() {
            if r.len() != n_tasks {
                return Err(Error::IncompleteMatrix(format!("row {t} has {} entries", r.len())));
            }
            for (i, &v) in r.iter().enumerate() {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::Shape(format!("d[{t},{}] = {v} outside [0,1]", i + 1)));
                }
            }
            values.extend_from_slice(r);
        }
        Ok(Self { n_tasks, values })
    }

    pub fn n_tasks(&self) -> usize {
        self.n_tasks
    }

    /// `d_{t,i}` with `t ∈ 0..=T`, `i ∈ 1..=T`.
    pub fn get(&self, t: usize, i: usize) -> f64 {
        assert!(t <= self.n_tasks && (1..=self.n_tasks).contains(&i));
        self.values[t * self.n_tasks + i - 1]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.values[t * self.n_tasks..(t + 1) * self.n_tasks]
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::from_rows(
            (0..=self.n_tasks)
                .map(|t| self.row(t).iter().map(|v| v * s).collect())
                .collect(),
        )
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
        let mut header = vec!["after_task".to_string()];
        header.extend((1..=self.n_tasks).map(|i| format!("task_{i}")));
        w.write_record(&header).map_err(|e| csv_err(path, e))?;
        for t in 0..=self.n_tasks {
            let mut rec = vec![t.to_string()];
            rec.extend(self.row(t).iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
        let headers = r.headers().map_err(|e| csv_err(path, e))?.clone();
        if headers.get(0) != Some("after_task") {
            return Err(Error::Shape(format!("{}: first column must be after_task", path.display())));
        }
        let mut rows = Vec::new();
        for (k, rec) in r.records().enumerate() {
            let rec = rec.map_err(|e| csv_err(path, e))?;
            let t: usize = parse_field(path, &rec, 0)?;
            if t != k {
                return Err(Error::IncompleteMatrix(format!("row {k} labelled {t}")));
            }
            let row = (1..rec.len())
                .map(|j| parse_field::<f64>(path, &rec, j))
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Self::from_rows(rows)
    }
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

pub(crate) fn parse_field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, j: usize) -> Result<T> {
    let s = rec.get(j).unwrap_or_default();
    s.parse().map_err(|_| {
        Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::InvalidData, format!("bad field '{s}'")),
        )
    })
}

/// Single-task reference Dice `d_i^NC` for each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcReference {
    pub d_nc: Vec<f64>,
}

/// Average Dice of the final model over all tasks.
pub fn a_dice(m: &AccuracyMatrix) -> Result<f64> {
    let t = m.n_tasks();
    if t == 0 {
        return Err(Error::Shape("A-Dice needs T ≥ 1".into()));
    }
    Ok(m.row(t).iter().sum::<f64>() / t as f64)
}

fn need_two(m: &AccuracyMatrix, what: &str) -> Result<usize> {
    let t = m.n_tasks();
    if t < 2 {
        return Err(Error::Shape(format!("{what} needs T ≥ 2, got {t}")));
    }
    Ok(t)
}

/// Mean relative change of each earlier task's Dice between just after
/// learning it and after the final task.
pub fn bwtr(m: &AccuracyMatrix) -> Result<f64> {
    let t = need_two(m, "BWTR")?;
    let mut s = 0.0;
    for i in 1..t {
        let dii = m.get(i, i);
        if dii <= EPS_DIV {
            return Err(Error::Degenerate(format!("d[{i},{i}] = {dii}")));
        }
        s += (m.get(t, i) - dii) / dii;
    }
    Ok(s / (t - 1) as f64)
}

/// Mean ratio of newly learned task Dice to its single-task reference,
/// over tasks `2..=T`.
pub fn rma(m: &AccuracyMatrix, nc: &NcReference) -> Result<f64> {
    let t = need_two(m, "RMA")?;
    if nc.d_nc.len() != t {
        return Err(Error::Shape(format!("NC reference has {} tasks, matrix {t}", nc.d_nc.len())));
    }
    let mut s = 0.0;
    for i in 2..=t {
        let r = nc.d_nc[i - 1];
        if r <= EPS_DIV {
            return Err(Error::Degenerate(format!("d_{i}^NC = {r}")));
        }
        s += m.get(i, i) / r;
    }
    Ok(s / (t - 1) as f64)
}

/// Mean gain over the untrained model on every not-yet-seen task.
pub fn e_fwt(m: &AccuracyMatrix, scenario: ScenarioKind) -> Result<f64> {
    if scenario != ScenarioKind::DomainCl {
        return Err(Error::Scenario(format!("E-FWT is defined for domain-cl only, not {scenario}")));
    }
    let t = need_two(m, "E-FWT")?;
    let mut s = 0.0;
    for r in 1..t {
        for i in r + 1..=t {
            s += m.get(r, i) - m.get(0, i);
        }
    }
    Ok(2.0 * s / (t * (t - 1)) as f64)
}

/// Whole-class Dice: mean per-class Dice over every seen class, from
/// predictions made over all heads at once.
pub fn wcd(preds: &[LabelMap], full_truths: &[LabelMap], classes: &[u32], scenario: ScenarioKind) -> Result<f64> {
    if scenario != ScenarioKind::ClassCl {
        return Err(Error::Scenario(format!("WCD is defined for class-cl only, not {scenario}")));
    }
    mean_class_dice(preds, full_truths, classes)
}

/// Mean per-task parameter growth relative to the first task's model.
pub fn mpe(trace: &ParamTrace) -> Result<f64> {
    let c = &trace.per_task_counts;
    if c.len() < 2 {
        return Err(Error::Shape(format!("MPE needs T ≥ 2, got {}", c.len())));
    }
    if c[0] == 0 {
        return Err(Error::Degenerate("Param(θ_1) = 0".into()));
    }
    let base = c[0] as f64;
    let s: f64 = c.windows(2).map(|w| (w[1] as f64 - w[0] as f64) / base).sum();
    Ok(s / (c.len() - 1) as f64)
}

/// Mean fraction of each earlier task's training set that was used to
/// produce replay information, and whether raw images were replayed.
pub fn drr(acc: &ReplayAccounting) -> Result<(f64, bool)> {
    let t = acc.n_train.len();
    if t < 2 {
        return Err(Error::Shape(format!("DRR needs T ≥ 2, got {t}")));
    }
    if acc.n_replay.len() < t - 1 {
        return Err(Error::Shape("replay counts shorter than T-1".into()));
    }
    let mut s = 0.0;
    for k in 0..t - 1 {
        if acc.n_train[k] == 0 {
            return Err(Error::Degenerate(format!("N_{}^train = 0", k + 1)));
        }
        s += acc.n_replay[k] as f64 / acc.n_train[k] as f64;
    }
    Ok((s / (t - 1) as f64, acc.raw_flag))
}

/// Metric values of one run; `None` where the metric is undefined for the
/// scenario or stream length.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub a_dice: Option<f64>,
    pub bwtr: Option<f64>,
    pub rma: Option<f64>,
    pub e_fwt: Option<f64>,
    pub wcd: Option<f64>,
    pub mpe: Option<f64>,
    pub drr: Option<f64>,
    pub drr_raw: bool,
}

impl RunMetrics {
    /// Compute every metric the scenario defines. Metrics needing `T ≥ 2`
    /// are left undefined on single-task streams.
    pub fn compute(
        scenario: ScenarioKind,
        matrix: &AccuracyMatrix,
        nc: Option<&NcReference>,
        trace: &ParamTrace,
        replay: &ReplayAccounting,
        wcd: Option<f64>,
    ) -> Result<Self> {
        let multi = matrix.n_tasks() >= 2;
        let (drr_v, raw) = if multi { drr(replay)? } else { (0.0, replay.raw_flag) };
        Ok(Self {
            a_dice: Some(a_dice(matrix)?),
            bwtr: if multi { Some(bwtr(matrix)?) } else { None },
            rma: match (multi, nc) {
                (true, Some(nc)) => Some(rma(matrix, nc)?),
                _ => None,
            },
            e_fwt: if multi && scenario == ScenarioKind::DomainCl {
                Some(e_fwt(matrix, scenario)?)
            } else {
                None
            },
            wcd: if scenario == ScenarioKind::ClassCl { wcd } else { None },
            mpe: if multi { Some(mpe(trace)?) } else { None },
            drr: multi.then_some(drr_v),
            drr_raw: raw,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation. `None` for an empty slice.
    pub fn of(xs: &[f64]) -> Option<Self> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        Some(Self { mean, std: var.sqrt() })
    }
}

impl std::fmt::Display for MeanStd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.3} ± {:.3}", self.mean, self.std)
    }
}

/// Seed-aggregated metrics. A field is absent exactly when the metric is
/// undefined for the scenario.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub a_dice: Option<MeanStd>,
    pub bwtr: Option<MeanStd>,
    pub rma: Option<MeanStd>,
    pub e_fwt: Option<MeanStd>,
    pub wcd: Option<MeanStd>,
    pub mpe: Option<MeanStd>,
    pub drr: Option<MeanStd>,
    pub drr_raw: bool,
}

impl MetricReport {
    pub fn aggregate(runs: &[RunMetrics]) -> Self {
        fn col(runs: &[RunMetrics], f: impl Fn(&RunMetrics) -> Option<f64>) -> Option<MeanStd> {
            let v: Vec<f64> = runs.iter().filter_map(&f).collect();
            if v.len() == runs.len() {
                MeanStd::of(&v)
            } else {
                None
            }
        }
        Self {
            a_dice: col(runs, |r| r.a_dice),
            bwtr: col(runs, |r| r.bwtr),
            rma: col(runs, |r| r.rma),
            e_fwt: col(runs, |r| r.e_fwt),
            wcd: col(runs, |r| r.wcd),
            mpe: col(runs, |r| r.mpe),
            drr: col(runs, |r| r.drr),
            drr_raw: runs.iter().any(|r| r.drr_raw),
        }
    }
}

/// Spearman rank correlation with average ranks for ties. `None` when
/// either series is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let rx = ranks(x);
    let ry = ranks(y);
    pearson(&rx, &ry)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}
