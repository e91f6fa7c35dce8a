//! Per-scenario summary tables.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use super::ExperimentRecord;
use crate::error::{Error, Result};
use crate::metrics::{MeanStd, MetricReport};
use crate::scenarios::ScenarioKind;
use crate::strategies::STRATEGY_NAMES;

/// Metric columns of a scenario's table, in display order.
pub fn report_columns(kind: ScenarioKind) -> &'static [&'static str] {
    match kind {
        ScenarioKind::DomainCl => &["A-Dice", "BWTR", "RMA", "E-FWT", "MPE", "DRR"],
        ScenarioKind::ClassCl => &["A-Dice", "BWTR", "RMA", "WCD", "MPE", "DRR"],
        ScenarioKind::OrganCl => &["A-Dice", "BWTR", "RMA", "MPE", "DRR"],
    }
}

fn column(report: &MetricReport, name: &str) -> Option<MeanStd> {
    match name {
        "A-Dice" => report.a_dice,
        "BWTR" => report.bwtr,
        "RMA" => report.rma,
        "E-FWT" => report.e_fwt,
        "WCD" => report.wcd,
        "MPE" => report.mpe,
        "DRR" => report.drr,
        _ => None,
    }
}

/// One table row: a strategy under one configuration, aggregated over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub scenario: ScenarioKind,
    pub strategy: String,
    pub config_hash: String,
    pub capacity: usize,
    /// Task order as space-separated original positions.
    pub order: String,
    pub seeds: usize,
    /// `(column, value)` in [`report_columns`] order.
    pub values: Vec<(&'static str, Option<MeanStd>)>,
    pub drr_raw: bool,
}

impl ReportRow {
    pub fn from_record(record: &ExperimentRecord) -> Self {
        let kind = record.scenario();
        let order = record
            .runs
            .first()
            .map(|r| r.order.iter().map(|o| o.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        Self {
            scenario: kind,
            strategy: record.config.strategy.name.clone(),
            config_hash: record.config_hash.clone(),
            capacity: record.config.capacity,
            order,
            seeds: record.runs.len(),
            values: report_columns(kind)
                .iter()
                .map(|&c| (c, column(&record.report, c)))
                .collect(),
            drr_raw: record.report.drr_raw,
        }
    }
}

fn header_lines(records: &[&ExperimentRecord]) -> String {
    let mut s = String::new();
    let mut budgets: Vec<String> = records
        .iter()
        .map(|r| {
            let c = &r.config;
            format!(
                "optimizer: sgd lr={} batch_size={} epochs_per_task={} | model: levels={} base_width={}",
                c.optimizer.lr, c.optimizer.batch_size, c.epochs, c.model.levels, c.model.base_width
            )
        })
        .collect();
    budgets.sort();
    budgets.dedup();
    for b in budgets {
        let _ = writeln!(s, "# {b}");
    }
    s
}

/// Write `report_<scenario>.csv` and `report_<scenario>.txt` under
/// `out_dir`. Records of different scenarios are an aggregation error
/// unless `allow_mixed`, in which case each scenario gets its own table.
pub fn emit_report(records: &[ExperimentRecord], out_dir: &Path, allow_mixed: bool) -> Result<Vec<PathBuf>> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records to report".into()));
    }
    let mut by_kind: BTreeMap<String, Vec<&ExperimentRecord>> = BTreeMap::new();
    for r in records {
        by_kind.entry(r.scenario().to_string()).or_default().push(r);
    }
    if by_kind.len() > 1 && !allow_mixed {
        return Err(Error::Aggregation(format!(
            "records span scenarios {}; pass the mixed flag to report them separately",
            by_kind.keys().cloned().collect::<Vec<_>>().join(", ")
        )));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut written = Vec::new();
    for (name, recs) in by_kind {
        let kind = recs[0].scenario();
        let mut rows: Vec<ReportRow> = recs.iter().map(|r| ReportRow::from_record(r)).collect();
        rows.sort_by_key(|r| {
            let rank = STRATEGY_NAMES.iter().position(|n| *n == r.strategy).unwrap_or(usize::MAX);
            (rank, r.capacity, r.order.clone(), r.config_hash.clone())
        });
        let cols = report_columns(kind);

        let csv_path = out_dir.join(format!("report_{name}.csv"));
        let mut w = csv::Writer::from_path(&csv_path).map_err(|e| crate::metrics::csv_err(&csv_path, e))?;
        let mut head = vec!["strategy".to_string(), "config_hash".into(), "capacity".into(), "order".into(), "seeds".into()];
        for c in cols {
            head.push(format!("{c}_mean"));
            head.push(format!("{c}_std"));
        }
        head.push("drr_raw".into());
        w.write_record(&head).map_err(|e| crate::metrics::csv_err(&csv_path, e))?;
        for row in &rows {
            let mut rec = vec![
                row.strategy.clone(),
                row.config_hash.clone(),
                row.capacity.to_string(),
                row.order.clone(),
                row.seeds.to_string(),
            ];
            for (_, v) in &row.values {
                match v {
                    Some(m) => {
                        rec.push(m.mean.to_string());
                        rec.push(m.std.to_string());
                    }
                    None => {
                        rec.push(String::new());
                        rec.push(String::new());
                    }
                }
            }
            rec.push(row.drr_raw.to_string());
            w.write_record(&rec).map_err(|e| crate::metrics::csv_err(&csv_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&csv_path, e))?;
        written.push(csv_path);

        let txt_path = out_dir.join(format!("report_{name}.txt"));
        let mut t = format!("# scenario: {name}\n");
        t.push_str(&header_lines(&recs));
        let _ = write!(t, "{:<16}", "strategy");
        for c in cols {
            let _ = write!(t, " {c:>15}");
        }
        t.push('\n');
        for row in &rows {
            let _ = write!(t, "{:<16}", row.strategy);
            for (c, v) in &row.values {
                let cell = match v {
                    Some(m) if *c == "DRR" && row.drr_raw => format!("{m}*"),
                    Some(m) => m.to_string(),
                    None => "-".into(),
                };
                let _ = write!(t, " {cell:>15}");
            }
            t.push('\n');
        }
        if rows.iter().any(|r| r.drr_raw) {
            t.push_str("* replays raw samples from previous tasks\n");
        }
        fs::write(&txt_path, t).map_err(|e| Error::io(&txt_path, e))?;
        written.push(txt_path);
    }
    Ok(written)
}
