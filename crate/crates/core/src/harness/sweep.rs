//! Task-order and buffer-size sweeps.

use std::path::PathBuf;

use super::{run_experiment, ExperimentConfig, ExperimentRecord, TaskOrder};
use crate::error::{Error, Result};
use crate::metrics::{csv_err, spearman, MeanStd};
use crate::scenarios::random_orders;
use crate::strategies;

/// `OrderA`, `OrderB`, … for the first 26 orders, then `Order27`, ….
pub fn order_label(k: usize) -> String {
    if k < 26 {
        format!("Order{}", (b'A' + k as u8) as char)
    } else {
        format!("Order{}", k + 1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OrderSweep {
    pub labels: Vec<String>,
    pub orders: Vec<Vec<usize>>,
    pub records: Vec<ExperimentRecord>,
    /// Seed-mean A-Dice and BWTR of each order.
    pub a_dice: Vec<f64>,
    pub bwtr: Vec<f64>,
    /// Spread across orders of the per-order means.
    pub a_dice_across: MeanStd,
    pub bwtr_across: MeanStd,
    pub csv: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BufferSweep {
    pub sizes: Vec<usize>,
    pub records: Vec<ExperimentRecord>,
    /// Seed-mean A-Dice per size.
    pub a_dice: Vec<f64>,
    /// Rank correlation of size against A-Dice; `None` when A-Dice is constant.
    pub spearman: Option<f64>,
    pub csv: PathBuf,
}

fn mean_of(r: &ExperimentRecord, f: impl Fn(&crate::metrics::MetricReport) -> Option<MeanStd>) -> Result<f64> {
    f(&r.report)
        .map(|m| m.mean)
        .ok_or_else(|| Error::Aggregation("metric undefined for a swept run".into()))
}

fn write_csv(path: &PathBuf, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(header).map_err(|e| csv_err(path, e))?;
    for r in rows {
        w.write_record(r).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Run `config` under `n_orders` seeded task permutations. With
/// `include_identity` the first order is the generated order.
pub fn sweep_order(config: &ExperimentConfig, n_orders: usize, seed: u64, include_identity: bool) -> Result<OrderSweep> {
    config.validate()?;
    if n_orders == 0 {
        return Err(Error::Config("order sweep needs at least one order".into()));
    }
    let n_tasks = config.scenario.build(config.seeds[0])?.n_tasks();
    if n_tasks < 2 {
        return Err(Error::Scenario("order sweep needs a stream of at least two tasks".into()));
    }
    let mut orders = random_orders(n_tasks, n_orders, seed);
    if include_identity {
        orders[0] = (1..=n_tasks).collect();
    }
    let mut records = Vec::with_capacity(n_orders);
    for o in &orders {
        let mut c = config.clone();
        c.order = Some(TaskOrder::Explicit(o.clone()));
        records.push(run_experiment(&c)?);
    }
    let labels: Vec<String> = (0..n_orders).map(order_label).collect();
    let a_dice = records.iter().map(|r| mean_of(r, |m| m.a_dice)).collect::<Result<Vec<_>>>()?;
    let bwtr = records.iter().map(|r| mean_of(r, |m| m.bwtr)).collect::<Result<Vec<_>>>()?;
    let a_dice_across = MeanStd::of(&a_dice).expect("nonempty");
    let bwtr_across = MeanStd::of(&bwtr).expect("nonempty");

    let mut rows: Vec<Vec<String>> = Vec::new();
    for (k, r) in records.iter().enumerate() {
        let a = r.report.a_dice.expect("checked above");
        let b = r.report.bwtr.expect("checked above");
        rows.push(vec![
            labels[k].clone(),
            orders[k].iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "),
            a.mean.to_string(),
            a.std.to_string(),
            b.mean.to_string(),
            b.std.to_string(),
        ]);
    }
    rows.push(vec![
        "across-orders".into(),
        String::new(),
        a_dice_across.mean.to_string(),
        a_dice_across.std.to_string(),
        bwtr_across.mean.to_string(),
        bwtr_across.std.to_string(),
    ]);
    let csv = config
        .out_dir
        .join(format!("sweep-order_{}_{}.csv", config.strategy.name, config.hash()?));
    write_csv(&csv, &["order", "sequence", "a_dice_mean", "a_dice_std", "bwtr_mean", "bwtr_std"], &rows)?;
    Ok(OrderSweep {
        labels,
        orders,
        records,
        a_dice,
        bwtr,
        a_dice_across,
        bwtr_across,
        csv,
    })
}

/// Run a replay strategy once per buffer capacity.
pub fn sweep_buffer(config: &ExperimentConfig, sizes: &[usize]) -> Result<BufferSweep> {
    config.validate()?;
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::Config("buffer sweep needs positive sizes".into()));
    }
    let probe = strategies::create(&config.strategy.name, &config.strategy.params, config.capacity)?;
    if !probe.uses_buffer() {
        return Err(Error::Config(format!(
            "strategy {} keeps no replay buffer; buffer sweeps need a replay strategy",
            config.strategy.name
        )));
    }
    let mut records = Vec::with_capacity(sizes.len());
    for &s in sizes {
        let mut c = config.clone();
        c.capacity = s;
        records.push(run_experiment(&c)?);
    }
    let a_dice = records.iter().map(|r| mean_of(r, |m| m.a_dice)).collect::<Result<Vec<_>>>()?;
    let xs: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let rho = spearman(&xs, &a_dice);
    let rows: Vec<Vec<String>> = sizes
        .iter()
        .zip(&records)
        .map(|(s, r)| {
            let a = r.report.a_dice.expect("A-Dice is always defined");
            vec![s.to_string(), a.mean.to_string(), a.std.to_string()]
        })
        .collect();
    let mut base = config.clone();
    base.capacity = 0;
    let csv = config
        .out_dir
        .join(format!("sweep-buffer_{}_{}.csv", config.strategy.name, base.hash()?));
    write_csv(&csv, &["capacity", "a_dice_mean", "a_dice_std"], &rows)?;
    Ok(BufferSweep {
        sizes: sizes.to_vec(),
        records,
        a_dice,
        spearman: rho,
        csv,
    })
}
