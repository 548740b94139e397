//! Versioned CSV run reports. Column meanings are listed in `docs/report-schema.md`.

use std::io::{Read, Write};

use super::{Evaluation, LayerStats, RunConfig};
use crate::calibration::KPolicy;
use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 19] = [
    "schema_version",
    "config",
    "method",
    "phase",
    "mode",
    "layer",
    "k",
    "sdc",
    "vmc",
    "capk",
    "kept_ratio",
    "vrow_ratio",
    "k_tilde_over_k_mean",
    "k_tilde_over_k_std",
    "jaccard_topk_mean",
    "rel_l2_mean",
    "rel_l2_median",
    "cosine_mean",
    "rows",
];

const DELTA_COLUMNS: [&str; 3] = ["delta_kept_ratio", "delta_rel_l2_mean", "delta_cosine_mean"];

/// One CSV line: a layer of one configuration, or its `all` summary.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub config: String,
    pub method: String,
    pub phase: String,
    pub mode: String,
    /// Layer index, or `all`.
    pub layer: String,
    pub k: String,
    pub sdc: String,
    pub vmc: bool,
    pub capk: bool,
    /// Metrics in `CSV_COLUMNS` order from `kept_ratio`; `None` is written empty.
    pub metrics: [Option<f64>; 8],
    pub rows: u64,
}

impl ReportRow {
    pub fn kept_ratio(&self) -> Option<f64> {
        self.metrics[0]
    }

    pub fn vrow_ratio(&self) -> Option<f64> {
        self.metrics[1]
    }

    pub fn k_tilde_over_k_mean(&self) -> Option<f64> {
        self.metrics[2]
    }

    pub fn jaccard_topk_mean(&self) -> Option<f64> {
        self.metrics[4]
    }

    pub fn rel_l2_mean(&self) -> Option<f64> {
        self.metrics[5]
    }

    pub fn rel_l2_median(&self) -> Option<f64> {
        self.metrics[6]
    }

    pub fn cosine_mean(&self) -> Option<f64> {
        self.metrics[7]
    }

    fn record(&self) -> Vec<String> {
        let mut out = vec![
            SCHEMA_VERSION.to_string(),
            self.config.clone(),
            self.method.clone(),
            self.phase.clone(),
            self.mode.clone(),
            self.layer.clone(),
            self.k.clone(),
            self.sdc.clone(),
            self.vmc.to_string(),
            self.capk.to_string(),
        ];
        out.extend(self.metrics.iter().map(|m| fmt_metric(*m)));
        out.push(self.rows.to_string());
        out
    }

    fn parse(record: &csv::StringRecord, line: u64) -> Result<Self> {
        let bad = |col: &str, value: &str| Error::Report(format!("line {line}: column `{col}` has invalid value {value:?}"));
        let field = |i: usize| record.get(i).unwrap_or("");
        if field(0) != SCHEMA_VERSION.to_string() {
            return Err(Error::Report(format!(
                "line {line}: column `schema_version` is {:?}, expected {SCHEMA_VERSION}",
                field(0)
            )));
        }
        let flag = |i: usize| field(i).parse::<bool>().map_err(|_| bad(CSV_COLUMNS[i], field(i)));
        let mut metrics = [None; 8];
        for (j, m) in metrics.iter_mut().enumerate() {
            let i = 10 + j;
            *m = match field(i) {
                "" => None,
                s => Some(s.parse::<f64>().map_err(|_| bad(CSV_COLUMNS[i], s))?),
            };
        }
        Ok(Self {
            config: field(1).into(),
            method: field(2).into(),
            phase: field(3).into(),
            mode: field(4).into(),
            layer: field(5).into(),
            k: field(6).into(),
            sdc: field(7).into(),
            vmc: flag(8)?,
            capk: flag(9)?,
            metrics,
            rows: field(18).parse().map_err(|_| bad("rows", field(18)))?,
        })
    }
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map_or_else(String::new, |v| format!("{v:.9e}"))
}

fn k_label(policy: &KPolicy) -> String {
    let ks = &policy.0;
    if ks.windows(2).all(|w| w[0] == w[1]) {
        ks.first().map_or_else(String::new, usize::to_string)
    } else {
        ks.iter().map(usize::to_string).collect::<Vec<_>>().join("/")
    }
}

/// All rows of one configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
}

impl RunReport {
    pub fn new(config: &RunConfig, k_policy: &KPolicy, eval: &Evaluation) -> Self {
        let row = |layer: String, k: String, s: &LayerStats| {
            let finite = |v: f64| v.is_finite().then_some(v);
            ReportRow {
                config: config.name.clone(),
                method: config.method.to_string(),
                phase: config.phase.to_string(),
                mode: config.mode.to_string(),
                layer,
                k,
                sdc: config.compensation.sdc.to_string(),
                vmc: config.compensation.vmc,
                capk: config.compensation.capk,
                metrics: [
                    s.kept_ratio,
                    s.vrow_ratio,
                    s.k_tilde_over_k_mean,
                    s.k_tilde_over_k_std,
                    s.jaccard_topk_mean,
                    s.rel_l2_mean,
                    s.rel_l2_median,
                    s.cosine_mean,
                ]
                .map(finite),
                rows: s.rows,
            }
        };
        let mut rows: Vec<ReportRow> = eval
            .layers
            .iter()
            .enumerate()
            .map(|(l, s)| row(l.to_string(), k_policy.k_for_layer(l).to_string(), s))
            .collect();
        rows.push(row("all".into(), k_label(k_policy), &eval.summary));
        Self { rows }
    }

    pub fn summary(&self) -> Option<&ReportRow> {
        self.rows.iter().find(|r| r.layer == "all")
    }
}

pub fn write_report<W: Write>(out: W, reports: &[RunReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS).map_err(csv_err)?;
    for row in reports.iter().flat_map(|r| &r.rows) {
        w.write_record(row.record()).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Parse a report, rejecting any header that differs from the schema.
pub fn read_report<R: Read>(input: R) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    for (i, expected) in CSV_COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(got) if got == *expected => {}
            Some(got) => {
                return Err(Error::Report(format!("column {}: expected `{expected}`, found `{got}`", i + 1)))
            }
            None => return Err(Error::Report(format!("missing column `{expected}`"))),
        }
    }
    if let Some(extra) = headers.get(CSV_COLUMNS.len()) {
        return Err(Error::Report(format!("unexpected column `{extra}`")));
    }
    let mut rows = Vec::new();
    for (i, record) in r.records().enumerate() {
        rows.push(ReportRow::parse(&record.map_err(csv_err)?, i as u64 + 2)?);
    }
    Ok(rows)
}

/// Concatenate reports and append deltas against the dense row with the
/// same phase and layer, if any.
pub fn merge_reports<W: Write>(out: W, inputs: &[Vec<ReportRow>]) -> Result<()> {
    let rows: Vec<&ReportRow> = inputs.iter().flatten().collect();
    let dense = |row: &ReportRow| {
        rows.iter().find(|d| d.method == "dense" && d.phase == row.phase && d.layer == row.layer).copied()
    };
    let mut w = csv::Writer::from_writer(out);
    w.write_record(CSV_COLUMNS.iter().chain(&DELTA_COLUMNS)).map_err(csv_err)?;
    for row in &rows {
        let base = dense(row);
        let delta = |f: fn(&ReportRow) -> Option<f64>| {
            fmt_metric(base.and_then(|b| Some(f(row)? - f(b)?)))
        };
        let mut record = row.record();
        record.push(delta(ReportRow::kept_ratio));
        record.push(delta(ReportRow::rel_l2_mean));
        record.push(delta(ReportRow::cosine_mean));
        w.write_record(record).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Report(e.to_string())
}
