//! Report files: metric-by-threshold CSV, JSON lines and plot series.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::sweep::EvalReport;
use crate::stats::MeanSe;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReportFormat {
    Csv,
    JsonLines,
    PlotData,
}

pub const ALL_FORMATS: [ReportFormat; 3] = [ReportFormat::Csv, ReportFormat::JsonLines, ReportFormat::PlotData];

type Getter = fn(&EvalReport) -> Option<f64>;

fn nll_nats(r: &EvalReport) -> Option<MeanSe> {
    r.nll.as_ref().map(|n| n.nats_per_dim)
}
fn nll_bpd(r: &EvalReport) -> Option<MeanSe> {
    r.nll.as_ref().and_then(|n| n.bpd)
}
fn vlb_nats(r: &EvalReport) -> Option<MeanSe> {
    r.vlb.as_ref().map(|n| n.nats_per_dim)
}
fn vlb_bpd(r: &EvalReport) -> Option<MeanSe> {
    r.vlb.as_ref().and_then(|n| n.bpd)
}

/// CSV rows in output order.
pub const METRICS: [(&str, Getter); 17] = [
    ("eta", |r| r.eta),
    ("nll_nats", |r| nll_nats(r).map(|m| m.mean)),
    ("nll_nats_se", |r| nll_nats(r).map(|m| m.se)),
    ("nll_bpd", |r| nll_bpd(r).map(|m| m.mean)),
    ("nll_bpd_se", |r| nll_bpd(r).map(|m| m.se)),
    ("vlb", |r| vlb_nats(r).map(|m| m.mean)),
    ("vlb_se", |r| vlb_nats(r).map(|m| m.se)),
    ("vlb_bpd", |r| vlb_bpd(r).map(|m| m.mean)),
    ("energy_dist", |r| r.quality.map(|q| q.distance)),
    ("p_value", |r| r.quality.map(|q| q.p_value)),
    ("energy_null_sd", |r| r.quality.map(|q| q.null_sd)),
    ("energy_dist_stochastic", |r| r.quality_stochastic.map(|q| q.distance)),
    ("p_value_stochastic", |r| r.quality_stochastic.map(|q| q.p_value)),
    ("nfe_nll", |r| r.nfe_nll),
    ("nfe_sample", |r| r.nfe_sampling),
    ("nfe_sample_stochastic", |r| r.nfe_sampling_stochastic),
    ("failed", |r| Some(if r.error.is_some() { 1.0 } else { 0.0 })),
];

fn fmt(v: Option<f64>) -> String {
    // `{}` on f64 prints the shortest decimal that round-trips, independent of locale.
    v.map(|x| format!("{x}")).unwrap_or_default()
}

/// Metric rows by threshold columns.
pub fn write_csv<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["metric".to_string()];
    header.extend(reports.iter().map(|r| r.label.clone()));
    out.write_record(&header)?;
    for (name, get) in METRICS {
        let mut row = vec![name.to_string()];
        row.extend(reports.iter().map(|r| fmt(get(r))));
        out.write_record(&row)?;
    }
    out.flush()?;
    Ok(())
}

/// A parsed metric table.
#[derive(Clone, Debug, PartialEq)]
pub struct ReportTable {
    pub labels: Vec<String>,
    pub rows: Vec<(String, Vec<Option<f64>>)>,
}

impl ReportTable {
    pub fn get(&self, metric: &str, label: &str) -> Option<f64> {
        let col = self.labels.iter().position(|l| l == label)?;
        self.rows.iter().find(|(m, _)| m == metric)?.1[col]
    }
}

pub fn read_csv<R: Read>(r: R) -> Result<ReportTable> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(r);
    let labels: Vec<String> = rdr.headers()?.iter().skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let name = rec.get(0).unwrap_or_default().to_string();
        let vals = rec
            .iter()
            .skip(1)
            .map(|s| {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse::<f64>().map(Some).map_err(|e| Error::Format(format!("metric {name}: {e}")))
                }
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push((name, vals));
    }
    Ok(ReportTable { labels, rows })
}

pub fn write_json_lines<W: Write>(reports: &[EvalReport], mut w: W) -> Result<()> {
    for r in reports {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_json_lines<R: Read>(r: R) -> Result<Vec<EvalReport>> {
    let mut out = Vec::new();
    for line in BufReader::new(r).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// `(eta, nll)` series: bits per dimension for quantized data, else nats per dimension.
pub fn write_plot_nll<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["eta", "nll", "nll_se", "unit"])?;
    for r in reports {
        if let (Some(eta), Some(n)) = (r.eta, r.nll.as_ref()) {
            let (m, unit) = match n.bpd {
                Some(b) => (b, "bpd"),
                None => (n.nats_per_dim, "nats_per_dim"),
            };
            out.write_record([fmt(Some(eta)), fmt(Some(m.mean)), fmt(Some(m.se)), unit.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `(eta, energy distance)` series for both samplers.
pub fn write_plot_quality<W: Write>(reports: &[EvalReport], w: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["eta", "energy_dist_ode", "energy_dist_stochastic"])?;
    for r in reports {
        if let Some(eta) = r.eta {
            out.write_record([
                fmt(Some(eta)),
                fmt(r.quality.map(|q| q.distance)),
                fmt(r.quality_stochastic.map(|q| q.distance)),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub const CSV_FILE: &str = "report.csv";
pub const JSONL_FILE: &str = "report.jsonl";
pub const PLOT_NLL_FILE: &str = "plot_nll.csv";
pub const PLOT_QUALITY_FILE: &str = "plot_quality.csv";

/// Writes the requested formats into `dir` and returns the paths written.
pub fn emit_report(reports: &[EvalReport], dir: &Path, formats: &[ReportFormat]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for f in formats {
        match f {
            ReportFormat::Csv => {
                let p = dir.join(CSV_FILE);
                write_csv(reports, fs::File::create(&p)?)?;
                written.push(p);
            }
            ReportFormat::JsonLines => {
                let p = dir.join(JSONL_FILE);
                write_json_lines(reports, fs::File::create(&p)?)?;
                written.push(p);
            }
            ReportFormat::PlotData => {
                let p = dir.join(PLOT_NLL_FILE);
                write_plot_nll(reports, fs::File::create(&p)?)?;
                written.push(p);
                let p = dir.join(PLOT_QUALITY_FILE);
                write_plot_quality(reports, fs::File::create(&p)?)?;
                written.push(p);
            }
        }
    }
    Ok(written)
}
