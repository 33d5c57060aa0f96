//! Report files: the full run as JSON, a per-interval summary table and a
//! long-format plot series.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use crate::grid::BusId;
use crate::scenario::RunReport;

pub const REPORT_FILE: &str = "report.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const PLOT_FILE: &str = "plot_series.csv";

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{}: {source}", path.display())]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },
    #[error("unknown report format {0:?} (expected json, summary or plot)")]
    UnknownFormat(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ReportFormat {
    Json,
    Summary,
    Plot,
}

impl ReportFormat {
    pub const ALL: [ReportFormat; 3] = [ReportFormat::Json, ReportFormat::Summary, ReportFormat::Plot];

    pub fn file_name(self) -> &'static str {
        match self {
            ReportFormat::Json => REPORT_FILE,
            ReportFormat::Summary => SUMMARY_FILE,
            ReportFormat::Plot => PLOT_FILE,
        }
    }
}

impl FromStr for ReportFormat {
    type Err = ReportError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "json" | "report" => Ok(ReportFormat::Json),
            "summary" | "table" | "csv" => Ok(ReportFormat::Summary),
            "plot" | "series" => Ok(ReportFormat::Plot),
            other => Err(ReportError::UnknownFormat(other.to_owned())),
        }
    }
}

/// Formats `x` with six significant digits, trailing zeros trimmed.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return if x.is_nan() { "nan".into() } else if x == 0.0 { "0".into() } else { x.to_string() };
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (5 - magnitude).clamp(0, 15) as usize;
    let mut s = format!("{x:.decimals$}");
    if s.contains('.') {
        while s.ends_with('0') {
            s.pop();
        }
        if s.ends_with('.') {
            s.pop();
        }
    }
    if s == "-0" {
        s = "0".into();
    }
    s
}

fn opt(x: Option<f64>) -> String {
    x.map(fmt_sig).unwrap_or_default()
}

/// Interval with the highest bus voltage, used for the voltage profile.
pub fn peak_voltage_interval(report: &RunReport) -> Option<usize> {
    report
        .intervals
        .iter()
        .filter_map(|r| {
            let f = r.feasibility.as_ref()?;
            let (_, v) = f
                .voltages
                .iter()
                .map(|(b, v)| (*b, *v))
                .max_by(|a, b| a.1.total_cmp(&b.1))?;
            Some((r.interval, v))
        })
        .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(t, _)| t)
}

fn summary_rows(report: &RunReport) -> Vec<Vec<String>> {
    report
        .intervals
        .iter()
        .map(|r| {
            let m = &r.market;
            let f = r.feasibility.as_ref();
            let max_v = f.and_then(|f| {
                f.voltages
                    .iter()
                    .max_by(|a, b| a.1.total_cmp(b.1))
                    .map(|(b, v)| (*b, *v))
            });
            let min_v = f.and_then(|f| f.voltages.values().copied().min_by(f64::total_cmp));
            vec![
                r.interval.to_string(),
                r.start.to_string(),
                fmt_sig(r.grid_price),
                m.transactions.len().to_string(),
                fmt_sig(m.traded_power()),
                opt(m.weighted_price()),
                fmt_sig(m.seller_curtailed.values().sum()),
                fmt_sig(m.buyer_curtailed.values().sum()),
                opt(f.map(|f| f.transaction_losses_kw)),
                opt(max_v.map(|x| x.1)),
                max_v.map(|x| x.0 .0.to_string()).unwrap_or_default(),
                opt(min_v),
                f.map(|f| f.violations.len().to_string()).unwrap_or_default(),
                opt(f.map(|f| f.curtailment_applied.values().sum())),
                r.error.as_ref().map(|e| e.message.clone()).unwrap_or_default(),
            ]
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 15] = [
    "interval",
    "start",
    "grid_price_ckwh",
    "transactions",
    "traded_kw",
    "p2p_price_ckwh",
    "seller_curtailed_kw",
    "buyer_curtailed_kw",
    "transaction_losses_kw",
    "max_v_pu",
    "max_v_bus",
    "min_v_pu",
    "violations",
    "inverter_curtailed_kw",
    "error",
];

fn plot_rows(report: &RunReport, voltage_interval: Option<usize>) -> Vec<[String; 4]> {
    let mut rows = Vec::new();
    for r in &report.intervals {
        let hour = fmt_sig(r.interval as f64 * report.interval_hours);
        if let Some(p) = r.market.weighted_price() {
            rows.push(["p2p_price".into(), r.interval.to_string(), hour.clone(), fmt_sig(p)]);
        }
        rows.push(["grid_price".into(), r.interval.to_string(), hour.clone(), fmt_sig(r.grid_price)]);
        rows.push(["fit".into(), r.interval.to_string(), hour, fmt_sig(report.fit)]);
    }
    let chosen = voltage_interval.or_else(|| peak_voltage_interval(report));
    if let Some(rec) = chosen.and_then(|t| report.intervals.iter().find(|r| r.interval == t)) {
        if let Some(f) = &rec.feasibility {
            for (BusId(bus), v) in &f.voltages {
                rows.push([
                    "bus_voltage".into(),
                    rec.interval.to_string(),
                    bus.to_string(),
                    fmt_sig(*v),
                ]);
            }
        }
    }
    rows
}

fn write_csv<I, R>(path: &Path, header: &[&str], rows: I) -> Result<(), ReportError>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let csv_err = |source| ReportError::Csv {
        path: path.to_owned(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for row in rows {
        w.write_record(row).map_err(csv_err)?;
    }
    w.flush().map_err(|source| ReportError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes the requested report files into `out_dir` and returns their
/// paths in format order. `voltage_interval` picks the interval for the
/// bus-voltage series; by default the one with the highest voltage.
pub fn emit_reports(
    report: &RunReport,
    out_dir: &Path,
    formats: &[ReportFormat],
    voltage_interval: Option<usize>,
) -> Result<Vec<PathBuf>, ReportError> {
    fs::create_dir_all(out_dir).map_err(|source| ReportError::Io {
        path: out_dir.to_owned(),
        source,
    })?;
    let mut formats = formats.to_vec();
    formats.sort();
    formats.dedup();
    let mut written = Vec::new();
    for format in formats {
        let path = out_dir.join(format.file_name());
        match format {
            ReportFormat::Json => fs::write(&path, report.to_json()).map_err(|source| ReportError::Io {
                path: path.clone(),
                source,
            })?,
            ReportFormat::Summary => write_csv(&path, &SUMMARY_HEADER, summary_rows(report))?,
            ReportFormat::Plot => write_csv(
                &path,
                &["series", "interval", "x", "y"],
                plot_rows(report, voltage_interval),
            )?,
        }
        written.push(path);
    }
    Ok(written)
}
