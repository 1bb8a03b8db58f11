//! CSV, markdown and SVG output of counterfactual reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{aggregate, equivalent_random_k, CounterfactualReport, CurvePoint, RandomReferenceCurve, RangeFlag};
use crate::container::{read_file, write_atomic};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    query: u64,
    method: String,
    k: usize,
    delta_loss: f64,
    delta_gen_mse: f64,
    delta_gen_feat: f64,
}

fn to_csv<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Writes `query,method,k,delta_loss,delta_gen_mse,delta_gen_feat` and the
/// full reports (with hashes) to the same name with a `.json` extension.
pub fn write_reports(csv_path: &Path, reports: &[CounterfactualReport]) -> Result<()> {
    let rows = reports.iter().map(|r| CsvRow {
        query: r.query,
        method: r.method.clone(),
        k: r.k,
        delta_loss: r.delta_loss,
        delta_gen_mse: r.delta_gen_mse,
        delta_gen_feat: r.delta_gen_feat,
    });
    write_atomic(csv_path, &to_csv(rows)?)?;
    write_atomic(&csv_path.with_extension("json"), serde_json::to_string_pretty(reports)?.as_bytes())
}

pub fn read_reports(csv_path: &Path) -> Result<Vec<CounterfactualReport>> {
    let reports: Vec<CounterfactualReport> = serde_json::from_slice(&read_file(&csv_path.with_extension("json"))?)?;
    let bytes = read_file(csv_path)?;
    let rows = csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<CsvRow>, _>>()?;
    let agree = rows.len() == reports.len()
        && rows.iter().zip(&reports).all(|(a, b)| a.query == b.query && a.method == b.method && a.k == b.k);
    if !agree {
        return Err(Error::format(csv_path, "rows disagree with the json sidecar"));
    }
    Ok(reports)
}

/// Writes the curve points as CSV and the whole curve as `.json`.
pub fn write_curve(csv_path: &Path, curve: &RandomReferenceCurve) -> Result<()> {
    write_atomic(csv_path, &to_csv(&curve.points)?)?;
    write_atomic(&csv_path.with_extension("json"), serde_json::to_string_pretty(curve)?.as_bytes())
}

pub fn read_curve(csv_path: &Path) -> Result<RandomReferenceCurve> {
    let curve: RandomReferenceCurve = serde_json::from_slice(&read_file(&csv_path.with_extension("json"))?)?;
    let bytes = read_file(csv_path)?;
    let points = csv::Reader::from_reader(bytes.as_slice())
        .deserialize()
        .collect::<std::result::Result<Vec<CurvePoint>, _>>()?;
    if points.len() != curve.points.len() || points.iter().zip(&curve.points).any(|(a, b)| a.k != b.k) {
        return Err(Error::format(csv_path, "points disagree with the json sidecar"));
    }
    Ok(curve)
}

/// Per-method, per-k summary against the random reference.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub k: usize,
    pub queries: usize,
    pub mean_delta_loss: f64,
    pub se_delta_loss: f64,
    pub mean_delta_gen_mse: f64,
    pub mean_delta_gen_feat: f64,
    /// Fraction of queries whose loss change exceeds the random mean at this `k`.
    pub beats_random: Option<f64>,
    pub equivalent_k: Option<f64>,
    pub out_of_range: Option<RangeFlag>,
}

pub fn summarize(reports: &[CounterfactualReport], curve: Option<&RandomReferenceCurve>) -> Result<Vec<SummaryRow>> {
    let mut by_method: BTreeMap<&str, Vec<CounterfactualReport>> = BTreeMap::new();
    for r in reports {
        by_method.entry(r.method.as_str()).or_default().push(r.clone());
    }
    let mut out = Vec::new();
    for (method, rs) in by_method {
        for p in aggregate(&rs) {
            let at_k: Vec<&CounterfactualReport> = rs.iter().filter(|r| r.k == p.k).collect();
            let reference = curve.and_then(|c| c.point(p.k));
            let beats_random = reference.map(|c| {
                at_k.iter().filter(|r| r.delta_loss > c.mean_delta_loss).count() as f64 / at_k.len() as f64
            });
            let eq = match curve {
                Some(c) if c.points.len() >= 2 => Some(equivalent_random_k(c, p.mean_delta_loss)?),
                _ => None,
            };
            out.push(SummaryRow {
                method: method.to_string(),
                k: p.k,
                queries: at_k.len(),
                mean_delta_loss: p.mean_delta_loss,
                se_delta_loss: p.se_delta_loss,
                mean_delta_gen_mse: p.mean_delta_gen_mse,
                mean_delta_gen_feat: p.mean_delta_gen_feat,
                beats_random,
                equivalent_k: eq.map(|e| e.k),
                out_of_range: eq.and_then(|e| e.out_of_range),
            });
        }
    }
    Ok(out)
}

fn opt(v: Option<f64>, digits: usize) -> String {
    v.map(|v| format!("{v:.digits$}")).unwrap_or_else(|| "-".into())
}

pub fn markdown(summary: &[SummaryRow], curve: Option<&RandomReferenceCurve>) -> String {
    let mut s = String::from("# Leave-K-out evaluation\n\n");
    s.push_str("| method | k | queries | mean ΔL | se ΔL | mean ΔG mse | mean ΔG feat | > random | random-equivalent k |\n");
    s.push_str("|---|---:|---:|---:|---:|---:|---:|---:|---:|\n");
    for r in summary {
        let eq = match r.out_of_range {
            Some(RangeFlag::Above) => format!("> {}", opt(r.equivalent_k, 0)),
            Some(RangeFlag::Below) => format!("< {}", opt(r.equivalent_k, 0)),
            None => opt(r.equivalent_k, 1),
        };
        let _ = writeln!(
            s,
            "| {} | {} | {} | {:.5} | {:.5} | {:.5} | {:.5} | {} | {} |",
            r.method,
            r.k,
            r.queries,
            r.mean_delta_loss,
            r.se_delta_loss,
            r.mean_delta_gen_mse,
            r.mean_delta_gen_feat,
            opt(r.beats_random, 2),
            eq
        );
    }
    if let Some(c) = curve {
        let _ = writeln!(s, "\nRandom reference: {} model(s) per k.", c.models_per_k);
    }
    s
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Mean ΔL against k per method, with ±1 standard error bands.
pub fn svg(summary: &[SummaryRow], curve: Option<&RandomReferenceCurve>) -> String {
    let mut series: BTreeMap<String, Vec<(f64, f64, f64)>> = BTreeMap::new();
    for r in summary {
        series.entry(r.method.clone()).or_default().push((r.k as f64, r.mean_delta_loss, r.se_delta_loss));
    }
    if let Some(c) = curve {
        series.insert(
            "random reference".into(),
            c.points.iter().map(|p| (p.k as f64, p.mean_delta_loss, p.se_delta_loss)).collect(),
        );
    }
    let (w, h, m) = (640.0, 400.0, 50.0);
    let pts = series.values().flatten();
    let kmax = pts.clone().map(|p| p.0).fold(1.0, f64::max);
    let lo = pts.clone().map(|p| p.1 - p.2).fold(0.0, f64::min);
    let hi = pts.map(|p| p.1 + p.2).fold(0.0, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |k: f64| m + (w - 2.0 * m) * k / kmax;
    let y = |v: f64| h - m - (h - 2.0 * m) * (v - lo) / span;

    let mut s = format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n");
    let _ = writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<line x1=\"{m}\" y1=\"{0:.1}\" x2=\"{1}\" y2=\"{0:.1}\" stroke=\"#999\"/>",
        y(0.0),
        w - m
    );
    let _ = writeln!(s, "<line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{}\" stroke=\"#999\"/>", h - m);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">k</text>", w / 2.0, h - 15.0);
    let _ = writeln!(s, "<text x=\"12\" y=\"{}\" transform=\"rotate(-90 12 {})\" text-anchor=\"middle\">mean ΔL</text>", h / 2.0, h / 2.0);
    let _ = writeln!(s, "<text x=\"{m}\" y=\"{}\">{hi:.4}</text><text x=\"{m}\" y=\"{}\">{lo:.4}</text>", m - 5.0, h - m + 15.0);
    let _ = writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{kmax}</text>", w - m, h - m + 15.0);
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", x(p.0), y(p.1 + p.2))).collect();
        let lower: Vec<String> = pts.iter().rev().map(|p| format!("{:.1},{:.1}", x(p.0), y(p.1 - p.2))).collect();
        let _ = writeln!(
            s,
            "<polygon points=\"{} {}\" fill=\"{color}\" fill-opacity=\"0.15\" stroke=\"none\"/>",
            upper.join(" "),
            lower.join(" ")
        );
        let line: Vec<String> = pts.iter().map(|p| format!("{:.1},{:.1}", x(p.0), y(p.1))).collect();
        let _ = writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>", line.join(" "));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" fill=\"{color}\">{name}</text>",
            w - m - 110.0,
            m + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}
