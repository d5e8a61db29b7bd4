use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Condition;
use crate::error::{Error, Result};
use crate::metrics::MetricRow;

use super::EvalReport;

const MISSING: &str = "—";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Markdown,
    Csv,
    Text,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Markdown => "md",
            ReportFormat::Csv => "csv",
            ReportFormat::Text => "txt",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            "csv" => Ok(ReportFormat::Csv),
            "text" | "txt" => Ok(ReportFormat::Text),
            _ => Err(Error::Usage(format!("unknown report format {s:?}; expected markdown, csv or text"))),
        }
    }
}

fn fmt_opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| MISSING.to_string(), |x| format!("{x:.prec$}"))
}

fn header(conditions: &[Condition]) -> Vec<String> {
    let mut h = vec!["System".to_string()];
    for c in conditions {
        for m in ["SI-SDR", "PESQ", "STOI"] {
            h.push(format!("{c} {m}"));
        }
    }
    h.push("Mean SI-SDR".into());
    h
}

fn cells(name: &str, rows: &[MetricRow], conditions: &[Condition]) -> Vec<String> {
    let mut out = vec![name.to_string()];
    let mut sum = 0.0;
    for c in conditions {
        match rows.iter().find(|r| r.condition == *c) {
            Some(r) => {
                sum += r.si_sdr;
                out.push(format!("{:.2}", r.si_sdr));
                out.push(fmt_opt(r.pesq, 2));
                out.push(format!("{:.2}", r.stoi));
            }
            None => out.extend([MISSING.to_string(), MISSING.to_string(), MISSING.to_string()]),
        }
    }
    out.push(format!("{:.2}", sum / conditions.len() as f64));
    out
}

fn table(report: &EvalReport) -> Vec<Vec<String>> {
    let conds = report.conditions();
    let mut t = vec![header(&conds)];
    if !report.unprocessed.is_empty() {
        t.push(cells("Unprocessed", &report.unprocessed, &conds));
    }
    t.push(cells(&report.model_id, &report.rows, &conds));
    t
}

fn markdown_table(t: &[Vec<String>], out: &mut String) {
    for (i, row) in t.iter().enumerate() {
        let _ = writeln!(out, "| {} |", row.join(" | "));
        if i == 0 {
            let _ = writeln!(out, "|{}", "---|".repeat(row.len()));
        }
    }
}

fn text_table(t: &[Vec<String>], out: &mut String) {
    let ncol = t[0].len();
    let widths: Vec<usize> = (0..ncol)
        .map(|j| t.iter().map(|r| r[j].chars().count()).max().unwrap_or(0))
        .collect();
    for row in t {
        let line: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(j, (c, w))| {
                let pad = w - c.chars().count();
                if j == 0 {
                    format!("{c}{}", " ".repeat(pad))
                } else {
                    format!("{}{c}", " ".repeat(pad))
                }
            })
            .collect();
        let _ = writeln!(out, "{}", line.join("  ").trim_end());
    }
}

fn extras_markdown(report: &EvalReport, out: &mut String) {
    let a = &report.aggregate;
    let _ = writeln!(
        out,
        "\nMean over conditions (unweighted): SI-SDR {:.2} dB, PESQ {}, STOI {:.2}",
        a.si_sdr,
        fmt_opt(a.pesq, 2),
        a.stoi
    );
    if let Some(g) = report.consistency_gap {
        let _ = writeln!(out, "\nConsistency gap (mean |s_1spk+noise - s_2spk+noise|): {g:.6}");
    }
    if let Some(p) = &report.probe {
        let _ = writeln!(out, "\nDenoiser probe:\n");
        let mut t = vec![vec![
            "Condition".to_string(),
            "Rel. change".into(),
            "SI-SDR in".into(),
            "SI-SDR out".into(),
            "Delta".into(),
        ]];
        for r in p {
            t.push(vec![
                r.condition.to_string(),
                format!("{:.4}", r.rel_change),
                format!("{:.2}", r.si_sdr_in),
                format!("{:.2}", r.si_sdr_out),
                format!("{:+.2}", r.si_sdr_delta()),
            ]);
        }
        markdown_table(&t, out);
    }
    if !report.metadata.is_empty() {
        let _ = writeln!(out);
        for (k, v) in &report.metadata {
            let _ = writeln!(out, "- {k}: {v}");
        }
    }
}

/// One CSV record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    /// `model` or `unprocessed`
    pub system: String,
    pub condition: Condition,
    pub si_sdr: f64,
    pub pesq: Option<f64>,
    pub stoi: f64,
    pub n_items: usize,
}

fn csv_text(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(["system", "condition", "si_sdr", "pesq", "stoi", "n_items"])
        .map_err(csv_err)?;
    for (system, rows) in [("unprocessed", &report.unprocessed), ("model", &report.rows)] {
        for r in rows {
            w.write_record([
                system.to_string(),
                r.condition.to_string(),
                r.si_sdr.to_string(),
                r.pesq.map_or_else(|| MISSING.to_string(), |v| v.to_string()),
                r.stoi.to_string(),
                r.n_items.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Parse the CSV rendering back into records.
pub fn parse_report_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |m: String| Error::Validation(format!("report csv: {m}"));
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        if rec.len() != 6 {
            return Err(bad(format!("expected 6 fields, got {}", rec.len())));
        }
        let num = |i: usize| rec[i].parse::<f64>().map_err(|e| bad(format!("{:?}: {e}", &rec[i])));
        out.push(CsvRow {
            system: rec[0].to_string(),
            condition: rec[1].parse()?,
            si_sdr: num(2)?,
            pesq: if &rec[3] == MISSING { None } else { Some(num(3)?) },
            stoi: num(4)?,
            n_items: rec[5].parse().map_err(|e| bad(format!("n_items: {e}")))?,
        });
    }
    Ok(out)
}

/// Render a report; output is a pure function of the report.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> Result<String> {
    report.validate()?;
    let mut out = String::new();
    match format {
        ReportFormat::Markdown => {
            let _ = writeln!(out, "# Evaluation: {} on {}\n", report.model_id, report.corpus_id);
            markdown_table(&table(report), &mut out);
            extras_markdown(report, &mut out);
        }
        ReportFormat::Text => {
            let _ = writeln!(out, "model {}  pool {}", report.model_id, report.corpus_id);
            text_table(&table(report), &mut out);
            if let Some(g) = report.consistency_gap {
                let _ = writeln!(out, "consistency gap {g:.6}");
            }
        }
        ReportFormat::Csv => out = csv_text(report)?,
    }
    Ok(out)
}

/// Per-condition change from run `a` to run `b` (`b - a`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub condition: Condition,
    pub si_sdr_a: f64,
    pub si_sdr_b: f64,
    pub si_sdr: f64,
    pub stoi: f64,
    pub pesq: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub a: String,
    pub b: String,
    pub rows: Vec<DeltaRow>,
}

/// Deltas over the conditions both reports share, in `a`'s order.
pub fn compare(a: &EvalReport, b: &EvalReport) -> Result<Comparison> {
    let rows: Vec<DeltaRow> = a
        .rows
        .iter()
        .filter_map(|ra| {
            b.row(ra.condition).map(|rb| DeltaRow {
                condition: ra.condition,
                si_sdr_a: ra.si_sdr,
                si_sdr_b: rb.si_sdr,
                si_sdr: rb.si_sdr - ra.si_sdr,
                stoi: rb.stoi - ra.stoi,
                pesq: ra.pesq.zip(rb.pesq).map(|(x, y)| y - x),
            })
        })
        .collect();
    if rows.is_empty() {
        return Err(Error::Validation("reports share no conditions".into()));
    }
    Ok(Comparison {
        a: a.model_id.clone(),
        b: b.model_id.clone(),
        rows,
    })
}

fn signed(v: f64) -> String {
    if v == 0.0 {
        "0.00".into()
    } else {
        format!("{v:+.2}")
    }
}

pub fn render_comparison(c: &Comparison) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "# {} vs {} (delta = b - a)\n", c.a, c.b);
    let mut t = vec![vec![
        "Condition".to_string(),
        "SI-SDR a".into(),
        "SI-SDR b".into(),
        "Delta SI-SDR".into(),
        "Delta STOI".into(),
        "Delta PESQ".into(),
    ]];
    for r in &c.rows {
        t.push(vec![
            r.condition.to_string(),
            format!("{:.2}", r.si_sdr_a),
            format!("{:.2}", r.si_sdr_b),
            signed(r.si_sdr),
            signed(r.stoi),
            r.pesq.map_or_else(|| MISSING.to_string(), signed),
        ]);
    }
    markdown_table(&t, &mut out);
    out
}
