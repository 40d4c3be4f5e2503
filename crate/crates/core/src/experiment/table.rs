use std::fmt::Write;

use crate::error::{Error, Result};
use crate::eval::{BootstrapResult, MetricReport};
use crate::federation::Scenario;

pub const REPORT_HEADER: &str =
    "scenario,site,label,auroc,auroc_sd,ci_lo,ci_hi,threshold,sensitivity,specificity,accuracy,p_vs_local,seed";

pub const AVERAGE_LABEL: &str = "average";

/// `%.6g`: six significant digits, trailing zeros dropped.
pub fn fmt6(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return "0".into();
    }
    let sci = format!("{x:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if !(-4..6).contains(&exp) {
        let m = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{m}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp).max(0) as usize;
    trim_zeros(&format!("{x:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub scenario: Scenario,
    pub site: String,
    pub label: String,
    pub auroc: f64,
    pub auroc_sd: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub threshold: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub p_vs_local: Option<f64>,
    pub seed: u64,
}

impl ReportRow {
    fn to_csv(&self) -> String {
        let nums = [
            self.auroc,
            self.auroc_sd,
            self.ci_lo,
            self.ci_hi,
            self.threshold,
            self.sensitivity,
            self.specificity,
            self.accuracy,
        ]
        .map(fmt6)
        .join(",");
        let p = self.p_vs_local.map(fmt6).unwrap_or_default();
        format!("{},{},{},{nums},{p},{}", self.scenario, self.site, self.label, self.seed)
    }

    fn from_csv(line: &str, lineno: usize) -> Result<Self> {
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 13 {
            return Err(Error::Parse(format!("results line {lineno}: expected 13 fields, got {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> {
            f[i].parse().map_err(|_| Error::Parse(format!("results line {lineno}: bad number `{}`", f[i])))
        };
        Ok(Self {
            scenario: f[0].parse()?,
            site: f[1].to_string(),
            label: f[2].to_string(),
            auroc: num(3)?,
            auroc_sd: num(4)?,
            ci_lo: num(5)?,
            ci_hi: num(6)?,
            threshold: num(7)?,
            sensitivity: num(8)?,
            specificity: num(9)?,
            accuracy: num(10)?,
            p_vs_local: if f[11].is_empty() { None } else { Some(num(11)?) },
            seed: f[12]
                .parse()
                .map_err(|_| Error::Parse(format!("results line {lineno}: bad seed `{}`", f[12])))?,
        })
    }
}

/// Per-label rows plus the label-averaged row for one site.
pub fn rows_for(
    scenario: Scenario,
    site: &str,
    report: &MetricReport,
    vs_local: Option<&(Vec<BootstrapResult>, BootstrapResult)>,
    seed: u64,
) -> Vec<ReportRow> {
    let mut rows: Vec<ReportRow> = report
        .labels
        .iter()
        .enumerate()
        .map(|(i, l)| ReportRow {
            scenario,
            site: site.to_string(),
            label: l.label.clone(),
            auroc: l.auroc.mean,
            auroc_sd: l.auroc.sd,
            ci_lo: l.auroc.ci_lo,
            ci_hi: l.auroc.ci_hi,
            threshold: l.threshold,
            sensitivity: l.sensitivity,
            specificity: l.specificity,
            accuracy: l.accuracy,
            p_vs_local: vs_local.map(|(per, _)| per[i].p_value),
            seed,
        })
        .collect();
    let k = rows.len() as f64;
    let mean = |f: fn(&ReportRow) -> f64| rows.iter().map(f).sum::<f64>() / k;
    let average = ReportRow {
        scenario,
        site: site.to_string(),
        label: AVERAGE_LABEL.to_string(),
        auroc: report.average.mean,
        auroc_sd: report.average.sd,
        ci_lo: report.average.ci_lo,
        ci_hi: report.average.ci_hi,
        threshold: mean(|r| r.threshold),
        sensitivity: mean(|r| r.sensitivity),
        specificity: mean(|r| r.specificity),
        accuracy: mean(|r| r.accuracy),
        p_vs_local: vs_local.map(|(_, avg)| avg.p_value),
        seed,
    };
    rows.push(average);
    rows
}

pub fn write_csv(rows: &[ReportRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(REPORT_HEADER) {
        return Err(Error::Parse("results file has an unexpected header".into()));
    }
    lines
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| ReportRow::from_csv(l, i + 2))
        .collect()
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

fn cell(r: &ReportRow) -> String {
    format!("{} ± {} ({} to {})", pct(r.auroc), pct(r.auroc_sd), pct(r.ci_lo), pct(r.ci_hi))
}

/// Aligned text: one block per site, one row per method, AUROC in percent
/// as mean ± SD (95% CI) per label and averaged, then the paired p-value of
/// the average against Local.
pub fn render_text(rows: &[ReportRow]) -> String {
    let mut sites: Vec<&str> = Vec::new();
    let mut labels: Vec<&str> = Vec::new();
    for r in rows {
        if !sites.contains(&r.site.as_str()) {
            sites.push(&r.site);
        }
        if r.label != AVERAGE_LABEL && !labels.contains(&r.label.as_str()) {
            labels.push(&r.label);
        }
    }
    labels.push(AVERAGE_LABEL);
    let mut header = vec!["Test site".to_string(), "Method".to_string()];
    header.extend(labels.iter().map(|l| {
        let mut t = l.replace('_', " ");
        t[..1].make_ascii_uppercase();
        format!("{t} AUROC (%)")
    }));
    header.push("P vs Local".into());

    let mut table = vec![header];
    for site in &sites {
        for sc in Scenario::ALL {
            let of = |label: &str| rows.iter().find(|r| r.site == *site && r.scenario == sc && r.label == label);
            let Some(avg) = of(AVERAGE_LABEL) else { continue };
            let mut line = vec![site.to_string(), sc.title().to_string()];
            line.extend(labels.iter().map(|l| of(l).map(cell).unwrap_or_else(|| "-".into())));
            line.push(match (sc, avg.p_vs_local) {
                (Scenario::Local, _) => "-".into(),
                (_, Some(p)) if p < 0.001 => "<0.001".into(),
                (_, Some(p)) => format!("{p:.3}"),
                (_, None) => "n/a".into(),
            });
            table.push(line);
        }
    }
    let widths: Vec<usize> = (0..table[0].len())
        .map(|c| table.iter().map(|row| row[c].chars().count()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in table.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
        }
    }
    out
}
