use std::fmt::Write as _;

use super::{BaselineTable, SubstitutionReport};
use crate::error::{invalid, Result};
use crate::numerics::stats::mean;

pub const REPORT_HEADER: &str =
    "plan_id,target,fraction,selection,predictor,calibration,n_prompts,ce_ref,ce_patched,mean_delta,mean_absdiff,median_absdiff,ci_lo,ci_hi,seed";

pub const BASELINE_HEADER: &str =
    "name,n_prompts,ce_mean,mean_delta,mean_absdiff,median_absdiff,ci_lo,ci_hi";

pub fn reports_csv(reports: &[SubstitutionReport]) -> String {
    let mut s = format!("{REPORT_HEADER}\n");
    for r in reports {
        let p = &r.plan;
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{}",
            p.id(),
            p.target,
            p.fraction,
            p.selection,
            p.predictor.label(),
            p.calibration,
            r.n_prompts,
            r.mean_ce_ref(),
            mean(&r.ce_patched),
            r.stats.mean_delta,
            r.stats.mean_abs,
            r.stats.median_abs.median,
            r.stats.median_abs.lo,
            r.stats.median_abs.hi,
            r.seed
        );
    }
    s
}

pub fn baselines_csv(table: &BaselineTable) -> String {
    let mut s = format!("{BASELINE_HEADER}\n");
    for b in &table.rows {
        let ce = b.ce.iter().sum::<f64>() / b.ce.len().max(1) as f64;
        let _ = writeln!(
            s,
            "{},{},{ce:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            b.name,
            table.n_prompts,
            b.stats.mean_delta,
            b.stats.mean_abs,
            b.stats.median_abs.median,
            b.stats.median_abs.lo,
            b.stats.median_abs.hi
        );
    }
    s
}

/// One bar of the substitution chart.
#[derive(Clone, Debug, PartialEq)]
pub struct Bar {
    pub series: String,
    pub fraction: f64,
    pub median: f64,
    pub lo: f64,
    pub hi: f64,
}

impl From<&SubstitutionReport> for Bar {
    fn from(r: &SubstitutionReport) -> Self {
        Self {
            series: r.plan.series(),
            fraction: r.plan.fraction,
            median: r.stats.median_abs.median,
            lo: r.stats.median_abs.lo,
            hi: r.stats.median_abs.hi,
        }
    }
}

fn num(s: &str) -> Result<f64> {
    s.parse()
        .map_err(|e| invalid(format!("bad number {s:?}: {e}")))
}

fn data_rows<'a>(text: &'a str, header: &str) -> Result<impl Iterator<Item = Vec<&'a str>>> {
    let mut lines = text.lines();
    if lines.next() != Some(header) {
        return Err(invalid("CSV has an unexpected header"));
    }
    let width = header.split(',').count();
    let rows: Vec<Vec<&str>> = lines
        .filter(|l| !l.is_empty())
        .map(|l| l.split(',').collect())
        .collect();
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(invalid(format!(
            "CSV row has {} fields, expected {width}",
            r.len()
        )));
    }
    Ok(rows.into_iter())
}

/// Reads the bars back from [`reports_csv`] output.
pub fn parse_reports_csv(text: &str) -> Result<Vec<Bar>> {
    data_rows(text, REPORT_HEADER)?
        .map(|f| {
            Ok(Bar {
                series: format!("{}/{}/{}/{}", f[1], f[3], f[4], f[5]),
                fraction: num(f[2])?,
                median: num(f[11])?,
                lo: num(f[12])?,
                hi: num(f[13])?,
            })
        })
        .collect()
}

/// `(name, median |ΔCE|)` per row of [`baselines_csv`] output.
pub fn parse_baselines_csv(text: &str) -> Result<Vec<(String, f64)>> {
    data_rows(text, BASELINE_HEADER)?
        .map(|f| Ok((f[0].to_string(), num(f[5])?)))
        .collect()
}

const PALETTE: [&str; 8] = [
    "#4c72b0", "#dd8452", "#55a868", "#c44e52", "#8172b3", "#937860", "#da8bc3", "#8c8c8c",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// Grouped bars of median |ΔCE| with interval whiskers, one group per
/// fraction and one bar per plan series, plus dashed reference lines.
pub fn reports_svg(bars: &[Bar], lines: &[(String, f64)]) -> String {
    let (w, h) = (900.0, 400.0);
    let (left, right, top, bottom) = (60.0, 360.0, 20.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let mut fractions: Vec<f64> = bars.iter().map(|b| b.fraction).collect();
    fractions.sort_by(f64::total_cmp);
    fractions.dedup();
    let mut series: Vec<String> = Vec::new();
    for b in bars {
        if !series.contains(&b.series) {
            series.push(b.series.clone());
        }
    }
    let ymax = bars
        .iter()
        .map(|b| b.hi)
        .chain(lines.iter().map(|l| l.1))
        .fold(0.0f64, f64::max)
        .max(1e-9)
        * 1.1;
    let y = |v: f64| top + ph * (1.0 - v / ymax);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        s,
        r#"<rect x="0" y="0" width="{w}" height="{h}" fill="white"/>"#
    );
    let _ = writeln!(
        s,
        r#"<line x1="{left}" y1="{top}" x2="{left}" y2="{:.2}" stroke="black"/><line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        top + ph,
        top + ph,
        left + pw,
        top + ph
    );
    for i in 0..=4 {
        let v = ymax * i as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{v:.3}</text>"#,
            left - 4.0,
            y(v) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="14" y="{:.2}" transform="rotate(-90 14 {:.2})" text-anchor="middle">median |ΔCE| (nats)</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    );
    if bars.is_empty() {
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">no reports</text>"#,
            left + pw / 2.0,
            top + ph / 2.0
        );
    }
    let gw = pw / fractions.len().max(1) as f64;
    let bw = gw * 0.8 / series.len().max(1) as f64;
    for (gi, f) in fractions.iter().enumerate() {
        let gx = left + gi as f64 * gw + gw * 0.1;
        let _ = writeln!(
            s,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{}%</text>"#,
            left + (gi as f64 + 0.5) * gw,
            top + ph + 16.0,
            (f * 100.0).round()
        );
        for m in bars.iter().filter(|b| b.fraction == *f) {
            let si = series.iter().position(|x| *x == m.series).unwrap_or(0);
            let x = gx + si as f64 * bw;
            let _ = writeln!(
                s,
                r#"<rect x="{x:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"/>"#,
                y(m.median),
                bw * 0.9,
                (top + ph - y(m.median)).max(0.0),
                PALETTE[si % PALETTE.len()]
            );
            let cx = x + bw * 0.45;
            let _ = writeln!(
                s,
                r#"<line x1="{cx:.2}" y1="{:.2}" x2="{cx:.2}" y2="{:.2}" stroke="black"/>"#,
                y(m.lo),
                y(m.hi)
            );
        }
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">fraction of latents substituted</text>"#,
        left + pw / 2.0,
        h - 12.0
    );
    for (name, v) in lines {
        let _ = writeln!(
            s,
            r#"<line x1="{left}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="gray" stroke-dasharray="4 3"/><text x="{:.2}" y="{:.2}" fill="gray">{}</text>"#,
            y(*v),
            left + pw,
            y(*v),
            left + pw + 4.0,
            y(*v) + 4.0,
            esc(name)
        );
    }
    for (si, name) in series.iter().enumerate() {
        let ly = top + 14.0 * si as f64;
        let lx = w - right + 110.0;
        let _ = writeln!(
            s,
            r#"<rect x="{lx:.2}" y="{ly:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}" font-size="9">{}</text>"#,
            PALETTE[si % PALETTE.len()],
            lx + 14.0,
            ly + 9.0,
            esc(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
