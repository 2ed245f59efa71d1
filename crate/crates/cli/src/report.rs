//! CSV tables with a timestamp comment line, JSON summaries, and a
//! minimal SVG line chart.

use std::fmt::Write as _;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::Serialize;

use crate::error::CliError;

/// `# stem <command> generated at unix <secs>`; the only line that varies
/// between identical runs.
pub fn comment_line(command: &str) -> String {
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    format!("# stem {command} generated at unix {secs}\n")
}

/// Writes to stdout; a closed pipe (e.g. `| head`) is not an error.
pub fn stdout(text: &str) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(text.as_bytes()).and_then(|_| out.flush());
}

pub fn csv_body<R: Serialize>(rows: &[R]) -> Result<String, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)
            .map_err(|e| CliError::Usage(format!("csv encoding failed: {e}")))?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| CliError::Usage(format!("csv encoding failed: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

pub fn to_json<S: Serialize>(value: &S) -> String {
    serde_json::to_string_pretty(value).expect("summary serializes")
}

/// CSV to `out` (or stdout); summary JSON to `summary` if given, and to
/// stdout whenever the CSV went to a file.
pub fn emit<R: Serialize, S: Serialize>(
    command: &str,
    rows: &[R],
    summary: &S,
    out: Option<&Path>,
    summary_path: Option<&Path>,
) -> Result<(), CliError> {
    let text = format!("{}{}", comment_line(command), csv_body(rows)?);
    let json = to_json(summary);
    if let Some(p) = summary_path {
        write_file(p, &format!("{json}\n"))?;
    }
    match out {
        Some(p) => {
            write_file(p, &text)?;
            stdout(&format!("{json}\n"));
        }
        None => stdout(&text),
    }
    Ok(())
}

pub struct Series<'a> {
    pub label: &'a str,
    pub colour: &'a str,
    pub points: Vec<(f64, f64)>,
}

/// Standalone SVG 1.1 line chart. Every series is scaled to its own y
/// range; the x axis is shared.
pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const M: f64 = 56.0;
    let xs = series.iter().flat_map(|s| s.points.iter().map(|p| p.0));
    let (x0, x1) = min_max(xs);
    let px = |x: f64| M + (x - x0) / span(x0, x1) * (W - 2.0 * M);

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{M}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{M}" y1="{M}" x2="{M}" y2="{y}" stroke="black"/>"#,
        y = H - M,
        x2 = W - M
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 16.0,
        escape(x_label)
    );
    for (x, anchor) in [(x0, "start"), (x1, "end")] {
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="11" text-anchor="{anchor}">{}</text>"#,
            px(x),
            H - M + 16.0,
            fmt_num(x)
        );
    }
    for (k, s) in series.iter().enumerate() {
        let (y0, y1) = min_max(s.points.iter().map(|p| p.1));
        let py = |y: f64| H - M - (y - y0) / span(y0, y1) * (H - 2.0 * M);
        let pts: Vec<String> = s
            .points
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{}" stroke-width="2" points="{}"/>"#,
            s.colour,
            pts.join(" ")
        );
        for &(x, y) in &s.points {
            let _ = writeln!(
                svg,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{}"/>"#,
                px(x),
                py(y),
                s.colour
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}" font-family="sans-serif" font-size="12" fill="{}">{} [{} .. {}]</text>"#,
            M + 8.0,
            M + 16.0 * k as f64,
            s.colour,
            escape(s.label),
            fmt_num(y0),
            fmt_num(y1)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
}

fn span(lo: f64, hi: f64) -> f64 {
    if hi > lo {
        hi - lo
    } else {
        1.0
    }
}

fn fmt_num(x: f64) -> String {
    if x != 0.0 && (x.abs() < 1e-3 || x.abs() >= 1e4) {
        format!("{x:.3e}")
    } else {
        format!("{x:.4}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
