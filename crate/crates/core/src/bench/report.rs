use std::collections::BTreeMap;
use std::fmt::Write;

use super::{AnalysisResult, SweepRow, TimingBands};

/// Summary tables for a set of result rows and their analysis.
pub fn render_markdown(rows: &[SweepRow], analysis: &AnalysisResult) -> String {
    let mut out = String::new();
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    let _ = writeln!(out, "# Loader benchmark report\n");
    let _ = writeln!(out, "{} runs, {} failed.\n", rows.len(), failed);

    if let Some(c) = &analysis.correlation {
        let _ = writeln!(out, "## Speed vs. total time\n");
        let _ = writeln!(
            out,
            "Pearson r = {:.3}, t = {:.2}, n = {}.\n",
            c.r, c.t_statistic, c.n
        );
    }

    if !analysis.max_speed.is_empty() {
        let _ = writeln!(out, "## Maximum speed\n");
        let _ = writeln!(out, "| group | samples/s |\n|---|---:|");
        for (k, m) in &analysis.max_speed {
            let _ = writeln!(out, "| {k} | {m:.1} |");
        }
        out.push('\n');
    }

    if !analysis.speed_summaries.is_empty() {
        let _ = writeln!(out, "## Speed over repetitions\n");
        let _ = writeln!(
            out,
            "| config | runs | min | median | max |\n|---|---:|---:|---:|---:|"
        );
        for (k, s) in &analysis.speed_summaries {
            let _ = writeln!(
                out,
                "| {k} | {} | {:.1} | {:.1} | {:.1} |",
                s.runs, s.min, s.median, s.max
            );
        }
        out.push('\n');
    }

    if !analysis.slowdowns.is_empty() {
        let _ = writeln!(out, "## Slowdown\n");
        let _ = writeln!(out, "| config | backend | baseline | t base (s) | t (s) | slowdown |\n|---|---|---|---:|---:|---:|");
        for s in &analysis.slowdowns {
            let _ = writeln!(
                out,
                "| {} | {} | {} | {:.3} | {:.3} | {:.0}% |",
                s.config,
                s.backend,
                s.baseline,
                s.baseline_seconds,
                s.other_seconds,
                s.slowdown_pct
            );
        }
        out.push('\n');
    }

    if failed > 0 {
        let _ = writeln!(out, "## Failures\n");
        for r in rows.iter().filter(|r| r.error.is_some()) {
            let _ = writeln!(
                out,
                "- {} {} rep {}: {}",
                r.backend,
                r.loader_key(),
                r.repetition,
                r.error.as_deref().unwrap_or_default()
            );
        }
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

const LABEL_W: f64 = 260.0;
const BAR_W: f64 = 420.0;
const ROW_H: f64 = 22.0;

fn svg_open(rows: usize) -> String {
    let h = ROW_H * rows as f64 + 30.0;
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n",
        LABEL_W + BAR_W + 80.0
    )
}

/// Horizontal bar chart of speeds.
pub fn render_speed_svg(speeds: &BTreeMap<String, f64>) -> String {
    let mut out = svg_open(speeds.len());
    let top = speeds
        .values()
        .copied()
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    for (i, (k, m)) in speeds.iter().enumerate() {
        let y = 10.0 + i as f64 * ROW_H;
        let w = m / top * BAR_W;
        let _ = writeln!(
            out,
            "  <text x=\"4\" y=\"{}\">{}</text>",
            y + 14.0,
            escape(k)
        );
        let _ = writeln!(
            out,
            "  <rect x=\"{LABEL_W}\" y=\"{y}\" width=\"{w:.1}\" height=\"{}\" fill=\"#4477aa\"/>",
            ROW_H - 4.0
        );
        let _ = writeln!(
            out,
            "  <text x=\"{:.1}\" y=\"{}\">{m:.0}</text>",
            LABEL_W + w + 4.0,
            y + 14.0
        );
    }
    out.push_str("</svg>\n");
    out
}

/// Stacked bars per run: init, batch 0, batches 1..k, wrap-up.
pub fn render_bands_svg(runs: &[(String, TimingBands)]) -> String {
    const COLORS: [&str; 4] = ["#999999", "#cc6677", "#4477aa", "#ddcc77"];
    let mut out = svg_open(runs.len() + 1);
    let top = runs
        .iter()
        .map(|(_, b)| b.total)
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let scale = BAR_W / top;
    for (i, (label, b)) in runs.iter().enumerate() {
        let y = 10.0 + i as f64 * ROW_H;
        let _ = writeln!(
            out,
            "  <text x=\"4\" y=\"{}\">{}</text>",
            y + 14.0,
            escape(label)
        );
        let mut x = LABEL_W;
        let mut segments = vec![(b.init, COLORS[0]), (b.first_batch, COLORS[1])];
        segments.extend(b.batches.iter().map(|&d| (d, COLORS[2])));
        segments.push((b.wrap_up.max(0.0), COLORS[3]));
        for (d, color) in segments {
            let w = d * scale;
            let _ = writeln!(
                out,
                "  <rect x=\"{x:.2}\" y=\"{y}\" width=\"{w:.2}\" height=\"{}\" fill=\"{color}\" stroke=\"white\" stroke-width=\"0.5\"/>",
                ROW_H - 4.0
            );
            x += w;
        }
        let _ = writeln!(
            out,
            "  <text x=\"{:.1}\" y=\"{}\">{:.2}s</text>",
            x + 4.0,
            y + 14.0,
            b.total
        );
    }
    let y = 10.0 + runs.len() as f64 * ROW_H + 12.0;
    for (j, name) in ["init", "batch 0", "batches 1..k", "wrap-up"]
        .iter()
        .enumerate()
    {
        let x = LABEL_W + j as f64 * 105.0;
        let _ = writeln!(
            out,
            "  <rect x=\"{x}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{}\"/>",
            y - 9.0,
            COLORS[j]
        );
        let _ = writeln!(out, "  <text x=\"{}\" y=\"{y}\">{name}</text>", x + 14.0);
    }
    out.push_str("</svg>\n");
    out
}
