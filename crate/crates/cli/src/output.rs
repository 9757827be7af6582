//! CSV and SVG emission. Tables land as one CSV per scenario; plots are
//! rendered from the CSV text they sit next to, never from in-memory state,
//! so a plot can always be regenerated from its CSV alone.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use crate::scenarios::{BenchRow, ButterflyResult, FailureRow};

pub fn butterfly_csv(result: &ButterflyResult) -> String {
    let mut out = String::from("scheme,send_ratio,receiver,mean_recv_over_send,stddev,reps\n");
    for r in &result.rows {
        let _ = writeln!(
            out,
            "{},{:.4},{},{:.6},{:.6},{}",
            r.scheme, r.ratio, r.receiver, r.mean, r.stddev, r.reps
        );
    }
    out
}

pub fn knees_csv(result: &ButterflyResult) -> String {
    let mut out = String::from("rep,coding_knee,forwarding_knee\n");
    for k in &result.knees {
        let _ = writeln!(
            out,
            "{},{:.4},{:.4}",
            k.rep, k.coding_knee, k.forwarding_knee
        );
    }
    out
}

pub fn failure_csv(rows: &[FailureRow]) -> String {
    let mut out = String::from(
        "path,fail_time_s,sent,delivered,lost,byte_exact,in_order,max_gap_ns\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{},{},{},{},{},{}",
            r.path, r.fail_time_s, r.sent, r.delivered, r.lost, r.byte_exact, r.in_order,
            r.max_gap_ns
        );
    }
    out
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from(
        "payload,parity_delay_ms,delay_diff_ms,switch,role,branch,traversals,\
mean_lookups,mean_bytes,mean_clones,mean_recircs,mean_latency_ns\n",
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.3},{:.3},{},{},{},{},{:.3},{:.1},{:.4},{:.4},{:.1}",
            r.payload,
            r.parity_delay_ms,
            r.delay_diff_ms,
            r.switch,
            r.role,
            r.branch,
            r.traversals,
            r.mean_lookups,
            r.mean_bytes,
            r.mean_clones,
            r.mean_recircs,
            r.mean_latency_ns
        );
    }
    out
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines();
    let header = lines
        .next()
        .unwrap_or("")
        .split(',')
        .map(str::to_string)
        .collect();
    let rows = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect();
    (header, rows)
}

fn col(header: &[String], name: &str) -> usize {
    header
        .iter()
        .position(|h| h == name)
        .unwrap_or_else(|| panic!("csv column `{name}` missing"))
}

const PLOT_W: f64 = 800.0;
const PLOT_H: f64 = 500.0;
const MARGIN: f64 = 70.0;

fn svg_open(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {PLOT_W} {PLOT_H}\" \
font-family=\"sans-serif\" font-size=\"13\">\n\
<rect width=\"{PLOT_W}\" height=\"{PLOT_H}\" fill=\"white\"/>\n\
<text x=\"{:.1}\" y=\"24\" text-anchor=\"middle\" font-size=\"16\">{title}</text>\n",
        PLOT_W / 2.0
    )
}

/// Rate chart from `butterfly_rate.csv`: received/send ratio against
/// send-rate/max-flow ratio, one line per scheme, error bars over reps.
pub fn render_butterfly_svg(csv_text: &str) -> String {
    let (header, rows) = parse_csv(csv_text);
    let c_scheme = col(&header, "scheme");
    let c_ratio = col(&header, "send_ratio");
    let c_recv = col(&header, "receiver");
    let c_mean = col(&header, "mean_recv_over_send");
    let c_std = col(&header, "stddev");

    // plot the lowest receiver id (receivers are empirically identical)
    let receiver = rows
        .iter()
        .map(|r| r[c_recv].clone())
        .min()
        .unwrap_or_default();
    // (scheme, color, (x, mean, stddev) points)
    type Series<'a> = (&'a str, &'a str, Vec<(f64, f64, f64)>);
    let mut series: Vec<Series> = vec![
        ("coding", "#1f77b4", Vec::new()),
        ("forwarding", "#d62728", Vec::new()),
    ];
    let mut y_max: f64 = 1.0;
    for row in &rows {
        if row[c_recv] != receiver {
            continue;
        }
        let x: f64 = row[c_ratio].parse().unwrap_or(0.0);
        let mean: f64 = row[c_mean].parse().unwrap_or(0.0);
        let std: f64 = row[c_std].parse().unwrap_or(0.0);
        y_max = y_max.max(mean + std);
        for s in series.iter_mut() {
            if s.0 == row[c_scheme] {
                s.2.push((x, mean, std));
            }
        }
    }
    let x_for = |x: f64| MARGIN + x * (PLOT_W - 2.0 * MARGIN);
    let y_for = |y: f64| PLOT_H - MARGIN - (y / y_max) * (PLOT_H - 2.0 * MARGIN);

    let mut svg = svg_open("Received rate over send rate vs send rate over max-flow");
    // axes
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN
    );
    for i in 0..=10 {
        let x = i as f64 / 10.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{:.1}</text>",
            x_for(x),
            PLOT_H - MARGIN + 20.0,
            x
        );
    }
    for i in 0..=5 {
        let y = y_max * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.2}</text>",
            MARGIN - 8.0,
            y_for(y) + 4.0,
            y
        );
    }
    let _ = write!(
        svg,
        "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">send rate / max-flow</text>\n\
<text x=\"18\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 18 {:.1})\">received / send</text>\n",
        PLOT_W / 2.0,
        PLOT_H - 20.0,
        PLOT_H / 2.0,
        PLOT_H / 2.0
    );
    for (idx, (name, color, points)) in series.iter().enumerate() {
        let mut sorted = points.clone();
        sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = sorted
            .iter()
            .map(|(x, y, _)| format!("{:.1},{:.1}", x_for(*x), y_for(*y)))
            .collect();
        let _ = writeln!(
            svg,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>",
            path.join(" ")
        );
        for (x, y, std) in &sorted {
            let _ = write!(
                svg,
                "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>\n\
<line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"{color}\"/>\n",
                x_for(*x),
                y_for(*y),
                x_for(*x),
                y_for(y + std),
                x_for(*x),
                y_for((y - std).max(0.0)),
            );
        }
        let ly = MARGIN + 20.0 * idx as f64;
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"14\" height=\"4\" fill=\"{color}\"/>\n\
<text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n",
            PLOT_W - MARGIN - 140.0,
            ly,
            PLOT_W - MARGIN - 120.0,
            ly + 6.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Grouped bars from `diversity_bench.csv`: mean modeled
/// latency per switch role, grouped by payload size, decode split by branch.
pub fn render_bench_svg(csv_text: &str) -> String {
    let (header, rows) = parse_csv(csv_text);
    let c_payload = col(&header, "payload");
    let c_role = col(&header, "role");
    let c_branch = col(&header, "branch");
    let c_lat = col(&header, "mean_latency_ns");
    let c_n = col(&header, "traversals");

    // aggregate latency means per (payload, bar kind), weighted by traversals
    let bars = [
        ("coding", "coding", "all", "#1f77b4"),
        ("forwarding", "forwarding", "all", "#2ca02c"),
        ("decode arith", "decoding", "arithmetic", "#d62728"),
        ("decode pass", "decoding", "passthrough", "#9467bd"),
    ];
    let mut payloads: Vec<u64> = rows
        .iter()
        .filter_map(|r| r[c_payload].parse().ok())
        .collect();
    payloads.sort_unstable();
    payloads.dedup();

    let mut values: Vec<Vec<f64>> = Vec::new();
    let mut y_max: f64 = 1.0;
    for &payload in &payloads {
        let mut group = Vec::new();
        for (_, role, branch, _) in &bars {
            let mut num = 0.0;
            let mut den = 0.0;
            for r in &rows {
                if r[c_payload].parse::<u64>().ok() != Some(payload)
                    || r[c_role] != *role
                    || r[c_branch] != *branch
                {
                    continue;
                }
                let n: f64 = r[c_n].parse().unwrap_or(0.0);
                let lat: f64 = r[c_lat].parse().unwrap_or(0.0);
                num += n * lat;
                den += n;
            }
            let mean = if den > 0.0 { num / den } else { 0.0 };
            y_max = y_max.max(mean);
            group.push(mean);
        }
        values.push(group);
    }

    let mut svg = svg_open("Mean modeled processing latency per packet (ns)");
    let plot_w = PLOT_W - 2.0 * MARGIN;
    let group_w = plot_w / payloads.len().max(1) as f64;
    let bar_w = group_w / (bars.len() + 1) as f64;
    let y_for = |v: f64| PLOT_H - MARGIN - (v / y_max) * (PLOT_H - 2.0 * MARGIN);
    let _ = write!(
        svg,
        "<line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
<line x1=\"{m}\" y1=\"{t}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = PLOT_H - MARGIN,
        r = PLOT_W - MARGIN,
        t = MARGIN
    );
    for i in 0..=5 {
        let v = y_max * i as f64 / 5.0;
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{:.0}</text>",
            MARGIN - 8.0,
            y_for(v) + 4.0,
            v
        );
    }
    for (gi, (&payload, group)) in payloads.iter().zip(&values).enumerate() {
        let gx = MARGIN + gi as f64 * group_w;
        for (bi, ((_, _, _, color), &v)) in bars.iter().zip(group).enumerate() {
            let x = gx + bar_w * (bi as f64 + 0.5);
            let y = y_for(v);
            let _ = writeln!(
                svg,
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"{color}\"/>",
                x,
                y,
                bar_w * 0.9,
                (PLOT_H - MARGIN) - y
            );
        }
        let _ = writeln!(
            svg,
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{payload} B</text>",
            gx + group_w / 2.0,
            PLOT_H - MARGIN + 20.0
        );
    }
    for (i, (name, _, _, color)) in bars.iter().enumerate() {
        let ly = MARGIN + 20.0 * i as f64;
        let _ = write!(
            svg,
            "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"14\" height=\"10\" fill=\"{color}\"/>\n\
<text x=\"{:.1}\" y=\"{:.1}\">{name}</text>\n",
            PLOT_W - MARGIN - 150.0,
            ly,
            PLOT_W - MARGIN - 130.0,
            ly + 9.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<PathBuf> {
    let path = dir.join(name);
    std::fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Writes the butterfly sweep outputs: CSV, knee table, and the rate plot
/// rendered back from the CSV. Empty sweeps error before any file appears.
pub fn emit_butterfly(out_dir: &Path, result: &ButterflyResult) -> Result<Vec<PathBuf>> {
    if result.rows.is_empty() {
        bail!("empty sweep: nothing to emit");
    }
    std::fs::create_dir_all(out_dir)?;
    let csv = butterfly_csv(result);
    let mut files = vec![write_file(out_dir, "butterfly_rate.csv", &csv)?];
    files.push(write_file(out_dir, "butterfly_knees.csv", &knees_csv(result))?);
    files.push(write_file(
        out_dir,
        "butterfly_rate.svg",
        &render_butterfly_svg(&csv),
    )?);
    Ok(files)
}

pub fn emit_diversity_failure(out_dir: &Path, rows: &[FailureRow]) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("empty sweep: nothing to emit");
    }
    std::fs::create_dir_all(out_dir)?;
    Ok(vec![write_file(
        out_dir,
        "diversity_failure.csv",
        &failure_csv(rows),
    )?])
}

pub fn emit_diversity_bench(out_dir: &Path, rows: &[BenchRow]) -> Result<Vec<PathBuf>> {
    if rows.is_empty() {
        bail!("empty sweep: nothing to emit");
    }
    std::fs::create_dir_all(out_dir)?;
    let csv = bench_csv(rows);
    let mut files = vec![write_file(out_dir, "diversity_bench.csv", &csv)?];
    files.push(write_file(
        out_dir,
        "diversity_bench.svg",
        &render_bench_svg(&csv),
    )?);
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenarios::{KneeRow, RateRow};

    fn tiny_result() -> ButterflyResult {
        ButterflyResult {
            rows: vec![
                RateRow {
                    scheme: "coding",
                    ratio: 0.5,
                    receiver: 101,
                    mean: 0.99,
                    stddev: 0.002,
                    reps: 2,
                },
                RateRow {
                    scheme: "forwarding",
                    ratio: 0.5,
                    receiver: 101,
                    mean: 0.97,
                    stddev: 0.01,
                    reps: 2,
                },
            ],
            knees: vec![KneeRow {
                rep: 0,
                coding_knee: 0.8,
                forwarding_knee: 0.5,
            }],
        }
    }

    #[test]
    fn emits_are_deterministic_and_complete() {
        let dir = tempfile::tempdir().unwrap();
        let result = tiny_result();
        let files = emit_butterfly(dir.path(), &result).unwrap();
        assert_eq!(files.len(), 3);
        let first = std::fs::read(&files[0]).unwrap();
        let svg = std::fs::read_to_string(dir.path().join("butterfly_rate.svg")).unwrap();
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        // identical inputs produce byte-identical outputs
        let _ = emit_butterfly(dir.path(), &result).unwrap();
        assert_eq!(std::fs::read(&files[0]).unwrap(), first);
    }

    #[test]
    fn empty_sweep_errors_without_partial_files() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("results");
        let empty = ButterflyResult {
            rows: vec![],
            knees: vec![],
        };
        assert!(emit_butterfly(&out, &empty).is_err());
        assert!(emit_diversity_failure(&out, &[]).is_err());
        assert!(emit_diversity_bench(&out, &[]).is_err());
        assert!(!out.exists(), "no partial output directory");
    }

    #[test]
    fn unwritable_out_dir_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocked = dir.path().join("file");
        std::fs::write(&blocked, "x").unwrap();
        // a file in place of the out dir cannot take children
        assert!(emit_butterfly(&blocked, &tiny_result()).is_err());
    }

    #[test]
    fn bench_svg_renders_groups_from_csv() {
        let csv = "payload,parity_delay_ms,delay_diff_ms,switch,role,branch,traversals,\
mean_lookups,mean_bytes,mean_clones,mean_recircs,mean_latency_ns\n\
1024,1.000,-4.000,1,coding,all,40,1.500,1536.0,0.5000,0.5000,17000.0\n\
1024,1.000,-4.000,2,forwarding,all,20,1.000,0.0,0.0000,0.0000,1000.0\n\
1024,1.000,-4.000,5,decoding,arithmetic,20,2.000,3072.0,1.0000,1.0000,35000.0\n\
1024,10.000,5.000,5,decoding,passthrough,20,1.000,1024.0,0.0000,0.0000,11000.0\n";
        let svg = render_bench_svg(csv);
        assert!(svg.contains("1024 B"));
        assert!(svg.matches("<rect").count() >= 4);
    }
}
