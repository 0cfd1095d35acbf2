use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::record::{ExperimentRecord, GridCell, Metrics};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Table,
    Csv,
    Plot,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "table" => Ok(ReportFormat::Table),
            "csv" => Ok(ReportFormat::Csv),
            "plot" => Ok(ReportFormat::Plot),
            other => Err(Error::InvalidConfig(format!("unknown report format {other:?}"))),
        }
    }
}

fn non_empty(records: &[ExperimentRecord]) -> Result<()> {
    if records.is_empty() {
        return Err(Error::EmptyInput);
    }
    Ok(())
}

fn pct(v: Option<f64>) -> String {
    v.map_or("-".into(), |v| format!("{:.2}", 100.0 * v))
}

/// One row per record: tag, arch, dataset, samples, top-1, top-5 (percent)
/// and parameter count.
pub fn render_table(records: &[ExperimentRecord]) -> Result<String> {
    non_empty(records)?;
    let mut s = String::from("| experiment | arch | dataset | samples/class | top-1 % | top-5 % | params |\n");
    s.push_str("|---|---|---|---|---|---|---|\n");
    for r in records {
        writeln!(
            s,
            "| {} | {} | {} | {} | {} | {} | {} |",
            r.experiment_tag,
            r.arch,
            r.dataset,
            r.samples_per_class.map_or("all".into(), |n| n.to_string()),
            pct(r.metrics.top1),
            pct(r.metrics.top5),
            r.parameter_count
        )
        .expect("writing to a string");
    }
    Ok(s)
}

/// Few-shot accuracies with archs as rows and `n-way k-shot` columns.
pub fn render_fewshot_grid(records: &[ExperimentRecord]) -> Result<String> {
    non_empty(records)?;
    let mut rows: BTreeMap<&str, BTreeMap<(usize, usize), &GridCell>> = BTreeMap::new();
    let mut cols = BTreeSet::new();
    for r in records {
        for c in &r.metrics.fewshot {
            cols.insert((c.n_way, c.k_shot));
            rows.entry(&r.arch).or_default().insert((c.n_way, c.k_shot), c);
        }
    }
    if rows.is_empty() {
        return Err(Error::InvalidConfig("no record carries few-shot results".into()));
    }
    let mut s = String::from("| arch |");
    for (w, k) in &cols {
        write!(s, " {w}-way {k}-shot |").expect("writing to a string");
    }
    s.push_str("\n|---|");
    s.push_str(&"---|".repeat(cols.len()));
    s.push('\n');
    for (arch, cells) in rows {
        write!(s, "| {arch} |").expect("writing to a string");
        for key in &cols {
            match cells.get(key) {
                Some(c) => write!(s, " {:.2} ± {:.2} |", 100.0 * c.mean_acc, 100.0 * c.ci95),
                None => write!(s, " - |"),
            }
            .expect("writing to a string");
        }
        s.push('\n');
    }
    Ok(s)
}

const CSV_HEADER: [&str; 10] = [
    "experiment_tag",
    "arch",
    "dataset",
    "samples_per_class",
    "top1",
    "top5",
    "fewshot",
    "parameter_count",
    "wall_time_s",
    "config",
];

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

/// Shortest round-trip float formatting keeps the CSV lossless.
pub fn to_csv(records: &[ExperimentRecord]) -> Result<String> {
    non_empty(records)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let err = |e: csv::Error| Error::format("csv", e.to_string());
    w.write_record(CSV_HEADER).map_err(err)?;
    for r in records {
        w.write_record([
            r.experiment_tag.clone(),
            r.arch.clone(),
            r.dataset.clone(),
            opt(r.samples_per_class),
            opt(r.metrics.top1),
            opt(r.metrics.top5),
            serde_json::to_string(&r.metrics.fewshot)?,
            r.parameter_count.to_string(),
            r.wall_time_s.to_string(),
            serde_json::to_string(&r.config)?,
        ])
        .map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format("csv", e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::format("csv", e.to_string()))
}

pub fn from_csv(text: &str) -> Result<Vec<ExperimentRecord>> {
    let mut rd = csv::Reader::from_reader(text.as_bytes());
    let bad = |what: &str, v: &str| Error::format("csv", format!("bad {what} {v:?}"));
    let header = rd.headers().map_err(|e| Error::format("csv", e.to_string()))?;
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::format("csv", "unexpected header"));
    }
    let mut out = Vec::new();
    for row in rd.records() {
        let row = row.map_err(|e| Error::format("csv", e.to_string()))?;
        let f = |i: usize| row.get(i).unwrap_or("");
        let opt_f64 = |i: usize| -> Result<Option<f64>> {
            match f(i) {
                "" => Ok(None),
                v => v.parse().map(Some).map_err(|_| bad(CSV_HEADER[i], v)),
            }
        };
        out.push(ExperimentRecord {
            experiment_tag: f(0).into(),
            arch: f(1).into(),
            dataset: f(2).into(),
            samples_per_class: match f(3) {
                "" => None,
                v => Some(v.parse().map_err(|_| bad("samples_per_class", v))?),
            },
            metrics: Metrics {
                top1: opt_f64(4)?,
                top5: opt_f64(5)?,
                fewshot: serde_json::from_str(f(6))?,
            },
            parameter_count: f(7).parse().map_err(|_| bad("parameter_count", f(7)))?,
            wall_time_s: f(8).parse().map_err(|_| bad("wall_time_s", f(8)))?,
            config: serde_json::from_str(f(9))?,
        });
    }
    Ok(out)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// SVG line chart of top-1 accuracy against samples per class, one line per arch.
pub fn render_sweep_svg(records: &[ExperimentRecord]) -> Result<String> {
    non_empty(records)?;
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for r in records {
        if let (Some(n), Some(acc)) = (r.samples_per_class, r.metrics.top1) {
            series.entry(&r.arch).or_default().push((n as f64, acc));
        }
    }
    if series.is_empty() {
        return Err(Error::InvalidConfig("no record has samples_per_class and top1".into()));
    }
    let xmax = series.values().flatten().map(|p| p.0).fold(1.0, f64::max);
    let (w, h, left, bottom, top, right) = (640.0, 420.0, 60.0, 50.0, 20.0, 150.0);
    let px = |x: f64| left + x / xmax * (w - left - right);
    let py = |y: f64| h - bottom - y * (h - bottom - top);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    writeln!(s, "<rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>").expect("string");
    writeln!(
        s,
        "<line x1=\"{l}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/><line x1=\"{l}\" y1=\"{b}\" x2=\"{l}\" y2=\"{t}\" stroke=\"black\"/>",
        l = left,
        b = py(0.0),
        r = w - right,
        t = py(1.0)
    )
    .expect("string");
    for i in 0..=5 {
        let y = i as f64 / 5.0;
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{:.0}</text>", left - 6.0, py(y) + 4.0, y * 100.0).expect("string");
    }
    for x in series.values().flatten().map(|p| p.0 as usize).collect::<BTreeSet<_>>() {
        writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x}</text>", px(x as f64), py(0.0) + 18.0).expect("string");
    }
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">samples per class</text>", (left + w - right) / 2.0, h - 8.0).expect("string");
    writeln!(s, "<text x=\"14\" y=\"{}\" transform=\"rotate(-90 14 {})\" text-anchor=\"middle\">top-1 accuracy (%)</text>", h / 2.0, h / 2.0).expect("string");
    for (i, (arch, pts)) in series.iter_mut().enumerate() {
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let color = PALETTE[i % PALETTE.len()];
        let coords: Vec<String> = pts.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        writeln!(s, "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>", coords.join(" ")).expect("string");
        for &(x, y) in pts.iter() {
            writeln!(s, "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"3\" fill=\"{color}\"/>", px(x), py(y)).expect("string");
        }
        let ly = top + 16.0 * i as f64 + 10.0;
        writeln!(
            s,
            "<line x1=\"{}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\">{arch}</text>",
            w - right + 10.0,
            w - right + 30.0,
            w - right + 36.0,
            ly + 4.0
        )
        .expect("string");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes the requested format into `out_dir` and returns the files written.
pub fn report(records: &[ExperimentRecord], format: ReportFormat, out_dir: &Path) -> Result<Vec<PathBuf>> {
    non_empty(records)?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    match format {
        ReportFormat::Table => {
            let path = out_dir.join("table.md");
            let mut text = render_table(records)?;
            if let Ok(grid) = render_fewshot_grid(records) {
                text.push('\n');
                text.push_str(&grid);
            }
            std::fs::write(&path, text)?;
            written.push(path);
        }
        ReportFormat::Csv => {
            let path = out_dir.join("records.csv");
            std::fs::write(&path, to_csv(records)?)?;
            written.push(path);
        }
        ReportFormat::Plot => {
            let path = out_dir.join("sweep.svg");
            std::fs::write(&path, render_sweep_svg(records)?)?;
            written.push(path);
        }
    }
    Ok(written)
}
