//! Markdown summary of one or more `eval.csv` files. Every number in the
//! report is recomputed from the cell rows of the inputs.

use std::collections::BTreeMap;
use std::fmt::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use super::eval::{aggregate, pick_baseline, EVAL_COLUMNS};
use super::stats::{paired_t, sign_test, PairedT, SignTest};
use super::svg::{Chart, Series};
use super::{
    create_dir, io_err, sha256_hex, write_file, EvalRow, HarnessError, MethodAggregate, RunManifest, EVAL_SCHEMA,
};

/// An `eval.csv` path, optionally relabeling every row's method.
#[derive(Debug, Clone)]
pub struct ReportInput {
    pub path: PathBuf,
    pub label: Option<String>,
}

impl ReportInput {
    /// Parses `path` or `label=path`.
    pub fn parse(arg: &str) -> Self {
        match arg.split_once('=') {
            Some((label, path)) if !label.is_empty() && !label.contains(['/', '\\']) => ReportInput {
                path: PathBuf::from(path),
                label: Some(label.to_string()),
            },
            _ => ReportInput {
                path: PathBuf::from(arg),
                label: None,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct PairComparison {
    pub method: String,
    pub against: String,
    /// `cost` or `reward`.
    pub metric: &'static str,
    /// Matched (task, test environment, seed) cells.
    pub n: usize,
    pub sign: SignTest,
    pub t: PairedT,
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub baseline: String,
    pub aggregates: Vec<MethodAggregate>,
    pub comparisons: Vec<PairComparison>,
}

fn schema_err(file: &Path, column: &str, detail: impl Into<String>) -> HarnessError {
    HarnessError::Schema {
        file: file.display().to_string(),
        column: column.to_string(),
        detail: detail.into(),
    }
}

/// Reads the cell rows of an `eval.csv`, checking the header and the schema
/// tag of every row.
pub fn read_eval_csv(input: &ReportInput) -> Result<(Vec<EvalRow>, String), HarnessError> {
    let path = &input.path;
    let bytes = std::fs::read(path).map_err(io_err(path))?;
    let mut reader = csv::Reader::from_reader(bytes.as_slice());
    let headers = reader.headers()?.clone();
    for (i, want) in EVAL_COLUMNS.iter().enumerate() {
        match headers.get(i) {
            Some(got) if got == *want => {}
            Some(got) => return Err(schema_err(path, want, format!("found {got:?} at position {i}"))),
            None => return Err(schema_err(path, want, "column missing")),
        }
    }
    if let Some(extra) = headers.get(EVAL_COLUMNS.len()) {
        return Err(schema_err(path, extra, "unexpected column"));
    }
    let mut rows = Vec::new();
    for (line, rec) in reader.deserialize::<EvalRow>().enumerate() {
        let mut row = rec.map_err(|e| {
            let column = e
                .position()
                .and(match e.kind() {
                    csv::ErrorKind::Deserialize { err, .. } => err.field().map(|f| f as usize),
                    _ => None,
                })
                .and_then(|f| EVAL_COLUMNS.get(f).copied())
                .unwrap_or("?");
            schema_err(path, column, format!("row {}: {e}", line + 1))
        })?;
        if row.schema != EVAL_SCHEMA {
            return Err(schema_err(
                path,
                "schema",
                format!("row {}: expected {EVAL_SCHEMA:?}, found {:?}", line + 1, row.schema),
            ));
        }
        if row.row != "cell" {
            continue;
        }
        for (name, ok) in [
            ("value", row.value.is_some()),
            ("seed", row.seed.is_some()),
            ("total_reward", row.total_reward.is_some()),
            ("total_cost", row.total_cost.is_some()),
            ("safe", row.safe.is_some()),
        ] {
            if !ok {
                return Err(schema_err(path, name, format!("row {}: empty in a cell row", line + 1)));
            }
        }
        if let Some(l) = &input.label {
            row.method = l.clone();
        }
        rows.push(row);
    }
    Ok((rows, sha256_hex(&bytes)))
}

type CellKey = (String, u64, u64);

fn cell_key(r: &EvalRow) -> CellKey {
    (r.task.clone(), r.value.unwrap_or(f64::NAN).to_bits(), r.seed.unwrap_or(0))
}

/// Aggregates and pairwise comparisons over cell rows.
pub fn summarize(cells: &[EvalRow]) -> Summary {
    let mut seen = Vec::new();
    for c in cells {
        if !seen.contains(&c.method.as_str()) {
            seen.push(c.method.as_str());
        }
    }
    let baseline = pick_baseline(seen.iter().copied());
    let aggregates = aggregate(cells, &baseline);
    let mut by_method: BTreeMap<&str, BTreeMap<CellKey, &EvalRow>> = BTreeMap::new();
    for c in cells {
        by_method.entry(c.method.as_str()).or_default().insert(cell_key(c), c);
    }
    let mut comparisons = Vec::new();
    let names: Vec<&str> = aggregates.iter().map(|a| a.method.as_str()).collect();
    for (i, a) in names.iter().enumerate() {
        for b in &names[..i] {
            let (ma, mb) = (&by_method[a], &by_method[b]);
            let matched: Vec<(&EvalRow, &EvalRow)> =
                ma.iter().filter_map(|(k, ra)| mb.get(k).map(|rb| (*ra, *rb))).collect();
            for metric in ["cost", "reward"] {
                let pick = |r: &EvalRow| match metric {
                    "cost" => r.total_cost.unwrap_or(f64::NAN),
                    _ => r.total_reward.unwrap_or(f64::NAN),
                };
                let xa: Vec<f64> = matched.iter().map(|(ra, _)| pick(ra)).collect();
                let xb: Vec<f64> = matched.iter().map(|(_, rb)| pick(rb)).collect();
                comparisons.push(PairComparison {
                    method: a.to_string(),
                    against: b.to_string(),
                    metric,
                    n: matched.len(),
                    sign: sign_test(&xa, &xb),
                    t: paired_t(&xa, &xb),
                });
            }
        }
    }
    Summary {
        baseline,
        aggregates,
        comparisons,
    }
}

fn num(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.2}")
    } else {
        "n/a".into()
    }
}

fn pval(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.4}")
    } else {
        "n/a".into()
    }
}

/// Renders the summary as markdown.
pub fn render_markdown(summary: &Summary, inputs: &[(String, String)], manifest: &str) -> String {
    let mut md = String::new();
    let _ = writeln!(md, "# Evaluation summary\n");
    let _ = writeln!(md, "Manifest `{manifest}`. Inputs:\n");
    for (path, digest) in inputs {
        let _ = writeln!(md, "- `{path}` (sha256 `{}`)", &digest[..16]);
    }
    let _ = writeln!(
        md,
        "\nNormalized columns are averaged over test environments of the method's mean divided by the `{}` mean in the same environment.\n",
        summary.baseline
    );
    let _ = writeln!(md, "| method | cells | % safe | normalized reward | normalized cost |");
    let _ = writeln!(md, "|---|---:|---:|---:|---:|");
    for a in &summary.aggregates {
        let _ = writeln!(
            md,
            "| {} | {} | {:.1} | {} | {} |",
            a.method,
            a.cells,
            a.pct_safe,
            num(a.norm_reward),
            num(a.norm_cost)
        );
    }
    if !summary.comparisons.is_empty() {
        let _ = writeln!(md, "\n## Paired comparisons\n");
        let _ = writeln!(
            md,
            "Matched cells share task, test environment and training seed. The sign test is exact (ties dropped); the paired t-test is shown for reference.\n"
        );
        for c in &summary.comparisons {
            let _ = writeln!(
                md,
                "- {} vs {} ({}): {} matched cells, {} lower / {} higher / {} tied; sign test p = {}; paired t = {}, p = {}",
                c.method,
                c.against,
                c.metric,
                c.n,
                c.sign.below,
                c.sign.above,
                c.sign.ties,
                pval(c.sign.p_value),
                num(c.t.t),
                pval(c.t.p_value)
            );
        }
    }
    md
}

fn sweep_charts(cells: &[EvalRow], manifest: &str) -> Vec<(String, String)> {
    let mut per_task: BTreeMap<&str, Vec<&EvalRow>> = BTreeMap::new();
    for c in cells {
        per_task.entry(c.task.as_str()).or_default().push(c);
    }
    let mut out = Vec::new();
    for (task, rows) in per_task {
        let parameter = rows[0].parameter.clone();
        let budget = rows[0].budget;
        for (metric, label) in [("cost", "total cost"), ("reward", "total reward")] {
            let mut series: BTreeMap<&str, BTreeMap<u64, (f64, usize)>> = BTreeMap::new();
            for r in &rows {
                let v = if metric == "cost" { r.total_cost } else { r.total_reward }.unwrap_or(f64::NAN);
                let e = series
                    .entry(r.method.as_str())
                    .or_default()
                    .entry(r.value.unwrap_or(f64::NAN).to_bits())
                    .or_default();
                e.0 += v;
                e.1 += 1;
            }
            let mut series: Vec<Series> = series
                .into_iter()
                .map(|(m, pts)| {
                    let mut points: Vec<(f64, f64)> =
                        pts.into_iter().map(|(x, (s, n))| (f64::from_bits(x), s / n as f64)).collect();
                    points.sort_by(|a, b| a.0.total_cmp(&b.0));
                    Series {
                        label: m.to_string(),
                        points,
                    }
                })
                .collect();
            series.sort_by(|a, b| a.label.cmp(&b.label));
            let chart = Chart {
                title: format!("{task}: mean {label} across the {parameter} sweep"),
                x_label: parameter.clone(),
                y_label: label.into(),
                series,
                hline: (metric == "cost").then(|| (budget, "budget".to_string())),
                note: format!("manifest {manifest}"),
            };
            out.push((format!("{task}_{metric}_vs_{parameter}.svg"), chart.render()));
        }
    }
    out
}

/// Reads the inputs, writes `report.md`, `figures/*.svg` and `manifest.json`
/// into `outdir` when given, and returns the summary with its markdown.
pub fn cmd_report(inputs: &[ReportInput], outdir: Option<&Path>) -> Result<(Summary, String), HarnessError> {
    if inputs.is_empty() {
        return Err(HarnessError::Usage("report needs at least one eval CSV".into()));
    }
    let mut cells = Vec::new();
    let mut digests = Vec::new();
    for input in inputs {
        let (rows, digest) = read_eval_csv(input)?;
        cells.extend(rows);
        digests.push((input.path.display().to_string(), digest));
    }
    let summary = summarize(&cells);
    let manifest = RunManifest::new(
        "report",
        json!({"labels": inputs.iter().map(|i| i.label.clone()).collect::<Vec<_>>()}),
        Vec::new(),
        digests.clone(),
        outdir.unwrap_or(Path::new(".")),
    );
    let md = render_markdown(&summary, &digests, manifest.short_hash());
    if let Some(dir) = outdir {
        let mut manifest = manifest;
        create_dir(dir)?;
        write_file(&dir.join("report.md"), md.as_bytes())?;
        let figdir = dir.join("figures");
        create_dir(&figdir)?;
        for (name, svg) in sweep_charts(&cells, &manifest.hash) {
            write_file(&figdir.join(name), svg.as_bytes())?;
        }
        manifest.finish(dir)?;
    }
    Ok((summary, md))
}
