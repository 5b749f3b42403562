//! `report`: aggregates every `metrics.json` under a directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;

use crate::error::CliError;
use crate::eval::{Metrics, METRICS_FILE};
use crate::out::OutDir;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// Directory searched recursively for completed runs.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

struct Row {
    run: String,
    m: Metrics,
}

impl Row {
    fn stream(&self) -> String {
        match &self.m.fusion {
            Some(f) => format!("fused-{}", f.mode),
            None => self.m.stream.clone(),
        }
    }

    fn column(&self) -> String {
        format!("{}/{}/{}", self.m.route, self.m.variant, self.stream())
    }
}

fn collect(dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    entries.sort();
    for p in entries {
        if p.is_dir() {
            collect(&p, out)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_FILE) {
            out.push(p);
        }
    }
    Ok(())
}

fn text_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.join("  ").trim_end().to_string() + "\n"
    };
    let mut out = line(header.to_vec());
    out.push_str(&line(
        widths
            .iter()
            .map(|&w| "-".repeat(w))
            .collect::<Vec<_>>()
            .iter()
            .map(String::as_str)
            .collect(),
    ));
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

pub fn report(args: &ReportArgs) -> Result<()> {
    let mut files = Vec::new();
    if args.runs.is_dir() {
        collect(&args.runs, &mut files)?;
    }
    if files.is_empty() {
        return Err(CliError::NoRuns(args.runs.display().to_string()).into());
    }
    let rows = files
        .iter()
        .map(|f| {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let m: Metrics = serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))?;
            let dir = f.parent().unwrap_or(Path::new(""));
            let run = dir.strip_prefix(&args.runs).unwrap_or(dir).display().to_string();
            Ok(Row {
                run: if run.is_empty() { ".".into() } else { run },
                m,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let header = ["run", "route", "variant", "stream", "depth", "test_count", "accuracy"];
    let cells: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.run.clone(),
                r.m.route.clone(),
                r.m.variant.clone(),
                r.stream(),
                r.m.depth.to_string(),
                r.m.test_count.to_string(),
                format!("{:.4}", r.m.overall_accuracy),
            ]
        })
        .collect();
    let mut csv = header.join(",") + "\n";
    for (r, c) in rows.iter().zip(&cells) {
        let mut c = c.clone();
        c[6] = r.m.overall_accuracy.to_string();
        csv.push_str(&(c.join(",") + "\n"));
    }

    // depth x (route/variant/stream); the first run in path order fills a cell
    let columns: BTreeSet<String> = rows.iter().map(Row::column).collect();
    let mut grid: BTreeMap<usize, BTreeMap<String, f64>> = BTreeMap::new();
    for r in &rows {
        grid.entry(r.m.depth)
            .or_default()
            .entry(r.column())
            .or_insert(r.m.overall_accuracy);
    }
    let mut grid_csv = std::iter::once("depth".to_string())
        .chain(columns.iter().cloned())
        .collect::<Vec<_>>()
        .join(",")
        + "\n";
    let mut grid_rows = Vec::new();
    for (depth, cells) in &grid {
        let vals: Vec<Option<f64>> = columns.iter().map(|c| cells.get(c).copied()).collect();
        grid_csv.push_str(&format!(
            "{depth},{}\n",
            vals.iter()
                .map(|v| v.map_or(String::new(), |x| x.to_string()))
                .collect::<Vec<_>>()
                .join(",")
        ));
        grid_rows.push(
            std::iter::once(depth.to_string())
                .chain(vals.iter().map(|v| v.map_or("-".into(), |x| format!("{x:.4}"))))
                .collect(),
        );
    }
    let grid_header: Vec<&str> = std::iter::once("depth")
        .chain(columns.iter().map(String::as_str))
        .collect();
    let text = format!(
        "{}\n{}",
        text_table(&header, &cells),
        text_table(&grid_header, &grid_rows)
    );

    let mut out = OutDir::create(&args.out)?;
    out.write("report.csv", csv)?;
    out.write("grid.csv", grid_csv)?;
    out.write("report.txt", &text)?;
    out.finish()?;
    print!("{text}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_columns_align() {
        let t = text_table(&["a", "long"], &[vec!["xyz".into(), "1".into()]]);
        assert_eq!(t, "a    long\n---  ----\nxyz  1\n");
    }
}
