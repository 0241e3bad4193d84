//! Versioned CSV tables.
//!
//! Every table starts with one comment line,
//! `# layerloc <table> v<version> config=<hash> seed=<seed> data=... splits=... init=... lime=... detect=...`,
//! followed by a normal CSV header row. Column sets are pinned per table by
//! [`columns`]; bumping a table's layout bumps [`CSV_VERSION`].

use std::path::Path;

use anyhow::{bail, Context, Result};

use crate::config::ExperimentConfig;
use crate::weights::write_atomic;

pub const CSV_VERSION: u32 = 1;

/// Column layout of every table the CLI writes.
pub fn columns(table: &str) -> &'static [&'static str] {
    match table {
        "train_log" => &["scheme", "stage", "kind", "taps", "epoch", "train_loss", "train_accuracy", "val_loss"],
        "train_summary" => &["scheme", "metric", "tap", "value"],
        "explain" => &[
            "image_id",
            "scheme",
            "method",
            "tap",
            "class",
            "iou",
            "localised",
            "overlap_pixels",
            "overlap_fraction",
            "heatmap",
        ],
        "lacc" => &["scheme", "method", "tap", "images", "lacc", "mean_iou"],
        "compare" => &[
            "method",
            "tap",
            "images",
            "cl_better",
            "fraction_cl_better",
            "cl_lacc",
            "e2e_lacc",
            "cl_mean_iou",
            "e2e_mean_iou",
        ],
        "granulometry_spectra" => &["scheme", "tap", "image_id", "size", "removed"],
        "granulometry_images" => &["scheme", "tap", "image_id", "area", "mean_size"],
        "granulometry_summary" => &["scheme", "tap", "images", "mean_size"],
        "detections" => &["image_id", "class", "score", "x", "y", "w", "h"],
        "detect_report" => &["metric", "value"],
        "detect_table" => &["scheme", "tap", "metric", "seeds", "mean", "std", "formatted"],
        "manifest_summary" => &["split", "class", "images"],
        _ => &[],
    }
}

pub fn header_line(table: &str, cfg: &ExperimentConfig) -> String {
    format!(
        "# layerloc {table} v{CSV_VERSION} config={} seed={} {}",
        cfg.hash(),
        cfg.seed,
        cfg.seeds().header()
    )
}

/// Renders a table to bytes; rows must match the pinned column count.
pub fn render(table: &str, cfg: &ExperimentConfig, rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let cols = columns(table);
    if cols.is_empty() {
        bail!("unknown table `{table}`");
    }
    let mut out = header_line(table, cfg).into_bytes();
    out.push(b'\n');
    let mut w = csv::Writer::from_writer(out);
    w.write_record(cols)?;
    for r in rows {
        if r.len() != cols.len() {
            bail!("table `{table}`: row has {} fields, expected {}", r.len(), cols.len());
        }
        w.write_record(r)?;
    }
    Ok(w.into_inner().context("flushing csv")?)
}

pub fn write_table(path: &Path, table: &str, cfg: &ExperimentConfig, rows: &[Vec<String>]) -> Result<()> {
    let bytes = render(table, cfg, rows)?;
    write_atomic(path, &bytes).with_context(|| format!("writing {}", path.display()))
}

/// Reads a table back: its comment line, the header row and the records.
pub fn read_table(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    if !first.starts_with("# layerloc ") {
        bail!("{}: missing table header line", path.display());
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header = r.headers()?.iter().map(str::to_owned).collect();
    let rows = r
        .records()
        .map(|rec| Ok(rec?.iter().map(str::to_owned).collect()))
        .collect::<Result<_>>()?;
    Ok((first.to_owned(), header, rows))
}

/// Shortest round-trip decimal form, so tables are exact and stable.
pub fn num(v: f64) -> String {
    format!("{v}")
}

pub fn opt<T: ToString>(v: Option<T>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Percent mean and std in the `67.29±0.28` style.
pub fn format_mean_std(values: &[f64]) -> String {
    let (m, s) = mean_std(values);
    format!("{:.2}±{:.2}", 100.0 * m, 100.0 * s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_format() {
        assert_eq!(format_mean_std(&[0.6701, 0.6729, 0.6757]), "67.29±0.28");
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
    }

    #[test]
    fn rejects_ragged_rows() {
        let cfg = ExperimentConfig::load("preset-localise").unwrap();
        assert!(render("detect_report", &cfg, &[vec!["a".into()]]).is_err());
        let bytes = render("detect_report", &cfg, &[vec!["map50".into(), "1".into()]]).unwrap();
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("# layerloc detect_report v1 config="));
        assert!(text.contains("\nmetric,value\nmap50,1\n"));
    }
}
