//! CSV files with the resolved config and seed embedded as `#` comment
//! lines, so every output is reconstructible on its own.

use std::fs;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};

pub struct CsvWriter {
    lines: Vec<String>,
}

impl CsvWriter {
    /// Starts a CSV with the config header block and the column row.
    pub fn new(cfg: &ExperimentConfig, seed: u64, columns: &[&str]) -> Self {
        let mut lines = Vec::new();
        lines.push(format!("# seed: {seed}"));
        for cfg_line in cfg.resolved_toml().lines() {
            lines.push(format!("# config: {cfg_line}"));
        }
        lines.push(columns.join(","));
        CsvWriter { lines }
    }

    pub fn row(&mut self, fields: &[String]) {
        self.lines.push(fields.join(","));
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.lines.join("\n") + "\n").map_err(LabError::io(path))
    }
}

/// Parses a CSV written by [`CsvWriter`]: returns (header comment lines,
/// column names, rows).
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    let mut comments = Vec::new();
    let mut columns = Vec::new();
    let mut rows = Vec::new();
    for line in text.lines() {
        if let Some(stripped) = line.strip_prefix('#') {
            comments.push(stripped.trim().to_string());
        } else if columns.is_empty() {
            columns = line.split(',').map(|s| s.to_string()).collect();
        } else if !line.is_empty() {
            rows.push(line.split(',').map(|s| s.to_string()).collect());
        }
    }
    if columns.is_empty() {
        return Err(LabError::Config(format!(
            "{} has no column header row",
            path.display()
        )));
    }
    Ok((comments, columns, rows))
}

pub fn fmt_f(x: f64) -> String {
    format!("{x:.6}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_rows_roundtrip() {
        let dir = std::env::temp_dir().join(format!("fuselab-csv-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.csv");
        let cfg = ExperimentConfig::default();
        let mut w = CsvWriter::new(&cfg, 42, &["a", "b"]);
        w.row(&["1".into(), "2".into()]);
        w.row(&[fmt_f(0.5), fmt_f(1.25)]);
        w.write(&path).unwrap();
        let (comments, columns, rows) = read_csv(&path).unwrap();
        assert_eq!(comments[0], "seed: 42");
        assert!(comments.iter().any(|c| c.contains("lr_phi")));
        assert_eq!(columns, vec!["a", "b"]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1][1], "1.250000");
        fs::remove_dir_all(&dir).ok();
    }
}
