//! Experiment reports: a per-run table, a summary table, notes and optional
//! plot data, stamped with the resolved config and a content hash.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{invalid_input, Error, Result};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Rows whose `column` equals `value`.
    pub fn rows_where(&self, column: &str, value: &str) -> Vec<&Vec<String>> {
        match self.column(column) {
            Some(c) => self.rows.iter().filter(|r| r[c] == value).collect(),
            None => Vec::new(),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
        w.write_record(&self.columns).map_err(io)?;
        for r in &self.rows {
            w.write_record(r).map_err(io)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
        Ok(String::from_utf8(bytes).expect("csv is utf-8"))
    }

    /// Fixed-width text rendering.
    pub fn to_text(&self) -> String {
        let mut widths: Vec<usize> = self.columns.iter().map(|c| c.chars().count()).collect();
        for r in &self.rows {
            for (w, c) in widths.iter_mut().zip(r) {
                *w = (*w).max(c.chars().count());
            }
        }
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:<w$}"))
                .collect();
            parts.join(" | ").trim_end().to_string()
        };
        let mut out = line(&self.columns);
        out.push('\n');
        out.push_str(
            &widths
                .iter()
                .map(|w| "-".repeat(*w))
                .collect::<Vec<_>>()
                .join("-+-"),
        );
        out.push('\n');
        for r in &self.rows {
            out.push_str(&line(r));
            out.push('\n');
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub name: String,
    /// One row per trained model (or evaluation).
    pub runs: Table,
    pub summary: Table,
    pub notes: Vec<String>,
    pub plot: Option<serde_json::Value>,
    pub config_toml: String,
    pub config_hash: String,
    /// SHA-256 over the runs and summary CSVs, notes and plot data.
    pub content_hash: String,
}

impl Report {
    pub fn new(name: &str, cfg: &Config, runs: Table, summary: Table) -> Result<Self> {
        let mut r = Report {
            name: name.to_string(),
            runs,
            summary,
            notes: Vec::new(),
            plot: None,
            config_toml: cfg.to_toml(),
            config_hash: cfg.content_hash(),
            content_hash: String::new(),
        };
        r.seal()?;
        Ok(r)
    }

    pub fn with_notes(mut self, notes: Vec<String>) -> Result<Self> {
        self.notes = notes;
        self.seal()?;
        Ok(self)
    }

    pub fn with_plot(mut self, plot: serde_json::Value) -> Result<Self> {
        self.plot = Some(plot);
        self.seal()?;
        Ok(self)
    }

    fn compute_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.config_hash.as_bytes());
        h.update(self.runs.to_csv()?.as_bytes());
        h.update(self.summary.to_csv()?.as_bytes());
        for n in &self.notes {
            h.update(n.as_bytes());
        }
        if let Some(p) = &self.plot {
            h.update(p.to_string().as_bytes());
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }

    fn seal(&mut self) -> Result<()> {
        self.content_hash = self.compute_hash()?;
        Ok(())
    }

    /// Recomputes both hashes and compares them with the stored ones.
    pub fn verify(&self) -> Result<()> {
        let cfg: String = Sha256::digest(self.config_toml.as_bytes())
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        if cfg != self.config_hash {
            return Err(invalid_input(format!(
                "report {} config hash mismatch",
                self.name
            )));
        }
        if self.compute_hash()? != self.content_hash {
            return Err(invalid_input(format!(
                "report {} content hash mismatch",
                self.name
            )));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("== {} ==\n\n{}", self.name, self.summary.to_text());
        if !self.notes.is_empty() {
            s.push('\n');
            for n in &self.notes {
                let _ = writeln!(s, "note: {n}");
            }
        }
        let _ = write!(
            s,
            "\ncontent hash: {}\nconfig hash:  {}\n\n-- resolved config --\n{}",
            self.content_hash, self.config_hash, self.config_toml
        );
        s
    }

    /// Writes `<name>.csv`, `<name>_summary.csv`, `<name>.txt` and `<name>.json`
    /// (plus `<name>_plot.json` when present) into `dir`.
    pub fn write(&self, dir: &Path) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir)?;
        let mut out = Vec::new();
        let mut put = |file: String, body: String| -> Result<()> {
            let p = dir.join(file);
            fs::write(&p, body)?;
            out.push(p);
            Ok(())
        };
        put(format!("{}.csv", self.name), self.runs.to_csv()?)?;
        put(format!("{}_summary.csv", self.name), self.summary.to_csv()?)?;
        put(format!("{}.txt", self.name), self.to_text())?;
        put(
            format!("{}.json", self.name),
            serde_json::to_string_pretty(self).expect("report serialises"),
        )?;
        if let Some(p) = &self.plot {
            put(
                format!("{}_plot.json", self.name),
                serde_json::to_string_pretty(p).expect("plot serialises"),
            )?;
        }
        Ok(out)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let r: Report = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        r.verify()?;
        Ok(r)
    }
}

/// Percent with two decimals.
pub fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Report {
        let cfg = Config::preset("desk").unwrap();
        let mut runs = Table::new(&["model", "seed", "bacc"]);
        runs.push(vec!["mlp".into(), "0".into(), "0.71".into()]);
        runs.push(vec!["cnn, se".into(), "0".into(), "0.75".into()]);
        Report::new("demo", &cfg, runs.clone(), runs).unwrap()
    }

    #[test]
    fn csv_quotes_and_text_aligns() {
        let r = sample();
        let csv = r.runs.to_csv().unwrap();
        assert!(csv.contains("\"cnn, se\""));
        let text = r.summary.to_text();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert!(lines[1].starts_with("-------"));
    }

    #[test]
    fn written_report_reads_back_and_detects_tampering() {
        let dir = tempfile::tempdir().unwrap();
        let r = sample().with_notes(vec!["hello".into()]).unwrap();
        r.write(dir.path()).unwrap();
        let back = Report::read(&dir.path().join("demo.json")).unwrap();
        assert_eq!(back, r);
        let mut bad = r.clone();
        bad.runs.rows[0][2] = "0.99".into();
        assert!(bad.verify().is_err());
        let mut bad = r.clone();
        bad.config_toml = bad
            .config_toml
            .replace("highpass_hz = 0.1", "highpass_hz = 0.2");
        assert!(bad.verify().is_err());
        assert!(r.to_text().contains("highpass_hz = 0.1"));
    }
}
