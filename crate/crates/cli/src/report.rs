use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;

use crate::config::ExperimentConfig;

/// A plot-ready table written as CSV.
#[derive(Clone, Debug)]
pub struct Table {
    pub name: String,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &str, header: &[&'static str]) -> Self {
        Self {
            name: name.into(),
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

/// Result of one subcommand.
#[derive(Clone, Debug)]
pub struct Section {
    pub command: &'static str,
    pub result: Value,
    pub tables: Vec<Table>,
    /// Acceptance-relevant failures; any entry makes the exit status nonzero.
    pub failures: Vec<String>,
}

impl Section {
    pub fn new(command: &'static str) -> Self {
        Self {
            command,
            result: Value::Null,
            tables: Vec::new(),
            failures: Vec::new(),
        }
    }

    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Serialize)]
struct Envelope<'a> {
    command: &'a str,
    passed: bool,
    failures: &'a [String],
    config: &'a ExperimentConfig,
    result: &'a Value,
}

/// Write `<out>/<command>.json` and one `<out>/<command>_<table>.csv` per table.
pub fn write_section(out: &Path, cfg: &ExperimentConfig, section: &Section) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();
    let json_path = out.join(format!("{}.json", section.command));
    let envelope = Envelope {
        command: section.command,
        passed: section.passed(),
        failures: &section.failures,
        config: cfg,
        result: &section.result,
    };
    let mut text = serde_json::to_string_pretty(&envelope)?;
    text.push('\n');
    fs::write(&json_path, text).with_context(|| format!("writing {}", json_path.display()))?;
    written.push(json_path);
    for table in &section.tables {
        let path = out.join(format!("{}_{}.csv", section.command, table.name));
        let mut w = csv::Writer::from_path(&path).with_context(|| format!("writing {}", path.display()))?;
        w.write_record(&table.header)?;
        for row in &table.rows {
            w.write_record(row)?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}
