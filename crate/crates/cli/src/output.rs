//! Files written by every run: tables, verdict blocks and the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;
use she_martin::stats::Verdict;

use crate::experiments::Outcome;

pub const MANIFEST: &str = "manifest.json";

/// Everything needed to rerun a subcommand bit for bit.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub subcommand: String,
    /// Resolved configuration, overrides applied.
    pub config: String,
    pub master_seed: u64,
    pub workers: usize,
    pub started: String,
    pub finished: String,
    pub wall_seconds: f64,
    pub outputs: Vec<String>,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
}

impl RunManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// Writes `<name>.csv`, extra tables, `<name>.json` and `<name>.verdict.json`.
/// `csv_path` replaces the default location of the main table.
pub fn write_outcome(dir: &Path, name: &str, outcome: &Outcome, csv_path: Option<&Path>) -> Result<Vec<String>> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut written = Vec::new();
    let main: PathBuf = csv_path.map(Path::to_path_buf).unwrap_or_else(|| dir.join(format!("{name}.csv")));
    write(&main, outcome.report.to_csv())?;
    written.push(main.display().to_string());
    for t in &outcome.tables {
        let p = dir.join(format!("{}.csv", t.name));
        write(&p, t.to_csv())?;
        written.push(p.display().to_string());
    }
    if let Some(j) = &outcome.json {
        let p = dir.join(format!("{name}.json"));
        write(&p, serde_json::to_string_pretty(j)?)?;
        written.push(p.display().to_string());
    }
    let p = dir.join(format!("{name}.verdict.json"));
    let block = json!({ "subcommand": name, "pass": outcome.all_pass(), "verdicts": outcome.verdicts() });
    write(&p, serde_json::to_string_pretty(&block)?)?;
    written.push(p.display().to_string());
    Ok(written)
}

pub fn write_manifest(dir: &Path, manifest: &RunManifest) -> Result<PathBuf> {
    let p = dir.join(MANIFEST);
    write(&p, serde_json::to_string_pretty(manifest)?)?;
    Ok(p)
}

fn write(path: &Path, text: String) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}
