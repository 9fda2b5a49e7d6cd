use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};
use clap::ValueEnum;
use dpzero::config::RunConfig;
use dpzero::cost::{CostConfig, CostRow};
use dpzero::sim::{self, Artifacts};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Csv,
    Json,
}

/// Run the configured training and write its JSON-lines artifacts under `out`.
pub fn simulate(config: &Path, out: &Path) -> Result<Artifacts> {
    let config = RunConfig::from_path(config)?;
    let artifacts = sim::run(&config)?;
    artifacts.write_to(out).with_context(|| format!("writing artifacts to {}", out.display()))?;
    Ok(artifacts)
}

pub fn cost_rows(config: &Path) -> Result<Vec<CostRow>> {
    let text = std::fs::read_to_string(config).with_context(|| format!("reading {}", config.display()))?;
    Ok(CostConfig::from_json(&text)?.rows()?)
}

pub fn write_cost_rows(rows: &[CostRow], format: Format, out: impl Write) -> Result<()> {
    match format {
        Format::Csv => {
            let mut writer = csv::Writer::from_writer(out);
            for row in rows {
                writer.serialize(row)?;
            }
            writer.flush()?;
        }
        Format::Json => {
            let mut out = out;
            serde_json::to_writer_pretty(&mut out, rows)?;
            writeln!(out)?;
        }
    }
    Ok(())
}
