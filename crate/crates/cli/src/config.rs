//! TOML config loading with dotted-key overrides and artifact metadata.
//!
//! Every run writes `resolved.toml` (the config after overrides) and
//! `run.json` (seed, format versions, build id) next to its outputs.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use deskvla_model::embodiment::EmbodimentId;
use deskvla_world::batch::{ReasoningSource, StageFilter};
use serde::Serialize;

pub const GIT_DESCRIBE: &str = env!("GIT_DESCRIBE");

/// Parse `--set key.path=value` pairs into a TOML document.
pub fn apply_overrides(doc: &mut toml::Table, overrides: &[String]) -> Result<()> {
    for entry in overrides {
        let Some((path, raw)) = entry.split_once('=') else {
            bail!("override `{entry}` is not of the form key=value");
        };
        let value: toml::Value = match raw.parse::<i64>() {
            Ok(i) => toml::Value::Integer(i),
            Err(_) => match raw.parse::<f64>() {
                Ok(f) => toml::Value::Float(f),
                Err(_) => match raw {
                    "true" => toml::Value::Boolean(true),
                    "false" => toml::Value::Boolean(false),
                    s => toml::Value::String(s.to_string()),
                },
            },
        };
        let mut cursor = &mut *doc;
        let parts: Vec<&str> = path.split('.').collect();
        for (i, part) in parts.iter().enumerate() {
            if i + 1 == parts.len() {
                cursor.insert(part.to_string(), value.clone());
            } else {
                cursor = cursor
                    .entry(part.to_string())
                    .or_insert(toml::Value::Table(toml::Table::new()))
                    .as_table_mut()
                    .with_context(|| format!("override path `{path}` crosses a non-table"))?;
            }
        }
    }
    Ok(())
}

pub fn load_table(path: &Path, overrides: &[String]) -> Result<toml::Table> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))?;
    let mut doc: toml::Table = text
        .parse()
        .with_context(|| format!("invalid TOML in {}", path.display()))?;
    apply_overrides(&mut doc, overrides)?;
    Ok(doc)
}

/// Reject keys the consumer does not understand.
pub fn reject_unknown(doc: &toml::Table, allowed: &[&str], context: &str) -> Result<()> {
    let allowed: BTreeSet<&str> = allowed.iter().copied().collect();
    for key in doc.keys() {
        if !allowed.contains(key.as_str()) {
            bail!("unknown key `{key}` in {context} config");
        }
    }
    Ok(())
}

pub fn parse_filter(raw: &str) -> Result<StageFilter> {
    if raw == "cross" {
        return Ok(StageFilter::Cross);
    }
    if let Some(emb) = raw.strip_prefix("embodiment:") {
        return Ok(StageFilter::Embodiment(EmbodimentId::new(emb)));
    }
    if let Some(tasks) = raw.strip_prefix("task:") {
        let set = tasks.split(',').map(str::to_string).collect();
        return Ok(StageFilter::Task(set));
    }
    bail!("filter `{raw}` is not cross, embodiment:<id> or task:<t1,t2>")
}

pub fn parse_reasoning(raw: &str) -> Result<ReasoningSource> {
    match raw {
        "substeps" => Ok(ReasoningSource::Substeps),
        "direct" => Ok(ReasoningSource::DirectPrompt),
        other => bail!("reasoning `{other}` is not substeps or direct"),
    }
}

#[derive(Serialize)]
struct RunMeta<'a> {
    command: &'a str,
    seed: u64,
    git_describe: &'a str,
    format_versions: FormatVersions,
}

#[derive(Serialize)]
struct FormatVersions {
    checkpoint: u32,
    episode: u32,
    manifest: u32,
}

/// Write the artifact metadata files into an output directory.
pub fn write_artifacts(dir: &Path, command: &str, seed: u64, resolved: &toml::Table) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(
        dir.join("resolved.toml"),
        toml::to_string_pretty(resolved).context("serialize resolved config")?,
    )?;
    let meta = RunMeta {
        command,
        seed,
        git_describe: GIT_DESCRIBE,
        format_versions: FormatVersions {
            checkpoint: deskvla_autodiff::CHECKPOINT_FORMAT_VERSION,
            episode: deskvla_world::episode::EPISODE_FORMAT_VERSION,
            manifest: deskvla_world::episode::MANIFEST_FORMAT_VERSION,
        },
    };
    fs::write(dir.join("run.json"), serde_json::to_vec_pretty(&meta)?)?;
    Ok(())
}
