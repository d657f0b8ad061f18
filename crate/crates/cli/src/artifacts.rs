//! Output directory handling.
//!
//! Every JSON artifact carries a `schema` key naming its layout version.
//! Files are written to a temporary name and renamed into place, so a reader
//! never sees a partial artifact. `manifest.json` lists the artifacts in the
//! order they were completed and is written last.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

pub const MANIFEST_SCHEMA: &str = "follower/manifest/v1";

/// Schema ids and the top-level keys each one requires.
pub const SCHEMAS: &[(&str, &[&str])] = &[
    ("follower/tree/v1", &["schema", "grid", "nodes"]),
    ("follower/plan/v1", &["schema", "initial_jump", "increments", "k", "cap"]),
    ("follower/solve-report/v1", &["schema", "problem", "cap", "coercivity", "report"]),
    ("follower/certificate/v1", &["schema", "kind", "tolerance", "certified", "fbsde", "capped_kkt"]),
    ("follower/ladder/v1", &["schema", "caps", "rungs", "uncapped_value", "uncapped_plan", "uncapped_report", "monotone", "bounded_below", "target_gap"]),
    ("follower/equivalence/v1", &["schema", "payoff", "equivalence", "display_snell_value", "never_stops"]),
    ("follower/repro/v1", &["schema", "name", "passed", "checks", "details"]),
    ("follower/distances/v1", &["schema", "labels", "pseudopath", "sup"]),
    (MANIFEST_SCHEMA, &["schema", "command", "seed", "exit_code", "config", "artifacts"]),
];

#[derive(Serialize)]
struct Stamped<'a, T: Serialize> {
    schema: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

#[derive(Debug, Clone, Serialize)]
pub struct ManifestEntry {
    pub name: String,
    pub bytes: usize,
}

#[derive(Serialize)]
struct Manifest<'a, C: Serialize> {
    schema: &'a str,
    command: &'a str,
    seed: Option<u64>,
    exit_code: u8,
    config: Option<&'a C>,
    artifacts: &'a [ManifestEntry],
}

pub struct Artifacts {
    dir: PathBuf,
    written: Vec<ManifestEntry>,
}

impl Artifacts {
    pub fn create(dir: &Path) -> anyhow::Result<Self> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self { dir: dir.to_path_buf(), written: Vec::new() })
    }

    /// Writes `body` with a leading `schema` key. `body` must serialize as a map.
    pub fn json<T: Serialize>(&mut self, name: &str, schema: &str, body: &T) -> anyhow::Result<()> {
        let text = to_json(&Stamped { schema, body })?;
        self.text(name, &text)
    }

    /// Writes a file that already carries its own schema stamp.
    pub fn text(&mut self, name: &str, contents: &str) -> anyhow::Result<()> {
        write_atomic(&self.dir.join(name), contents.as_bytes())?;
        self.written.push(ManifestEntry { name: name.to_string(), bytes: contents.len() });
        Ok(())
    }

    pub fn finish<C: Serialize>(self, command: &str, seed: Option<u64>, config: Option<&C>, exit_code: u8) -> anyhow::Result<()> {
        let manifest = Manifest { schema: MANIFEST_SCHEMA, command, seed, exit_code, config, artifacts: &self.written };
        write_atomic(&self.dir.join("manifest.json"), to_json(&manifest)?.as_bytes())
    }
}

pub fn to_json<T: Serialize>(value: &T) -> anyhow::Result<String> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn write_atomic(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    let name = path.file_name().context("artifact path has no file name")?.to_string_lossy();
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut file = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    file.write_all(bytes)?;
    file.sync_all()?;
    drop(file);
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))?;
    Ok(())
}

/// Checks a parsed JSON artifact against the key list of its stamped schema.
pub fn check_schema(value: &serde_json::Value) -> Result<&'static str, String> {
    let obj = value.as_object().ok_or("artifact is not a JSON object")?;
    let stamp = obj.get("schema").and_then(|s| s.as_str()).ok_or("missing schema stamp")?;
    let (id, keys) = SCHEMAS.iter().find(|(id, _)| *id == stamp).ok_or_else(|| format!("unknown schema {stamp:?}"))?;
    if let Some(missing) = keys.iter().find(|k| !obj.contains_key(**k)) {
        return Err(format!("{stamp}: missing key {missing:?}"));
    }
    if let Some(extra) = obj.keys().find(|k| !keys.contains(&k.as_str())) {
        return Err(format!("{stamp}: unexpected key {extra:?}"));
    }
    Ok(id)
}
