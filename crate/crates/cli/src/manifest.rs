//! `manifest.txt`: one per output directory, describing how its artifacts were made.
//! No timestamps or absolute paths, so identical inputs give an identical manifest.

use std::fmt::Write as _;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{io_err, CliError, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
const HEADER: &str = "# weaklab run manifest v1";

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunManifest {
    pub command: String,
    pub tool_version: String,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    /// Extra command parameters, `(key, value)`.
    pub params: Vec<(String, String)>,
    /// Input directories by role, identified by the digest of their manifest.
    pub inputs: Vec<(String, String)>,
    /// Artifact file names with their SHA-256.
    pub artifacts: Vec<(String, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl RunManifest {
    pub fn new(command: &str, config_hash: &str, seeds: &[u64]) -> Self {
        Self {
            command: command.into(),
            tool_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: config_hash.into(),
            seeds: seeds.to_vec(),
            ..Default::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) -> &mut Self {
        self.params.push((key.into(), value.to_string()));
        self
    }

    /// Records `dir` as an input through the digest of its manifest.
    pub fn input(&mut self, role: &str, dir: &Path) -> Result<&mut Self> {
        let path = dir.join(MANIFEST_FILE);
        let bytes = std::fs::read(&path)
            .map_err(|_| CliError::Artifact(format!("{} has no {MANIFEST_FILE}", dir.display())))?;
        self.inputs.push((role.into(), sha256_hex(&bytes)));
        Ok(self)
    }

    /// Writes an artifact into `dir` and records its digest.
    pub fn write_artifact(&mut self, dir: &Path, name: &str, bytes: &[u8]) -> Result<()> {
        let path = dir.join(name);
        std::fs::write(&path, bytes).map_err(io_err(&path))?;
        self.artifacts.push((name.into(), sha256_hex(bytes)));
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{HEADER}");
        let _ = writeln!(s, "command = {}", self.command);
        let _ = writeln!(s, "tool_version = {}", self.tool_version);
        let _ = writeln!(s, "config_hash = {}", self.config_hash);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(","));
        for (k, v) in &self.params {
            let _ = writeln!(s, "param.{k} = {v}");
        }
        for (k, v) in &self.inputs {
            let _ = writeln!(s, "input.{k} = {v}");
        }
        let mut arts = self.artifacts.clone();
        arts.sort();
        for (name, digest) in &arts {
            let _ = writeln!(s, "artifact = {name} sha256:{digest}");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |line: &str| CliError::Artifact(format!("malformed manifest line `{line}`"));
        let mut lines = text.lines();
        if lines.next() != Some(HEADER) {
            return Err(CliError::Artifact("not a weaklab manifest".into()));
        }
        let mut m = RunManifest::default();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let (key, value) = line.split_once(" = ").ok_or_else(|| bad(line))?;
            match key {
                "command" => m.command = value.into(),
                "tool_version" => m.tool_version = value.into(),
                "config_hash" => m.config_hash = value.into(),
                "seeds" if value.is_empty() => {}
                "seeds" => {
                    m.seeds = value.split(',').map(|t| t.parse().map_err(|_| bad(line))).collect::<Result<_>>()?;
                }
                "artifact" => {
                    let (name, digest) = value.split_once(" sha256:").ok_or_else(|| bad(line))?;
                    m.artifacts.push((name.into(), digest.into()));
                }
                _ => {
                    if let Some(k) = key.strip_prefix("param.") {
                        m.params.push((k.into(), value.into()));
                    } else if let Some(k) = key.strip_prefix("input.") {
                        m.inputs.push((k.into(), value.into()));
                    } else {
                        return Err(bad(line));
                    }
                }
            }
        }
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, self.to_text()).map_err(io_err(&path))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path)
            .map_err(|_| CliError::Artifact(format!("{} has no {MANIFEST_FILE}", dir.display())))?;
        Self::parse(&text)
    }
}
