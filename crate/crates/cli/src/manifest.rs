//! Run manifests: everything needed to rerun a command and check that its
//! non-timing outputs come out identical.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use hamiltonian_updates::instances::parse_key_values;
use sha2::{Digest, Sha256};

use crate::artifact;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunManifest {
    pub command: String,
    pub cwd: PathBuf,
    pub argv: Vec<String>,
    pub params: BTreeMap<String, String>,
    pub seeds: BTreeMap<String, u64>,
    /// name -> (path, sha256 of the file)
    pub inputs: BTreeMap<String, (PathBuf, String)>,
    /// name -> (file name inside the output directory, timing-free digest)
    pub outputs: BTreeMap<String, (String, String)>,
    /// Wall-clock seconds per phase; excluded from replay checks.
    pub timings: BTreeMap<String, f64>,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn is_timing(name: &str) -> bool {
    name.contains("seconds")
}

/// Digest of a file with wall-clock content removed: CSV columns and
/// `key = value` lines whose name mentions seconds are dropped.
pub fn content_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
    let mut hasher = Sha256::new();
    match ext {
        "csv" => {
            let text = String::from_utf8_lossy(&bytes);
            let mut lines = text.lines();
            let header: Vec<&str> = lines.next().unwrap_or("").split(',').collect();
            let keep: Vec<bool> = header.iter().map(|h| !is_timing(h)).collect();
            for line in std::iter::once(header.join(",")).chain(lines.map(str::to_string)) {
                let kept: Vec<&str> = line.split(',').zip(&keep).filter(|(_, k)| **k).map(|(f, _)| f).collect();
                hasher.update(kept.join(",").as_bytes());
                hasher.update(b"\n");
            }
        }
        "txt" => {
            let text = String::from_utf8_lossy(&bytes);
            for line in text.lines() {
                let key = line.split_once('=').map_or("", |(k, _)| k);
                if !is_timing(key) {
                    hasher.update(line.as_bytes());
                    hasher.update(b"\n");
                }
            }
        }
        _ => hasher.update(&bytes),
    }
    Ok(hex::encode(hasher.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>) -> Self {
        Self {
            command: command.into(),
            cwd: std::env::current_dir().unwrap_or_default(),
            argv,
            ..Default::default()
        }
    }

    pub fn param(&mut self, key: &str, value: impl ToString) {
        self.params.insert(key.into(), value.to_string());
    }

    pub fn input(&mut self, name: &str, path: &Path) -> Result<()> {
        self.inputs.insert(name.into(), (path.to_path_buf(), sha256_file(path)?));
        Ok(())
    }

    pub fn output(&mut self, name: &str, out_dir: &Path, file: &str) -> Result<()> {
        self.outputs.insert(name.into(), (file.into(), content_digest(&out_dir.join(file))?));
        Ok(())
    }

    pub fn file_name(command: &str) -> String {
        format!("manifest_{command}.txt")
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# hu run manifest\n");
        s += &format!("command = {}\nartifact_version = {}\ncwd = {}\n", self.command, artifact::VERSION, self.cwd.display());
        for (k, a) in self.argv.iter().enumerate() {
            s += &format!("argv.{k} = {a}\n");
        }
        for (k, v) in &self.params {
            s += &format!("param.{k} = {v}\n");
        }
        for (k, v) in &self.seeds {
            s += &format!("seed.{k} = {v}\n");
        }
        for (k, (p, h)) in &self.inputs {
            s += &format!("input.{k} = {}\ninput.{k}.sha256 = {h}\n", p.display());
        }
        for (k, (f, h)) in &self.outputs {
            s += &format!("output.{k} = {f}\noutput.{k}.digest = {h}\n");
        }
        for (k, v) in &self.timings {
            s += &format!("time.{k}_seconds = {v:e}\n");
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let kv = parse_key_values(text)?;
        let get = |k: &str| kv.get(k).cloned().with_context(|| format!("manifest lacks `{k}`"));
        let mut m = RunManifest { command: get("command")?, cwd: PathBuf::from(get("cwd")?), ..Default::default() };
        let mut argv: Vec<(usize, String)> = Vec::new();
        for (k, v) in &kv {
            if let Some(idx) = k.strip_prefix("argv.") {
                argv.push((idx.parse().with_context(|| format!("bad key {k}"))?, v.clone()));
            } else if let Some(p) = k.strip_prefix("param.") {
                m.params.insert(p.into(), v.clone());
            } else if let Some(p) = k.strip_prefix("seed.") {
                m.seeds.insert(p.into(), v.parse().with_context(|| format!("bad seed {k}"))?);
            } else if let Some(p) = k.strip_prefix("input.") {
                if !p.ends_with(".sha256") {
                    m.inputs.insert(p.into(), (PathBuf::from(v), get(&format!("input.{p}.sha256"))?));
                }
            } else if let Some(p) = k.strip_prefix("output.") {
                if !p.ends_with(".digest") {
                    m.outputs.insert(p.into(), (v.clone(), get(&format!("output.{p}.digest"))?));
                }
            } else if let Some(p) = k.strip_prefix("time.") {
                let name = p.strip_suffix("_seconds").unwrap_or(p);
                m.timings.insert(name.into(), v.parse().with_context(|| format!("bad timing {k}"))?);
            }
        }
        argv.sort();
        m.argv = argv.into_iter().map(|(_, a)| a).collect();
        Ok(m)
    }

    pub fn store(&self, out_dir: &Path) -> Result<PathBuf> {
        let path = out_dir.join(Self::file_name(&self.command));
        fs::write(&path, self.to_text()).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }
}
