//! Flat `key = value` run configuration. Keys are the long flag names; a flag
//! given on the command line wins over the file.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};

pub const SNAPSHOT_FILE: &str = "resolved_config.txt";

pub fn parse(text: &str, origin: &Path) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| anyhow!("{}:{}: expected `key = value`", origin.display(), i + 1))?;
        let key = k.trim().to_string();
        if key.is_empty() {
            bail!("{}:{}: empty key", origin.display(), i + 1);
        }
        if map.insert(key.clone(), v.trim().to_string()).is_some() {
            bail!("{}:{}: duplicate key `{key}`", origin.display(), i + 1);
        }
    }
    Ok(map)
}

/// Merges flags over file values and records every resolved setting.
pub struct Resolver {
    command: &'static str,
    file: BTreeMap<String, String>,
    origin: PathBuf,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    pub fn new(command: &'static str, config: Option<&Path>) -> Result<Resolver> {
        let (mut file, origin) = match config {
            Some(path) => {
                let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
                (parse(&text, path)?, path.to_path_buf())
            }
            None => (BTreeMap::new(), PathBuf::new()),
        };
        if let Some(c) = file.remove("command") {
            if c != command {
                bail!("config {} is for `{c}`, not `{command}`", origin.display());
            }
        }
        Ok(Resolver {
            command,
            file,
            origin,
            resolved: Vec::new(),
        })
    }

    fn file_value<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.file.remove(key) {
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|e| anyhow!("{}: bad value `{v}` for `{key}`: {e}", self.origin.display())),
            None => Ok(None),
        }
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        let file = self.file_value(key)?;
        let v = flag.or(file).unwrap_or(default);
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>> {
        let file = self.file.remove(key).map(PathBuf::from);
        let v = flag.or(file);
        if let Some(p) = &v {
            self.resolved.push((key.to_string(), p.display().to_string()));
        }
        Ok(v)
    }

    pub fn require_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf> {
        self.path(key, flag)?
            .ok_or_else(|| sonar_kd::Error::InvalidArgument(format!("--{key} is required (flag or config key)")).into())
    }

    /// A presence flag: set on the command line, or `true` in the file.
    pub fn switch(&mut self, key: &str, flag: bool) -> Result<bool> {
        let file: Option<bool> = self.file_value(key)?;
        let v = flag || file.unwrap_or(false);
        self.resolved.push((key.to_string(), v.to_string()));
        Ok(v)
    }

    /// Fails on file keys the command does not know.
    pub fn finish(self) -> Result<Snapshot> {
        if let Some(k) = self.file.keys().next() {
            bail!("{}: unknown key `{k}` for `{}`", self.origin.display(), self.command);
        }
        Ok(Snapshot {
            command: self.command,
            entries: self.resolved,
        })
    }
}

/// The settings a run actually used; feeding it back via `--config` replays
/// the run.
#[derive(Debug, Clone)]
pub struct Snapshot {
    command: &'static str,
    entries: Vec<(String, String)>,
}

impl Snapshot {
    pub fn render(&self) -> String {
        let mut out = format!("command = {}\n", self.command);
        for (k, v) in &self.entries {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(SNAPSHOT_FILE);
        fs::write(&path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}
