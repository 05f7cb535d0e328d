//! Option resolution: command-line flags override `key=value` config-file
//! entries, which override built-in defaults.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use ddunet_core::{Error, Result};

/// Parsed `key=value` file. Lines starting with `#` (or blank) are skipped;
/// keys may use `-` or `_` interchangeably.
pub struct ConfigFile {
    values: HashMap<String, String>,
}

impl ConfigFile {
    pub fn empty() -> Self {
        ConfigFile {
            values: HashMap::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut values = HashMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {raw:?}",
                    path.display(),
                    lineno + 1
                )));
            };
            values.insert(normalize(key.trim()), value.trim().to_string());
        }
        Ok(ConfigFile { values })
    }

    pub fn load_opt(path: Option<&PathBuf>) -> Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::empty()),
        }
    }

    fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(&normalize(key)).map(String::as_str)
    }

    /// CLI value wins; otherwise parse the file entry; otherwise the default.
    pub fn resolve<T: std::str::FromStr>(
        &self,
        key: &str,
        cli: Option<T>,
        default: T,
    ) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.raw(key) {
            Some(text) => text.parse().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {text:?}"))
            }),
            None => Ok(default),
        }
    }

    /// As [`resolve`] but without a default; errors when absent everywhere.
    pub fn require<T: std::str::FromStr>(&self, key: &str, cli: Option<T>) -> Result<T> {
        if let Some(v) = cli {
            return Ok(v);
        }
        match self.raw(key) {
            Some(text) => text.parse().map_err(|_| {
                Error::Config(format!("config key {key}: cannot parse {text:?}"))
            }),
            None => Err(Error::Config(format!(
                "missing required option --{key} (or config key {key})"
            ))),
        }
    }

    pub fn resolve_opt<T: std::str::FromStr>(&self, key: &str, cli: Option<T>) -> Result<Option<T>> {
        if cli.is_some() {
            return Ok(cli);
        }
        match self.raw(key) {
            Some(text) => text
                .parse()
                .map(Some)
                .map_err(|_| Error::Config(format!("config key {key}: cannot parse {text:?}"))),
            None => Ok(None),
        }
    }

    pub fn resolve_flag(&self, key: &str, cli: bool) -> Result<bool> {
        if cli {
            return Ok(true);
        }
        match self.raw(key) {
            Some(text) => match text {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                other => Err(Error::Config(format!(
                    "config key {key}: expected a boolean, got {other:?}"
                ))),
            },
            None => Ok(false),
        }
    }
}

fn normalize(key: &str) -> String {
    key.replace('-', "_")
}

/// "a,b,c" -> [a, b, c]
pub fn parse_alphas(text: &str) -> Result<[f64; 3]> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::Config(format!(
            "loss weights need exactly three comma-separated values, got {text:?}"
        )));
    }
    let mut alpha = [0.0; 3];
    for (slot, part) in alpha.iter_mut().zip(&parts) {
        *slot = part
            .parse()
            .map_err(|_| Error::Config(format!("cannot parse loss weight {part:?}")))?;
    }
    Ok(alpha)
}
