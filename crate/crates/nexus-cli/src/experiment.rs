//! Experiment-file plumbing: one TOML or JSON file whose sections default
//! the flags of each subcommand. Explicit CLI flags always win; unknown
//! keys in a section are rejected so typos fail loudly.

use serde::de::DeserializeOwned;
use std::path::{Path, PathBuf};

use nexus_core::{Error, Result};

/// Resolves relative paths against `--workdir`.
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: PathBuf) -> Self {
        Workspace { root }
    }

    pub fn path(&self, p: impl AsRef<Path>) -> PathBuf {
        let p = p.as_ref();
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }
}

/// Parses a `.toml` or `.json` file into any Deserialize target.
pub fn read_config_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
    match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => toml::from_str(&text)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display()))),
        Some("json") => Ok(serde_json::from_str(&text)?),
        _ => Err(Error::invalid(format!(
            "{}: config files must end in .toml or .json",
            path.display()
        ))),
    }
}

/// Loads the experiment file as a JSON value (TOML is transcoded).
pub fn load_experiment(path: &Path) -> Result<serde_json::Value> {
    let value: serde_json::Value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::invalid(format!("cannot read {}: {e}", path.display())))?;
            let v: toml::Value = toml::from_str(&text)
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
            serde_json::to_value(v)?
        }
        _ => read_config_file(path)?,
    };
    if !value.is_object() {
        return Err(Error::invalid(format!(
            "{}: experiment file must be a table of subcommand sections",
            path.display()
        )));
    }
    Ok(value)
}

/// Extracts one subcommand section, or the type's default when absent.
pub fn section<A: DeserializeOwned + Default>(
    exp: Option<&serde_json::Value>,
    key: &str,
) -> Result<A> {
    match exp.and_then(|v| v.get(key)) {
        None => Ok(A::default()),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|e| Error::invalid(format!("experiment section [{key}]: {e}"))),
    }
}

/// CLI value beats file value.
pub fn pick<T>(cli: Option<T>, file: Option<T>) -> Option<T> {
    cli.or(file)
}

/// Repeatable flags: any CLI occurrence replaces the file list entirely.
pub fn pick_vec<T>(cli: Vec<T>, file: Vec<T>) -> Vec<T> {
    if cli.is_empty() {
        file
    } else {
        cli
    }
}

/// A required setting that neither the CLI nor the file provided.
pub fn require<T>(v: Option<T>, flag: &str) -> Result<T> {
    v.ok_or_else(|| Error::invalid(format!("missing required {flag}")))
}
