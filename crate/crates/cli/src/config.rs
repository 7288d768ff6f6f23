use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("line {line}: expected key = value")]
    Syntax { line: usize },
    #[error("line {line}: duplicate key {key:?}")]
    Duplicate { line: usize, key: String },
    #[error("unknown config key {key:?} for `{command}`")]
    UnknownKey { key: String, command: String },
    #[error("key {key:?}: expected true or false, got {value:?}")]
    NotBool { key: String, value: String },
}

/// Flat `key = value` configuration. `#` starts a comment; keys are flag names without dashes.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RunConfig {
    pub entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(l, _)| l).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or(ConfigError::Syntax { line: i + 1 })?;
            let key = k.trim().trim_start_matches("--").replace('_', "-");
            let valid = !key.is_empty() && key.chars().all(|c| c.is_ascii_alphanumeric() || c == '-');
            if !valid {
                return Err(ConfigError::Syntax { line: i + 1 });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(ConfigError::Duplicate { line: i + 1, key });
            }
        }
        Ok(Self { entries })
    }

    /// Renders the entries as flags for `command`.
    ///
    /// `flags` maps each known key to whether it is boolean. Keys in `explicit`
    /// were given on the command line and are skipped.
    pub fn to_args(
        &self,
        command: &str,
        flags: &BTreeMap<String, bool>,
        explicit: &[String],
    ) -> Result<Vec<String>, ConfigError> {
        let mut args = Vec::new();
        for (key, value) in &self.entries {
            let is_bool = *flags
                .get(key)
                .ok_or_else(|| ConfigError::UnknownKey { key: key.clone(), command: command.to_string() })?;
            if explicit.contains(key) {
                continue;
            }
            if is_bool {
                match value.as_str() {
                    "true" => args.push(format!("--{key}")),
                    "false" => {}
                    _ => return Err(ConfigError::NotBool { key: key.clone(), value: value.clone() }),
                }
            } else {
                args.push(format!("--{key}={value}"));
            }
        }
        Ok(args)
    }
}

/// Hex SHA-256 of sorted `key=value` lines.
pub fn config_hash(resolved: &BTreeMap<String, String>) -> String {
    let mut h = Sha256::new();
    for (k, v) in resolved {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
