//! Key=value settings file merged under flag overrides.
//!
//! Grammar: one `key = value` per line, `#` starts a comment, blank
//! lines ignored. Keys are consumed as the command reads them; unknown
//! leftovers are rejected. Every effective setting is echoed to stdout.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Format(String),
    App(h2rat::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Format(m) => write!(f, "{m}"),
            CliError::App(e) => write!(f, "{e}"),
        }
    }
}

impl From<h2rat::Error> for CliError {
    fn from(e: h2rat::Error) -> Self {
        CliError::App(e)
    }
}

impl CliError {
    /// 0 success, 1 I/O, 2 usage, 3 format/parse, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        use h2rat::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::Format(_) => 3,
            CliError::App(e) => match e {
                E::BadMagic { .. }
                | E::UnsupportedVersion { .. }
                | E::Truncated { .. }
                | E::ChecksumMismatch { .. }
                | E::Metadata(_)
                | E::DimensionMismatch { .. } => 3,
                E::NonFinite { .. } | E::Divergence { .. } | E::NonScalarLoss { .. } => 4,
                E::Config(_) | E::EmptyInput { .. } => 2,
                E::Io(_) => 1,
                _ => 1,
            },
        }
    }
}

/// File-provided settings with consumption tracking.
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Settings, CliError> {
        let mut values = BTreeMap::new();
        if let Some(path) = path {
            let text = std::fs::read_to_string(path).map_err(h2rat::Error::from)?;
            for (i, line) in text.lines().enumerate() {
                let line = line.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let (key, value) = line.split_once('=').ok_or_else(|| {
                    CliError::Format(format!(
                        "{}:{}: expected key = value",
                        path.display(),
                        i + 1
                    ))
                })?;
                values.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(Settings { values })
    }

    fn parse<T>(&self, key: &str, raw: &str) -> Result<T, CliError>
    where
        T: FromStr,
    {
        raw.parse().map_err(|_| {
            CliError::Usage(format!("config key {key}: cannot parse value {raw:?}"))
        })
    }

    /// Flag wins over file wins over default; echoes the result.
    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + fmt::Debug,
    {
        let file = self.values.remove(key);
        let value = match (flag, file) {
            (Some(v), _) => v,
            (None, Some(raw)) => self.parse(key, &raw)?,
            (None, None) => default,
        };
        println!("setting {key} = {value:?}");
        Ok(value)
    }

    /// Like `get` but with no default: missing everywhere is a usage error.
    pub fn required<T>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T: FromStr + fmt::Debug,
    {
        let file = self.values.remove(key);
        let value = match (flag, file) {
            (Some(v), _) => v,
            (None, Some(raw)) => self.parse(key, &raw)?,
            (None, None) => {
                return Err(CliError::Usage(format!(
                    "missing required setting: --{} or config key {key}",
                    key.replace('_', "-")
                )))
            }
        };
        println!("setting {key} = {value:?}");
        Ok(value)
    }

    /// Rejects any config key no setting consumed.
    pub fn finish(self) -> Result<(), CliError> {
        if let Some(key) = self.values.keys().next() {
            return Err(CliError::Usage(format!("unknown config key: {key}")));
        }
        Ok(())
    }
}
