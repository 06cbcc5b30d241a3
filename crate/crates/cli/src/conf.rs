//! Run configuration: one optional `key = value` text file whose entries
//! fill in any flag the user left unset. Flags always win; built-in
//! defaults apply last. No environment variables are consulted.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use sigat::model::Optimizer;
use sigat::{Error, Result};

/// Parsed config file. Keys are free-form; each subcommand reads only the
/// keys it understands, so one file can configure a whole run.
#[derive(Debug)]
pub struct FileConfig {
    path: String,
    entries: BTreeMap<String, (usize, String)>,
}

impl FileConfig {
    pub fn empty() -> Self {
        FileConfig {
            path: String::new(),
            entries: BTreeMap::new(),
        }
    }

    /// Lines are `key = value`; blank lines and `#` comments are skipped.
    /// Duplicate keys are rejected rather than silently shadowed.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            context: format!("reading {}", path.display()),
            source: e,
        })?;
        let display = path.display().to_string();
        let mut entries = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    path: display,
                    line: idx + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            let key = key.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: display,
                    line: idx + 1,
                    msg: "empty key".into(),
                });
            }
            if entries
                .insert(key.clone(), (idx + 1, value.trim().to_string()))
                .is_some()
            {
                return Err(Error::Parse {
                    path: display,
                    line: idx + 1,
                    msg: format!("duplicate key {key:?}"),
                });
            }
        }
        Ok(FileConfig {
            path: display,
            entries,
        })
    }

    /// Typed lookup; absent keys are `None`. Parse failures carry the file
    /// line so typos are locatable.
    pub fn get<T>(&self, key: &str) -> Result<Option<T>>
    where
        T: FromStr,
        T::Err: fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((line, raw)) => raw.parse().map(Some).map_err(|e| Error::Parse {
                path: self.path.clone(),
                line: *line,
                msg: format!("key {key}: {e}"),
            }),
        }
    }
}

/// Flag value if given, else the config file's, else the default.
pub fn resolve<T>(flag: Option<T>, conf: &FileConfig, key: &str, default: T) -> Result<T>
where
    T: FromStr,
    T::Err: fmt::Display,
{
    match flag {
        Some(v) => Ok(v),
        None => Ok(conf.get(key)?.unwrap_or(default)),
    }
}

/// Patch grid dimensions, written `COLSxROWS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridSpec {
    pub cols: usize,
    pub rows: usize,
}

impl FromStr for GridSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (c, r) = s
            .split_once(['x', 'X'])
            .ok_or_else(|| format!("expected COLSxROWS, got {s:?}"))?;
        let cols = c.trim().parse().map_err(|e| format!("grid cols: {e}"))?;
        let rows = r.trim().parse().map_err(|e| format!("grid rows: {e}"))?;
        if cols == 0 || rows == 0 {
            return Err(format!("grid dimensions must be nonzero, got {s:?}"));
        }
        Ok(GridSpec { cols, rows })
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.cols, self.rows)
    }
}

pub fn parse_optimizer(s: &str) -> std::result::Result<Optimizer, String> {
    match s {
        "sgd" => Ok(Optimizer::Sgd),
        "adam" => Ok(Optimizer::Adam),
        other => Err(format!("unknown optimizer {other:?}, expected sgd or adam")),
    }
}

/// One count applied to every class, or one count per class.
pub fn parse_per_class(s: &str, classes: usize) -> std::result::Result<Vec<usize>, String> {
    let counts: Vec<usize> = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| format!("per-class count {:?}: {e}", p.trim()))
        })
        .collect::<std::result::Result<_, String>>()?;
    match counts.len() {
        1 => Ok(vec![counts[0]; classes]),
        n if n == classes => Ok(counts),
        n => Err(format!("{n} per-class counts for {classes} classes")),
    }
}

pub fn parse_ratios(s: &str) -> std::result::Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(format!(
            "expected three comma-separated ratios, got {}",
            parts.len()
        ));
    }
    let mut v = [0.0f64; 3];
    for (slot, p) in v.iter_mut().zip(&parts) {
        *slot = p.parse().map_err(|e| format!("ratio {p:?}: {e}"))?;
    }
    Ok((v[0], v[1], v[2]))
}
