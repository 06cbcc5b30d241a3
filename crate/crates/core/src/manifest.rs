//! Dataset manifests and deterministic stratified splits.
//!
//! A manifest lists image paths with class labels and a train/val/test
//! assignment, stored as CSV with header `path,label,split`. Splitting is
//! stratified per class with a floor rule: each class contributes
//! `floor(ratio * n)` entries to train and val and the remainder to test,
//! after a seeded shuffle, so small classes never vanish from a split by
//! rounding.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidConfig(format!(
                "unknown split {other:?}, expected train/val/test"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub path: String,
    pub label: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    /// Label universe in a fixed order; label indices elsewhere refer to
    /// positions in this list.
    pub class_names: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(class_names: Vec<String>, entries: Vec<ManifestEntry>) -> Result<Self> {
        if class_names.is_empty() {
            return Err(Error::InvalidConfig("no class names".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if name.is_empty() || name.contains(',') || !seen.insert(name) {
                return Err(Error::InvalidConfig(format!(
                    "class names must be unique, nonempty, comma-free; offending {name:?}"
                )));
            }
        }
        for (i, e) in entries.iter().enumerate() {
            if e.path.is_empty() || e.path.contains(',') {
                return Err(Error::InvalidConfig(format!(
                    "entry {i} path {:?} must be nonempty and comma-free",
                    e.path
                )));
            }
            if !class_names.contains(&e.label) {
                return Err(Error::InvalidConfig(format!(
                    "entry {i} label {:?} not in class names {class_names:?}",
                    e.label
                )));
            }
        }
        Ok(DatasetManifest {
            class_names,
            entries,
        })
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == label)
    }

    /// Entries of one split, with their class indices.
    pub fn split_entries(&self, split: Split) -> Vec<(&ManifestEntry, usize)> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| (e, self.label_index(&e.label).expect("validated")))
            .collect()
    }

    pub fn split_counts(&self) -> (usize, usize, usize) {
        let mut c = (0, 0, 0);
        for e in &self.entries {
            match e.split {
                Split::Train => c.0 += 1,
                Split::Val => c.1 += 1,
                Split::Test => c.2 += 1,
            }
        }
        c
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("path,label,split\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{}\n", e.path, e.label, e.split));
        }
        fs::write(path, out).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    /// Reads a manifest; class names are labels in first-appearance order.
    pub fn read_csv(path: &Path) -> Result<DatasetManifest> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let p = path.display().to_string();
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "path,label,split")) => {}
            other => {
                return Err(Error::Parse {
                    path: p,
                    line: 1,
                    msg: format!("bad header {:?}", other.map(|(_, l)| l)),
                })
            }
        }
        let mut class_names: Vec<String> = Vec::new();
        let mut entries = Vec::new();
        for (i, line) in lines {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse {
                    path: p,
                    line: i + 1,
                    msg: format!("{} fields, expected 3 (path,label,split)", fields.len()),
                });
            }
            let split = fields[2].parse().map_err(|e| Error::Parse {
                path: p.clone(),
                line: i + 1,
                msg: format!("{e}"),
            })?;
            if !class_names.iter().any(|c| c == fields[1]) {
                class_names.push(fields[1].to_string());
            }
            entries.push(ManifestEntry {
                path: fields[0].to_string(),
                label: fields[1].to_string(),
                split,
            });
        }
        if entries.is_empty() {
            return Err(Error::Parse {
                path: p,
                line: 1,
                msg: "manifest has no entries".into(),
            });
        }
        DatasetManifest::new(class_names, entries)
    }
}

/// Stratified split assignment for `labels[i]` = class index of entry `i`.
/// Each class's entries are shuffled with the seed, then the first
/// `floor(ratios.0 * n)` go to train, the next `floor(ratios.1 * n)` to
/// val, and the rest to test. Classes are processed in index order off one
/// RNG stream, so the whole assignment is a pure function of the inputs.
pub fn split_dataset(
    labels: &[usize],
    class_names: &[String],
    ratios: (f64, f64, f64),
    seed: u64,
) -> Result<Vec<Split>> {
    let (r_train, r_val, r_test) = ratios;
    for r in [r_train, r_val, r_test] {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::InvalidConfig(format!("ratio {r} outside [0, 1]")));
        }
    }
    if (r_train + r_val + r_test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "ratios {ratios:?} sum to {}, expected 1",
            r_train + r_val + r_test
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(Error::InvalidConfig(format!(
            "label index {bad} outside {} classes",
            class_names.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![Split::Test; labels.len()];
    for class in 0..class_names.len() {
        let mut idxs: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idxs.len() < 3 {
            return Err(Error::InsufficientClass {
                class: class_names[class].clone(),
                count: idxs.len(),
                needed: 3,
            });
        }
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        let n_train = (r_train * n as f64).floor() as usize;
        let n_val = (r_val * n as f64).floor() as usize;
        for (pos, &i) in idxs.iter().enumerate() {
            assignment[i] = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    Ok(assignment)
}
