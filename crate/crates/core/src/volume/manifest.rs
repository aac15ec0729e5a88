use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Partition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Partition::Train),
            "val" => Ok(Partition::Val),
            "test" => Ok(Partition::Test),
            other => Err(Error::InvalidArgument(format!(
                "unknown split '{other}' (expected train, val or test)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaseEntry {
    pub id: String,
    pub volume: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<PathBuf>,
}

/// Cases plus their train/val/test assignment. Relative paths resolve
/// against the directory holding the manifest file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub cases: Vec<CaseEntry>,
    pub split: BTreeMap<String, Partition>,
    pub seed: u64,
    #[serde(skip)]
    pub root: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub provenance: Option<serde_json::Value>,
}

impl DatasetManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::UnreadableFile {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.validate()?;
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for c in &self.cases {
            if !ids.insert(c.id.as_str()) {
                return Err(Error::InvalidManifest(format!("duplicate case id '{}'", c.id)));
            }
            if !self.split.contains_key(&c.id) {
                return Err(Error::InvalidManifest(format!("case '{}' has no split", c.id)));
            }
        }
        if let Some(extra) = self.split.keys().find(|k| !ids.contains(k.as_str())) {
            return Err(Error::InvalidManifest(format!("split names unknown case '{extra}'")));
        }
        Ok(())
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    /// Cases of one partition, in manifest order.
    pub fn cases_in(&self, part: Partition) -> Vec<&CaseEntry> {
        self.cases
            .iter()
            .filter(|c| self.split.get(&c.id) == Some(&part))
            .collect()
    }

    pub fn case(&self, id: &str) -> Option<&CaseEntry> {
        self.cases.iter().find(|c| c.id == id)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Shuffles ids with `seed` and cuts them into train/val/test.
///
/// Val and test get `round(n * ratio)` cases (at least one each when the
/// ratio is positive); train takes the remainder.
pub fn make_split(
    case_ids: &[String],
    ratios: SplitRatios,
    seed: u64,
) -> Result<BTreeMap<String, Partition>> {
    let n = case_ids.len();
    if n < 3 {
        return Err(Error::TooFewCases { needed: 3, got: n });
    }
    let unique: BTreeSet<&String> = case_ids.iter().collect();
    if unique.len() != n {
        return Err(Error::InvalidManifest("duplicate case ids".into()));
    }
    let count = |r: f64| -> usize {
        if r <= 0.0 {
            0
        } else {
            ((n as f64 * r).round() as usize).max(1)
        }
    };
    let n_val = count(ratios.val);
    let n_test = count(ratios.test);
    if n_val + n_test >= n {
        return Err(Error::TooFewCases {
            needed: n_val + n_test + 1,
            got: n,
        });
    }

    let mut order: Vec<&String> = case_ids.iter().collect();
    order.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);

    let n_train = n - n_val - n_test;
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(i, id)| {
            let part = if i < n_train {
                Partition::Train
            } else if i < n_train + n_val {
                Partition::Val
            } else {
                Partition::Test
            };
            (id.clone(), part)
        })
        .collect())
}
